//! Image volumes, label volumes, and their binary file format.
//!
//! Files carry the magic `SHMV`, a little-endian header (version, dtype,
//! channel count, extents, voxel spacing in mm) and a row-major payload.
//! dtype 0 stores f32 intensities, dtype 1 stores u16 labels. Readers reject
//! unknown magic, versions and dtypes, reporting the byte offset of the
//! problem.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

pub const VOLUME_MAGIC: [u8; 4] = *b"SHMV";
pub const VOLUME_VERSION: u16 = 1;

/// Multi-channel f64 intensity volume with voxel spacing metadata. Stored on
/// disk as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[channels, d, h, w]`.
    pub data: Tensor,
    /// Physical voxel size in mm per axis.
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(data: Tensor, spacing: [f32; 3]) -> Self {
        assert_eq!(data.shape.len(), 4, "volume expects [c,d,h,w]");
        Volume { data, spacing }
    }

    pub fn channels(&self) -> usize {
        self.data.shape[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.data.shape[1], self.data.shape[2], self.data.shape[3]]
    }
}

/// Integer label map with voxel spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SegVolume {
    pub labels: Vec<u16>,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

impl SegVolume {
    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Distinct nonzero labels, ascending.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut set: Vec<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// Contents of a volume file: intensities or labels.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeData {
    Scalar(Volume),
    Labels(SegVolume),
}

#[derive(Debug)]
pub enum IoError {
    Io(std::io::Error),
    /// Structurally invalid file; `offset` is the byte position of the
    /// offending field.
    Format {
        offset: u64,
        message: String,
    },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io(e) => write!(f, "i/o error: {e}"),
            IoError::Format { offset, message } => {
                write!(f, "malformed file at offset {offset}: {message}")
            }
        }
    }
}

impl std::error::Error for IoError {}

impl From<std::io::Error> for IoError {
    fn from(e: std::io::Error) -> Self {
        IoError::Io(e)
    }
}

pub type IoResult<T> = Result<T, IoError>;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> IoResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> IoResult<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> IoResult<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u8(&mut self, what: &str) -> IoResult<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f32(&mut self, what: &str) -> IoResult<f32> {
        Ok(f32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

fn write_header(out: &mut Vec<u8>, dtype: u8, channels: u32, dims: [usize; 3], spacing: [f32; 3]) {
    out.extend_from_slice(&VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&channels.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

pub fn encode_volume(data: &VolumeData) -> Vec<u8> {
    let mut out = Vec::new();
    match data {
        VolumeData::Scalar(v) => {
            write_header(&mut out, 0, v.channels() as u32, v.dims(), v.spacing);
            for &x in &v.data.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        VolumeData::Labels(s) => {
            write_header(&mut out, 1, 1, s.dims, s.spacing);
            for &l in &s.labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> IoResult<VolumeData> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(IoError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}"),
        });
    }
    let version_off = c.pos as u64;
    let version = c.u16("version")?;
    if version != VOLUME_VERSION {
        return Err(IoError::Format {
            offset: version_off,
            message: format!("unsupported version {version}"),
        });
    }
    let dtype_off = c.pos as u64;
    let dtype = c.u8("dtype")?;
    let channels = c.u32("channels")? as usize;
    let d = c.u32("extent d")? as usize;
    let h = c.u32("extent h")? as usize;
    let w = c.u32("extent w")? as usize;
    let spacing = [c.f32("spacing")?, c.f32("spacing")?, c.f32("spacing")?];
    let nvox = d * h * w;
    match dtype {
        0 => {
            let want = channels * nvox * 4;
            let payload_off = c.pos as u64;
            let payload = c.take(want, "f32 payload")?;
            if c.pos != bytes.len() {
                return Err(IoError::Format {
                    offset: c.pos as u64,
                    message: format!("{} trailing bytes", bytes.len() - c.pos),
                });
            }
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            let _ = payload_off;
            Ok(VolumeData::Scalar(Volume {
                data: Tensor::new(vec![channels, d, h, w], data),
                spacing,
            }))
        }
        1 => {
            if channels != 1 {
                return Err(IoError::Format {
                    offset: 7,
                    message: format!("label volumes are single-channel, got {channels}"),
                });
            }
            let want = nvox * 2;
            let payload = c.take(want, "u16 payload")?;
            if c.pos != bytes.len() {
                return Err(IoError::Format {
                    offset: c.pos as u64,
                    message: format!("{} trailing bytes", bytes.len() - c.pos),
                });
            }
            let labels = payload
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
                .collect();
            Ok(VolumeData::Labels(SegVolume {
                labels,
                dims: [d, h, w],
                spacing,
            }))
        }
        other => Err(IoError::Format {
            offset: dtype_off,
            message: format!("unknown dtype code {other}"),
        }),
    }
}

pub fn write_volume_file(path: &Path, data: &VolumeData) -> IoResult<()> {
    let bytes = encode_volume(data);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_volume_file(path: &Path) -> IoResult<VolumeData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_volume(&bytes)
}

/// Read a file that must contain intensities.
pub fn read_scalar_volume(path: &Path) -> IoResult<Volume> {
    match read_volume_file(path)? {
        VolumeData::Scalar(v) => Ok(v),
        VolumeData::Labels(_) => Err(IoError::Format {
            offset: 6,
            message: format!("{} holds labels, expected intensities", path.display()),
        }),
    }
}

/// Read a file that must contain labels.
pub fn read_label_volume(path: &Path) -> IoResult<SegVolume> {
    match read_volume_file(path)? {
        VolumeData::Labels(s) => Ok(s),
        VolumeData::Scalar(_) => Err(IoError::Format {
            offset: 6,
            message: format!("{} holds intensities, expected labels", path.display()),
        }),
    }
}
