//! Named-tensor checkpoints.
//!
//! Same header style as the volume format (magic `SHMC`, version, dtype 2 =
//! f64), followed by a manifest of named parameter tensors: name length,
//! name bytes, rank, extents, row-major payload. Entries appear in the
//! model's canonical parameter order, so identical parameters produce
//! identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::model::RegModel;
use crate::tensor::Tensor;
use crate::volume::{IoError, IoResult};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SHMC";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 2;

pub fn encode_checkpoint(model: &mut RegModel) -> Vec<u8> {
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    model.visit_params(&mut |name, t| entries.push((name, t.clone())));
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], model: &mut RegModel) -> IoResult<()> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &str| -> IoResult<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(IoError::Format {
                offset: *pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(IoError::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = u16::from_le_bytes(take(&mut pos, 2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(IoError::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let dtype = take(&mut pos, 1, "dtype")?[0];
    if dtype != DTYPE_F64 {
        return Err(IoError::Format {
            offset: 6,
            message: format!("unsupported checkpoint dtype {dtype}"),
        });
    }
    let count =
        u32::from_le_bytes(take(&mut pos, 4, "count")?.try_into().expect("4 bytes")) as usize;
    let mut loaded: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for _ in 0..count {
        let name_offset = pos as u64;
        let name_len = u16::from_le_bytes(
            take(&mut pos, 2, "name length")?
                .try_into()
                .expect("2 bytes"),
        ) as usize;
        let name = String::from_utf8(take(&mut pos, name_len, "name")?.to_vec()).map_err(|_| {
            IoError::Format {
                offset: name_offset,
                message: "non-utf8 parameter name".into(),
            }
        })?;
        let rank = take(&mut pos, 1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                u32::from_le_bytes(take(&mut pos, 4, "extent")?.try_into().expect("4 bytes"))
                    as usize,
            );
        }
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        loaded.insert(name, Tensor::new(shape, data));
    }
    if pos != bytes.len() {
        return Err(IoError::Format {
            offset: pos as u64,
            message: format!("{} trailing bytes", bytes.len() - pos),
        });
    }

    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    model.visit_params(&mut |name, t| match loaded.remove(&name) {
        Some(read) if read.shape == t.shape => {
            t.data = read.data;
        }
        Some(read) => mismatched.push(format!("{name}: {:?} vs {:?}", t.shape, read.shape)),
        None => missing.push(name),
    });
    if !missing.is_empty() || !mismatched.is_empty() || !loaded.is_empty() {
        let extra: Vec<String> = loaded.into_keys().collect();
        return Err(IoError::Format {
            offset: 11,
            message: format!(
                "checkpoint does not match the model: missing {missing:?}, shape mismatches {mismatched:?}, unknown {extra:?}"
            ),
        });
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &mut RegModel) -> IoResult<()> {
    let bytes = encode_checkpoint(model);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, model: &mut RegModel) -> IoResult<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes, model)
}
