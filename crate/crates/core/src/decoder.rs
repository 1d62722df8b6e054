//! Coarse-to-fine pyramid decoder.
//!
//! Starting at the coarsest encoder level with a zero field, each stage
//! warps the moving features by the incoming field, concatenates the fixed
//! features, predicts a residual field through its head, and adds it. The
//! field is trilinearly upsampled between stages (values rescaled to the
//! finer grid). Above the encoder pyramid a final full-resolution stage runs
//! on a small convolution stem over the warped moving and fixed images.
//! Heads at the four finest stages are configurable: a plain three-channel
//! convolution or three direction-wise convolution-expert mixtures.
//! Prediction heads are zero-initialized so an untrained model is the
//! identity transform. The diffeomorphic variant treats each residual as a
//! stationary velocity and integrates it by scaling and squaring before the
//! addition.

use crate::encoder::LevelFeatures;
use crate::params::Binder;
use crate::rng::Rng;
use crate::shmoe::{shmoe_forward, ShmoeBound, ShmoeParams, ShmoeRouting};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::warpfield::{integrate_tape, upsample_field_tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Conv,
    Shmoe,
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Head kind at the four finest stages, ordered full, 1/2, 1/4, 1/8
    /// resolution; coarser stages always use a conv head.
    pub heads: [HeadKind; 4],
    /// Feature width of the full-resolution stem.
    pub stem_channels: usize,
    /// Expert kernel sizes of the mixture heads.
    pub shmoe_kernels: Vec<usize>,
    /// Experts kept per voxel.
    pub shmoe_active: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            heads: [
                HeadKind::Shmoe,
                HeadKind::Shmoe,
                HeadKind::Conv,
                HeadKind::Conv,
            ],
            stem_channels: 8,
            shmoe_kernels: vec![1, 3, 5],
            shmoe_active: 1,
        }
    }
}

impl DecoderConfig {
    /// Head for a stage operating at `1/downsample` of the input resolution.
    pub fn head_at(&self, downsample: usize) -> HeadKind {
        match downsample {
            1 => self.heads[0],
            2 => self.heads[1],
            4 => self.heads[2],
            8 => self.heads[3],
            _ => HeadKind::Conv,
        }
    }
}

#[derive(Debug, Clone)]
pub enum HeadParams {
    Conv {
        kernel: Tensor,
        bias: Tensor,
    },
    /// One expert mixture per displacement direction (z, y, x).
    Shmoe(Vec<ShmoeParams>),
}

impl HeadParams {
    fn init(kind: HeadKind, c_in: usize, cfg: &DecoderConfig, rng: &mut Rng) -> Self {
        match kind {
            HeadKind::Conv => HeadParams::Conv {
                kernel: Tensor::zeros(&[3, c_in, 3, 3, 3]),
                bias: Tensor::zeros(&[3]),
            },
            HeadKind::Shmoe => HeadParams::Shmoe(
                (0..3)
                    .map(|_| ShmoeParams::init(c_in, &cfg.shmoe_kernels, cfg.shmoe_active, rng))
                    .collect(),
            ),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            HeadParams::Conv { .. } => HeadKind::Conv,
            HeadParams::Shmoe(_) => HeadKind::Shmoe,
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            HeadParams::Conv { kernel, bias } => {
                f(format!("{prefix}.conv.kernel"), kernel);
                f(format!("{prefix}.conv.bias"), bias);
            }
            HeadParams::Shmoe(dirs) => {
                for (d, p) in dirs.iter_mut().enumerate() {
                    let dir = ["z", "y", "x"][d];
                    for (e, k) in p.expert_kernels.iter_mut().enumerate() {
                        f(format!("{prefix}.{dir}.expert{e}.kernel"), k);
                    }
                    for (e, b) in p.expert_biases.iter_mut().enumerate() {
                        f(format!("{prefix}.{dir}.expert{e}.bias"), b);
                    }
                    f(
                        format!("{prefix}.{dir}.router.kernel"),
                        &mut p.router_kernel,
                    );
                    f(format!("{prefix}.{dir}.router.bias"), &mut p.router_bias);
                }
            }
        }
    }
}

enum HeadBound {
    Conv { kernel: TensorId, bias: TensorId },
    Shmoe(Vec<ShmoeBound>),
}

impl HeadBound {
    fn new(p: &HeadParams, prefix: &str, tape: &mut Tape, binder: &mut Binder) -> Self {
        match p {
            HeadParams::Conv { kernel, bias } => HeadBound::Conv {
                kernel: binder.leaf(tape, &format!("{prefix}.conv.kernel"), kernel),
                bias: binder.leaf(tape, &format!("{prefix}.conv.bias"), bias),
            },
            HeadParams::Shmoe(dirs) => HeadBound::Shmoe(
                dirs.iter()
                    .enumerate()
                    .map(|(d, sp)| {
                        let dir = ["z", "y", "x"][d];
                        ShmoeBound {
                            expert_kernels: sp
                                .expert_kernels
                                .iter()
                                .enumerate()
                                .map(|(e, t)| {
                                    binder.leaf(
                                        tape,
                                        &format!("{prefix}.{dir}.expert{e}.kernel"),
                                        t,
                                    )
                                })
                                .collect(),
                            expert_biases: sp
                                .expert_biases
                                .iter()
                                .enumerate()
                                .map(|(e, t)| {
                                    binder.leaf(tape, &format!("{prefix}.{dir}.expert{e}.bias"), t)
                                })
                                .collect(),
                            router_kernel: binder.leaf(
                                tape,
                                &format!("{prefix}.{dir}.router.kernel"),
                                &sp.router_kernel,
                            ),
                            router_bias: binder.leaf(
                                tape,
                                &format!("{prefix}.{dir}.router.bias"),
                                &sp.router_bias,
                            ),
                            k_active: sp.k_active,
                        }
                    })
                    .collect(),
            ),
        }
    }
}

/// One decode stage: its head and bookkeeping.
#[derive(Debug, Clone)]
pub struct StageParams {
    pub name: String,
    pub downsample: usize,
    pub in_channels: usize,
    pub head: HeadParams,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    /// Level stages, coarsest first, then the full-resolution stage.
    pub stages: Vec<StageParams>,
    pub stem1_kernel: Tensor,
    pub stem1_bias: Tensor,
    pub stem2_kernel: Tensor,
    pub stem2_bias: Tensor,
}

impl DecoderParams {
    /// Build stages for an encoder pyramid described by `(downsample,
    /// channels)` pairs, finest first (as [`crate::encoder::encoder_forward`]
    /// returns them).
    pub fn init(cfg: &DecoderConfig, pyramid: &[(usize, usize)], rng: &mut Rng) -> Self {
        let mut stages = Vec::new();
        for &(ds, channels) in pyramid.iter().rev() {
            let kind = cfg.head_at(ds);
            stages.push(StageParams {
                name: stage_name(ds),
                downsample: ds,
                in_channels: 2 * channels,
                head: HeadParams::init(kind, 2 * channels, cfg, rng),
            });
        }
        let sc = cfg.stem_channels;
        stages.push(StageParams {
            name: stage_name(1),
            downsample: 1,
            in_channels: sc,
            head: HeadParams::init(cfg.head_at(1), sc, cfg, rng),
        });
        DecoderParams {
            cfg: cfg.clone(),
            stages,
            stem1_kernel: Tensor::randn(&[sc, 2, 3, 3, 3], 1.0 / (2.0 * 27.0f64).sqrt(), rng),
            stem1_bias: Tensor::zeros(&[sc]),
            stem2_kernel: Tensor::randn(&[sc, sc, 3, 3, 3], 1.0 / ((sc * 27) as f64).sqrt(), rng),
            stem2_bias: Tensor::zeros(&[sc]),
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for stage in &mut self.stages {
            let prefix = format!("dec.{}", stage.name);
            stage.head.visit(&prefix, f);
        }
        f("dec.stem1.kernel".into(), &mut self.stem1_kernel);
        f("dec.stem1.bias".into(), &mut self.stem1_bias);
        f("dec.stem2.kernel".into(), &mut self.stem2_kernel);
        f("dec.stem2.bias".into(), &mut self.stem2_bias);
    }
}

pub fn stage_name(downsample: usize) -> String {
    if downsample == 1 {
        "full".to_string()
    } else {
        format!("d{downsample}")
    }
}

pub struct DecoderBound {
    stages: Vec<HeadBound>,
    stem1_kernel: TensorId,
    stem1_bias: TensorId,
    stem2_kernel: TensorId,
    stem2_bias: TensorId,
}

impl DecoderBound {
    pub fn new(p: &DecoderParams, tape: &mut Tape, binder: &mut Binder) -> Self {
        DecoderBound {
            stages: p
                .stages
                .iter()
                .map(|s| HeadBound::new(&s.head, &format!("dec.{}", s.name), tape, binder))
                .collect(),
            stem1_kernel: binder.leaf(tape, "dec.stem1.kernel", &p.stem1_kernel),
            stem1_bias: binder.leaf(tape, "dec.stem1.bias", &p.stem1_bias),
            stem2_kernel: binder.leaf(tape, "dec.stem2.kernel", &p.stem2_kernel),
            stem2_bias: binder.leaf(tape, "dec.stem2.bias", &p.stem2_bias),
        }
    }
}

/// Routing record of one expert head direction.
pub struct DirDiag {
    /// Raw residual output of this direction, `[1, d, h, w]`, recorded
    /// before any integration; its similarity gradient is the error signal.
    pub delta: TensorId,
    pub routing: ShmoeRouting,
}

/// Per-stage forward diagnostics.
pub struct StageDiag {
    pub name: String,
    pub dims: [usize; 3],
    /// Residual field `[3, d, h, w]` predicted at this stage (pre-integration).
    pub delta: TensorId,
    /// Incoming field at this stage's resolution.
    pub phi_in: TensorId,
    /// Field after composing the residual, before upsampling.
    pub phi_out: TensorId,
    /// Present when this stage used expert heads: one record per direction.
    pub dirs: Option<Vec<DirDiag>>,
}

/// Full decode output.
pub struct DecodeOutput {
    /// Final deformation field at input resolution, `[3, D, H, W]`.
    pub phi: TensorId,
    pub stages: Vec<StageDiag>,
}

fn apply_head(
    tape: &mut Tape,
    features: TensorId,
    head: &HeadBound,
) -> TensorResult<(TensorId, Option<Vec<DirDiag>>)> {
    match head {
        HeadBound::Conv { kernel, bias } => {
            let delta = tape.conv3d(features, *kernel, *bias)?;
            Ok((delta, None))
        }
        HeadBound::Shmoe(dirs) => {
            let mut parts = Vec::with_capacity(3);
            let mut diags = Vec::with_capacity(3);
            for bound in dirs {
                let (delta_dir, routing) = shmoe_forward(tape, features, bound)?;
                parts.push(delta_dir);
                diags.push(DirDiag {
                    delta: delta_dir,
                    routing,
                });
            }
            let delta = tape.concat0(&parts)?;
            Ok((delta, Some(diags)))
        }
    }
}

/// Token-major `[t, c]` level features to channel-major `[c, d, h, w]`.
fn tokens_to_volume(tape: &mut Tape, level: &LevelFeatures) -> TensorResult<TensorId> {
    let t = tape.transpose2d(level.tokens)?;
    tape.reshape(
        t,
        &[level.channels, level.dims[0], level.dims[1], level.dims[2]],
    )
}

/// Decode the full pyramid into a deformation field.
///
/// `pyr_m` / `pyr_f` are the per-level features of the moving and fixed
/// volumes, finest first. `moving` / `fixed` are the full-resolution input
/// volumes feeding the final stage's stem. When `diffeomorphic` is set,
/// every stage's residual is treated as a stationary velocity and
/// integrated (scaling and squaring, `integrate_steps` squarings) before
/// composition.
#[allow(clippy::too_many_arguments)]
pub fn decode_pyramid(
    tape: &mut Tape,
    bound: &DecoderBound,
    pyr_m: &[LevelFeatures],
    pyr_f: &[LevelFeatures],
    moving: TensorId,
    fixed: TensorId,
    params: &DecoderParams,
    diffeomorphic: bool,
    integrate_steps: u32,
) -> TensorResult<DecodeOutput> {
    assert_eq!(pyr_m.len(), pyr_f.len());
    assert_eq!(params.stages.len(), pyr_m.len() + 1);
    let mut stages_out = Vec::new();

    // Coarsest level starts from the zero field.
    let coarsest = pyr_m.len() - 1;
    let d0 = pyr_m[coarsest].dims;
    let mut phi = tape.constant(Tensor::zeros(&[3, d0[0], d0[1], d0[2]]));

    for (stage_idx, level) in (0..=coarsest).rev().enumerate() {
        let fm = tokens_to_volume(tape, &pyr_m[level])?;
        let ff = tokens_to_volume(tape, &pyr_f[level])?;
        let warped_m = tape.warp(fm, phi)?;
        let cat = tape.concat0(&[warped_m, ff])?;
        let (raw_delta, dirs) = apply_head(tape, cat, &bound.stages[stage_idx])?;
        let delta = if diffeomorphic {
            integrate_tape(tape, raw_delta, integrate_steps)?
        } else {
            raw_delta
        };
        let phi_in = phi;
        phi = tape.add(phi, delta)?;
        stages_out.push(StageDiag {
            name: params.stages[stage_idx].name.clone(),
            dims: pyr_m[level].dims,
            delta: raw_delta,
            phi_in,
            phi_out: phi,
            dirs,
        });
        phi = upsample_field_tape(tape, phi)?;
    }

    // Full-resolution stage over the warped moving and fixed images.
    let warped_img = tape.warp(moving, phi)?;
    let cat = tape.concat0(&[warped_img, fixed])?;
    let s1 = tape.conv3d(cat, bound.stem1_kernel, bound.stem1_bias)?;
    let s1 = tape.gelu(s1);
    let s2 = tape.conv3d(s1, bound.stem2_kernel, bound.stem2_bias)?;
    let s2 = tape.gelu(s2);
    let last = bound.stages.len() - 1;
    let (raw_delta, dirs) = apply_head(tape, s2, &bound.stages[last])?;
    let full_dims = {
        let s = tape.shape(moving);
        [s[1], s[2], s[3]]
    };
    let delta = if diffeomorphic {
        integrate_tape(tape, raw_delta, integrate_steps)?
    } else {
        raw_delta
    };
    let phi_in = phi;
    phi = tape.add(phi, delta)?;
    stages_out.push(StageDiag {
        name: params.stages[last].name.clone(),
        dims: full_dims,
        delta: raw_delta,
        phi_in,
        phi_out: phi,
        dirs,
    });

    Ok(DecodeOutput {
        phi,
        stages: stages_out,
    })
}

/// Upsampled field between stages (public for tests and tooling).
pub fn upsample_field(tape: &mut Tape, phi: TensorId) -> TensorResult<TensorId> {
    upsample_field_tape(tape, phi)
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Conv => write!(f, "conv"),
            HeadKind::Shmoe => write!(f, "shmoe"),
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv" => Ok(HeadKind::Conv),
            "shmoe" => Ok(HeadKind::Shmoe),
            other => Err(TensorError::InvalidArgument(format!(
                "unknown head kind '{other}'"
            ))),
        }
    }
}
