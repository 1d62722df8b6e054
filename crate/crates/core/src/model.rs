//! The full registration network and its training step.
//!
//! One forward pass encodes the pair with shared parameters, decodes the
//! coarse-to-fine field, and warps the moving image. The training step runs
//! two backward passes over the same recording: the first, from the
//! similarity loss alone, reads off each expert head direction's per-voxel
//! gradient as the error signal for routing-classification labels; the
//! second, from the total loss, produces the parameter gradients.

use crate::decoder::{decode_pyramid, DecodeOutput, DecoderBound, DecoderConfig, DecoderParams};
use crate::encoder::{encode_pair, AttnDiag, EncoderBound, EncoderConfig, EncoderParams};
use crate::losses::{reg_loss, sim_loss, total_loss, LossWeights};
use crate::params::{Adam, Binder};
use crate::rng::Rng;
use crate::shmoe::{build_rc_labels, rc_loss, ErrorSignal};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub diffeomorphic: bool,
    pub integrate_steps: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            diffeomorphic: false,
            integrate_steps: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegModel {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl RegModel {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let encoder = EncoderParams::init(&cfg.encoder, rng);
        // Pyramid description for the decoder: (downsample, channels),
        // finest level first.
        let pyramid: Vec<(usize, usize)> = (0..cfg.encoder.levels())
            .map(|l| (cfg.encoder.patch_size << l, cfg.encoder.level_dim(l)))
            .collect();
        let decoder = DecoderParams::init(&cfg.decoder, &pyramid, rng);
        RegModel {
            cfg: cfg.clone(),
            encoder,
            decoder,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit(f);
        self.decoder.visit(f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    pub fn param_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| names.push(name));
        names
    }

    /// Forward pass over one pair of `[1, d, h, w]` volumes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        moving: TensorId,
        fixed: TensorId,
    ) -> TensorResult<ForwardPass> {
        self.forward_with_binder(tape, Binder::new(), moving, fixed)
    }

    /// Forward pass with a caller-supplied binder (e.g. carrying parameter
    /// overrides for gradient probes).
    pub fn forward_with_binder(
        &self,
        tape: &mut Tape,
        mut binder: Binder,
        moving: TensorId,
        fixed: TensorId,
    ) -> TensorResult<ForwardPass> {
        self.cfg.encoder.validate({
            let s = tape.shape(moving);
            [s[1], s[2], s[3]]
        })?;
        let enc_bound = EncoderBound::new(&self.encoder, tape, &mut binder);
        let dec_bound = DecoderBound::new(&self.decoder, tape, &mut binder);
        let (pyr_m, pyr_f, attn_moving, attn_fixed) = encode_pair(tape, &enc_bound, moving, fixed)?;
        let decode = decode_pyramid(
            tape,
            &dec_bound,
            &pyr_m,
            &pyr_f,
            moving,
            fixed,
            &self.decoder,
            self.cfg.diffeomorphic,
            self.cfg.integrate_steps,
        )?;
        let warped = tape.warp(moving, decode.phi)?;
        Ok(ForwardPass {
            binder,
            decode,
            warped,
            attn_moving,
            attn_fixed,
        })
    }
}

pub struct ForwardPass {
    pub binder: Binder,
    pub decode: DecodeOutput,
    pub warped: TensorId,
    pub attn_moving: Vec<AttnDiag>,
    pub attn_fixed: Vec<AttnDiag>,
}

impl ForwardPass {
    pub fn phi(&self) -> TensorId {
        self.decode.phi
    }

    /// True when any decode stage carries expert-routing heads.
    pub fn has_expert_heads(&self) -> bool {
        self.decode.stages.iter().any(|s| s.dirs.is_some())
    }
}

#[derive(Debug)]
pub enum TrainError {
    /// A loss term stopped being finite; named so the abort is actionable.
    NonFinite {
        term: String,
        iteration: usize,
    },
    Tensor(TensorError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::NonFinite { term, iteration } => {
                write!(f, "non-finite {term} loss at iteration {iteration}")
            }
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub sim: f64,
    pub reg: f64,
    pub rc: f64,
    pub total: f64,
}

/// One optimization step on one pair. Returns the loss components.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut RegModel,
    moving: &Tensor,
    fixed: &Tensor,
    weights: LossWeights,
    quantile_q: f64,
    opt: &mut Adam,
    iteration: usize,
) -> Result<LossRecord, TrainError> {
    let mut tape = Tape::new();
    let moving_id = tape.constant(moving.clone());
    let fixed_id = tape.constant(fixed.clone());
    let pass = model.forward(&mut tape, moving_id, fixed_id)?;

    let sim = sim_loss(&mut tape, pass.warped, fixed_id)?;
    let reg = reg_loss(&mut tape, pass.decode.phi)?;

    // Error-signal pass: gradients of the similarity loss alone give the
    // per-voxel, per-direction routing supervision. The sweep stops at the
    // earliest expert-head output; nothing upstream is touched.
    let rc = if pass.has_expert_heads() {
        let stop = pass
            .decode
            .stages
            .iter()
            .flat_map(|s| s.dirs.iter().flatten().map(|d| d.delta))
            .min_by_key(|id| id.0)
            .expect("expert heads present");
        tape.backward_partial(sim, stop)?;
        let mut terms: Vec<TensorId> = Vec::new();
        let mut label_sets = Vec::new();
        for stage in &pass.decode.stages {
            if let Some(dirs) = &stage.dirs {
                for dir in dirs {
                    let grad = tape
                        .grad(dir.delta)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(dir.delta).numel()]);
                    let eps = ErrorSignal::from_gradient(&grad, stage.dims);
                    let labels = build_rc_labels(&eps, &dir.routing.sparse, quantile_q)?;
                    label_sets.push((dir.routing.dense_probs, labels));
                }
            }
        }
        tape.zero_grads();
        for (probs, labels) in &label_sets {
            terms.push(rc_loss(&mut tape, *probs, labels)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Some(tape.scale(acc, 1.0 / terms.len() as f64))
    } else {
        None
    };

    let total = total_loss(&mut tape, sim, reg, rc, weights)?;

    let record = LossRecord {
        iteration,
        sim: tape.value(sim).item(),
        reg: tape.value(reg).item(),
        rc: rc.map_or(0.0, |id| tape.value(id).item()),
        total: tape.value(total).item(),
    };
    for (term, value) in [
        ("sim", record.sim),
        ("reg", record.reg),
        ("rc", record.rc),
        ("total", record.total),
    ] {
        if !value.is_finite() {
            return Err(TrainError::NonFinite {
                term: term.to_string(),
                iteration,
            });
        }
    }

    tape.backward(total)?;
    let grads = pass.binder.grads(&tape);
    opt.begin_step();
    model.visit_params(&mut |name, t| {
        let g = grads.get(&name).expect("every parameter was bound");
        opt.update(&name, t, g);
    });
    Ok(record)
}
