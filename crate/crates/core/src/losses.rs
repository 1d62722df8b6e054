//! Training objective: similarity, field regularity, routing supervision.

use std::sync::Arc;

use crate::tape::{Tape, TensorId};
use crate::tensor::{TensorError, TensorResult};

/// Weights of the regularization and routing-classification terms.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_rc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 0.01,
            lambda_rc: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> TensorResult<()> {
        if self.lambda_reg < 0.0 || self.lambda_rc < 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "loss weights must be nonnegative, got lambda_r={}, lambda_rc={}",
                self.lambda_reg, self.lambda_rc
            )));
        }
        Ok(())
    }
}

/// Mean squared voxel difference between the warped and fixed volumes.
pub fn sim_loss(tape: &mut Tape, warped: TensorId, fixed: TensorId) -> TensorResult<TensorId> {
    if tape.shape(warped) != tape.shape(fixed) {
        return Err(TensorError::ShapeMismatch {
            op: "sim_loss",
            lhs: tape.shape(warped).to_vec(),
            rhs: tape.shape(fixed).to_vec(),
        });
    }
    let diff = tape.sub(warped, fixed)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Diffusion regularizer on a displacement field `[3, d, h, w]`: per axis,
/// the mean over valid positions of the squared forward difference, summed
/// over axes and displacement channels.
pub fn reg_loss(tape: &mut Tape, disp: TensorId) -> TensorResult<TensorId> {
    let shape = tape.shape(disp).to_vec();
    if shape.len() != 4 || shape[0] != 3 {
        return Err(TensorError::InvalidArgument(format!(
            "reg_loss expects [3,d,h,w], got {shape:?}"
        )));
    }
    let (d, h, w) = (shape[1], shape[2], shape[3]);
    let nvox = d * h * w;
    let strides = [h * w, w, 1usize];
    let extents = [d, h, w];
    let mut total: Option<TensorId> = None;
    for axis in 0..3 {
        let mut hi = Vec::new();
        let mut lo = Vec::new();
        for c in 0..3 {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if [z, y, x][axis] + 1 >= extents[axis] {
                            continue;
                        }
                        let base = c * nvox + (z * h + y) * w + x;
                        lo.push(base);
                        hi.push(base + strides[axis]);
                    }
                }
            }
        }
        let a = tape.gather_elems(disp, Arc::new(hi));
        let b = tape.gather_elems(disp, Arc::new(lo));
        let diff = tape.sub(a, b)?;
        let sq = tape.mul(diff, diff)?;
        let mean = tape.mean_all(sq);
        // mean_all averaged over channels too; scale restores the channel sum.
        let term = tape.scale(mean, 3.0);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("three axes"))
}

/// `sim + lambda_r * reg + lambda_rc * rc`; `rc` is the mean routing loss
/// over all expert-routed heads of the active configuration, absent when the
/// configuration has none.
pub fn total_loss(
    tape: &mut Tape,
    sim: TensorId,
    reg: TensorId,
    rc: Option<TensorId>,
    weights: LossWeights,
) -> TensorResult<TensorId> {
    weights.validate()?;
    let wreg = tape.scale(reg, weights.lambda_reg);
    let mut total = tape.add(sim, wreg)?;
    if let Some(rc) = rc {
        let wrc = tape.scale(rc, weights.lambda_rc);
        total = tape.add(total, wrc)?;
    }
    Ok(total)
}
