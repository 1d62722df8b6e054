//! Spatially heterogeneous mixture of convolution experts.
//!
//! One layer predicts a single displacement direction. Experts are
//! convolutions with different kernel sizes over the shared input feature
//! map; a pointwise router assigns per-voxel probabilities over the experts,
//! keeps the top `k`, renormalizes, and the layer output mixes the selected
//! experts' values voxel by voxel. The router is supervised by a
//! classification loss whose labels are derived from the similarity-loss
//! gradient: voxels whose error signal exceeds the q-th quantile count as
//! routed incorrectly, and their labels redistribute mass to the unselected
//! experts.

use std::sync::Arc;

use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{topk, Tensor, TensorError, TensorResult};

/// Probability floor used when clamping router probabilities before logs.
pub const BCE_EPSILON: f64 = 1e-7;

/// Host parameters of one spatial mixture-of-experts layer (one direction).
#[derive(Debug, Clone)]
pub struct ShmoeParams {
    /// Per-expert convolution kernels `[1, c_in, s, s, s]` with differing `s`.
    pub expert_kernels: Vec<Tensor>,
    /// Per-expert biases `[1]`.
    pub expert_biases: Vec<Tensor>,
    /// Pointwise router kernel `[n, c_in, 1, 1, 1]`.
    pub router_kernel: Tensor,
    /// Router bias `[n]`.
    pub router_bias: Tensor,
    /// Experts kept per voxel.
    pub k_active: usize,
}

impl ShmoeParams {
    /// Experts are zero-initialized so a fresh head predicts the identity
    /// deformation; the router starts random to break ties.
    pub fn init(c_in: usize, kernel_sizes: &[usize], k_active: usize, rng: &mut Rng) -> Self {
        let n = kernel_sizes.len();
        assert!(k_active >= 1 && k_active <= n);
        let expert_kernels = kernel_sizes
            .iter()
            .map(|&s| Tensor::zeros(&[1, c_in, s, s, s]))
            .collect();
        let expert_biases = (0..n).map(|_| Tensor::zeros(&[1])).collect();
        ShmoeParams {
            expert_kernels,
            expert_biases,
            router_kernel: Tensor::randn(&[n, c_in, 1, 1, 1], 1.0 / (c_in as f64).sqrt(), rng),
            router_bias: Tensor::zeros(&[n]),
            k_active,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.expert_kernels.len()
    }
}

/// Tape binding of [`ShmoeParams`] for one pass.
pub struct ShmoeBound {
    pub expert_kernels: Vec<TensorId>,
    pub expert_biases: Vec<TensorId>,
    pub router_kernel: TensorId,
    pub router_bias: TensorId,
    pub k_active: usize,
}

impl ShmoeBound {
    pub fn new(params: &ShmoeParams, tape: &mut Tape) -> Self {
        ShmoeBound {
            expert_kernels: params.expert_kernels.iter().map(|t| tape.leaf(t)).collect(),
            expert_biases: params.expert_biases.iter().map(|t| tape.leaf(t)).collect(),
            router_kernel: tape.leaf(&params.router_kernel),
            router_bias: tape.leaf(&params.router_bias),
            k_active: params.k_active,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.expert_kernels.len()
    }
}

/// Sparse per-voxel gate: exactly `k` nonzeros per voxel that sum to one.
#[derive(Debug, Clone)]
pub struct RoutingTensor {
    /// `[n, d, h, w]` gate values; zero at unselected experts.
    pub values: Tensor,
    pub k_active: usize,
}

impl RoutingTensor {
    pub fn n_experts(&self) -> usize {
        self.values.shape[0]
    }

    pub fn num_voxels(&self) -> usize {
        self.values.shape[1] * self.values.shape[2] * self.values.shape[3]
    }

    /// Selected expert ids per voxel, ascending.
    pub fn selected(&self) -> Vec<Vec<usize>> {
        let n = self.n_experts();
        let nvox = self.num_voxels();
        (0..nvox)
            .map(|v| {
                (0..n)
                    .filter(|&e| self.values.data[e * nvox + v] != 0.0)
                    .collect()
            })
            .collect()
    }

    /// Winning expert id per voxel (largest gate value, lowest index wins
    /// ties); export format for the per-voxel expert maps.
    pub fn selection_map(&self) -> Vec<u16> {
        let n = self.n_experts();
        let nvox = self.num_voxels();
        (0..nvox)
            .map(|v| {
                let mut best = 0usize;
                let mut best_val = f64::NEG_INFINITY;
                for e in 0..n {
                    let val = self.values.data[e * nvox + v];
                    if val > best_val {
                        best_val = val;
                        best = e;
                    }
                }
                best as u16
            })
            .collect()
    }

    /// Checks the gate invariants: exactly `k` nonzeros per voxel, each in
    /// (0, 1], summing to one.
    pub fn validate(&self) -> TensorResult<()> {
        let n = self.n_experts();
        let nvox = self.num_voxels();
        for v in 0..nvox {
            let mut count = 0;
            let mut sum = 0.0;
            for e in 0..n {
                let val = self.values.data[e * nvox + v];
                if val != 0.0 {
                    if !(val > 0.0 && val <= 1.0) {
                        return Err(TensorError::Numeric(format!(
                            "gate value {val} outside (0,1] at voxel {v}"
                        )));
                    }
                    count += 1;
                    sum += val;
                }
            }
            if count != self.k_active {
                return Err(TensorError::Numeric(format!(
                    "voxel {v} has {count} nonzeros, expected {}",
                    self.k_active
                )));
            }
            if (sum - 1.0).abs() > 1e-10 {
                return Err(TensorError::Numeric(format!("voxel {v} gate sum {sum}")));
            }
        }
        Ok(())
    }
}

/// Routing record of one forward pass, carrying both the sparse gate (the
/// layer's selection) and the dense pre-selection probabilities that the
/// classification loss trains.
pub struct ShmoeRouting {
    /// `[nvox, n]` dense router probabilities on the tape.
    pub dense_probs: TensorId,
    /// Per-voxel selected experts, ascending.
    pub selected: Vec<Vec<usize>>,
    /// Host-side sparse gate.
    pub sparse: RoutingTensor,
}

/// Per-voxel, single-direction residual deformation: router probabilities
/// -> top-k -> renormalize -> weighted sum of the selected experts' conv
/// outputs. Returns the `[1, d, h, w]` output and the routing record.
pub fn shmoe_forward(
    tape: &mut Tape,
    features: TensorId,
    bound: &ShmoeBound,
) -> TensorResult<(TensorId, ShmoeRouting)> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::InvalidArgument(format!(
            "shmoe_forward expects [c,d,h,w], got {shape:?}"
        )));
    }
    let dims = [shape[1], shape[2], shape[3]];
    let nvox = dims[0] * dims[1] * dims[2];
    let n = bound.n_experts();
    let k = bound.k_active;

    // Dense routing probabilities per voxel.
    let logits = tape.conv3d(features, bound.router_kernel, bound.router_bias)?;
    let logits_vn = tape.reshape(logits, &[n, nvox])?;
    let logits_vn = tape.transpose2d(logits_vn)?;
    let probs = tape.softmax_last(logits_vn)?; // [nvox, n]

    // Top-k selection per voxel (host side, detached).
    let mut selected = Vec::with_capacity(nvox);
    let mut flat_sel = Vec::with_capacity(nvox * k);
    {
        let p = tape.value(probs);
        for v in 0..nvox {
            let row = &p.data[v * n..(v + 1) * n];
            let (idx, _) = topk(row, k)?;
            for &e in &idx {
                flat_sel.push(v * n + e);
            }
            selected.push(idx);
        }
    }
    let sel = tape.gather_elems(probs, Arc::new(flat_sel));
    let sel = tape.reshape(sel, &[nvox, k])?;
    let wsum = tape.sum_last_keep(sel)?;
    let rep = tape.repeat_last(wsum, k)?;
    let weights = tape.div(sel, rep)?; // [nvox, k], rows sum to 1

    // Every expert's full-volume output, stacked to [n, nvox].
    let mut expert_outs = Vec::with_capacity(n);
    for e in 0..n {
        let out = tape.conv3d(features, bound.expert_kernels[e], bound.expert_biases[e])?;
        expert_outs.push(tape.reshape(out, &[1, nvox])?);
    }
    let stacked = tape.concat0(&expert_outs)?; // [n, nvox]

    // Gather the selected experts' values per voxel and mix.
    let mut mixed: Option<TensorId> = None;
    for slot in 0..k {
        let val_idx: Arc<Vec<usize>> =
            Arc::new((0..nvox).map(|v| selected[v][slot] * nvox + v).collect());
        let vals = tape.gather_elems(stacked, val_idx); // [nvox]
        let w_idx: Arc<Vec<usize>> = Arc::new((0..nvox).map(|v| v * k + slot).collect());
        let w = tape.gather_elems(weights, w_idx); // [nvox]
        let term = tape.mul(vals, w)?;
        mixed = Some(match mixed {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let out = tape.reshape(mixed.expect("k >= 1"), &[1, dims[0], dims[1], dims[2]])?;

    // Host-side sparse gate for diagnostics and label construction.
    let mut gate = Tensor::zeros(&[n, dims[0], dims[1], dims[2]]);
    {
        let w = tape.value(weights);
        for (v, sel_v) in selected.iter().enumerate() {
            for (slot, &e) in sel_v.iter().enumerate() {
                gate.data[e * nvox + v] = w.data[v * k + slot];
            }
        }
    }
    let sparse = RoutingTensor {
        values: gate,
        k_active: k,
    };
    Ok((
        out,
        ShmoeRouting {
            dense_probs: probs,
            selected,
            sparse,
        },
    ))
}

/// Per-voxel magnitude of the similarity-loss gradient with respect to one
/// direction's residual deformation output.
#[derive(Debug, Clone)]
pub struct ErrorSignal {
    /// `[1, d, h, w]`, nonnegative.
    pub magnitude: Tensor,
}

impl ErrorSignal {
    pub fn from_gradient(grad: &[f64], dims: [usize; 3]) -> Self {
        let data = grad.iter().map(|g| g.abs()).collect();
        ErrorSignal {
            magnitude: Tensor::new(vec![1, dims[0], dims[1], dims[2]], data),
        }
    }
}

/// Router supervision targets, `[n, d, h, w]` with entries in `{0} ∪ {1} ∪
/// {m/(n-k), m <= n-k}`.
#[derive(Debug, Clone)]
pub struct ExpertLabels {
    pub values: Tensor,
}

/// Linear-interpolation quantile of a sample (ascending order statistics).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Build routing-classification labels from the error signal.
///
/// The threshold is the `q`-th quantile of the error magnitude over the whole
/// volume. A voxel routes correctly iff its error does not exceed the
/// threshold (strict comparison): correct voxels label their selected experts
/// 1 and everything else 0; incorrect voxels label their selected experts 0
/// and add `1/(n-k)` to each unselected expert per incorrectly selected one,
/// capped at 1.
pub fn build_rc_labels(
    eps: &ErrorSignal,
    routing: &RoutingTensor,
    q: f64,
) -> TensorResult<ExpertLabels> {
    if !(0.0 < q && q < 1.0) {
        return Err(TensorError::InvalidArgument(format!(
            "quantile q={q} outside (0,1)"
        )));
    }
    let nvox = routing.num_voxels();
    if eps.magnitude.numel() != nvox {
        return Err(TensorError::ShapeMismatch {
            op: "build_rc_labels",
            lhs: eps.magnitude.shape.clone(),
            rhs: routing.values.shape.clone(),
        });
    }
    let n = routing.n_experts();
    let k = routing.k_active;
    let tau = quantile(&eps.magnitude.data, q);
    let increment = if n > k { 1.0 / (n - k) as f64 } else { 0.0 };
    let mut labels = Tensor::zeros(&routing.values.shape);
    for v in 0..nvox {
        let incorrect = eps.magnitude.data[v] > tau;
        let selected: Vec<usize> = (0..n)
            .filter(|&e| routing.values.data[e * nvox + v] != 0.0)
            .collect();
        if incorrect {
            let bump = (increment * selected.len() as f64).min(1.0);
            for e in 0..n {
                if !selected.contains(&e) {
                    labels.data[e * nvox + v] = bump;
                }
            }
        } else {
            for &e in &selected {
                labels.data[e * nvox + v] = 1.0;
            }
        }
    }
    Ok(ExpertLabels { values: labels })
}

/// Binary cross-entropy between the dense router probabilities and the
/// labels, averaged over experts and voxels. Probabilities are clamped to
/// `[eps, 1-eps]` before the logs; labels are constants.
pub fn rc_loss(
    tape: &mut Tape,
    dense_probs: TensorId,
    labels: &ExpertLabels,
) -> TensorResult<TensorId> {
    let shape = tape.shape(dense_probs).to_vec();
    let (nvox, n) = (shape[0], shape[1]);
    if labels.values.numel() != nvox * n {
        return Err(TensorError::ShapeMismatch {
            op: "rc_loss",
            lhs: shape,
            rhs: labels.values.shape.clone(),
        });
    }
    // Labels arrive as [n, d, h, w]; realign to the [nvox, n] probabilities.
    let mut y = Tensor::zeros(&[nvox, n]);
    for e in 0..n {
        for v in 0..nvox {
            y.data[v * n + e] = labels.values.data[e * nvox + v];
        }
    }
    let mut one_minus_y = y.clone();
    for v in &mut one_minus_y.data {
        *v = 1.0 - *v;
    }
    let y = tape.constant(y);
    let omy = tape.constant(one_minus_y);
    let t = tape.clamp(dense_probs, BCE_EPSILON, 1.0 - BCE_EPSILON);
    let ln_t = tape.ln(t);
    let neg_t = tape.scale(t, -1.0);
    let omt = tape.add_scalar(neg_t, 1.0);
    let ln_omt = tape.ln(omt);
    let pos = tape.mul(y, ln_t)?;
    let neg = tape.mul(omy, ln_omt)?;
    let sum = tape.add(pos, neg)?;
    let mean = tape.mean_all(sum);
    Ok(tape.scale(mean, -1.0))
}

/// Percentage of voxels at which each expert is among the selected top-k;
/// sums to `k * 100`.
pub fn expert_load(routing: &RoutingTensor) -> Vec<f64> {
    let n = routing.n_experts();
    let nvox = routing.num_voxels();
    (0..n)
        .map(|e| {
            let count = (0..nvox)
                .filter(|&v| routing.values.data[e * nvox + v] != 0.0)
                .count();
            100.0 * count as f64 / nvox as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn detached(params: &ShmoeParams) -> ShmoeParams {
        params.clone()
    }

    fn random_params(c_in: usize, rng: &mut Rng) -> ShmoeParams {
        let mut p = ShmoeParams::init(c_in, &[1, 3, 5], 1, rng);
        for kern in &mut p.expert_kernels {
            *kern = Tensor::randn(&kern.shape.clone(), 0.5, rng);
        }
        for b in &mut p.expert_biases {
            *b = Tensor::randn(&[1], 0.5, rng);
        }
        p
    }

    /// Independent dense-enumeration reference: guarded nested-loop
    /// convolution per expert (same accumulation order as production),
    /// per-voxel softmax and argmax with low-index ties.
    fn dense_reference(params: &ShmoeParams, f: &Tensor) -> Vec<f64> {
        let (c_in, d, h, w) = (f.shape[0], f.shape[1], f.shape[2], f.shape[3]);
        let nvox = d * h * w;
        let n = params.n_experts();
        let conv_at = |kernel: &Tensor, bias: f64, z: usize, y: usize, x: usize| -> f64 {
            let s = kernel.shape[2];
            let p = (s - 1) / 2;
            let mut acc = 0.0;
            for c in 0..c_in {
                for kd in 0..s {
                    for kh in 0..s {
                        for kw in 0..s {
                            let iz = z as isize + kd as isize - p as isize;
                            let iy = y as isize + kh as isize - p as isize;
                            let ix = x as isize + kw as isize - p as isize;
                            if iz < 0
                                || iy < 0
                                || ix < 0
                                || iz >= d as isize
                                || iy >= h as isize
                                || ix >= w as isize
                            {
                                continue;
                            }
                            acc += f.data
                                [((c * d + iz as usize) * h + iy as usize) * w + ix as usize]
                                * kernel.data[((c * s + kd) * s + kh) * s + kw];
                        }
                    }
                }
            }
            acc + bias
        };
        let mut out = vec![0.0; nvox];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (z * h + y) * w + x;
                    // Router logits: pointwise conv.
                    let mut best = 0usize;
                    let mut best_logit = f64::NEG_INFINITY;
                    for e in 0..n {
                        let mut logit = params.router_bias.data[e];
                        for c in 0..c_in {
                            logit += f.data[c * nvox + v] * params.router_kernel.data[e * c_in + c];
                        }
                        if logit > best_logit {
                            best_logit = logit;
                            best = e;
                        }
                    }
                    out[v] = conv_at(
                        &params.expert_kernels[best],
                        params.expert_biases[best].data[0],
                        z,
                        y,
                        x,
                    );
                }
            }
        }
        out
    }

    #[test]
    fn biased_router_selects_one_expert_exactly() {
        let mut rng = Rng::new(1);
        let mut params = random_params(2, &mut rng);
        params.router_kernel = Tensor::zeros(&[3, 2, 1, 1, 1]);
        params.router_bias = Tensor::from_slice(&[3], &[0.0, 10.0, 0.0]);
        let f = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = ShmoeBound::new(&detached(&params), &mut tape);
        let fid = tape.constant(f);
        let (out, routing) = shmoe_forward(&mut tape, fid, &bound).unwrap();
        // Expert 1 wins everywhere with weight exactly 1: output equals its conv.
        let e1 = tape
            .conv3d(fid, bound.expert_kernels[1], bound.expert_biases[1])
            .unwrap();
        assert_eq!(tape.value(out).data, tape.value(e1).data);
        assert!(routing.selected.iter().all(|s| s == &[1]));
        routing.sparse.validate().unwrap();
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = Rng::new(2);
        let mut params = random_params(2, &mut rng);
        for b in &mut params.expert_biases {
            *b = Tensor::zeros(&[1]);
        }
        let mut tape = Tape::new();
        let bound = ShmoeBound::new(&params, &mut tape);
        let f = tape.constant(Tensor::zeros(&[2, 2, 2, 2]));
        let (out, _) = shmoe_forward(&mut tape, f, &bound).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_dense_enumeration() {
        for seed in 0..20 {
            let mut rng = Rng::new(1100 + seed);
            let params = random_params(2, &mut rng);
            let f = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
            let mut tape = Tape::new();
            let bound = ShmoeBound::new(&params, &mut tape);
            let fid = tape.constant(f.clone());
            let (out, routing) = shmoe_forward(&mut tape, fid, &bound).unwrap();
            let reference = dense_reference(&params, &f);
            assert_eq!(tape.value(out).data, reference, "seed {seed}");
            routing.sparse.validate().unwrap();
        }
    }

    #[test]
    fn gate_has_k_nonzeros_summing_to_one() {
        let mut rng = Rng::new(3);
        let mut params = random_params(3, &mut rng);
        params.k_active = 2;
        let f = Tensor::randn(&[3, 3, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = ShmoeBound::new(&params, &mut tape);
        let fid = tape.constant(f);
        let (_, routing) = shmoe_forward(&mut tape, fid, &bound).unwrap();
        routing.sparse.validate().unwrap();
        assert!(routing.selected.iter().all(|s| s.len() == 2));
    }

    #[test]
    fn label_rules_for_correct_and_incorrect_voxels() {
        // Two voxels: first correct (error below threshold), second incorrect.
        // N=3, k=1 with expert 0 selected: correct -> [1,0,0],
        // incorrect -> [0, 0.5, 0.5].
        let mut gate = Tensor::zeros(&[3, 1, 1, 2]);
        gate.data[0] = 1.0; // expert 0 at voxel 0
        gate.data[1] = 1.0; // expert 0 at voxel 1
        let routing = RoutingTensor {
            values: gate,
            k_active: 1,
        };
        let eps = ErrorSignal {
            magnitude: Tensor::from_slice(&[1, 1, 1, 2], &[0.1, 0.9]),
        };
        let labels = build_rc_labels(&eps, &routing, 0.5).unwrap();
        let nvox = 2;
        let get = |e: usize, v: usize| labels.values.data[e * nvox + v];
        assert_eq!([get(0, 0), get(1, 0), get(2, 0)], [1.0, 0.0, 0.0]);
        assert_eq!([get(0, 1), get(1, 1), get(2, 1)], [0.0, 0.5, 0.5]);
    }

    #[test]
    fn constant_error_signal_marks_every_voxel_correct() {
        let mut gate = Tensor::zeros(&[2, 1, 1, 4]);
        for v in 0..4 {
            gate.data[v] = 1.0;
        }
        let routing = RoutingTensor {
            values: gate,
            k_active: 1,
        };
        let eps = ErrorSignal {
            magnitude: Tensor::full(&[1, 1, 1, 4], 0.7),
        };
        let labels = build_rc_labels(&eps, &routing, 0.5).unwrap();
        for v in 0..4 {
            assert_eq!(labels.values.data[v], 1.0);
            assert_eq!(labels.values.data[4 + v], 0.0);
        }
    }

    #[test]
    fn labels_reject_out_of_range_quantile() {
        let routing = RoutingTensor {
            values: Tensor::zeros(&[2, 1, 1, 1]),
            k_active: 1,
        };
        let eps = ErrorSignal {
            magnitude: Tensor::zeros(&[1, 1, 1, 1]),
        };
        assert!(build_rc_labels(&eps, &routing, 0.0).is_err());
        assert!(build_rc_labels(&eps, &routing, 1.0).is_err());
    }

    #[test]
    fn label_entries_live_on_the_allowed_grid() {
        for seed in 0..10 {
            let mut rng = Rng::new(1300 + seed);
            let (n, k) = (4, 2);
            let nvox = 8;
            let mut gate = Tensor::zeros(&[n, 2, 2, 2]);
            for v in 0..nvox {
                let (idx, _) = topk(&(0..n).map(|_| rng.uniform()).collect::<Vec<_>>(), k).unwrap();
                for e in idx {
                    gate.data[e * nvox + v] = 1.0 / k as f64;
                }
            }
            let routing = RoutingTensor {
                values: gate,
                k_active: k,
            };
            let eps = ErrorSignal {
                magnitude: Tensor::new(
                    vec![1, 2, 2, 2],
                    (0..nvox).map(|_| rng.uniform()).collect(),
                ),
            };
            let labels = build_rc_labels(&eps, &routing, 0.5).unwrap();
            let inc = 1.0 / (n - k) as f64;
            for &y in &labels.values.data {
                let on_grid = y == 0.0
                    || y == 1.0
                    || (1..=(n - k)).any(|m| (y - m as f64 * inc).abs() < 1e-12);
                assert!(on_grid, "label {y} off grid");
            }
            // Correct voxels contribute exactly k ones.
            let tau = quantile(&eps.magnitude.data, 0.5);
            for v in 0..nvox {
                if eps.magnitude.data[v] <= tau {
                    let ones = (0..n)
                        .filter(|&e| labels.values.data[e * nvox + v] == 1.0)
                        .count();
                    assert_eq!(ones, k);
                }
            }
        }
    }

    #[test]
    fn bce_is_ln2_at_one_half() {
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::full(&[4, 3], 0.5));
        let labels = ExpertLabels {
            values: Tensor::new(
                vec![3, 1, 1, 4],
                (0..12).map(|i| f64::from(i as u32 % 2)).collect(),
            ),
        };
        let loss = rc_loss(&mut tape, probs, &labels).unwrap();
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_scalar_oracle() {
        // Single voxel, N=2, T=[0.8, 0.2], Y=[1, 0]:
        // -(ln 0.8 + ln 0.8)/2 = -ln 0.8 = 0.22314...
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_slice(&[1, 2], &[0.8, 0.2]));
        let labels = ExpertLabels {
            values: Tensor::from_slice(&[2, 1, 1, 1], &[1.0, 0.0]),
        };
        let loss = rc_loss(&mut tape, probs, &labels).unwrap();
        let expect = -(0.8f64.ln());
        assert!((tape.value(loss).item() - expect).abs() < 1e-12);
        assert!((expect - 0.2231).abs() < 1e-4);
    }

    #[test]
    fn bce_vanishes_on_perfect_binary_prediction() {
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::from_slice(
            &[2, 2],
            &[1.0 - 1e-9, 1e-9, 1e-9, 1.0 - 1e-9],
        ));
        let labels = ExpertLabels {
            values: Tensor::from_slice(&[2, 1, 1, 2], &[1.0, 0.0, 0.0, 1.0]),
        };
        let loss = rc_loss(&mut tape, probs, &labels).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn load_percentages_conserve_k() {
        let mut gate = Tensor::zeros(&[3, 1, 1, 4]);
        for v in 0..4 {
            gate.data[v] = 1.0; // expert 0 everywhere
        }
        let routing = RoutingTensor {
            values: gate,
            k_active: 1,
        };
        assert_eq!(expert_load(&routing), vec![100.0, 0.0, 0.0]);

        // Monte-Carlo check: uniform logits spread load evenly.
        let mut rng = Rng::new(5);
        let n = 3;
        let nvox = 4096;
        let mut gate = Tensor::zeros(&[n, 16, 16, 16]);
        for v in 0..nvox {
            let logits: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let (idx, _) = topk(&logits, 1).unwrap();
            gate.data[idx[0] * nvox + v] = 1.0;
        }
        let routing = RoutingTensor {
            values: gate,
            k_active: 1,
        };
        let loads = expert_load(&routing);
        let total: f64 = loads.iter().sum();
        assert!((total - 100.0).abs() < 1e-9);
        for l in &loads {
            assert!((l - 100.0 / 3.0).abs() < 5.0, "load {l} far from uniform");
        }
    }

    #[test]
    fn quantile_linear_interpolation() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert_eq!(quantile(&[5.0], 0.5), 5.0);
        assert_eq!(quantile(&[3.0, 1.0], 0.25), 1.5);
    }

    #[test]
    fn router_and_expert_gradients_pass_finite_difference() {
        // Output mean plus classification loss, differentiated w.r.t. the
        // router kernel and one expert kernel; labels held constant.
        let mut rng = Rng::new(6);
        let params = random_params(2, &mut rng);
        let f = Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let mut labels_vals = Tensor::zeros(&[3, 2, 2, 2]);
        for v in 0..8 {
            labels_vals.data[(v % 3) * 8 + v] = 1.0;
        }
        let labels = ExpertLabels {
            values: labels_vals,
        };

        for which in ["router", "expert1"] {
            let params = params.clone();
            let f = f.clone();
            let labels = labels.clone();
            let x0 = match which {
                "router" => params.router_kernel.clone(),
                _ => params.expert_kernels[1].clone(),
            };
            let which = which.to_string();
            let err = finite_diff_check(
                move |tape, x| {
                    let bound = ShmoeBound {
                        expert_kernels: params
                            .expert_kernels
                            .iter()
                            .enumerate()
                            .map(|(i, t)| {
                                if which == "expert1" && i == 1 {
                                    x
                                } else {
                                    tape.constant(t.clone())
                                }
                            })
                            .collect(),
                        expert_biases: params
                            .expert_biases
                            .iter()
                            .map(|t| tape.constant(t.clone()))
                            .collect(),
                        router_kernel: if which == "router" {
                            x
                        } else {
                            tape.constant(params.router_kernel.clone())
                        },
                        router_bias: tape.constant(params.router_bias.clone()),
                        k_active: 1,
                    };
                    let fid = tape.constant(f.clone());
                    let (out, routing) = shmoe_forward(tape, fid, &bound)?;
                    let m = tape.mean_all(out);
                    let rc = rc_loss(tape, routing.dense_probs, &labels)?;
                    tape.add(m, rc)
                },
                &x0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "err = {err}");
        }
    }
}
