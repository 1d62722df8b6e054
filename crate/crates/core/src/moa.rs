//! Mixture-of-attention-heads layer.
//!
//! Each token routes to the `k` most probable of `N` attention experts.
//! Every expert owns its query and output projections while the key and
//! value projections are shared across experts, so adding experts grows the
//! specialized parts only. The layer output is the renormalized-weight sum
//! of the selected experts' attention outputs; unselected experts are never
//! computed.

use std::sync::Arc;

use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{topk, Tensor, TensorError, TensorResult};

/// Host-side parameters of one mixture-of-attention layer.
#[derive(Debug, Clone)]
pub struct MoaParams {
    /// Per-expert query projections, `[d_model, d_head]` each.
    pub wq: Vec<Tensor>,
    /// Shared key projection `[d_model, d_head]`.
    pub wk: Tensor,
    /// Shared value projection `[d_model, d_head]`.
    pub wv: Tensor,
    /// Per-expert output projections, `[d_head, d_model]` each.
    pub wo: Vec<Tensor>,
    /// Routing matrix `[d_model, N]`. `None` routes uniformly with all
    /// experts active, which reduces the layer to plain multi-head
    /// attention with averaged heads.
    pub wg: Option<Tensor>,
    /// Experts selected per token.
    pub k_active: usize,
}

impl MoaParams {
    pub fn init(
        d_model: usize,
        d_head: usize,
        n_experts: usize,
        k_active: usize,
        learned_router: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(k_active >= 1 && k_active <= n_experts);
        let sp = 1.0 / (d_model as f64).sqrt();
        let so = 1.0 / (d_head as f64).sqrt();
        MoaParams {
            wq: (0..n_experts)
                .map(|_| Tensor::randn(&[d_model, d_head], sp, rng))
                .collect(),
            wk: Tensor::randn(&[d_model, d_head], sp, rng),
            wv: Tensor::randn(&[d_model, d_head], sp, rng),
            wo: (0..n_experts)
                .map(|_| Tensor::randn(&[d_head, d_model], so, rng))
                .collect(),
            wg: learned_router.then(|| Tensor::randn(&[d_model, n_experts], sp, rng)),
            k_active: if learned_router { k_active } else { n_experts },
        }
    }

    pub fn n_experts(&self) -> usize {
        self.wq.len()
    }

    pub fn d_model(&self) -> usize {
        self.wk.shape[0]
    }

    pub fn d_head(&self) -> usize {
        self.wk.shape[1]
    }
}

/// Tape binding of [`MoaParams`] for one forward/backward pass.
pub struct MoaBound {
    pub wq: Vec<TensorId>,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: Vec<TensorId>,
    pub wg: Option<TensorId>,
    pub k_active: usize,
    pub d_head: usize,
    pub d_model: usize,
}

impl MoaBound {
    pub fn new(params: &MoaParams, tape: &mut Tape) -> Self {
        MoaBound {
            wq: params.wq.iter().map(|t| tape.leaf(t)).collect(),
            wk: tape.leaf(&params.wk),
            wv: tape.leaf(&params.wv),
            wo: params.wo.iter().map(|t| tape.leaf(t)).collect(),
            wg: params.wg.as_ref().map(|t| tape.leaf(t)),
            k_active: params.k_active,
            d_head: params.d_head(),
            d_model: params.d_model(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.wq.len()
    }
}

/// Routing decision for a batch of tokens: which experts each token selected
/// and the renormalized mixture weights (rows sum to 1).
pub struct TokenRouting {
    /// Per token, `k` distinct expert ids, ascending.
    pub indices: Vec<Vec<usize>>,
    /// `[tokens, k]` tape tensor of renormalized weights.
    pub weights: TensorId,
}

/// Softmax-route every row of `q` over the experts, keep the top `k`, and
/// renormalize the kept probabilities to sum to one per token.
pub fn route_tokens(tape: &mut Tape, q: TensorId, bound: &MoaBound) -> TensorResult<TokenRouting> {
    let tokens = tape.shape(q)[0];
    let n = bound.n_experts();
    let k = bound.k_active;
    match bound.wg {
        Some(wg) => {
            let logits = tape.matmul(q, wg)?;
            let probs = tape.softmax_last(logits)?;
            let mut indices = Vec::with_capacity(tokens);
            let mut flat = Vec::with_capacity(tokens * k);
            {
                let p = tape.value(probs);
                for t in 0..tokens {
                    let row = &p.data[t * n..(t + 1) * n];
                    let (idx, _) = topk(row, k)?;
                    for &e in &idx {
                        flat.push(t * n + e);
                    }
                    indices.push(idx);
                }
            }
            let sel = tape.gather_elems(probs, Arc::new(flat));
            let sel = tape.reshape(sel, &[tokens, k])?;
            let wsum = tape.sum_last_keep(sel)?;
            let rep = tape.repeat_last(wsum, k)?;
            let weights = tape.div(sel, rep)?;
            Ok(TokenRouting { indices, weights })
        }
        None => {
            // Uniform router: all experts active at weight 1/N.
            let indices = vec![(0..n).collect::<Vec<_>>(); tokens];
            let weights = tape.constant(Tensor::full(&[tokens, n], 1.0 / n as f64));
            Ok(TokenRouting { indices, weights })
        }
    }
}

/// Single expert's attention for one query token against a key/value set:
/// `softmax((q W_q_i)(K W_k)^T / sqrt(d_head)) (V W_v) W_o_i`.
pub fn expert_attention(
    tape: &mut Tape,
    q_token: TensorId,
    keys: TensorId,
    values: TensorId,
    expert: usize,
    bound: &MoaBound,
) -> TensorResult<TensorId> {
    if expert >= bound.n_experts() {
        return Err(TensorError::InvalidArgument(format!(
            "expert id {expert} out of {}",
            bound.n_experts()
        )));
    }
    let d_m = bound.d_model;
    let q2 = tape.reshape(q_token, &[1, d_m])?;
    let qp = tape.matmul(q2, bound.wq[expert])?;
    let kp = tape.matmul(keys, bound.wk)?;
    let vp = tape.matmul(values, bound.wv)?;
    let t = tape.shape(keys)[0];
    let scale = 1.0 / (bound.d_head as f64).sqrt();
    let att = tape.grouped_attention(qp, kp, vp, Arc::new(vec![(0, t)]), scale)?;
    let out = tape.matmul(att, bound.wo[expert])?;
    tape.reshape(out, &[d_m])
}

/// Full layer forward over a token set. Each query token attends to the
/// key/value rows of its segment (`segments[t] = (start, end)`); pass `None`
/// to let every token attend to all keys. Only the selected experts are
/// computed: tokens are grouped per expert and dispatched in one batch.
pub fn moa_forward_segmented(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    bound: &MoaBound,
    segments: Option<&[(usize, usize)]>,
) -> TensorResult<(TensorId, TokenRouting)> {
    let (tokens, d_m) = (tape.shape(q)[0], tape.shape(q)[1]);
    if tape.shape(k) != tape.shape(v) {
        return Err(TensorError::ShapeMismatch {
            op: "moa_forward",
            lhs: tape.shape(k).to_vec(),
            rhs: tape.shape(v).to_vec(),
        });
    }
    let t_kv = tape.shape(k)[0];
    let routing = route_tokens(tape, q, bound)?;
    let kp = tape.matmul(k, bound.wk)?;
    let vp = tape.matmul(v, bound.wv)?;
    let scale = 1.0 / (bound.d_head as f64).sqrt();
    let k_act = bound.k_active;

    // Group tokens by selected expert, remembering each token's weight slot.
    let n = bound.n_experts();
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (t, sel) in routing.indices.iter().enumerate() {
        for (slot, &e) in sel.iter().enumerate() {
            groups[e].push((t, slot));
        }
    }

    let mut out = tape.constant(Tensor::zeros(&[tokens, d_m]));
    for (e, group) in groups.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let rows: Arc<Vec<usize>> = Arc::new(group.iter().map(|&(t, _)| t).collect());
        let segs: Arc<Vec<(usize, usize)>> = Arc::new(
            rows.iter()
                .map(|&t| segments.map_or((0, t_kv), |s| s[t]))
                .collect(),
        );
        let qg = tape.gather_rows(q, rows.clone())?;
        let qp = tape.matmul(qg, bound.wq[e])?;
        let att = tape.grouped_attention(qp, kp, vp, segs, scale)?;
        let oe = tape.matmul(att, bound.wo[e])?;
        let w_idx: Arc<Vec<usize>> =
            Arc::new(group.iter().map(|&(t, slot)| t * k_act + slot).collect());
        let w = tape.gather_elems(routing.weights, w_idx);
        let w = tape.reshape(w, &[group.len(), 1])?;
        let w = tape.repeat_last(w, d_m)?;
        let weighted = tape.mul(oe, w)?;
        out = tape.index_add_rows(out, weighted, rows)?;
    }
    Ok((out, routing))
}

/// `y_t = sum_{i in selected(t)} w_{i,t} E_i(q_t, K, V)` over all tokens.
pub fn moa_forward(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    bound: &MoaBound,
) -> TensorResult<(TensorId, TokenRouting)> {
    moa_forward_segmented(tape, q, k, v, bound, None)
}

/// Percentage of tokens that selected each expert; sums to `k * 100`.
pub fn expert_loads(indices: &[Vec<usize>], n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_experts];
    for sel in indices {
        for &e in sel {
            counts[e] += 1;
        }
    }
    let total = indices.len().max(1) as f64;
    counts.iter().map(|&c| 100.0 * c as f64 / total).collect()
}
