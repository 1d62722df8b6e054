//! Dual-stream hierarchical encoder with windowed expert attention.
//!
//! Both volumes of a registration pair run through the same parameters. The
//! stem embeds non-overlapping patches; each level applies windowed
//! transformer blocks whose attention is the mixture-of-attention-heads
//! layer (alternating plain and cyclically shifted windows), then halves the
//! spatial extents and doubles the channels by patch merging. The per-level
//! token maps form the feature pyramid the decoder consumes.

use std::sync::Arc;

use crate::moa::{moa_forward_segmented, MoaBound, MoaParams};
use crate::params::Binder;
use crate::rng::Rng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Transformer blocks per level; also fixes the level count.
    pub depths: Vec<usize>,
    /// Attention window edge in tokens, clamped per level to the extent.
    pub window: usize,
    pub moa_experts: usize,
    pub moa_active: usize,
    /// `false` replaces expert routing by a uniform mix over `moa_active`
    /// heads (the plain multi-head ablation).
    pub use_moa: bool,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            patch_size: 2,
            embed_dim: 16,
            depths: vec![2, 2, 2, 2],
            window: 4,
            moa_experts: 12,
            moa_active: 4,
            use_moa: true,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.depths.len()
    }

    /// Channel width at level `l` (0-based): doubles per level.
    pub fn level_dim(&self, l: usize) -> usize {
        self.embed_dim << l
    }

    pub fn head_dim(&self, l: usize) -> usize {
        (self.level_dim(l) / 4).max(2)
    }

    /// Attention experts at a level: routed mixture or uniform heads.
    fn experts_at(&self) -> (usize, usize, bool) {
        if self.use_moa {
            (self.moa_experts, self.moa_active, true)
        } else {
            (self.moa_active, self.moa_active, false)
        }
    }

    /// Token-grid extents at level `l` for an input of `dims`.
    pub fn level_dims(&self, dims: [usize; 3], l: usize) -> [usize; 3] {
        let s = self.patch_size << l;
        [dims[0] / s, dims[1] / s, dims[2] / s]
    }

    pub fn validate(&self, dims: [usize; 3]) -> TensorResult<()> {
        let div = self.patch_size << (self.levels() - 1);
        for &d in &dims {
            if d % div != 0 {
                return Err(TensorError::InvalidArgument(format!(
                    "input extent {d} not divisible by patch*2^(levels-1) = {div}"
                )));
            }
        }
        for l in 0..self.levels() {
            let ld = self.level_dims(dims, l);
            let ws = self.window.min(ld[0]).min(ld[1]).min(ld[2]);
            for &d in &ld {
                if d % ws != 0 {
                    return Err(TensorError::InvalidArgument(format!(
                        "level {l} extent {d} not divisible by effective window {ws}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One transformer block: pre-norm attention with residual, pre-norm
/// two-layer feed-forward with residual.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub attn: MoaParams,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

impl BlockParams {
    fn init(dim: usize, head_dim: usize, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let (n, k, learned) = cfg.experts_at();
        let hidden = cfg.mlp_ratio * dim;
        BlockParams {
            norm1_gamma: Tensor::full(&[dim], 1.0),
            norm1_beta: Tensor::zeros(&[dim]),
            attn: MoaParams::init(dim, head_dim, n, k, learned, rng),
            norm2_gamma: Tensor::full(&[dim], 1.0),
            norm2_beta: Tensor::zeros(&[dim]),
            ffn_w1: Tensor::randn(&[dim, hidden], 1.0 / (dim as f64).sqrt(), rng),
            ffn_b1: Tensor::zeros(&[hidden]),
            ffn_w2: Tensor::randn(&[hidden, dim], 1.0 / (hidden as f64).sqrt(), rng),
            ffn_b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.norm1.gamma"), &mut self.norm1_gamma);
        f(format!("{prefix}.norm1.beta"), &mut self.norm1_beta);
        for (i, t) in self.attn.wq.iter_mut().enumerate() {
            f(format!("{prefix}.attn.wq{i}"), t);
        }
        f(format!("{prefix}.attn.wk"), &mut self.attn.wk);
        f(format!("{prefix}.attn.wv"), &mut self.attn.wv);
        for (i, t) in self.attn.wo.iter_mut().enumerate() {
            f(format!("{prefix}.attn.wo{i}"), t);
        }
        if let Some(wg) = self.attn.wg.as_mut() {
            f(format!("{prefix}.attn.wg"), wg);
        }
        f(format!("{prefix}.norm2.gamma"), &mut self.norm2_gamma);
        f(format!("{prefix}.norm2.beta"), &mut self.norm2_beta);
        f(format!("{prefix}.ffn.w1"), &mut self.ffn_w1);
        f(format!("{prefix}.ffn.b1"), &mut self.ffn_b1);
        f(format!("{prefix}.ffn.w2"), &mut self.ffn_w2);
        f(format!("{prefix}.ffn.b2"), &mut self.ffn_b2);
    }
}

pub struct BlockBound {
    pub norm1_gamma: TensorId,
    pub norm1_beta: TensorId,
    pub attn: MoaBound,
    pub norm2_gamma: TensorId,
    pub norm2_beta: TensorId,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
}

impl BlockBound {
    fn new(p: &BlockParams, prefix: &str, tape: &mut Tape, binder: &mut Binder) -> Self {
        BlockBound {
            norm1_gamma: binder.leaf(tape, &format!("{prefix}.norm1.gamma"), &p.norm1_gamma),
            norm1_beta: binder.leaf(tape, &format!("{prefix}.norm1.beta"), &p.norm1_beta),
            attn: MoaBound {
                wq: p
                    .attn
                    .wq
                    .iter()
                    .enumerate()
                    .map(|(i, t)| binder.leaf(tape, &format!("{prefix}.attn.wq{i}"), t))
                    .collect(),
                wk: binder.leaf(tape, &format!("{prefix}.attn.wk"), &p.attn.wk),
                wv: binder.leaf(tape, &format!("{prefix}.attn.wv"), &p.attn.wv),
                wo: p
                    .attn
                    .wo
                    .iter()
                    .enumerate()
                    .map(|(i, t)| binder.leaf(tape, &format!("{prefix}.attn.wo{i}"), t))
                    .collect(),
                wg: p
                    .attn
                    .wg
                    .as_ref()
                    .map(|wg| binder.leaf(tape, &format!("{prefix}.attn.wg"), wg)),
                k_active: p.attn.k_active,
                d_head: p.attn.d_head(),
                d_model: p.attn.d_model(),
            },
            norm2_gamma: binder.leaf(tape, &format!("{prefix}.norm2.gamma"), &p.norm2_gamma),
            norm2_beta: binder.leaf(tape, &format!("{prefix}.norm2.beta"), &p.norm2_beta),
            ffn_w1: binder.leaf(tape, &format!("{prefix}.ffn.w1"), &p.ffn_w1),
            ffn_b1: binder.leaf(tape, &format!("{prefix}.ffn.b1"), &p.ffn_b1),
            ffn_w2: binder.leaf(tape, &format!("{prefix}.ffn.w2"), &p.ffn_w2),
            ffn_b2: binder.leaf(tape, &format!("{prefix}.ffn.b2"), &p.ffn_b2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LevelParams {
    pub blocks: Vec<BlockParams>,
    /// Standardization of this level's pyramid output, keeping feature
    /// magnitudes bounded for the decoder heads.
    pub out_gamma: Tensor,
    pub out_beta: Tensor,
    /// Patch-merging reduction `[8c, 2c]` to the next level, absent at the top.
    pub merge: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub levels: Vec<LevelParams>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let pe_in = cfg.in_channels * cfg.patch_size.pow(3);
        let mut levels = Vec::new();
        for l in 0..cfg.levels() {
            let dim = cfg.level_dim(l);
            let blocks = (0..cfg.depths[l])
                .map(|_| BlockParams::init(dim, cfg.head_dim(l), cfg, rng))
                .collect();
            let merge = (l + 1 < cfg.levels())
                .then(|| Tensor::randn(&[8 * dim, 2 * dim], 1.0 / (8.0 * dim as f64).sqrt(), rng));
            levels.push(LevelParams {
                blocks,
                out_gamma: Tensor::full(&[dim], 1.0),
                out_beta: Tensor::zeros(&[dim]),
                merge,
            });
        }
        EncoderParams {
            cfg: cfg.clone(),
            patch_weight: Tensor::randn(&[pe_in, cfg.embed_dim], 1.0 / (pe_in as f64).sqrt(), rng),
            patch_bias: Tensor::zeros(&[cfg.embed_dim]),
            levels,
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("enc.patch.weight".into(), &mut self.patch_weight);
        f("enc.patch.bias".into(), &mut self.patch_bias);
        for (l, level) in self.levels.iter_mut().enumerate() {
            for (b, block) in level.blocks.iter_mut().enumerate() {
                block.visit(&format!("enc.l{l}.b{b}"), f);
            }
            f(format!("enc.l{l}.out_norm.gamma"), &mut level.out_gamma);
            f(format!("enc.l{l}.out_norm.beta"), &mut level.out_beta);
            if let Some(m) = level.merge.as_mut() {
                f(format!("enc.l{l}.merge"), m);
            }
        }
    }
}

struct LevelBound {
    blocks: Vec<BlockBound>,
    out_gamma: TensorId,
    out_beta: TensorId,
    merge: Option<TensorId>,
}

pub struct EncoderBound {
    cfg: EncoderConfig,
    patch_weight: TensorId,
    patch_bias: TensorId,
    levels: Vec<LevelBound>,
}

impl EncoderBound {
    pub fn new(p: &EncoderParams, tape: &mut Tape, binder: &mut Binder) -> Self {
        let patch_weight = binder.leaf(tape, "enc.patch.weight", &p.patch_weight);
        let patch_bias = binder.leaf(tape, "enc.patch.bias", &p.patch_bias);
        let levels = p
            .levels
            .iter()
            .enumerate()
            .map(|(l, level)| {
                let blocks = level
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(b, bp)| BlockBound::new(bp, &format!("enc.l{l}.b{b}"), tape, binder))
                    .collect();
                LevelBound {
                    blocks,
                    out_gamma: binder.leaf(
                        tape,
                        &format!("enc.l{l}.out_norm.gamma"),
                        &level.out_gamma,
                    ),
                    out_beta: binder.leaf(
                        tape,
                        &format!("enc.l{l}.out_norm.beta"),
                        &level.out_beta,
                    ),
                    merge: level
                        .merge
                        .as_ref()
                        .map(|m| binder.leaf(tape, &format!("enc.l{l}.merge"), m)),
                }
            })
            .collect();
        EncoderBound {
            cfg: p.cfg.clone(),
            patch_weight,
            patch_bias,
            levels,
        }
    }
}

/// Token map of one pyramid level: `[tokens, channels]` in z-major spatial
/// order over `dims`.
pub struct LevelFeatures {
    pub tokens: TensorId,
    pub dims: [usize; 3],
    pub channels: usize,
}

/// Selection statistics of one attention layer.
pub struct AttnDiag {
    pub layer: String,
    pub indices: Vec<Vec<usize>>,
    pub n_experts: usize,
}

/// Window partition of a token grid: the permutation (partitioned row ->
/// source row), its inverse, and the per-row key/value segment (each
/// window's contiguous span).
pub type WindowPartition = (Arc<Vec<usize>>, Arc<Vec<usize>>, Vec<(usize, usize)>);

/// Partition a z-major token grid into contiguous windows; `shift`
/// cyclically rotates the grid before partitioning.
pub fn window_partition(dims: [usize; 3], ws: usize, shift: usize) -> WindowPartition {
    let [d, h, w] = dims;
    let tokens = d * h * w;
    let wsz = ws * ws * ws;
    let mut perm = Vec::with_capacity(tokens);
    for wz in 0..d / ws {
        for wy in 0..h / ws {
            for wx in 0..w / ws {
                for iz in 0..ws {
                    for iy in 0..ws {
                        for ix in 0..ws {
                            let z = (wz * ws + iz + shift) % d;
                            let y = (wy * ws + iy + shift) % h;
                            let x = (wx * ws + ix + shift) % w;
                            perm.push((z * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    let mut inv = vec![0usize; tokens];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let segs = (0..tokens)
        .map(|r| (r / wsz * wsz, (r / wsz + 1) * wsz))
        .collect();
    (Arc::new(perm), Arc::new(inv), segs)
}

/// Non-overlapping patch embedding: each `patch^3` block of the volume is
/// flattened (channel-major) and linearly projected.
pub fn patch_embed(
    tape: &mut Tape,
    vol: TensorId,
    weight: TensorId,
    bias: TensorId,
    patch: usize,
) -> TensorResult<(TensorId, [usize; 3])> {
    let shape = tape.shape(vol).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::InvalidArgument(format!(
            "patch_embed expects [c,d,h,w], got {shape:?}"
        )));
    }
    let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if d % patch != 0 || h % patch != 0 || w % patch != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "extents {:?} not divisible by patch {patch}",
            &shape[1..]
        )));
    }
    let grid = [d / patch, h / patch, w / patch];
    let tokens = grid[0] * grid[1] * grid[2];
    let row_len = c * patch * patch * patch;
    let mut idx = Vec::with_capacity(tokens * row_len);
    for tz in 0..grid[0] {
        for ty in 0..grid[1] {
            for tx in 0..grid[2] {
                for ch in 0..c {
                    for dz in 0..patch {
                        for dy in 0..patch {
                            for dx in 0..patch {
                                let z = tz * patch + dz;
                                let y = ty * patch + dy;
                                let x = tx * patch + dx;
                                idx.push(((ch * d + z) * h + y) * w + x);
                            }
                        }
                    }
                }
            }
        }
    }
    let flat = tape.gather_elems(vol, Arc::new(idx));
    let rows = tape.reshape(flat, &[tokens, row_len])?;
    let proj = tape.matmul(rows, weight)?;
    let out = tape.add_row_bias(proj, bias)?;
    Ok((out, grid))
}

/// Concatenate each 2x2x2 token neighborhood and linearly reduce `8c -> 2c`.
fn patch_merge(
    tape: &mut Tape,
    tokens: TensorId,
    dims: [usize; 3],
    channels: usize,
    reduce: TensorId,
) -> TensorResult<(TensorId, [usize; 3])> {
    let [d, h, w] = dims;
    let coarse = [d / 2, h / 2, w / 2];
    let n_out = coarse[0] * coarse[1] * coarse[2];
    let mut idx = Vec::with_capacity(n_out * 8 * channels);
    for tz in 0..coarse[0] {
        for ty in 0..coarse[1] {
            for tx in 0..coarse[2] {
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let fine = ((tz * 2 + dz) * h + (ty * 2 + dy)) * w + (tx * 2 + dx);
                            for ch in 0..channels {
                                idx.push(fine * channels + ch);
                            }
                        }
                    }
                }
            }
        }
    }
    let flat = tape.gather_elems(tokens, Arc::new(idx));
    let rows = tape.reshape(flat, &[n_out, 8 * channels])?;
    let out = tape.matmul(rows, reduce)?;
    Ok((out, coarse))
}

/// One windowed attention block over a token grid.
pub fn windowed_block(
    tape: &mut Tape,
    x: TensorId,
    dims: [usize; 3],
    window: usize,
    shift: bool,
    bound: &BlockBound,
) -> TensorResult<(TensorId, Vec<Vec<usize>>)> {
    let ws = window.min(dims[0]).min(dims[1]).min(dims[2]);
    let shift_by = if shift { ws / 2 } else { 0 };
    let (perm, inv, segs) = window_partition(dims, ws, shift_by);

    let h = tape.layer_norm(x, bound.norm1_gamma, bound.norm1_beta, 1e-5)?;
    let hp = tape.gather_rows(h, perm.clone())?;
    let (attn_p, routing) = moa_forward_segmented(tape, hp, hp, hp, &bound.attn, Some(&segs))?;
    let attn = tape.gather_rows(attn_p, inv.clone())?;
    let x = tape.add(x, attn)?;

    let h2 = tape.layer_norm(x, bound.norm2_gamma, bound.norm2_beta, 1e-5)?;
    let f1 = tape.matmul(h2, bound.ffn_w1)?;
    let f1 = tape.add_row_bias(f1, bound.ffn_b1)?;
    let a = tape.gelu(f1);
    let f2 = tape.matmul(a, bound.ffn_w2)?;
    let f2 = tape.add_row_bias(f2, bound.ffn_b2)?;
    let out = tape.add(x, f2)?;

    // Report routing in source token order.
    let mut indices = vec![Vec::new(); routing.indices.len()];
    for (row, sel) in routing.indices.into_iter().enumerate() {
        indices[perm[row]] = sel;
    }
    Ok((out, indices))
}

/// Run the full encoder on one volume, producing every pyramid level.
pub fn encoder_forward(
    tape: &mut Tape,
    bound: &EncoderBound,
    vol: TensorId,
) -> TensorResult<(Vec<LevelFeatures>, Vec<AttnDiag>)> {
    let cfg = &bound.cfg;
    let (mut tokens, mut dims) = patch_embed(
        tape,
        vol,
        bound.patch_weight,
        bound.patch_bias,
        cfg.patch_size,
    )?;
    let mut channels = cfg.embed_dim;
    let mut pyramid = Vec::new();
    let mut diags = Vec::new();
    for (l, level) in bound.levels.iter().enumerate() {
        for (b, block) in level.blocks.iter().enumerate() {
            let shift = b % 2 == 1;
            let (out, indices) = windowed_block(tape, tokens, dims, cfg.window, shift, block)?;
            tokens = out;
            diags.push(AttnDiag {
                layer: format!("enc.l{l}.b{b}"),
                indices,
                n_experts: block.attn.n_experts(),
            });
        }
        let normed = tape.layer_norm(tokens, level.out_gamma, level.out_beta, 1e-5)?;
        pyramid.push(LevelFeatures {
            tokens: normed,
            dims,
            channels,
        });
        if let Some(reduce) = level.merge {
            let (merged, coarse) = patch_merge(tape, tokens, dims, channels, reduce)?;
            tokens = merged;
            dims = coarse;
            channels *= 2;
        }
    }
    Ok((pyramid, diags))
}

/// Both streams' pyramids and attention diagnostics.
pub type PairFeatures = (
    Vec<LevelFeatures>,
    Vec<LevelFeatures>,
    Vec<AttnDiag>,
    Vec<AttnDiag>,
);

/// Encode a registration pair with shared parameters: one binding, two
/// applications.
pub fn encode_pair(
    tape: &mut Tape,
    bound: &EncoderBound,
    moving: TensorId,
    fixed: TensorId,
) -> TensorResult<PairFeatures> {
    if tape.shape(moving) != tape.shape(fixed) {
        return Err(TensorError::ShapeMismatch {
            op: "encode_pair",
            lhs: tape.shape(moving).to_vec(),
            rhs: tape.shape(fixed).to_vec(),
        });
    }
    let (pyr_m, diag_m) = encoder_forward(tape, bound, moving)?;
    let (pyr_f, diag_f) = encoder_forward(tape, bound, fixed)?;
    Ok((pyr_m, pyr_f, diag_m, diag_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check_at;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            in_channels: 1,
            patch_size: 2,
            embed_dim: 4,
            depths: vec![1, 1],
            window: 2,
            moa_experts: 3,
            moa_active: 2,
            use_moa: true,
            mlp_ratio: 2,
        }
    }

    fn bind(params: &EncoderParams, tape: &mut Tape) -> EncoderBound {
        let mut binder = Binder::new();
        EncoderBound::new(params, tape, &mut binder)
    }

    #[test]
    fn shift_then_unshift_is_identity() {
        let dims = [4, 4, 4];
        let (perm, inv, _) = window_partition(dims, 2, 1);
        for i in 0..64 {
            assert_eq!(perm[inv[i]], i);
            assert_eq!(inv[perm[i]], i);
        }
    }

    #[test]
    fn patch_embed_matches_reshape_matmul_oracle() {
        let mut rng = Rng::new(1);
        let vol = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        let weight = Tensor::randn(&[8, 3], 1.0, &mut rng);
        let bias = Tensor::randn(&[3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(vol.clone());
        let wid = tape.constant(weight.clone());
        let bid = tape.constant(bias.clone());
        let (out, grid) = patch_embed(&mut tape, v, wid, bid, 2).unwrap();
        assert_eq!(grid, [2, 2, 2]);
        // Oracle: gather each 2^3 block by hand and multiply.
        let got = &tape.value(out).data;
        for tz in 0..2 {
            for ty in 0..2 {
                for tx in 0..2 {
                    let mut row = Vec::new();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                row.push(
                                    vol.data[((tz * 2 + dz) * 4 + (ty * 2 + dy)) * 4 + tx * 2 + dx],
                                );
                            }
                        }
                    }
                    for e in 0..3 {
                        let mut acc = bias.data[e];
                        for (p, rv) in row.iter().enumerate() {
                            acc += rv * weight.data[p * 3 + e];
                        }
                        let t = (tz * 2 + ty) * 2 + tx;
                        assert!((got[t * 3 + e] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn patch_embed_constant_volume_gives_identical_tokens() {
        let mut rng = Rng::new(2);
        let weight = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let bias = Tensor::randn(&[4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[1, 4, 4, 4], 0.37));
        let wid = tape.constant(weight);
        let bid = tape.constant(bias);
        let (out, _) = patch_embed(&mut tape, v, wid, bid, 2).unwrap();
        let data = &tape.value(out).data;
        for t in 1..8 {
            assert_eq!(&data[..4], &data[t * 4..(t + 1) * 4]);
        }
    }

    #[test]
    fn patch_embed_zero_weights_leave_only_bias() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[1, 2, 2, 2], 9.0));
        let wid = tape.constant(Tensor::zeros(&[8, 2]));
        let bid = tape.constant(Tensor::from_slice(&[2], &[1.5, -2.5]));
        let (out, _) = patch_embed(&mut tape, v, wid, bid, 2).unwrap();
        assert_eq!(tape.value(out).data, vec![1.5, -2.5]);
    }

    #[test]
    fn patch_embed_rejects_indivisible_extents() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let wid = tape.constant(Tensor::zeros(&[8, 2]));
        let bid = tape.constant(Tensor::zeros(&[2]));
        assert!(patch_embed(&mut tape, v, wid, bid, 2).is_err());
    }

    #[test]
    fn zero_input_passes_block_unchanged() {
        let mut rng = Rng::new(3);
        let mut block = BlockParams::init(4, 2, &toy_cfg(), &mut rng);
        for wo in &mut block.attn.wo {
            *wo = Tensor::zeros(&[2, 4]);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let bound = BlockBound::new(&block, "b", &mut tape, &mut binder);
        let x = tape.constant(Tensor::zeros(&[8, 4]));
        let (out, _) = windowed_block(&mut tape, x, [2, 2, 2], 2, false, &bound).unwrap();
        assert!(tape.value(out).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unshifted_windows_are_local() {
        // Two windows along the last axis: editing window B's tokens never
        // changes window A's output.
        let mut rng = Rng::new(4);
        let block = BlockParams::init(4, 2, &toy_cfg(), &mut rng);
        let dims = [2, 2, 4];
        let base = Tensor::randn(&[16, 4], 1.0, &mut rng);
        let mut edited = base.clone();
        for z in 0..2 {
            for y in 0..2 {
                for x in 2..4 {
                    let t = (z * 2 + y) * 4 + x;
                    for c in 0..4 {
                        edited.data[t * 4 + c] += rng.normal();
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let bound = BlockBound::new(&block, "b", &mut tape, &mut binder);
        let xa = tape.constant(base);
        let xb = tape.constant(edited);
        let (oa, _) = windowed_block(&mut tape, xa, dims, 2, false, &bound).unwrap();
        let (ob, _) = windowed_block(&mut tape, xb, dims, 2, false, &bound).unwrap();
        let (da, db) = (&tape.value(oa).data, &tape.value(ob).data);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let t = (z * 2 + y) * 4 + x;
                    for c in 0..4 {
                        assert_eq!(da[t * 4 + c], db[t * 4 + c], "window A changed at {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn pyramid_extents_halve_and_channels_double() {
        let cfg = EncoderConfig {
            embed_dim: 4,
            ..EncoderConfig::default()
        };
        let mut rng = Rng::new(5);
        let params = EncoderParams::init(&cfg, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape);
        let vol = tape.constant(Tensor::randn(&[1, 32, 32, 32], 1.0, &mut rng));
        let (pyr, diags) = encoder_forward(&mut tape, &bound, vol).unwrap();
        assert_eq!(pyr.len(), 4);
        let expect = [
            ([16, 16, 16], 4),
            ([8, 8, 8], 8),
            ([4, 4, 4], 16),
            ([2, 2, 2], 32),
        ];
        for (lvl, (dims, ch)) in pyr.iter().zip(expect) {
            assert_eq!(lvl.dims, dims);
            assert_eq!(lvl.channels, ch);
            assert_eq!(tape.shape(lvl.tokens), &[dims[0] * dims[1] * dims[2], ch]);
        }
        assert_eq!(diags.len(), 8);
    }

    #[test]
    fn encode_pair_shares_parameters_exactly() {
        let cfg = toy_cfg();
        let mut rng = Rng::new(6);
        let params = EncoderParams::init(&cfg, &mut rng);
        let a = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape);
        let aid = tape.constant(a);
        let bid = tape.constant(b);
        let (pyr_ab_m, pyr_ab_f, _, _) = encode_pair(&mut tape, &bound, aid, bid).unwrap();
        let (pyr_ba_m, pyr_ba_f, _, _) = encode_pair(&mut tape, &bound, bid, aid).unwrap();
        for l in 0..2 {
            assert_eq!(
                tape.value(pyr_ab_m[l].tokens).data,
                tape.value(pyr_ba_f[l].tokens).data,
                "swap asymmetry at level {l}"
            );
            assert_eq!(
                tape.value(pyr_ab_f[l].tokens).data,
                tape.value(pyr_ba_m[l].tokens).data
            );
        }
    }

    #[test]
    fn encode_pair_rejects_mismatched_shapes() {
        let cfg = toy_cfg();
        let mut rng = Rng::new(8);
        let params = EncoderParams::init(&cfg, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&params, &mut tape);
        let a = tape.constant(Tensor::zeros(&[1, 8, 8, 8]));
        let b = tape.constant(Tensor::zeros(&[1, 8, 8, 4]));
        assert!(matches!(
            encode_pair(&mut tape, &bound, a, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encoder_gradient_reaches_patch_embedding() {
        // Scalar loss on the coarsest level's features, differentiated with
        // respect to the patch-embedding weight on an 8^3 toy.
        let cfg = toy_cfg();
        let mut rng = Rng::new(7);
        let params = EncoderParams::init(&cfg, &mut rng);
        let vol = Tensor::randn(&[1, 8, 8, 8], 0.5, &mut rng);
        let x0 = params.patch_weight.clone();
        let elements: Vec<usize> = (0..x0.numel()).collect();
        let err = finite_diff_check_at(
            move |tape, x| {
                let mut binder = Binder::new();
                let mut bound = EncoderBound::new(&params, tape, &mut binder);
                bound.patch_weight = x;
                let v = tape.constant(vol.clone());
                let (pyr, _) = encoder_forward(tape, &bound, v)?;
                let sq = tape.mul(pyr[1].tokens, pyr[1].tokens)?;
                Ok(tape.mean_all(sq))
            },
            &x0,
            1e-5,
            &elements,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
