//! Deformation fields: warping, composition, stationary-velocity
//! integration, and Jacobian folding analysis.
//!
//! A field stores per-voxel displacements in voxel units as a `[3, d, h, w]`
//! tensor; channel `i` displaces along spatial axis `i`. The map it defines
//! is `x -> x + disp(x)`. Host-side versions live here; the differentiable
//! warp used in training is the tape op built on the same sampling kernel.

use crate::interp::warp_forward;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Dense displacement field `[3, d, h, w]` in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub disp: Tensor,
}

/// Stationary velocity field with the same layout as a displacement field.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub vel: Tensor,
}

impl DeformationField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        DeformationField {
            disp: Tensor::zeros(&[3, dims[0], dims[1], dims[2]]),
        }
    }

    pub fn new(disp: Tensor) -> TensorResult<Self> {
        if disp.shape.len() != 4 || disp.shape[0] != 3 {
            return Err(TensorError::InvalidArgument(format!(
                "deformation field expects shape [3,d,h,w], got {:?}",
                disp.shape
            )));
        }
        if !disp.all_finite() {
            return Err(TensorError::Numeric(
                "deformation field has non-finite values".into(),
            ));
        }
        Ok(DeformationField { disp })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.disp.shape[1], self.disp.shape[2], self.disp.shape[3]]
    }

    pub fn num_voxels(&self) -> usize {
        let [d, h, w] = self.dims();
        d * h * w
    }
}

/// Trilinear warp of a multi-channel volume: `out(x) = vol(x + phi(x))`,
/// border-clamped.
pub fn warp(vol: &Tensor, phi: &DeformationField) -> TensorResult<Tensor> {
    if vol.shape.len() != 4 || vol.shape[1..] != phi.disp.shape[1..] {
        return Err(TensorError::ShapeMismatch {
            op: "warp",
            lhs: vol.shape.clone(),
            rhs: phi.disp.shape.clone(),
        });
    }
    let mut out = vec![0.0; vol.numel()];
    warp_forward(
        &vol.data,
        vol.shape[0],
        phi.dims(),
        &phi.disp.data,
        &mut out,
    );
    Ok(Tensor::new(vol.shape.clone(), out))
}

/// Composition `(a o b)(x) = b(x) + a(x + b(x))`: applying the result warps
/// first by `b`, then by `a`.
pub fn compose(a: &DeformationField, b: &DeformationField) -> TensorResult<DeformationField> {
    if a.dims() != b.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "compose",
            lhs: a.disp.shape.clone(),
            rhs: b.disp.shape.clone(),
        });
    }
    let sampled = warp(&a.disp, b)?;
    let data: Vec<f64> = b
        .disp
        .data
        .iter()
        .zip(&sampled.data)
        .map(|(&bv, &av)| bv + av)
        .collect();
    Ok(DeformationField {
        disp: Tensor::new(a.disp.shape.clone(), data),
    })
}

/// Scaling-and-squaring integration of a stationary velocity field:
/// `phi = v / 2^steps`, then `phi = phi o phi` repeated `steps` times.
pub fn integrate_velocity(v: &VelocityField, steps: u32) -> TensorResult<DeformationField> {
    if steps == 0 {
        return Err(TensorError::InvalidArgument(
            "integrate_velocity needs steps >= 1".into(),
        ));
    }
    let scale = 1.0 / f64::from(1u32 << steps);
    let disp = Tensor::new(
        v.vel.shape.clone(),
        v.vel.data.iter().map(|&x| x * scale).collect(),
    );
    let mut phi = DeformationField::new(disp)?;
    for _ in 0..steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// Percentage of interior voxels where the Jacobian determinant of
/// `x -> x + phi(x)` (forward differences, one-voxel spacing) is
/// non-positive. Boundary voxels are excluded.
pub fn jacobian_folding(phi: &DeformationField) -> f64 {
    let [d, h, w] = phi.dims();
    assert!(d >= 2 && h >= 2 && w >= 2, "jacobian needs extents >= 2");
    let nvox = d * h * w;
    let disp = &phi.disp.data;
    let at = |c: usize, z: usize, y: usize, x: usize| disp[c * nvox + (z * h + y) * w + x];
    let mut folded = 0usize;
    let mut total = 0usize;
    for z in 0..d - 1 {
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                // J[c][axis] = d(psi_c)/d(axis), psi = identity + disp.
                let mut j = [[0.0f64; 3]; 3];
                for c in 0..3 {
                    j[c][0] = at(c, z + 1, y, x) - at(c, z, y, x);
                    j[c][1] = at(c, z, y + 1, x) - at(c, z, y, x);
                    j[c][2] = at(c, z, y, x + 1) - at(c, z, y, x);
                    j[c][c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                if det <= 0.0 {
                    folded += 1;
                }
                total += 1;
            }
        }
    }
    100.0 * folded as f64 / total as f64
}

/// Differentiable twin of [`compose`] on the tape.
pub fn compose_tape(tape: &mut Tape, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
    let sampled = tape.warp(a, b)?;
    tape.add(b, sampled)
}

/// Differentiable twin of [`integrate_velocity`] on the tape.
pub fn integrate_tape(tape: &mut Tape, vel: TensorId, steps: u32) -> TensorResult<TensorId> {
    if steps == 0 {
        return Err(TensorError::InvalidArgument(
            "integrate_tape needs steps >= 1".into(),
        ));
    }
    let mut phi = tape.scale(vel, 1.0 / f64::from(1u32 << steps));
    for _ in 0..steps {
        phi = compose_tape(tape, phi, phi)?;
    }
    Ok(phi)
}

/// Trilinear upsampling of a displacement field to double resolution, with
/// displacement values rescaled into the finer grid's voxel units.
pub fn upsample_field_tape(tape: &mut Tape, phi: TensorId) -> TensorResult<TensorId> {
    let up = tape.upsample2(phi)?;
    Ok(tape.scale(up, 2.0))
}

/// Separable Gaussian smoothing of every channel of a `[c, d, h, w]` tensor,
/// truncated at three standard deviations, border-clamped.
pub fn gaussian_smooth(t: &Tensor, sigma: f64) -> Tensor {
    assert_eq!(t.shape.len(), 4);
    if sigma <= 0.0 {
        return t.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (c, d, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    let nvox = d * h * w;
    let mut cur = t.data.clone();
    for axis in 0..3 {
        let extent = [d, h, w][axis] as isize;
        let mut next = vec![0.0; cur.len()];
        for ch in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let pos = [z as isize, y as isize, x as isize];
                        let mut acc = 0.0;
                        for (ki, &kv) in kernel.iter().enumerate() {
                            let mut p = pos;
                            p[axis] = (p[axis] + ki as isize - radius).clamp(0, extent - 1);
                            acc += kv
                                * cur[ch * nvox
                                    + ((p[0] as usize * h + p[1] as usize) * w + p[2] as usize)];
                        }
                        next[ch * nvox + (z * h + y) * w + x] = acc;
                    }
                }
            }
        }
        cur = next;
    }
    Tensor::new(t.shape.clone(), cur)
}
