//! Direct 3D cross-correlation kernels.
//!
//! Stride is always 1 and padding is symmetric zero padding of (s-1)/2, so
//! spatial extents are preserved. Loops run tap-major (kernel element outer,
//! contiguous voxel rows inner) for throughput, but each output element still
//! accumulates its terms in ascending (channel, kd, kh, kw) order with the
//! bias added last; tests compare against a separately written voxel-major
//! reference with the same order and expect identical bits. Zero-weight taps
//! are skipped.

/// Valid output range along one axis for a tap offset `k - p`: returns
/// `(out_lo, out_hi)` such that `in = out + k - p` stays in bounds.
#[inline]
fn tap_range(extent: usize, k: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = (extent + p).saturating_sub(k).min(extent);
    (lo, hi)
}

/// Forward pass. `input` is `[c_in, d, h, w]`, `kernel` is
/// `[c_out, c_in, s, s, s]`, `bias` is `[c_out]`; output is `[c_out, d, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward(
    input: &[f64],
    c_in: usize,
    dims: [usize; 3],
    kernel: &[f64],
    c_out: usize,
    s: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    let [d, h, w] = dims;
    let p = (s - 1) / 2;
    let vol = d * h * w;
    for o in 0..c_out {
        let out_o = &mut out[o * vol..(o + 1) * vol];
        out_o.fill(0.0);
        for c in 0..c_in {
            let in_c = &input[c * vol..(c + 1) * vol];
            let ker_c = &kernel[(o * c_in + c) * s * s * s..(o * c_in + c + 1) * s * s * s];
            for kd in 0..s {
                let (zlo, zhi) = tap_range(d, kd, p);
                for kh in 0..s {
                    let (ylo, yhi) = tap_range(h, kh, p);
                    for kw in 0..s {
                        let kval = ker_c[(kd * s + kh) * s + kw];
                        if kval == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = tap_range(w, kw, p);
                        if xlo >= xhi {
                            continue;
                        }
                        for z in zlo..zhi {
                            let iz = z + kd - p;
                            for y in ylo..yhi {
                                let iy = y + kh - p;
                                let orow = (z * h + y) * w;
                                // xlo + kw >= p by construction of the range.
                                let ilo = (iz * h + iy) * w + xlo + kw - p;
                                let dst = &mut out_o[orow + xlo..orow + xhi];
                                let src = &in_c[ilo..ilo + xhi - xlo];
                                for (a, &b) in dst.iter_mut().zip(src) {
                                    *a += kval * b;
                                }
                            }
                        }
                    }
                }
            }
        }
        for v in out_o.iter_mut() {
            *v += bias[o];
        }
    }
}

/// Backward pass: accumulates into `d_input`, `d_kernel` and `d_bias`
/// (any of which may be empty slices to skip that gradient).
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    grad_out: &[f64],
    input: &[f64],
    c_in: usize,
    dims: [usize; 3],
    kernel: &[f64],
    c_out: usize,
    s: usize,
    d_input: &mut [f64],
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
) {
    let [d, h, w] = dims;
    let p = (s - 1) / 2;
    let vol = d * h * w;
    let want_input = !d_input.is_empty();
    let want_kernel = !d_kernel.is_empty();
    let want_bias = !d_bias.is_empty();
    for o in 0..c_out {
        let g_o = &grad_out[o * vol..(o + 1) * vol];
        if want_bias {
            d_bias[o] += g_o.iter().sum::<f64>();
        }
        if !want_input && !want_kernel {
            continue;
        }
        for c in 0..c_in {
            let in_c = &input[c * vol..(c + 1) * vol];
            let base_ker = (o * c_in + c) * s * s * s;
            for kd in 0..s {
                let (zlo, zhi) = tap_range(d, kd, p);
                for kh in 0..s {
                    let (ylo, yhi) = tap_range(h, kh, p);
                    for kw in 0..s {
                        let (xlo, xhi) = tap_range(w, kw, p);
                        if xlo >= xhi {
                            continue;
                        }
                        let kidx = base_ker + (kd * s + kh) * s + kw;
                        let kval = kernel[kidx];
                        let mut kgrad = 0.0;
                        for z in zlo..zhi {
                            let iz = z + kd - p;
                            for y in ylo..yhi {
                                let iy = y + kh - p;
                                let orow = (z * h + y) * w;
                                // xlo + kw >= p by construction of the range.
                                let ilo = (iz * h + iy) * w + xlo + kw - p;
                                let run = xhi - xlo;
                                let g_row = &g_o[orow + xlo..orow + xhi];
                                if want_kernel {
                                    let src = &in_c[ilo..ilo + run];
                                    for (&g, &b) in g_row.iter().zip(src) {
                                        kgrad += g * b;
                                    }
                                }
                                if want_input && kval != 0.0 {
                                    let dst = &mut d_input[c * vol + ilo..c * vol + ilo + run];
                                    for (a, &g) in dst.iter_mut().zip(g_row) {
                                        *a += kval * g;
                                    }
                                }
                            }
                        }
                        if want_kernel {
                            d_kernel[kidx] += kgrad;
                        }
                    }
                }
            }
        }
    }
}
