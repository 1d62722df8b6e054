//! Registration evaluation: volumetric overlap, surface distance, folding.

use std::fmt;

use crate::volume::SegVolume;
use crate::warpfield::DeformationField;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    ShapeMismatch(String),
    /// A surface metric over an empty mask is undefined.
    EmptyMask {
        label: u16,
    },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            MetricError::EmptyMask { label } => {
                write!(f, "metric undefined: label {label} has an empty mask")
            }
        }
    }
}

impl std::error::Error for MetricError {}

/// Per-label overlap `2|A∩B| / (|A|+|B|)` in [0,1]. Labels empty in both
/// volumes report `None` (absent) rather than a perfect score.
pub fn dice(
    seg_a: &SegVolume,
    seg_b: &SegVolume,
    labels: &[u16],
) -> Result<Vec<(u16, Option<f64>)>, MetricError> {
    if seg_a.dims != seg_b.dims {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            seg_a.dims, seg_b.dims
        )));
    }
    Ok(labels
        .iter()
        .map(|&label| {
            let mut a = 0usize;
            let mut b = 0usize;
            let mut both = 0usize;
            for (&la, &lb) in seg_a.labels.iter().zip(&seg_b.labels) {
                let ia = la == label;
                let ib = lb == label;
                a += usize::from(ia);
                b += usize::from(ib);
                both += usize::from(ia && ib);
            }
            if a + b == 0 {
                (label, None)
            } else {
                (label, Some(2.0 * both as f64 / (a + b) as f64))
            }
        })
        .collect())
}

/// Mean Dice over present labels, or `None` if every label is absent.
pub fn mean_dice(scores: &[(u16, Option<f64>)]) -> Option<f64> {
    let present: Vec<f64> = scores.iter().filter_map(|&(_, s)| s).collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Surface voxels of a label: labeled voxels with at least one six-connected
/// neighbor that is unlabeled (volume boundary counts as unlabeled).
fn surface_voxels(seg: &SegVolume, label: u16) -> Vec<[usize; 3]> {
    let [d, h, w] = seg.dims;
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        seg.labels[(z as usize * h + y as usize) * w + x as usize] == label
    };
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if seg.labels[(z * h + y) * w + x] != label {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let boundary = !at(zi - 1, yi, xi)
                    || !at(zi + 1, yi, xi)
                    || !at(zi, yi - 1, xi)
                    || !at(zi, yi + 1, xi)
                    || !at(zi, yi, xi - 1)
                    || !at(zi, yi, xi + 1);
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Average symmetric surface distance in physical units: exact brute-force
/// nearest-surface search, Euclidean distances scaled by `spacing`.
pub fn assd(
    seg_a: &SegVolume,
    seg_b: &SegVolume,
    label: u16,
    spacing: [f64; 3],
) -> Result<f64, MetricError> {
    if seg_a.dims != seg_b.dims {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            seg_a.dims, seg_b.dims
        )));
    }
    let sa = surface_voxels(seg_a, label);
    let sb = surface_voxels(seg_b, label);
    if sa.is_empty() || sb.is_empty() {
        return Err(MetricError::EmptyMask { label });
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
        let mut acc = 0.0;
        for axis in 0..3 {
            let delta = (p[axis] as f64 - q[axis] as f64) * spacing[axis];
            acc += delta * delta;
        }
        acc.sqrt()
    };
    let nearest_sum = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
    };
    Ok((nearest_sum(&sa, &sb) + nearest_sum(&sb, &sa)) / (sa.len() + sb.len()) as f64)
}

/// Warp a label map by nearest-neighbor sampling at `x + phi(x)`; labels are
/// never interpolated. Sample coordinates round half away from zero and
/// clamp to the volume.
pub fn warp_labels(seg: &SegVolume, phi: &DeformationField) -> Result<SegVolume, MetricError> {
    if seg.dims != phi.dims() {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            seg.dims,
            phi.dims()
        )));
    }
    let [d, h, w] = seg.dims;
    let nvox = d * h * w;
    let disp = &phi.disp.data;
    let mut labels = vec![0u16; nvox];
    let mut p = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let sz = (z as f64 + disp[p]).round().clamp(0.0, (d - 1) as f64) as usize;
                let sy = (y as f64 + disp[nvox + p])
                    .round()
                    .clamp(0.0, (h - 1) as f64) as usize;
                let sx = (x as f64 + disp[2 * nvox + p])
                    .round()
                    .clamp(0.0, (w - 1) as f64) as usize;
                labels[p] = seg.labels[(sz * h + sy) * w + sx];
                p += 1;
            }
        }
    }
    Ok(SegVolume {
        labels,
        dims: seg.dims,
        spacing: seg.spacing,
    })
}

/// Evaluation summary: per-label Dice (%) and surface distance, plus the
/// folding percentage of the deformation field.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// `(label, dice percent if present, assd if defined)`.
    pub rows: Vec<(u16, Option<f64>, Option<f64>)>,
    pub folding_percent: f64,
}

impl EvalReport {
    pub fn mean_dice_percent(&self) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter_map(|r| r.1).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn mean_assd(&self) -> Option<f64> {
        let xs: Vec<f64> = self.rows.iter().filter_map(|r| r.2).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Tab-separated table: one row per label, then mean and folding lines.
    pub fn to_text(&self) -> String {
        let mut out = String::from("label\tdice_pct\tassd\n");
        for (label, dice, assd) in &self.rows {
            let d = dice.map_or("absent".to_string(), |v| format!("{v:.6}"));
            let a = assd.map_or("undefined".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!("{label}\t{d}\t{a}\n"));
        }
        let md = self
            .mean_dice_percent()
            .map_or("absent".into(), |v| format!("{v:.6}"));
        let ma = self
            .mean_assd()
            .map_or("undefined".into(), |v| format!("{v:.6}"));
        out.push_str(&format!("mean\t{md}\t{ma}\n"));
        out.push_str(&format!("folding_pct\t{:.6}\n", self.folding_percent));
        out
    }
}

/// Full evaluation of one registered pair: warp the moving labels by `phi`,
/// score against the fixed labels, and measure field folding.
pub fn evaluate(
    seg_moving: &SegVolume,
    seg_fixed: &SegVolume,
    phi: &DeformationField,
    labels: &[u16],
) -> Result<EvalReport, MetricError> {
    let warped = warp_labels(seg_moving, phi)?;
    let dices = dice(&warped, seg_fixed, labels)?;
    let spacing = [
        f64::from(seg_fixed.spacing[0]),
        f64::from(seg_fixed.spacing[1]),
        f64::from(seg_fixed.spacing[2]),
    ];
    let rows = dices
        .into_iter()
        .map(|(label, d)| {
            let a = assd(&warped, seg_fixed, label, spacing).ok();
            (label, d.map(|v| 100.0 * v), a)
        })
        .collect();
    Ok(EvalReport {
        rows,
        folding_percent: crate::warpfield::jacobian_folding(phi),
    })
}
