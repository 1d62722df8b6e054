//! Text reports: expert-load tables, per-stage diagnostics, per-voxel
//! expert maps.

use crate::moa::expert_loads;
use crate::model::ForwardPass;
use crate::shmoe::expert_load;
use crate::tape::Tape;
use crate::volume::SegVolume;

/// Direction names in channel order of a displacement field.
pub const DIRECTIONS: [&str; 3] = ["z", "y", "x"];

/// One row of the load table: layer label and per-expert percentages.
pub struct LoadRow {
    pub layer: String,
    pub loads: Vec<f64>,
    pub k_active: usize,
}

/// Expert-load percentages for every attention layer (both encoder streams
/// pooled) and every expert-routed decoder head direction.
pub fn load_rows(pass: &ForwardPass) -> Vec<LoadRow> {
    let mut rows = Vec::new();
    for (m, f) in pass.attn_moving.iter().zip(&pass.attn_fixed) {
        debug_assert_eq!(m.layer, f.layer);
        let mut pooled = m.indices.clone();
        pooled.extend_from_slice(&f.indices);
        let k = pooled.first().map_or(0, Vec::len);
        rows.push(LoadRow {
            layer: m.layer.clone(),
            loads: expert_loads(&pooled, m.n_experts),
            k_active: k,
        });
    }
    for stage in &pass.decode.stages {
        if let Some(dirs) = &stage.dirs {
            for (d, dir) in dirs.iter().enumerate() {
                rows.push(LoadRow {
                    layer: format!("dec.{}.{}", stage.name, DIRECTIONS[d]),
                    loads: expert_load(&dir.routing.sparse),
                    k_active: dir.routing.sparse.k_active,
                });
            }
        }
    }
    rows
}

/// Tab-separated load table; each row sums to `k * 100` percent.
pub fn load_table_text(rows: &[LoadRow]) -> String {
    let width = rows.iter().map(|r| r.loads.len()).max().unwrap_or(0);
    let mut out = String::from("layer\tk");
    for e in 0..width {
        out.push_str(&format!("\texpert{e}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{}\t{}", row.layer, row.k_active));
        for e in 0..width {
            match row.loads.get(e) {
                Some(l) => out.push_str(&format!("\t{l:.6}")),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    out
}

/// Per-stage residual L2 norms of one registration pass.
pub fn stage_report_text(tape: &Tape, pass: &ForwardPass) -> String {
    let mut out = String::from("stage\tresidual_l2\n");
    for stage in &pass.decode.stages {
        let delta = tape.value(stage.delta);
        let l2 = delta.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.push_str(&format!("{}\t{:.12e}\n", stage.name, l2));
    }
    out
}

/// Per-voxel winning-expert maps for every expert-routed head direction,
/// exportable as label volumes.
pub fn expert_maps(pass: &ForwardPass, spacing: [f32; 3]) -> Vec<(String, SegVolume)> {
    let mut out = Vec::new();
    for stage in &pass.decode.stages {
        if let Some(dirs) = &stage.dirs {
            for (d, dir) in dirs.iter().enumerate() {
                let map = dir.routing.sparse.selection_map();
                out.push((
                    format!("{}_{}", stage.name, DIRECTIONS[d]),
                    SegVolume {
                        labels: map,
                        dims: stage.dims,
                        spacing,
                    },
                ));
            }
        }
    }
    out
}
