//! End-to-end command-line tests: the full
//! gen-data -> train -> register -> evaluate -> analyze-experts pipeline on
//! a small configuration, plus exit-code behavior.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_moereg")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("moereg_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}

fn write_small_config(dir: &Path) -> PathBuf {
    // 16^3, two levels, small widths: every command finishes in seconds.
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "seed = 11\nsize = 16\nmax_disp = 2\nembed_dim = 4\ndepths = 1,1\nwindow = 2\n\
         moa_experts = 3\nmoa_active = 2\nstem_channels = 4\niters = 2\nlr = 0.001\n",
    )
    .expect("write config");
    path
}

#[test]
fn no_arguments_prints_usage_with_exit_2() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn unknown_command_and_flag_exit_2() {
    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_file_exits_3() {
    let dir = tmp_dir("missing");
    let out = run(&[
        "train",
        "--pairs",
        "/nonexistent/pair",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn corrupt_volume_reports_offset_and_exits_3() {
    let dir = tmp_dir("corrupt");
    let cfg = write_small_config(&dir);
    let out = run(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    // Truncate one volume.
    let vol = dir.join("pair011_fixed.shmv");
    let bytes = std::fs::read(&vol).unwrap();
    std::fs::write(&vol, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&[
        "train",
        "--pairs",
        dir.join("pair011").to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn full_pipeline_runs_and_reports() {
    let dir = tmp_dir("pipeline");
    let cfg = write_small_config(&dir);
    let cfg_s = cfg.to_str().unwrap();
    let dir_s = dir.to_str().unwrap();

    let out = run(&["gen-data", "--out", dir_s, "--config", cfg_s]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let prefix = dir.join("pair011");
    let prefix_s = prefix.to_str().unwrap();

    let out = run(&[
        "train", "--pairs", prefix_s, "--out", dir_s, "--config", cfg_s,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("checkpoint.shmc").exists());
    let trace = std::fs::read_to_string(dir.join("loss_trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 3, "header + 2 iterations");

    let ckpt = dir.join("checkpoint.shmc");
    let out = run(&[
        "register",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--pairs",
        prefix_s,
        "--out",
        dir_s,
        "--config",
        cfg_s,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.join("phi.shmv").exists());
    assert!(dir.join("warped.shmv").exists());

    let out = run(&[
        "evaluate",
        "--pairs",
        prefix_s,
        "--field",
        dir.join("phi.shmv").to_str().unwrap(),
        "--out",
        dir_s,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval = std::fs::read_to_string(dir.join("eval.tsv")).unwrap();
    assert!(eval.contains("label\tdice_pct\tassd"));
    assert!(eval.contains("folding_pct"));

    let out = run(&[
        "analyze-experts",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--pairs",
        prefix_s,
        "--out",
        dir_s,
        "--config",
        cfg_s,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let loads = std::fs::read_to_string(dir.join("expert_loads.tsv")).unwrap();
    assert!(loads.starts_with("layer\tk\texpert0"));
    // Per-layer loads sum to k * 100 (conservation), checked per row.
    for line in loads.lines().skip(1) {
        let mut cols = line.split('\t');
        let _layer = cols.next().unwrap();
        let k: f64 = cols.next().unwrap().parse().unwrap();
        let total: f64 = cols.filter_map(|c| c.parse::<f64>().ok()).sum();
        assert!((total - 100.0 * k).abs() < 1e-9, "{line}");
    }
    // Expert maps for both expert-head stages, three directions each.
    let maps: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().to_string_lossy().to_string();
            name.starts_with("expert_map_").then_some(name)
        })
        .collect();
    assert_eq!(maps.len(), 6, "{maps:?}");

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn register_with_fresh_zero_head_checkpoint_is_identity() {
    let dir = tmp_dir("identity");
    let cfg = write_small_config(&dir);
    let cfg_s = cfg.to_str().unwrap();
    let dir_s = dir.to_str().unwrap();
    run(&["gen-data", "--out", dir_s, "--config", cfg_s]);
    let prefix = dir.join("pair011");

    // Train 0 iterations: the checkpoint is the zero-head initialization.
    let zero_cfg = dir.join("zero.cfg");
    std::fs::write(
        &zero_cfg,
        "seed = 11\nsize = 16\nmax_disp = 2\nembed_dim = 4\ndepths = 1,1\nwindow = 2\n\
         moa_experts = 3\nmoa_active = 2\nstem_channels = 4\niters = 0\n",
    )
    .unwrap();
    let out = run(&[
        "train",
        "--pairs",
        prefix.to_str().unwrap(),
        "--out",
        dir_s,
        "--config",
        zero_cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = run(&[
        "register",
        "--checkpoint",
        dir.join("checkpoint.shmc").to_str().unwrap(),
        "--pairs",
        prefix.to_str().unwrap(),
        "--out",
        dir_s,
        "--config",
        zero_cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // phi must be all zeros and warped must equal the moving image.
    let phi = std::fs::read(dir.join("phi.shmv")).unwrap();
    let payload = &phi[35..];
    assert!(payload
        .chunks_exact(4)
        .all(|b| f32::from_le_bytes(b.try_into().unwrap()) == 0.0));
    let warped = std::fs::read(dir.join("warped.shmv")).unwrap();
    let moving = std::fs::read(format!("{}_moving.shmv", prefix.to_str().unwrap())).unwrap();
    assert_eq!(warped, moving);

    // Evaluating the identity field: folding 0.
    let out = run(&[
        "evaluate",
        "--pairs",
        prefix.to_str().unwrap(),
        "--field",
        dir.join("phi.shmv").to_str().unwrap(),
        "--out",
        dir_s,
    ]);
    assert_eq!(out.status.code(), Some(0));
    let eval = std::fs::read_to_string(dir.join("eval.tsv")).unwrap();
    assert!(eval.contains("folding_pct\t0.000000"));

    // With identical segmentations (max_disp = 0 pair) the identity field
    // scores Dice 100% and ASSD 0 on every label.
    let same_cfg = dir.join("same.cfg");
    std::fs::write(
        &same_cfg,
        "seed = 12\nsize = 16\nmax_disp = 0\nembed_dim = 4\ndepths = 1,1\nwindow = 2\n\
         moa_experts = 3\nmoa_active = 2\nstem_channels = 4\niters = 0\n",
    )
    .unwrap();
    let out = run(&[
        "gen-data",
        "--out",
        dir_s,
        "--config",
        same_cfg.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = run(&[
        "evaluate",
        "--pairs",
        dir.join("pair012").to_str().unwrap(),
        "--field",
        dir.join("phi.shmv").to_str().unwrap(),
        "--out",
        dir_s,
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval = std::fs::read_to_string(dir.join("eval.tsv")).unwrap();
    let mean_line = eval.lines().find(|l| l.starts_with("mean")).unwrap();
    let mut cols = mean_line.split('\t');
    cols.next();
    let dice: f64 = cols.next().unwrap().parse().unwrap();
    let assd: f64 = cols.next().unwrap().parse().unwrap();
    assert_eq!(dice, 100.0);
    assert_eq!(assd, 0.0);
    assert!(eval.contains("folding_pct\t0.000000"));

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn training_is_reproducible_across_runs() {
    let dir = tmp_dir("repro");
    let cfg = write_small_config(&dir);
    let cfg_s = cfg.to_str().unwrap();
    let dir_s = dir.to_str().unwrap();
    run(&["gen-data", "--out", dir_s, "--config", cfg_s]);
    let prefix = dir.join("pair011");
    let prefix_s = prefix.to_str().unwrap();

    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let r = run(&[
            "train",
            "--pairs",
            prefix_s,
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg_s,
        ]);
        assert_eq!(r.status.code(), Some(0));
    }
    let ca = std::fs::read(out_a.join("checkpoint.shmc")).unwrap();
    let cb = std::fs::read(out_b.join("checkpoint.shmc")).unwrap();
    assert_eq!(ca, cb, "checkpoints must be byte-identical");
    assert_eq!(
        std::fs::read(out_a.join("loss_trace.tsv")).unwrap(),
        std::fs::read(out_b.join("loss_trace.tsv")).unwrap()
    );

    let _ = std::fs::remove_dir_all(&dir);
}
