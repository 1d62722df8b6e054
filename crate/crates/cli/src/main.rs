//! Command-line driver: synthetic data generation, training, registration,
//! evaluation, expert analysis, and the ablation grid.
//!
//! Exit codes: 0 success, 2 usage error, 3 i/o error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use moereg::checkpoint::{load_checkpoint, save_checkpoint};
use moereg::config::{ablation_grid, parse_config, parse_head_levels, RunConfig};
use moereg::metrics::evaluate;
use moereg::model::{ForwardPass, RegModel};
use moereg::report::{expert_maps, load_rows, load_table_text, stage_report_text};
use moereg::rng::Rng;
use moereg::synth::{generate_pair, SyntheticPair};
use moereg::tape::Tape;
use moereg::tensor::Tensor;
use moereg::train::train;
use moereg::volume::{
    read_label_volume, read_scalar_volume, write_volume_file, SegVolume, Volume, VolumeData,
};
use moereg::warpfield::{jacobian_folding, DeformationField};

const USAGE: &str = "usage: moereg <command> [options]

commands:
  gen-data         --out DIR [--seed N] [--config PATH]
  train            --pairs PREFIX... --out DIR [--config PATH] [--seed N]
                   [--diff] [--levels LIST]
  register         --checkpoint PATH --pairs PREFIX --out DIR [--config PATH]
                   [--diff] [--levels LIST]
  evaluate         --pairs PREFIX --field PATH --out DIR
  analyze-experts  --checkpoint PATH --pairs PREFIX --out DIR [--config PATH]
                   [--diff] [--levels LIST]
  ablate           --pairs PREFIX... --out DIR [--config PATH] [--seed N]

options:
  --config PATH    plain-text key=value run configuration
  --seed U64       overrides the config seed
  --out DIR        output directory (created if missing)
  --pairs PREFIX   pair file prefix: PREFIX_fixed.shmv, PREFIX_moving.shmv,
                   PREFIX_fixed_seg.shmv, PREFIX_moving_seg.shmv
  --checkpoint P   model checkpoint path
  --field PATH     deformation field volume (register output)
  --diff           enable the diffeomorphic variant (velocity integration)
  --levels LIST    expert-head resolutions, e.g. 1,1/2 or none
";

enum CliError {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<moereg::volume::IoError> for CliError {
    fn from(e: moereg::volume::IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<moereg::tensor::TensorError> for CliError {
    fn from(e: moereg::tensor::TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<moereg::model::TrainError> for CliError {
    fn from(e: moereg::model::TrainError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<moereg::metrics::MetricError> for CliError {
    fn from(e: moereg::metrics::MetricError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

#[derive(Default)]
struct Args {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    pairs: Vec<String>,
    checkpoint: Option<PathBuf>,
    field: Option<PathBuf>,
    diff: bool,
    levels: Option<String>,
}

fn parse_args(argv: &[String]) -> Result<Args, CliError> {
    let mut args = Args::default();
    let mut i = 0;
    let need_value = |i: &mut usize, flag: &str| -> Result<String, CliError> {
        *i += 1;
        argv.get(*i)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("{flag} needs a value")))
    };
    while i < argv.len() {
        match argv[i].as_str() {
            "--config" => args.config = Some(PathBuf::from(need_value(&mut i, "--config")?)),
            "--seed" => {
                let raw = need_value(&mut i, "--seed")?;
                args.seed = Some(
                    raw.parse()
                        .map_err(|_| CliError::Usage(format!("bad seed '{raw}'")))?,
                );
            }
            "--out" => args.out = Some(PathBuf::from(need_value(&mut i, "--out")?)),
            "--pairs" => {
                // Consume every following non-flag token.
                while let Some(next) = argv.get(i + 1) {
                    if next.starts_with("--") {
                        break;
                    }
                    args.pairs.push(next.clone());
                    i += 1;
                }
                if args.pairs.is_empty() {
                    return Err(CliError::Usage("--pairs needs at least one prefix".into()));
                }
            }
            "--checkpoint" => {
                args.checkpoint = Some(PathBuf::from(need_value(&mut i, "--checkpoint")?));
            }
            "--field" => args.field = Some(PathBuf::from(need_value(&mut i, "--field")?)),
            "--diff" => args.diff = true,
            "--levels" => args.levels = Some(need_value(&mut i, "--levels")?),
            other => return Err(CliError::Usage(format!("unknown flag '{other}'"))),
        }
        i += 1;
    }
    Ok(args)
}

fn load_config(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            parse_config(&text).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.diff {
        cfg.diffeomorphic = true;
    }
    if let Some(levels) = &args.levels {
        cfg.decoder.heads = parse_head_levels(levels).map_err(CliError::Usage)?;
    }
    Ok(cfg)
}

fn out_dir(args: &Args) -> Result<PathBuf, CliError> {
    let dir = args
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

struct PairFiles {
    fixed: Volume,
    moving: Volume,
    fixed_seg: SegVolume,
    moving_seg: SegVolume,
}

fn pair_paths(prefix: &str) -> [PathBuf; 4] {
    [
        PathBuf::from(format!("{prefix}_fixed.shmv")),
        PathBuf::from(format!("{prefix}_moving.shmv")),
        PathBuf::from(format!("{prefix}_fixed_seg.shmv")),
        PathBuf::from(format!("{prefix}_moving_seg.shmv")),
    ]
}

fn load_pair(prefix: &str) -> Result<PairFiles, CliError> {
    let [f, m, fs, ms] = pair_paths(prefix);
    Ok(PairFiles {
        fixed: read_scalar_volume(&f)?,
        moving: read_scalar_volume(&m)?,
        fixed_seg: read_label_volume(&fs)?,
        moving_seg: read_label_volume(&ms)?,
    })
}

fn write_pair(dir: &Path, name: &str, pair: &SyntheticPair) -> Result<String, CliError> {
    let prefix = dir.join(name);
    let p = prefix.to_string_lossy().to_string();
    write_volume_file(
        Path::new(&format!("{p}_fixed.shmv")),
        &VolumeData::Scalar(pair.fixed.clone()),
    )?;
    write_volume_file(
        Path::new(&format!("{p}_moving.shmv")),
        &VolumeData::Scalar(pair.moving.clone()),
    )?;
    write_volume_file(
        Path::new(&format!("{p}_fixed_seg.shmv")),
        &VolumeData::Labels(pair.fixed_seg.clone()),
    )?;
    write_volume_file(
        Path::new(&format!("{p}_moving_seg.shmv")),
        &VolumeData::Labels(pair.moving_seg.clone()),
    )?;
    write_volume_file(
        Path::new(&format!("{p}_truth.shmv")),
        &VolumeData::Scalar(Volume::new(pair.truth.disp.clone(), pair.fixed.spacing)),
    )?;
    Ok(p)
}

fn forward_pass(model: &RegModel, pair: &PairFiles) -> Result<(Tape, ForwardPass), CliError> {
    let mut tape = Tape::new();
    let m = tape.constant(pair.moving.data.clone());
    let f = tape.constant(pair.fixed.data.clone());
    let pass = model.forward(&mut tape, m, f)?;
    Ok((tape, pass))
}

fn cmd_gen_data(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    let mut rng = Rng::new(cfg.seed);
    let pair = generate_pair(
        &mut rng,
        cfg.size,
        cfg.spacing,
        cfg.max_disp,
        cfg.smoothness,
    )?;
    let prefix = write_pair(&dir, &format!("pair{:03}", cfg.seed % 1000), &pair)?;
    println!("wrote pair files with prefix {prefix}");
    Ok(())
}

fn cmd_train(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    if args.pairs.is_empty() {
        return Err(CliError::Usage("train needs --pairs".into()));
    }
    let mut pairs: Vec<(Tensor, Tensor)> = Vec::new();
    for prefix in &args.pairs {
        let p = load_pair(prefix)?;
        pairs.push((p.moving.data, p.fixed.data));
    }
    let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
    let outcome = train(&mut model, &pairs, &cfg)?;
    save_checkpoint(&dir.join("checkpoint.shmc"), &mut model)?;
    write_text(&dir.join("loss_trace.tsv"), &outcome.trace_text())?;
    if let Some(last) = outcome.records.last() {
        println!(
            "trained {} iterations: sim {:.6e}, reg {:.6e}, rc {:.6e}",
            outcome.records.len(),
            last.sim,
            last.reg,
            last.rc
        );
    } else {
        println!("trained 0 iterations: checkpoint is the seeded initialization");
    }
    println!("checkpoint: {}", dir.join("checkpoint.shmc").display());
    Ok(())
}

fn cmd_register(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    let checkpoint = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("register needs --checkpoint".into()))?;
    let prefix = args
        .pairs
        .first()
        .ok_or_else(|| CliError::Usage("register needs --pairs".into()))?;
    let pair = load_pair(prefix)?;
    let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
    load_checkpoint(checkpoint, &mut model)?;
    let (tape, pass) = forward_pass(&model, &pair)?;
    let phi = tape.value(pass.phi()).clone();
    let warped = tape.value(pass.warped).clone();
    write_volume_file(
        &dir.join("phi.shmv"),
        &VolumeData::Scalar(Volume::new(phi, pair.fixed.spacing)),
    )?;
    write_volume_file(
        &dir.join("warped.shmv"),
        &VolumeData::Scalar(Volume::new(warped, pair.fixed.spacing)),
    )?;
    write_text(
        &dir.join("diagnostics.tsv"),
        &stage_report_text(&tape, &pass),
    )?;
    println!(
        "wrote {} and {}",
        dir.join("phi.shmv").display(),
        dir.join("warped.shmv").display()
    );
    Ok(())
}

fn cmd_evaluate(args: &Args) -> Result<(), CliError> {
    let dir = out_dir(args)?;
    let prefix = args
        .pairs
        .first()
        .ok_or_else(|| CliError::Usage("evaluate needs --pairs".into()))?;
    let field_path = args
        .field
        .as_ref()
        .ok_or_else(|| CliError::Usage("evaluate needs --field".into()))?;
    let pair = load_pair(prefix)?;
    let field_vol = read_scalar_volume(field_path)?;
    let phi = DeformationField::new(field_vol.data)?;
    let labels = pair.fixed_seg.present_labels();
    let report = evaluate(&pair.moving_seg, &pair.fixed_seg, &phi, &labels)?;
    write_text(&dir.join("eval.tsv"), &report.to_text())?;
    println!("{}", report.to_text().trim_end());
    Ok(())
}

fn cmd_analyze_experts(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let dir = out_dir(args)?;
    let checkpoint = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("analyze-experts needs --checkpoint".into()))?;
    let prefix = args
        .pairs
        .first()
        .ok_or_else(|| CliError::Usage("analyze-experts needs --pairs".into()))?;
    let pair = load_pair(prefix)?;
    let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
    load_checkpoint(checkpoint, &mut model)?;
    let (tape, pass) = forward_pass(&model, &pair)?;
    let rows = load_rows(&pass);
    write_text(&dir.join("expert_loads.tsv"), &load_table_text(&rows))?;
    for (name, seg) in expert_maps(&pass, pair.fixed.spacing) {
        write_volume_file(
            &dir.join(format!("expert_map_{name}.shmv")),
            &VolumeData::Labels(seg),
        )?;
    }
    write_text(
        &dir.join("diagnostics.tsv"),
        &stage_report_text(&tape, &pass),
    )?;
    println!("{}", load_table_text(&rows).trim_end());
    Ok(())
}

fn cmd_ablate(args: &Args) -> Result<(), CliError> {
    let base = load_config(args)?;
    let dir = out_dir(args)?;
    if args.pairs.is_empty() {
        return Err(CliError::Usage("ablate needs --pairs".into()));
    }
    let mut pairs: Vec<(Tensor, Tensor)> = Vec::new();
    for prefix in &args.pairs {
        let p = load_pair(prefix)?;
        pairs.push((p.moving.data, p.fixed.data));
    }
    let mut table = String::from("run\tuse_moa\theads\tparams\tsim\treg\trc\ttotal\tfolding\n");
    for (name, use_moa, heads) in ablation_grid() {
        let mut cfg = base.clone();
        cfg.encoder.use_moa = use_moa;
        cfg.decoder.heads = heads;
        let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
        let params = model.param_count();
        let outcome = train(&mut model, &pairs, &cfg)?;
        let last = outcome
            .records
            .last()
            .copied()
            .unwrap_or(moereg::model::LossRecord {
                iteration: 0,
                sim: f64::NAN,
                reg: 0.0,
                rc: 0.0,
                total: f64::NAN,
            });
        // Folding of the trained field on the first pair.
        let mut tape = Tape::new();
        let m = tape.constant(pairs[0].0.clone());
        let f = tape.constant(pairs[0].1.clone());
        let pass = model.forward(&mut tape, m, f)?;
        let phi = DeformationField {
            disp: tape.value(pass.phi()).clone(),
        };
        let folding = jacobian_folding(&phi);
        let heads_str = heads.map(|h| h.to_string()).join(",");
        table.push_str(&format!(
            "{name}\t{use_moa}\t{heads_str}\t{params}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.4}\n",
            last.sim, last.reg, last.rc, last.total, folding
        ));
        println!("{name}: {params} params, final sim {:.6e}", last.sim);
    }
    write_text(&dir.join("ablate.tsv"), &table)?;
    println!("wrote {}", dir.join("ablate.tsv").display());
    Ok(())
}

fn dispatch(command: &str, args: &Args) -> Result<(), CliError> {
    match command {
        "gen-data" => cmd_gen_data(args),
        "train" => cmd_train(args),
        "register" => cmd_register(args),
        "evaluate" => cmd_evaluate(args),
        "analyze-experts" => cmd_analyze_experts(args),
        "ablate" => cmd_ablate(args),
        other => Err(CliError::Usage(format!("unknown command '{other}'"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(command) = argv.first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(2);
    };
    if command == "--help" || command == "-h" || command == "help" {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    let args = match parse_args(&argv[1..]) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message());
            eprintln!("{USAGE}");
            return ExitCode::from(e.code());
        }
    };
    match dispatch(command, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            if matches!(e, CliError::Usage(_)) {
                eprintln!("{USAGE}");
            }
            ExitCode::from(e.code())
        }
    }
}
