//! Run configuration and its plain-text file format.
//!
//! One `key = value` assignment per line; `#` starts a comment. Unknown keys
//! are hard errors so typos cannot silently fall back to defaults.

use std::fmt;
use std::str::FromStr;

use crate::decoder::{DecoderConfig, HeadKind};
use crate::encoder::EncoderConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub size: usize,
    pub spacing: [f32; 3],
    pub max_disp: f64,
    pub smoothness: f64,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub quantile: f64,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub iterations: usize,
    pub diffeomorphic: bool,
    pub integrate_steps: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            size: 32,
            spacing: [1.0, 1.0, 1.0],
            max_disp: 4.0,
            smoothness: 2.0,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            quantile: 0.5,
            weights: LossWeights::default(),
            learning_rate: 1e-4,
            iterations: 300,
            diffeomorphic: false,
            integrate_steps: 7,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            diffeomorphic: self.diffeomorphic,
            integrate_steps: self.integrate_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    raw.parse().map_err(|e| ConfigError {
        line,
        message: format!("bad value '{raw}' for {key}: {e}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    raw.split(',')
        .map(|p| parse_value(line, key, p.trim()))
        .collect()
}

/// Parse head assignment for the four finest stages from resolution tokens
/// (`1`, `1/2`, `1/4`, `1/8`), e.g. `1,1/2`; `none` leaves every head conv.
pub fn parse_head_levels(raw: &str) -> Result<[HeadKind; 4], String> {
    let mut heads = [HeadKind::Conv; 4];
    let trimmed = raw.trim();
    if trimmed == "none" || trimmed.is_empty() {
        return Ok(heads);
    }
    for token in trimmed.split(',') {
        let idx = match token.trim() {
            "1" => 0,
            "1/2" => 1,
            "1/4" => 2,
            "1/8" => 3,
            other => {
                return Err(format!(
                    "unknown resolution '{other}' (use 1, 1/2, 1/4, 1/8)"
                ))
            }
        };
        heads[idx] = HeadKind::Shmoe;
    }
    Ok(heads)
}

/// The seven encoder/decoder combinations of the ablation grid: attention
/// routing on/off crossed with expert-head placement (none, full, full+1/2,
/// full+1/2+1/4, full+1/2+1/4+1/8).
pub fn ablation_grid() -> Vec<(&'static str, bool, [HeadKind; 4])> {
    use HeadKind::{Conv, Shmoe};
    vec![
        ("mha_conv", false, [Conv, Conv, Conv, Conv]),
        ("mha_shmoe_full_half", false, [Shmoe, Shmoe, Conv, Conv]),
        ("moa_conv", true, [Conv, Conv, Conv, Conv]),
        ("moa_shmoe_full", true, [Shmoe, Conv, Conv, Conv]),
        ("moa_shmoe_full_half", true, [Shmoe, Shmoe, Conv, Conv]),
        ("moa_shmoe_to_quarter", true, [Shmoe, Shmoe, Shmoe, Conv]),
        ("moa_shmoe_to_eighth", true, [Shmoe, Shmoe, Shmoe, Shmoe]),
    ]
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
            line: line_no,
            message: format!("expected 'key = value', got '{line}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "seed" => cfg.seed = parse_value(line_no, key, value)?,
            "size" => cfg.size = parse_value(line_no, key, value)?,
            "spacing" => {
                let v: Vec<f32> = parse_list(line_no, key, value)?;
                if v.len() != 3 {
                    return Err(ConfigError {
                        line: line_no,
                        message: format!("spacing needs 3 values, got {}", v.len()),
                    });
                }
                cfg.spacing = [v[0], v[1], v[2]];
            }
            "max_disp" => cfg.max_disp = parse_value(line_no, key, value)?,
            "smoothness" => cfg.smoothness = parse_value(line_no, key, value)?,
            "patch_size" => cfg.encoder.patch_size = parse_value(line_no, key, value)?,
            "embed_dim" => cfg.encoder.embed_dim = parse_value(line_no, key, value)?,
            "depths" => cfg.encoder.depths = parse_list(line_no, key, value)?,
            "window" => cfg.encoder.window = parse_value(line_no, key, value)?,
            "moa_experts" => cfg.encoder.moa_experts = parse_value(line_no, key, value)?,
            "moa_active" => cfg.encoder.moa_active = parse_value(line_no, key, value)?,
            "use_moa" => cfg.encoder.use_moa = parse_value(line_no, key, value)?,
            "mlp_ratio" => cfg.encoder.mlp_ratio = parse_value(line_no, key, value)?,
            "heads" => {
                let kinds: Vec<HeadKind> = value
                    .split(',')
                    .map(|p| {
                        p.trim().parse().map_err(|e| ConfigError {
                            line: line_no,
                            message: format!("{e}"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if kinds.len() != 4 {
                    return Err(ConfigError {
                        line: line_no,
                        message: format!(
                            "heads needs 4 entries (full,1/2,1/4,1/8), got {}",
                            kinds.len()
                        ),
                    });
                }
                cfg.decoder.heads = [kinds[0], kinds[1], kinds[2], kinds[3]];
            }
            "shmoe_levels" => {
                cfg.decoder.heads = parse_head_levels(value).map_err(|message| ConfigError {
                    line: line_no,
                    message,
                })?;
            }
            "stem_channels" => cfg.decoder.stem_channels = parse_value(line_no, key, value)?,
            "shmoe_kernels" => cfg.decoder.shmoe_kernels = parse_list(line_no, key, value)?,
            "shmoe_active" => cfg.decoder.shmoe_active = parse_value(line_no, key, value)?,
            "quantile" => cfg.quantile = parse_value(line_no, key, value)?,
            "lambda_r" => cfg.weights.lambda_reg = parse_value(line_no, key, value)?,
            "lambda_rc" => cfg.weights.lambda_rc = parse_value(line_no, key, value)?,
            "lr" => cfg.learning_rate = parse_value(line_no, key, value)?,
            "iters" => cfg.iterations = parse_value(line_no, key, value)?,
            "diffeomorphic" => cfg.diffeomorphic = parse_value(line_no, key, value)?,
            "integrate_steps" => cfg.integrate_steps = parse_value(line_no, key, value)?,
            other => {
                return Err(ConfigError {
                    line: line_no,
                    message: format!("unknown key '{other}'"),
                })
            }
        }
    }
    Ok(cfg)
}
