//! Training loop: batch size 1, round-robin over pairs, fixed-rate Adam.

use crate::config::RunConfig;
use crate::model::{train_step, LossRecord, RegModel, TrainError};
use crate::params::Adam;
use crate::tensor::Tensor;

pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
}

impl TrainOutcome {
    /// Tab-separated loss trace, one line per iteration.
    pub fn trace_text(&self) -> String {
        let mut out = String::from("iter\tsim\treg\trc\ttotal\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\n",
                r.iteration, r.sim, r.reg, r.rc, r.total
            ));
        }
        out
    }
}

/// Train `model` for `cfg.iterations` steps, cycling through the pairs
/// (each pair is a `(moving, fixed)` tensor pair of shape `[1, d, h, w]`).
/// Zero iterations return the model untouched.
pub fn train(
    model: &mut RegModel,
    pairs: &[(Tensor, Tensor)],
    cfg: &RunConfig,
) -> Result<TrainOutcome, TrainError> {
    assert!(!pairs.is_empty(), "training needs at least one pair");
    let mut opt = Adam::new(cfg.learning_rate);
    let mut records = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let (moving, fixed) = &pairs[iter % pairs.len()];
        let record = train_step(
            model,
            moving,
            fixed,
            cfg.weights,
            cfg.quantile,
            &mut opt,
            iter,
        )?;
        records.push(record);
    }
    Ok(TrainOutcome { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::encode_checkpoint;
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::rng::Rng;
    use crate::synth::generate_pair;

    fn toy_cfg() -> RunConfig {
        RunConfig {
            size: 8,
            max_disp: 1.0,
            encoder: EncoderConfig {
                embed_dim: 4,
                depths: vec![1, 1],
                window: 2,
                moa_experts: 2,
                moa_active: 1,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                stem_channels: 4,
                ..DecoderConfig::default()
            },
            iterations: 0,
            ..RunConfig::default()
        }
    }

    fn toy_pair(cfg: &RunConfig, seed: u64) -> (Tensor, Tensor) {
        let pair = generate_pair(
            &mut Rng::new(seed),
            cfg.size,
            cfg.spacing,
            cfg.max_disp,
            2.0,
        )
        .unwrap();
        (pair.moving.data, pair.fixed.data)
    }

    #[test]
    fn zero_iterations_leave_the_model_untouched() {
        let cfg = toy_cfg();
        let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
        let before = encode_checkpoint(&mut model);
        let pairs = vec![toy_pair(&cfg, 1)];
        let outcome = train(&mut model, &pairs, &cfg).unwrap();
        assert!(outcome.records.is_empty());
        assert_eq!(before, encode_checkpoint(&mut model));
    }

    #[test]
    fn identical_seeds_identical_traces_and_checkpoints() {
        let mut cfg = toy_cfg();
        cfg.iterations = 3;
        let run = || {
            let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
            let pairs = vec![toy_pair(&cfg, 1)];
            let outcome = train(&mut model, &pairs, &cfg).unwrap();
            (outcome.trace_text(), encode_checkpoint(&mut model))
        };
        let (ta, ca) = run();
        let (tb, cb) = run();
        assert_eq!(ta, tb);
        assert_eq!(ca, cb);
    }

    #[test]
    fn diffeomorphic_training_steps_stay_finite() {
        let mut cfg = toy_cfg();
        cfg.diffeomorphic = true;
        cfg.integrate_steps = 4;
        cfg.iterations = 3;
        let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
        let pairs = vec![toy_pair(&cfg, 1)];
        let outcome = train(&mut model, &pairs, &cfg).unwrap();
        assert_eq!(outcome.records.len(), 3);
        assert!(outcome.records.iter().all(|r| r.total.is_finite()));
    }

    #[test]
    fn training_improves_similarity_on_a_small_pair() {
        let mut cfg = toy_cfg();
        cfg.iterations = 25;
        cfg.learning_rate = 1e-3;
        let mut model = RegModel::init(&cfg.model_config(), &mut Rng::new(cfg.seed));
        let pairs = vec![toy_pair(&cfg, 1)];
        let outcome = train(&mut model, &pairs, &cfg).unwrap();
        let first = outcome.records.first().unwrap().sim;
        let last = outcome.records.last().unwrap().sim;
        assert!(last < first, "sim {first} -> {last}");
    }
}
