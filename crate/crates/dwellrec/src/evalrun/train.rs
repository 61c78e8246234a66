//! Mini-batch training with Adam over negative-sampled click samples.
//!
//! Determinism contract: for a fixed seed and config the run is bit-for-bit
//! reproducible — epoch shuffles and dropout masks come from per-epoch
//! streams of one seeded generator, batches run sequentially, and gradient
//! accumulation follows sample order within each batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::datagen::TrainSample;
use crate::encoders::{candidate_matrix, encode_history, EncoderConfig, Model, Variant};
use crate::error::{Error, Result};
use crate::newsrep::EmbeddingStore;
use crate::nncore::tape::{ParamSet, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Variants a full training command covers; each gets its own model
    /// and checkpoint.
    pub variants: Vec<Variant>,
}

impl Default for TrainingConfig {
    fn default() -> TrainingConfig {
        TrainingConfig {
            epochs: 3,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            variants: vec![Variant::BaseMha, Variant::DweW, Variant::DweA],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "lr must be a non-negative number, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) || !self.adam_eps.is_finite() {
            return Err(Error::Config(format!(
                "adam_eps must be positive, got {}",
                self.adam_eps
            )));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variants must name at least one encoder".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction, one first/second moment slot per parameter
/// element. State lives outside the `ParamSet` so the optimizer never
/// appears in checkpoints.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(ps: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Adam {
        let m = ps.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let v = ps.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently in `ps`. Gradients are
    /// left as they are; the caller zeroes them when starting a batch.
    pub fn step(&mut self, ps: &mut ParamSet) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in ps.iter_mut().enumerate() {
            let g = p.grad.as_slice();
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
            }
            let value = p.value.as_mut_slice();
            for j in 0..value.len() {
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// What one training run produced.
#[derive(Clone, Debug, Serialize)]
pub struct TrainRun {
    pub variant: Variant,
    pub seed: u64,
    /// Mean per-sample loss of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    /// Final checkpoint; per-epoch checkpoints sit alongside it.
    pub checkpoint: PathBuf,
    pub wall_clock_s: f64,
}

/// Train one model (the variant named by `cfg`) on `samples` and write
/// checkpoints into `out_dir`: `<variant>.epoch<N>.nrck` after every
/// epoch, and final `<variant>.nrck` plus the encoder config as
/// `<variant>.json` so evaluation can rebuild the model from the files
/// alone. A non-finite loss aborts with the failing batch in the message.
pub fn run_training(
    cfg: &EncoderConfig,
    tcfg: &TrainingConfig,
    samples: &[TrainSample],
    store: &EmbeddingStore,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainRun> {
    cfg.validate()?;
    tcfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let mut model = Model::new(cfg, seed)?;
    let mut adam = Adam::new(&model.params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
    let mut epoch_losses = Vec::with_capacity(tcfg.epochs);
    let variant = cfg.variant;

    for epoch in 0..tcfg.epochs {
        // Distinct streams keep the shuffle order and the dropout masks
        // independent of each other while both stay seed-determined.
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(1 + epoch as u64);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
        drop_rng.set_stream(0x1000 + epoch as u64);

        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(tcfg.batch_size).enumerate() {
            model.params.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let sample = &samples[i];
                let eh = encode_history(&sample.history, store, cfg)?;
                let mut ids: Vec<&str> = Vec::with_capacity(1 + sample.negatives.len());
                ids.push(sample.positive.as_str());
                ids.extend(sample.negatives.iter().map(|s| s.as_str()));
                let cands = candidate_matrix(store, &ids)?;
                let mut tape = Tape::new();
                let loss = model.sample_loss_node(&mut tape, &eh, &cands, true, &mut drop_rng)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became non-finite ({value}) at epoch {}, batch {b}",
                        epoch + 1
                    )));
                }
                loss_sum += value;
                tape.backward(loss, inv, &mut model.params)?;
            }
            model.pin_padding_gradients();
            adam.step(&mut model.params);
        }
        epoch_losses.push(loss_sum / samples.len() as f64);
        model.save(&out_dir.join(format!("{variant}.epoch{}.nrck", epoch + 1)))?;
    }

    let checkpoint = out_dir.join(format!("{variant}.nrck"));
    model.save(&checkpoint)?;
    let cfg_json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(out_dir.join(format!("{variant}.json")), cfg_json + "\n")?;

    Ok(TrainRun {
        variant,
        seed,
        epoch_losses,
        checkpoint,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_train_samples, generate_corpus, split_impressions, GeneratorConfig};
    use crate::newsrep::{synth_embed_store, NewsEmbedding};

    fn small_corpus() -> (Vec<TrainSample>, EmbeddingStore) {
        let gen_cfg = GeneratorConfig {
            n_news: 120,
            n_users: 240,
            history_min: 5,
            history_max: 12,
            ..GeneratorConfig::default()
        };
        let (news, impressions) = generate_corpus(&gen_cfg, 42).unwrap();
        let (train, _) = split_impressions(impressions, 0.75, 42).unwrap();
        let (samples, _) = build_train_samples(&train, 4, 42).unwrap();
        let store = synth_embed_store(&news, 16, 7, 0.05).unwrap();
        (samples, store)
    }

    fn small_cfg(variant: Variant) -> EncoderConfig {
        EncoderConfig {
            variant,
            d: 16,
            d_dw: 4,
            h: 2,
            a: 4,
            attpool_dim: Some(8),
            max_history: 12,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn training_config_rejects_bad_values() {
        let ok = TrainingConfig::default();
        assert!(ok.validate().is_ok());
        for breakage in [
            |c: &mut TrainingConfig| c.epochs = 0,
            |c: &mut TrainingConfig| c.batch_size = 0,
            |c: &mut TrainingConfig| c.lr = -1.0,
            |c: &mut TrainingConfig| c.lr = f64::NAN,
            |c: &mut TrainingConfig| c.beta1 = 1.0,
            |c: &mut TrainingConfig| c.beta2 = -0.1,
            |c: &mut TrainingConfig| c.adam_eps = 0.0,
            |c: &mut TrainingConfig| c.variants.clear(),
        ] {
            let mut cfg = TrainingConfig::default();
            breakage(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (samples, store) = small_corpus();
        let cfg = small_cfg(Variant::BaseMha);
        let tcfg = TrainingConfig {
            epochs: 2,
            lr: 0.0,
            ..TrainingConfig::default()
        };
        // Dropout off so the loss curve is exactly flat, not just the
        // parameters.
        let mut cfg = cfg;
        cfg.dropout = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let run = run_training(&cfg, &tcfg, &samples[..64], &store, 9, dir.path()).unwrap();

        let trained = Model::load(&cfg, &run.checkpoint).unwrap();
        let fresh = Model::new(&cfg, 9).unwrap();
        for (a, b) in trained.params.iter().zip(fresh.params.iter()) {
            assert_eq!(a.value.as_slice(), b.value.as_slice(), "{} moved", a.name);
        }
        assert!(
            (run.epoch_losses[0] - run.epoch_losses[1]).abs() < 1e-12,
            "flat curve expected, got {:?}",
            run.epoch_losses
        );
    }

    #[test]
    fn loss_decreases_across_epochs_on_the_small_corpus() {
        let (samples, store) = small_corpus();
        for variant in [Variant::BaseMha, Variant::DweA] {
            let cfg = small_cfg(variant);
            let tcfg = TrainingConfig::default();
            let dir = tempfile::tempdir().unwrap();
            let run = run_training(&cfg, &tcfg, &samples, &store, 42, dir.path()).unwrap();
            assert_eq!(run.epoch_losses.len(), 3);
            assert!(
                run.epoch_losses[0] > run.epoch_losses[1]
                    && run.epoch_losses[1] > run.epoch_losses[2],
                "{variant}: losses should fall, got {:?}",
                run.epoch_losses
            );
            assert!(run.epoch_losses.iter().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_checkpoints() {
        let (samples, store) = small_corpus();
        let cfg = small_cfg(Variant::DweW);
        let tcfg = TrainingConfig {
            epochs: 2,
            ..TrainingConfig::default()
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let r1 = run_training(&cfg, &tcfg, &samples[..96], &store, 7, d1.path()).unwrap();
        let r2 = run_training(&cfg, &tcfg, &samples[..96], &store, 7, d2.path()).unwrap();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        let b1 = std::fs::read(&r1.checkpoint).unwrap();
        let b2 = std::fs::read(&r2.checkpoint).unwrap();
        assert_eq!(b1, b2, "checkpoints diverged across identical runs");

        // Per-epoch checkpoints and the config snapshot exist.
        assert!(d1.path().join("dwew.epoch1.nrck").exists());
        assert!(d1.path().join("dwew.epoch2.nrck").exists());
        assert!(d1.path().join("dwew.json").exists());
    }

    #[test]
    fn non_finite_loss_aborts_with_the_batch_named() {
        let (samples, _) = small_corpus();
        let cfg = small_cfg(Variant::BaseMha);
        // Overflow-scale embeddings: the attention logits overflow to
        // infinity and the loss turns NaN in the first batch.
        let mut store = EmbeddingStore::new(cfg.d);
        let mut ids: Vec<&str> = samples[..8]
            .iter()
            .flat_map(|s| {
                s.history
                    .iter()
                    .map(|r| r.nid.as_str())
                    .chain(std::iter::once(s.positive.as_str()))
                    .chain(s.negatives.iter().map(|n| n.as_str()))
            })
            .collect();
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            store
                .insert(NewsEmbedding {
                    id: id.to_string(),
                    vector: vec![1e200; cfg.d],
                })
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let err = run_training(
            &cfg,
            &TrainingConfig::default(),
            &samples[..8],
            &store,
            3,
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(err.to_string().contains("batch"));
    }
}
