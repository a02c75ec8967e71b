//! One training run: optimization loop, periodic tiled evaluation, metric
//! records, wall-clock accounting.
//!
//! A run is strictly sequential and fully seeded: sampler, dropout and
//! initialization all derive from explicit seeds, so two runs with the same
//! configuration produce identical metric series (timestamps aside).

use crate::data::{window_at, BatchSampler, FoldPlan};
use crate::error::{Error, Result};
use crate::model::{GptModel, ModelConfig};
use crate::tensor::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::tensor::tape::Tape;
use crate::tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Windows per forward pass during tiled evaluation.
const EVAL_BATCH: usize = 32;

/// Batches averaged for the train-loss estimate at eval points.
pub const TRAIN_LOSS_BATCHES: usize = 8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub eval_interval: usize,
    /// Stride for tiled validation; `None` = context_len (non-overlapping).
    pub eval_tile_stride: Option<usize>,
    pub batch_size: usize,
    pub warmup_iters: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Global L2 gradient clip; values <= 0 disable clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The reference character-model recipe.
    fn default() -> Self {
        TrainConfig {
            max_iters: 5000,
            eval_interval: 250,
            eval_tile_stride: None,
            batch_size: 64,
            warmup_iters: 100,
            lr_max: 1e-3,
            lr_min: 1e-4,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            seed: 1337,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (v, name) in [(self.lr_max, "lr_max"), (self.lr_min, "lr_min")] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr_min ({}) must not exceed lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        if self.eval_tile_stride == Some(0) {
            return Err(Error::Config("eval_tile_stride must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate at a given schedule position: linear warmup 0 -> lr_max
/// over `warmup_iters`, cosine decay to lr_min at `max_iters`, clamped
/// afterwards. Step i of the loop applies `lr_at(i + 1)` so the first
/// update is nonzero and the last lands exactly on lr_min.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iters > 0 && iter <= cfg.warmup_iters {
        return cfg.lr_max * iter as f64 / cfg.warmup_iters as f64;
    }
    if iter >= cfg.max_iters {
        return cfg.lr_min;
    }
    // here warmup < iter < max_iters, so the span is positive
    let span = (cfg.max_iters - cfg.warmup_iters) as f64;
    let progress = (iter - cfg.warmup_iters) as f64 / span;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Identity on the run grid: stable, order-sensitive seed mixing
/// (splitmix64 finalizer). Changing this would invalidate resumable sweeps.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub variant: String,
    /// Norm order for lp runs; empty column for standard/qknorm runs.
    pub p: Option<f64>,
    pub fold: usize,
    pub iter: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunMeta {
    pub run_id: String,
    pub variant: String,
    pub p: Option<f64>,
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics: Vec<MetricsRecord>,
    pub min_val_loss: f64,
    pub argmin_iter: usize,
    pub total_wall_seconds: f64,
    pub checkpoint_path: Option<PathBuf>,
}

/// Mean cross-entropy over non-overlapping windows tiled across the fold's
/// validation span. Dropout is off; repeated calls return identical values.
pub fn evaluate_val<S: Scalar>(
    model: &GptModel<S>,
    fold: &FoldPlan,
    tokens: &[u16],
    stride: usize,
) -> Result<f64> {
    let t = model.config.context_len;
    let offsets = fold.tiled_val_offsets(t, stride);
    if offsets.is_empty() {
        return Err(Error::Config(format!(
            "validation span of fold {} ({} tokens) is smaller than one window of {} tokens",
            fold.fold_index,
            fold.val_len(),
            t + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: dropout is off
    let mut weighted = 0.0f64;
    for chunk in offsets.chunks(EVAL_BATCH) {
        let mut inputs = Vec::with_capacity(chunk.len() * t);
        let mut targets = Vec::with_capacity(chunk.len() * t);
        for &off in chunk {
            window_at(tokens, off, t, &mut inputs, &mut targets);
        }
        let mut tape = Tape::<S>::inference();
        let loss = model.loss(&mut tape, &inputs, &targets, chunk.len(), false, &mut rng)?;
        weighted += tape.value(loss).item().to_f64() * chunk.len() as f64;
    }
    Ok(weighted / offsets.len() as f64)
}

/// Low-noise train-loss estimate: mean over freshly sampled batches with
/// dropout off.
fn estimate_train_loss<S: Scalar>(
    model: &GptModel<S>,
    sampler: &mut BatchSampler,
    batches: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: dropout is off
    let mut total = 0.0f64;
    for _ in 0..batches {
        let (inputs, targets) = sampler.sample();
        let batch = inputs.len() / model.config.context_len;
        let mut tape = Tape::<S>::inference();
        let loss = model.loss(&mut tape, &inputs, &targets, batch, false, &mut rng)?;
        total += tape.value(loss).item().to_f64();
    }
    Ok(total / batches as f64)
}

/// Execute one full training run on `fold`. Metrics are recorded at iter 0,
/// every `eval_interval` iterations, and at `max_iters`. Aborts with a
/// diagnostic error if the loss leaves the finite range.
pub fn run_training(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    fold: &FoldPlan,
    tokens: Arc<Vec<u16>>,
    meta: &RunMeta,
    checkpoint_path: Option<&Path>,
) -> Result<RunResult> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let start = Instant::now();
    let context_len = model_cfg.context_len;
    let stride = train_cfg.eval_tile_stride.unwrap_or(context_len);

    let mut model = GptModel::<f32>::init(model_cfg.clone())?;
    let mut sampler = BatchSampler::new(
        tokens.clone(),
        fold,
        train_cfg.batch_size,
        context_len,
        mix_seed(train_cfg.seed, 0xA11CE),
    )?;
    // separate stream so the eval cadence never perturbs training batches
    let mut estimator = BatchSampler::new(
        tokens.clone(),
        fold,
        train_cfg.batch_size,
        context_len,
        mix_seed(train_cfg.seed, 0xE57),
    )?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(train_cfg.seed, 0xD20));
    let mut opt = AdamW::new(train_cfg.adamw());

    let mut metrics: Vec<MetricsRecord> = Vec::new();
    let mut last_grad_norm = f64::NAN;
    let mut iter = 0usize;
    loop {
        if iter.is_multiple_of(train_cfg.eval_interval) || iter == train_cfg.max_iters {
            let val_loss = evaluate_val(&model, fold, &tokens, stride)?;
            let train_loss = estimate_train_loss(&model, &mut estimator, TRAIN_LOSS_BATCHES)?;
            if !val_loss.is_finite() || !train_loss.is_finite() {
                return Err(Error::Diverged {
                    iter,
                    detail: format!(
                        "non-finite evaluation (train {train_loss}, val {val_loss}) at lr {:.6e}, last grad norm {last_grad_norm}",
                        lr_at(iter, train_cfg)
                    ),
                });
            }
            metrics.push(MetricsRecord {
                run_id: meta.run_id.clone(),
                variant: meta.variant.clone(),
                p: meta.p,
                fold: fold.fold_index,
                iter,
                train_loss,
                val_loss,
                elapsed_seconds: start.elapsed().as_secs_f64(),
            });
        }
        if iter >= train_cfg.max_iters {
            break;
        }

        let (inputs, targets) = sampler.sample();
        let mut tape = Tape::<f32>::new();
        let loss = model.loss(
            &mut tape,
            &inputs,
            &targets,
            train_cfg.batch_size,
            true,
            &mut dropout_rng,
        )?;
        let loss_value = tape.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                iter,
                detail: format!(
                    "training loss {loss_value} at lr {:.6e}, last grad norm {last_grad_norm}",
                    lr_at(iter + 1, train_cfg)
                ),
            });
        }
        tape.backward(loss)?;
        tape.export_grads(&mut model.store)?;
        last_grad_norm = clip_grad_norm(&mut model.store, train_cfg.grad_clip)?;
        opt.step(&mut model.store, lr_at(iter + 1, train_cfg))?;
        iter += 1;
    }

    let (argmin_iter, min_val_loss) = metrics.iter().map(|r| (r.iter, r.val_loss)).fold(
        (0usize, f64::INFINITY),
        |best, (i, v)| {
            if v < best.1 {
                (i, v)
            } else {
                best
            }
        },
    );

    let checkpoint_path = match checkpoint_path {
        Some(path) => {
            model.save_checkpoint(path)?;
            Some(path.to_path_buf())
        }
        None => None,
    };
    Ok(RunResult {
        metrics,
        min_val_loss,
        argmin_iter,
        total_wall_seconds: start.elapsed().as_secs_f64(),
        checkpoint_path,
    })
}

// ---- metrics CSV -------------------------------------------------------------

pub const METRICS_HEADER: &str = "run_id,variant,p,fold,iter,train_loss,val_loss,elapsed_seconds";

/// Serialize records in the fixed 8-column schema, losses at 6 decimals.
pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let p = r.p.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.3}\n",
            r.run_id, r.variant, p, r.fold, r.iter, r.train_loss, r.val_loss, r.elapsed_seconds
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(records)).map_err(|e| Error::io(path, e))
}

/// Parse a metrics CSV produced by [`metrics_to_csv`]. No field of the
/// schema may contain commas, so plain splitting is exact.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text).map_err(|msg| {
        Error::Checkpoint(format!("{}: malformed metrics CSV: {msg}", path.display()))
    })
}

pub fn parse_metrics_csv(text: &str) -> std::result::Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => return Err(format!("bad header {other:?}")),
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(format!(
                "line {}: expected 8 fields, got {}",
                lineno + 2,
                fields.len()
            ));
        }
        let p = if fields[2].is_empty() {
            None
        } else {
            Some(
                fields[2]
                    .parse::<f64>()
                    .map_err(|e| format!("line {}: p: {e}", lineno + 2))?,
            )
        };
        let parse_usize = |s: &str, name: &str| {
            s.parse::<usize>()
                .map_err(|e| format!("line {}: {name}: {e}", lineno + 2))
        };
        let parse_f64 = |s: &str, name: &str| {
            s.parse::<f64>()
                .map_err(|e| format!("line {}: {name}: {e}", lineno + 2))
        };
        out.push(MetricsRecord {
            run_id: fields[0].to_string(),
            variant: fields[1].to_string(),
            p,
            fold: parse_usize(fields[3], "fold")?,
            iter: parse_usize(fields[4], "iter")?,
            train_loss: parse_f64(fields[5], "train_loss")?,
            val_loss: parse_f64(fields[6], "val_loss")?,
            elapsed_seconds: parse_f64(fields[7], "elapsed_seconds")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionVariant;
    use crate::data::make_folds;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            max_iters: 4,
            eval_interval: 2,
            batch_size: 2,
            warmup_iters: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_reference_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.max_iters, 5000);
        assert_eq!(c.eval_interval, 250);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.warmup_iters, 100);
        assert_eq!(c.lr_max, 1e-3);
        assert_eq!(c.lr_min, 1e-4);
        assert_eq!(c.grad_clip, 1.0);
        assert_eq!((c.beta1, c.beta2), (0.9, 0.95));
        assert_eq!(c.weight_decay, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn validate_rejects_inverted_lr_band() {
        let cfg = TrainConfig {
            lr_min: 1e-2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lr_schedule_hits_the_pinned_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(1, &cfg) - cfg.lr_max / 100.0).abs() < 1e-15);
        assert_eq!(lr_at(cfg.warmup_iters, &cfg), cfg.lr_max);
        assert!((lr_at(cfg.max_iters, &cfg) - cfg.lr_min).abs() < 1e-15);
        assert_eq!(lr_at(cfg.max_iters + 1000, &cfg), cfg.lr_min);
        // midpoint of cosine = average of the band
        let mid = (cfg.warmup_iters + cfg.max_iters) / 2;
        assert!((lr_at(mid, &cfg) - (cfg.lr_max + cfg.lr_min) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn lr_schedule_is_monotone_per_segment() {
        let cfg = TrainConfig::default();
        for i in 0..cfg.warmup_iters {
            assert!(lr_at(i + 1, &cfg) >= lr_at(i, &cfg), "warmup rises at {i}");
        }
        for i in cfg.warmup_iters..cfg.max_iters {
            assert!(
                lr_at(i + 1, &cfg) <= lr_at(i, &cfg) + 1e-15,
                "cosine falls at {i}"
            );
        }
    }

    #[test]
    fn mix_seed_is_order_sensitive_and_stable() {
        assert_eq!(mix_seed(1337, 42), mix_seed(1337, 42));
        assert_ne!(mix_seed(1337, 42), mix_seed(42, 1337));
        assert_ne!(mix_seed(0, 0), 0, "finalizer scrambles zero");
        // frozen values guard accidental changes that would break sweep resume
        assert_eq!(mix_seed(0, 0), 0xE220_A839_7B1D_CDAF_u64);
    }

    fn zeroed_model(vocab: usize) -> GptModel<f32> {
        let cfg = crate::model::ModelConfig::new(
            1,
            1,
            8,
            4,
            vocab,
            0.0,
            AttentionVariant::Standard,
            2.0,
            7,
        )
        .unwrap();
        let mut model = GptModel::<f32>::init(cfg).unwrap();
        for p in model.store.iter_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        model
    }

    #[test]
    fn uniform_model_val_loss_is_log_vocab() {
        let model = zeroed_model(65);
        let tokens: Vec<u16> = (0..400u16).map(|i| i % 65).collect();
        let fold = make_folds(400, 4).unwrap()[0];
        let got = evaluate_val(&model, &fold, &tokens, 4).unwrap();
        assert!((got - 65f64.ln()).abs() < 1e-4, "{got}");
    }

    #[test]
    fn eval_of_two_windows_is_the_mean_of_individual_windows() {
        let model = {
            let cfg =
                crate::model::ModelConfig::new(1, 2, 8, 4, 11, 0.0, AttentionVariant::Lp, 3.0, 21)
                    .unwrap();
            GptModel::<f32>::init(cfg).unwrap()
        };
        let tokens: Vec<u16> = (0..60u16).map(|i| (i * 7) % 11).collect();
        // fold 0 of 6: val span [0, 10) fits exactly two windows of 5 at stride 4...
        // use an explicit plan for clarity: val [0, 10), window = 4+1, stride 4 -> offsets 0, 4
        let fold = FoldPlan {
            k: 6,
            fold_index: 0,
            n_tokens: 60,
            val_start: 0,
            val_end: 10,
        };
        let combined = evaluate_val(&model, &fold, &tokens, 4).unwrap();

        let single = |off: usize| {
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            window_at(&tokens, off, 4, &mut inputs, &mut targets);
            let mut tape = Tape::<f32>::inference();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let loss = model
                .loss(&mut tape, &inputs, &targets, 1, false, &mut rng)
                .unwrap();
            tape.value(loss).item() as f64
        };
        let mean = (single(0) + single(4)) / 2.0;
        assert!((combined - mean).abs() < 1e-6, "{combined} vs {mean}");
    }

    #[test]
    fn eval_is_stable_across_repeated_calls() {
        let model = zeroed_model(11);
        let tokens: Vec<u16> = (0..100u16).map(|i| i % 11).collect();
        let fold = make_folds(100, 5).unwrap()[1];
        let a = evaluate_val(&model, &fold, &tokens, 4).unwrap();
        let b = evaluate_val(&model, &fold, &tokens, 4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn eval_rejects_undersized_val_span() {
        let model = zeroed_model(11);
        let tokens: Vec<u16> = vec![0; 40];
        let fold = FoldPlan {
            k: 10,
            fold_index: 3,
            n_tokens: 40,
            val_start: 0,
            val_end: 3, // < context_len + 1 = 5
        };
        assert!(evaluate_val(&model, &fold, &tokens, 4).is_err());
    }

    fn synth_tokens(n: usize, vocab: u16) -> Arc<Vec<u16>> {
        Arc::new(
            (0..n)
                .map(|i| ((i * 31 + 7) % vocab as usize) as u16)
                .collect(),
        )
    }

    fn meta() -> RunMeta {
        RunMeta {
            run_id: "test-run".into(),
            variant: "lp".into(),
            p: Some(2.0),
        }
    }

    #[test]
    fn zero_iteration_run_records_one_untrained_eval() {
        let model_cfg =
            crate::model::ModelConfig::new(1, 2, 8, 8, 65, 0.0, AttentionVariant::Lp, 2.0, 3)
                .unwrap();
        let train_cfg = TrainConfig {
            max_iters: 0,
            eval_interval: 10,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let tokens = synth_tokens(600, 65);
        let fold = make_folds(600, 6).unwrap()[0];
        let result = run_training(&model_cfg, &train_cfg, &fold, tokens, &meta(), None).unwrap();
        assert_eq!(result.metrics.len(), 1);
        assert_eq!(result.metrics[0].iter, 0);
        assert!(
            (result.metrics[0].val_loss - 65f64.ln()).abs() < 0.3,
            "untrained eval near ln(65): {}",
            result.metrics[0].val_loss
        );
        assert_eq!(result.min_val_loss, result.metrics[0].val_loss);
        assert_eq!(result.argmin_iter, 0);
    }

    #[test]
    fn identical_configs_produce_identical_metric_series() {
        let model_cfg =
            crate::model::ModelConfig::new(1, 2, 8, 8, 11, 0.1, AttentionVariant::Lp, 1.5, 5)
                .unwrap();
        let train_cfg = TrainConfig {
            max_iters: 4,
            eval_interval: 2,
            batch_size: 2,
            warmup_iters: 2,
            ..TrainConfig::default()
        };
        let tokens = synth_tokens(400, 11);
        let fold = make_folds(400, 4).unwrap()[2];
        let one =
            run_training(&model_cfg, &train_cfg, &fold, tokens.clone(), &meta(), None).unwrap();
        let two = run_training(&model_cfg, &train_cfg, &fold, tokens, &meta(), None).unwrap();
        assert_eq!(one.metrics.len(), two.metrics.len());
        assert_eq!(one.metrics.len(), 3, "iters 0, 2, 4");
        for (a, b) in one.metrics.iter().zip(&two.metrics) {
            assert_eq!(a.iter, b.iter);
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
        assert!(one.metrics.windows(2).all(|w| w[0].iter < w[1].iter));
        assert!(one
            .metrics
            .iter()
            .all(|r| r.val_loss.is_finite() && r.train_loss.is_finite()));
    }

    #[test]
    fn poisoned_weights_abort_with_a_diagnostic() {
        let model_cfg =
            crate::model::ModelConfig::new(1, 2, 8, 8, 11, 0.0, AttentionVariant::Standard, 2.0, 5)
                .unwrap();
        // force divergence through an absurd learning rate
        let train_cfg = TrainConfig {
            max_iters: 200,
            eval_interval: 200,
            batch_size: 2,
            warmup_iters: 1,
            lr_max: 1e18,
            lr_min: 1e17,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let tokens = synth_tokens(400, 11);
        let fold = make_folds(400, 4).unwrap()[0];
        let err = run_training(&model_cfg, &train_cfg, &fold, tokens, &meta(), None)
            .expect_err("a 1e18 learning rate must blow up");
        match err {
            Error::Diverged { detail, .. } => {
                assert!(detail.contains("lr"), "diagnostic names the lr: {detail}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_preserves_records() {
        let records = vec![
            MetricsRecord {
                run_id: "lp_p2.0_fold0".into(),
                variant: "lp".into(),
                p: Some(2.0),
                fold: 0,
                iter: 0,
                train_loss: 4.174387,
                val_loss: 4.170001,
                elapsed_seconds: 0.123,
            },
            MetricsRecord {
                run_id: "standard_fold1".into(),
                variant: "standard".into(),
                p: None,
                fold: 1,
                iter: 250,
                train_loss: 2.5,
                val_loss: 2.25,
                elapsed_seconds: 61.5,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "lp_p2.0_fold0,lp,2,0,0,4.174387,4.170001,0.123"
        );
        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].p, Some(2.0));
        assert_eq!(back[1].p, None);
        assert_eq!(back[1].val_loss, 2.25);
        // losses are 6-decimal in the file
        assert!(text.contains("2.500000,2.250000"));
    }

    #[test]
    fn csv_parser_rejects_malformed_input() {
        assert!(parse_metrics_csv("nonsense\n").is_err());
        let bad_fields = format!("{METRICS_HEADER}\na,b,c\n");
        assert!(parse_metrics_csv(&bad_fields).is_err());
        let bad_number = format!("{METRICS_HEADER}\nr,lp,2,0,zero,1.0,1.0,0.1\n");
        assert!(parse_metrics_csv(&bad_number).is_err());
    }

    #[test]
    fn small_run_min_tracking_matches_series() {
        let model_cfg =
            crate::model::ModelConfig::new(1, 2, 8, 8, 11, 0.0, AttentionVariant::QkNorm, 2.0, 8)
                .unwrap();
        let tokens = synth_tokens(300, 11);
        let fold = make_folds(300, 3).unwrap()[1];
        let result = run_training(&model_cfg, &small_cfg(), &fold, tokens, &meta(), None).unwrap();
        let best = result
            .metrics
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(result.min_val_loss, best);
        let arg = result
            .metrics
            .iter()
            .find(|r| r.val_loss == best)
            .unwrap()
            .iter;
        assert_eq!(result.argmin_iter, arg);
    }
}
