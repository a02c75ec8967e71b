//! Sweep orchestration: the (variant × p × fold) grid, per-run seeding,
//! resumable execution with one CSV per run, and a bounded worker pool.
//!
//! Every run is fully isolated (own model, optimizer, sampler, output file),
//! so parallel workers share nothing but the token stream. A run is
//! "completed" exactly when its final CSV exists; partial output lives under
//! a `.partial` name until the atomic rename, which is what makes
//! interrupting and resuming a sweep equivalent to running it once.

use crate::aggregate::{aggregate, SweepSummary};
use crate::config::Settings;
use lpattn_core::attention::AttentionVariant;
use lpattn_core::data::{encode_to_u16, load_corpus, make_folds, CharVocab, FoldPlan};
use lpattn_core::error::{Error, Result};
use lpattn_core::model::ModelConfig;
use lpattn_core::training::{
    mix_seed, read_metrics_csv, run_training, write_metrics_csv, MetricsRecord, RunMeta,
    TrainConfig,
};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Load a corpus, build its character vocabulary and check it against the
/// configured model before encoding the token stream.
pub fn load_tokens(data_path: &Path, expected_vocab: usize) -> Result<(CharVocab, Arc<Vec<u16>>)> {
    let corpus = load_corpus(data_path)?;
    let vocab = CharVocab::from_text(&corpus.text)?;
    if vocab.size() != expected_vocab {
        return Err(Error::Config(format!(
            "{} contains {} distinct characters but the model is configured \
             for a vocabulary of {}; adjust vocab_size or use the matching corpus",
            data_path.display(),
            vocab.size(),
            expected_vocab
        )));
    }
    let tokens = encode_to_u16(&vocab, &corpus.text)?;
    Ok((vocab, Arc::new(tokens)))
}

/// One cell of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub variant: AttentionVariant,
    /// Norm order; `None` for the standard/qknorm baselines.
    pub p: Option<f64>,
    pub fold: usize,
}

impl RunSpec {
    /// Stable identifier; doubles as the CSV file stem.
    pub fn run_id(&self) -> String {
        match self.p {
            Some(p) => format!("{}_p{:.1}_fold{}", self.variant.label(), p, self.fold),
            None => format!("{}_fold{}", self.variant.label(), self.fold),
        }
    }

    /// Per-run seed: hash of (base, variant, p, fold) so every grid cell is
    /// independent yet reproducible in isolation.
    pub fn seed(&self, base: u64) -> u64 {
        let variant_tag = match self.variant {
            AttentionVariant::Standard => 1,
            AttentionVariant::QkNorm => 2,
            AttentionVariant::Lp => 3,
        };
        let p_bits = self.p.map(f64::to_bits).unwrap_or(0);
        mix_seed(
            mix_seed(mix_seed(base, variant_tag), p_bits),
            self.fold as u64,
        )
    }
}

/// The full grid: for lp every (p, fold); for each baseline every fold.
pub fn grid(settings: &Settings) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &variant in &settings.sweep.variants {
        match variant {
            AttentionVariant::Lp => {
                for &p in &settings.sweep.p_values {
                    for fold in 0..settings.sweep.k_folds {
                        specs.push(RunSpec {
                            variant,
                            p: Some(p),
                            fold,
                        });
                    }
                }
            }
            _ => {
                for fold in 0..settings.sweep.k_folds {
                    specs.push(RunSpec {
                        variant,
                        p: None,
                        fold,
                    });
                }
            }
        }
    }
    specs
}

/// Concurrency actually used: the configured parallelism, capped by the
/// LPATTN_THREADS environment variable and the number of runs.
pub fn effective_parallelism(configured: usize, n_runs: usize) -> usize {
    let env_cap = std::env::var("LPATTN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or(usize::MAX);
    configured.min(env_cap).min(n_runs.max(1)).max(1)
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub failures: Vec<(String, String)>,
    pub summary: SweepSummary,
}

pub fn runs_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("runs")
}

fn csv_path(out_dir: &Path, spec: &RunSpec) -> PathBuf {
    runs_dir(out_dir).join(format!("{}.csv", spec.run_id()))
}

/// Derive the per-run model/train configs from the shared settings.
fn cell_configs(settings: &Settings, spec: &RunSpec) -> Result<(ModelConfig, TrainConfig)> {
    let seed = spec.seed(settings.sweep.base_seed);
    let mut cell = settings.clone();
    cell.set_variant(spec.variant)?;
    if let Some(p) = spec.p {
        cell.set_p(p)?;
    }
    let mut model = cell.model;
    model.seed = seed;
    let train = TrainConfig { seed, ..cell.train };
    Ok((model, train))
}

/// Execute one grid cell and atomically publish its CSV. A checkpoint is
/// written only when a path is supplied (single-run training); sweep cells
/// skip it to keep the output directory at 70 small CSVs.
pub fn execute_run(
    settings: &Settings,
    spec: &RunSpec,
    tokens: Arc<Vec<u16>>,
    folds: &[FoldPlan],
    out_dir: &Path,
    checkpoint: Option<&Path>,
) -> Result<Vec<MetricsRecord>> {
    let (model_cfg, train_cfg) = cell_configs(settings, spec)?;
    let meta = RunMeta {
        run_id: spec.run_id(),
        variant: spec.variant.label().to_string(),
        p: spec.p,
    };
    let result = run_training(
        &model_cfg,
        &train_cfg,
        &folds[spec.fold],
        tokens,
        &meta,
        checkpoint,
    )?;
    let final_path = csv_path(out_dir, spec);
    let partial = final_path.with_extension("csv.partial");
    write_metrics_csv(&partial, &result.metrics)?;
    std::fs::rename(&partial, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(result.metrics)
}

/// Run (or resume) the whole grid, then aggregate from the CSVs on disk.
pub fn run_sweep(
    settings: &Settings,
    tokens: Arc<Vec<u16>>,
    out_dir: &Path,
    mut progress: impl FnMut(&str) + Send,
) -> Result<SweepOutcome> {
    settings.validate()?;
    let specs = grid(settings);
    if specs.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let folds = make_folds(tokens.len(), settings.sweep.k_folds)?;
    std::fs::create_dir_all(runs_dir(out_dir)).map_err(|e| Error::io(out_dir, e))?;

    let mut skipped = Vec::new();
    let mut pending: Vec<RunSpec> = Vec::new();
    for spec in specs {
        if csv_path(out_dir, &spec).exists() {
            skipped.push(spec.run_id());
        } else {
            pending.push(spec);
        }
    }
    progress(&format!(
        "grid: {} runs ({} already on disk, {} to execute)",
        skipped.len() + pending.len(),
        skipped.len(),
        pending.len()
    ));

    let workers = effective_parallelism(settings.sweep.parallelism, pending.len());
    let next = AtomicUsize::new(0);
    let executed = Mutex::new(Vec::<String>::new());
    let failures = Mutex::new(Vec::<(String, String)>::new());
    let progress_lock = Mutex::new(&mut progress);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(spec) = pending.get(i) else { break };
                let started = std::time::Instant::now();
                match execute_run(settings, spec, tokens.clone(), &folds, out_dir, None) {
                    Ok(_) => {
                        executed.lock().unwrap().push(spec.run_id());
                        let mut p = progress_lock.lock().unwrap();
                        p(&format!(
                            "done {} in {:.1}s",
                            spec.run_id(),
                            started.elapsed().as_secs_f64()
                        ));
                    }
                    Err(e) => {
                        failures
                            .lock()
                            .unwrap()
                            .push((spec.run_id(), e.to_string()));
                        let mut p = progress_lock.lock().unwrap();
                        p(&format!("FAILED {}: {e}", spec.run_id()));
                    }
                }
            });
        }
    });

    let executed = executed.into_inner().unwrap();
    let mut failures = failures.into_inner().unwrap();
    failures.sort();
    let summary = summarize_dir(out_dir)?;
    Ok(SweepOutcome {
        executed,
        skipped,
        failures,
        summary,
    })
}

/// Aggregation is a pure function of the CSVs on disk: re-read everything
/// under `runs/` and summarize.
pub fn summarize_dir(out_dir: &Path) -> Result<SweepSummary> {
    let dir = runs_dir(out_dir);
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut paths: Vec<PathBuf> = Vec::new();
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e == "csv") {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Aggregation(format!(
            "no run CSVs found under {}",
            dir.display()
        )));
    }
    for path in paths {
        records.extend(read_metrics_csv(&path)?);
    }
    aggregate(&records)
}
