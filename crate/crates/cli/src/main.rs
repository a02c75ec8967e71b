//! `lpattn` — train and evaluate small character-level language models with
//! pluggable query–key normalization, and sweep the norm order p across
//! K-fold splits.
//!
//! Exit codes: 0 on success, 1 when a run or data problem occurred, 2 for
//! configuration/usage errors.

use clap::{Args, Parser, Subcommand};
use lpattn_cli::config::{Preset, Settings};
use lpattn_cli::export::export_all;
use lpattn_cli::sweep::{self, load_tokens, run_sweep, summarize_dir, RunSpec};
use lpattn_core::attention::AttentionVariant;
use lpattn_core::data::{load_corpus, make_folds, CharVocab};
use lpattn_core::error::{Error, Result};
use lpattn_core::model::GptModel;
use lpattn_core::training::evaluate_val;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lpattn",
    version,
    about = "lp query-key normalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the K-fold × p sweep and export aggregate tables and charts.
    Sweep(SweepArgs),
    /// Train one (variant, p, fold) cell; write its metrics CSV and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one fold's validation span.
    Eval(EvalArgs),
    /// Generate text from a checkpoint.
    Sample(SampleArgs),
    /// Re-aggregate existing run CSVs and rewrite the report files.
    Report(ReportArgs),
    /// Run the numerical verification battery.
    Selftest,
}

/// Options shared by every command that builds a model or sweep config.
#[derive(Args)]
struct ConfigArgs {
    /// Built-in preset to start from: paper (6L/384d) or tiny (2L/64d).
    #[arg(long, default_value = "paper")]
    preset: String,

    /// TOML config file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Base seed; per-run seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn settings(&self) -> Result<Settings> {
        let preset: Preset = self.preset.parse()?;
        let mut settings = Settings::preset(preset);
        if let Some(path) = &self.config {
            settings.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            settings.sweep.base_seed = seed;
        }
        Ok(settings)
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Corpus text file.
    #[arg(long, default_value = "data/tinyshakespeare.txt")]
    data: PathBuf,

    /// Output directory (per-run CSVs under <out>/runs, reports at top level).
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Restrict the sweep to these p values (repeatable).
    #[arg(long = "p")]
    p_values: Vec<f64>,

    /// Attention variants to include: lp, qknorm, standard (repeatable).
    #[arg(long = "variant")]
    variants: Vec<String>,

    /// Worker threads (additionally capped by LPATTN_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Corpus text file.
    #[arg(long, default_value = "data/tinyshakespeare.txt")]
    data: PathBuf,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Attention variant: lp, qknorm or standard.
    #[arg(long, default_value = "lp")]
    variant: String,

    /// Norm order for the lp variant.
    #[arg(long)]
    p: Option<f64>,

    /// Fold index to train on.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Corpus text file (must match the checkpoint's vocabulary).
    #[arg(long, default_value = "data/tinyshakespeare.txt")]
    data: PathBuf,

    /// Fold index whose validation span to evaluate.
    #[arg(long, default_value_t = 0)]
    fold: usize,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Corpus text file (supplies the vocabulary).
    #[arg(long, default_value = "data/tinyshakespeare.txt")]
    data: PathBuf,

    /// Prompt to continue from.
    #[arg(long, default_value = "\n")]
    prompt: String,

    /// Number of tokens to generate.
    #[arg(long, default_value_t = 500)]
    length: usize,

    /// Softmax temperature; 0 = greedy.
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,

    /// Sampling seed.
    #[arg(long, default_value_t = 1337)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a previous sweep (reads <out>/runs/*.csv).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    // Die quietly on SIGPIPE like standard unix filters instead of panicking
    // when stdout closes early (e.g. piped into `head`).
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sweep(args) => cmd_sweep(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Report(args) => cmd_report(args),
        Command::Selftest => {
            let ok = selftest()?;
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}

fn selftest() -> Result<bool> {
    let stdout = std::io::stdout();
    lpattn_cli::selftest::run(stdout.lock()).map_err(|e| Error::io(PathBuf::from("<stdout>"), e))
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode> {
    let mut settings = args.config.settings()?;
    if !args.p_values.is_empty() {
        settings.sweep.p_values = args.p_values.clone();
    }
    if !args.variants.is_empty() {
        settings.sweep.variants = args
            .variants
            .iter()
            .map(|v| v.parse::<AttentionVariant>())
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(threads) = args.threads {
        settings.sweep.parallelism = threads;
    }
    settings.validate()?;
    let (_vocab, tokens) = load_tokens(&args.data, settings.model.vocab_size)?;
    let outcome = run_sweep(&settings, tokens, &args.out, |msg| println!("{msg}"))?;
    let written = export_all(&outcome.summary, &args.out)?;
    println!(
        "sweep finished: {} executed, {} skipped (already complete), {} failed",
        outcome.executed.len(),
        outcome.skipped.len(),
        outcome.failures.len()
    );
    println!("p,averaged_min,argmin_iter");
    for g in &outcome.summary.groups {
        println!("{},{:.6},{}", g.label(), g.averaged_min, g.argmin_iter);
    }
    println!(
        "wrote {} report files under {}",
        written.len(),
        args.out.display()
    );
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (run_id, msg) in &outcome.failures {
            eprintln!("run {run_id} failed: {msg}");
        }
        Ok(ExitCode::from(1))
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut settings = args.config.settings()?;
    let variant: AttentionVariant = args.variant.parse()?;
    settings.set_variant(variant)?;
    if let Some(p) = args.p {
        settings.set_p(p)?;
    }
    settings.validate()?;
    if args.fold >= settings.sweep.k_folds {
        return Err(Error::Config(format!(
            "fold {} out of range for a {}-fold split",
            args.fold, settings.sweep.k_folds
        )));
    }
    let spec = RunSpec {
        variant,
        p: match variant {
            AttentionVariant::Lp => Some(settings.model.attention.p),
            _ => None,
        },
        fold: args.fold,
    };
    let (_vocab, tokens) = load_tokens(&args.data, settings.model.vocab_size)?;
    let folds = make_folds(tokens.len(), settings.sweep.k_folds)?;
    std::fs::create_dir_all(sweep::runs_dir(&args.out)).map_err(|e| Error::io(&args.out, e))?;
    let ckpt = args.out.join(format!("{}.ckpt", spec.run_id()));
    let metrics = sweep::execute_run(&settings, &spec, tokens, &folds, &args.out, Some(&ckpt))?;
    let last = metrics
        .last()
        .expect("training always records at least once");
    println!(
        "run {} finished: final val_loss {:.6} after {} iterations",
        spec.run_id(),
        last.val_loss,
        last.iter
    );
    println!("checkpoint: {}", ckpt.display());
    println!(
        "metrics: {}",
        sweep::runs_dir(&args.out)
            .join(format!("{}.csv", spec.run_id()))
            .display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let settings = args.config.settings()?;
    let model = GptModel::<f32>::load_checkpoint(&args.checkpoint)?;
    let (_vocab, tokens) = load_tokens(&args.data, model.config.vocab_size)?;
    let folds = make_folds(tokens.len(), settings.sweep.k_folds)?;
    let fold = folds.get(args.fold).ok_or_else(|| {
        Error::Config(format!(
            "fold {} out of range for a {}-fold split",
            args.fold, settings.sweep.k_folds
        ))
    })?;
    let stride = settings
        .train
        .eval_tile_stride
        .unwrap_or(model.config.context_len);
    let loss = evaluate_val(&model, fold, &tokens, stride)?;
    println!("fold {} val_loss {loss:.6}", args.fold);
    Ok(ExitCode::SUCCESS)
}

fn cmd_sample(args: SampleArgs) -> Result<ExitCode> {
    let model = GptModel::<f32>::load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.data)?;
    let vocab = CharVocab::from_text(&corpus.text)?;
    if vocab.size() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "{} has a vocabulary of {} but the checkpoint expects {}",
            args.data.display(),
            vocab.size(),
            model.config.vocab_size
        )));
    }
    let prompt = vocab.encode(&args.prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let ids = model.generate(&prompt, args.length, args.temperature, &mut rng)?;
    println!("{}", vocab.decode(&ids)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(args: ReportArgs) -> Result<ExitCode> {
    let summary = summarize_dir(&args.out)?;
    let written = export_all(&summary, &args.out)?;
    println!("p,averaged_min,argmin_iter");
    for g in &summary.groups {
        println!("{},{:.6},{}", g.label(), g.averaged_min, g.argmin_iter);
    }
    println!(
        "wrote {} report files under {}",
        written.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
