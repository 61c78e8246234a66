//! The subcommand dispatcher. Each command resolves its configuration
//! (profile defaults + optional file), does its work, and writes one run
//! manifest into its output directory.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numeric failure.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{load_config, save_config, AppConfig, Profile};
use super::manifest::RunManifest;
use crate::datagen::{
    build_eval_set, build_train_samples, generate_corpus, mask_eval_dwell, read_impressions,
    split_impressions, write_impressions, EvalMode,
};
use crate::dwell::{dwell_stats, RawDwell};
use crate::encoders::{gradient_suite, EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::evalrun::{evaluate, run_sweep, run_training, sweep_csv, sweep_thresholds, SweepRow};
use crate::newsrep::{load_store, read_catalog, synth_embed_store, write_catalog, EmbeddingStore,
    NewsItem};

/// `out!`-family stand-ins that tolerate a consumer closing the pipe
/// early: `dwellrec stats | head` must truncate cleanly, not panic, and
/// the run's file artifacts must still land.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}
macro_rules! err {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stderr(), $($arg)*);
    }};
}
macro_rules! errln {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

#[derive(Parser, Debug)]
#[command(
    name = "dwellrec",
    version,
    about = "Dwell-time-aware news recommendation: generate logs, train encoders, evaluate"
)]
struct Cli {
    /// Configuration file (JSON); keys it omits come from the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Default group for everything the configuration leaves unset.
    #[arg(long, global = true, value_enum, default_value = "paper")]
    profile: Profile,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic corpus: news.jsonl, train.jsonl, test.jsonl.
    Gen {
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },

    /// Dwell-time distribution of the history clicks in an impression log.
    Stats {
        /// Impression log (JSONL) to scan.
        #[arg(long)]
        log: PathBuf,
        /// Output directory (defaults to the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Train the configured variants and write checkpoints.
    Train {
        #[arg(long)]
        seed: u64,
        /// Output directory for checkpoints, losses.csv, and config.json.
        #[arg(long)]
        out: PathBuf,
    },

    /// Score a checkpoint on the held-out impressions.
    Eval {
        /// Checkpoint file; its encoder config is read from the matching
        /// .json written at training time.
        #[arg(long)]
        ckpt: PathBuf,
        /// Label regime for the evaluation set.
        #[arg(long, value_enum, default_value = "normal")]
        set: SetKind,
        /// Effective-click threshold in seconds (defaults to the
        /// configured evaluation.theta_s).
        #[arg(long)]
        theta: Option<f64>,
        /// Hide all history dwell times at scoring time.
        #[arg(long)]
        mask_dwell: bool,
        /// Output directory (defaults to the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Effective-click threshold sweep over every configured variant.
    Sweep {
        /// Directory holding `<variant>.nrck` + `<variant>.json` pairs.
        #[arg(long)]
        ckpt_dir: PathBuf,
        /// Smallest threshold, in seconds.
        #[arg(long, default_value_t = 5.0)]
        min: f64,
        /// Largest threshold, in seconds (inclusive).
        #[arg(long, default_value_t = 40.0)]
        max: f64,
        /// Spacing between thresholds, in seconds.
        #[arg(long, default_value_t = 5.0)]
        step: f64,
        /// Output directory (defaults to the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Finite-difference audit of every layer and every encoder variant.
    GradCheck {
        /// Randomized trials to spread across the audit targets.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 4242)]
        seed: u64,
        /// Output directory (defaults to the current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SetKind {
    Normal,
    Real,
    Robust,
}

impl From<SetKind> for EvalMode {
    fn from(kind: SetKind) -> EvalMode {
        match kind {
            SetKind::Normal => EvalMode::Normal,
            SetKind::Real => EvalMode::Real,
            SetKind::Robust => EvalMode::Robust,
        }
    }
}

/// Parse arguments, run the subcommand, and return the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            out!("{e}");
            return 0;
        }
        Err(e) => {
            err!("{e}");
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            errln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: AppConfig,
    config_path: Option<PathBuf>,
}

impl Ctx {
    /// A manifest pre-loaded with the config file as an input, when one
    /// was given.
    fn manifest(&self, command: &str, seed: Option<u64>) -> Result<RunManifest> {
        let mut m = RunManifest::new(command, seed, &self.cfg);
        if let Some(path) = &self.config_path {
            m.input(path)?;
        }
        Ok(m)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => load_config(path, cli.profile)?,
        None => {
            let cfg = AppConfig::for_profile(cli.profile);
            cfg.validate()?;
            cfg
        }
    };
    let ctx = Ctx {
        cfg,
        config_path: cli.config,
    };
    match cli.cmd {
        Cmd::Gen { seed, out } => cmd_gen(&ctx, seed, &out),
        Cmd::Stats { log, out } => cmd_stats(&ctx, &log, &dir_or_cwd(out)),
        Cmd::Train { seed, out } => cmd_train(&ctx, seed, &out),
        Cmd::Eval {
            ckpt,
            set,
            theta,
            mask_dwell,
            out,
        } => cmd_eval(&ctx, &ckpt, set, theta, mask_dwell, &dir_or_cwd(out)),
        Cmd::Sweep {
            ckpt_dir,
            min,
            max,
            step,
            out,
        } => cmd_sweep(&ctx, &ckpt_dir, min, max, step, &dir_or_cwd(out)),
        Cmd::GradCheck { trials, seed, out } => {
            cmd_grad_check(&ctx, trials, seed, &dir_or_cwd(out))
        }
    }
}

fn dir_or_cwd(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("."))
}

/// The news embedding store a run scores with: the configured file when
/// one is named, otherwise a synthetic store derived from the catalog's
/// topic mixtures.
fn resolve_store(
    ctx: &Ctx,
    news: &[NewsItem],
    d: usize,
    manifest: &mut RunManifest,
) -> Result<EmbeddingStore> {
    match &ctx.cfg.paths.embeddings {
        Some(path) => {
            manifest.input(path)?;
            let store = load_store(path)?;
            if store.dim() != d {
                return Err(Error::Config(format!(
                    "embedding store {} has dimension {}, the encoder expects {d}",
                    path.display(),
                    store.dim()
                )));
            }
            Ok(store)
        }
        None => synth_embed_store(
            news,
            d,
            ctx.cfg.paths.embedding_seed,
            ctx.cfg.paths.embedding_noise,
        ),
    }
}

/// Load a checkpoint plus the encoder config saved alongside it.
fn load_model(ckpt: &Path, manifest: &mut RunManifest) -> Result<Model> {
    let enc_path = ckpt.with_extension("json");
    manifest.input(&enc_path)?;
    manifest.input(ckpt)?;
    let enc: EncoderConfig = serde_json::from_str(&std::fs::read_to_string(&enc_path)?)?;
    enc.validate()?;
    Model::load(&enc, ckpt)
}

fn cmd_gen(ctx: &Ctx, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = ctx.manifest("gen", Some(seed))?;
    std::fs::create_dir_all(out)?;

    let (news, impressions) = generate_corpus(&ctx.cfg.generator, seed)?;
    let n_total = impressions.len();
    let (train, test) = split_impressions(impressions, ctx.cfg.generator.train_fraction, seed)?;

    let news_path = out.join("news.jsonl");
    write_catalog(&news, &news_path)?;
    manifest.output(&news_path);
    let train_path = out.join("train.jsonl");
    write_impressions(&train, &train_path)?;
    manifest.output(&train_path);
    let test_path = out.join("test.jsonl");
    write_impressions(&test, &test_path)?;
    manifest.output(&test_path);
    manifest.write(out, started)?;

    outln!(
        "wrote {} news items and {} impressions ({} train / {} test) to {}",
        news.len(),
        n_total,
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_stats(ctx: &Ctx, log: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = ctx.manifest("stats", None)?;
    manifest.input(log)?;
    std::fs::create_dir_all(out)?;

    let impressions = read_impressions(log)?;
    let dwells: Vec<RawDwell> = impressions
        .iter()
        .flat_map(|imp| imp.history.iter().map(|c| c.dwell))
        .collect();
    let dist = dwell_stats(&dwells)?;

    let csv_path = out.join("stats.csv");
    std::fs::write(&csv_path, dist.to_csv())?;
    manifest.output(&csv_path);
    let summary_path = out.join("stats_summary.json");
    std::fs::write(&summary_path, dist.summary_json() + "\n")?;
    manifest.output(&summary_path);
    manifest.write(out, started)?;

    out!("{}", dist.to_csv());
    outln!("{}", dist.summary_json());
    Ok(())
}

fn cmd_train(ctx: &Ctx, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = ctx.manifest("train", Some(seed))?;
    std::fs::create_dir_all(out)?;

    let data = &ctx.cfg.paths.data_dir;
    let news_path = data.join("news.jsonl");
    let train_path = data.join("train.jsonl");
    manifest.input(&news_path)?;
    manifest.input(&train_path)?;
    let news = read_catalog(&news_path)?;
    let train = read_impressions(&train_path)?;
    let (samples, skipped) = build_train_samples(&train, ctx.cfg.encoder.k_negatives, seed)?;
    if skipped > 0 {
        errln!("skipped {skipped} impressions lacking a click or enough non-clicks");
    }
    let store = resolve_store(ctx, &news, ctx.cfg.encoder.d, &mut manifest)?;

    let mut losses_csv = String::from("variant,epoch,loss\n");
    for &variant in &ctx.cfg.training.variants {
        let mut enc = ctx.cfg.encoder.clone();
        enc.variant = variant;
        let run = run_training(&enc, &ctx.cfg.training, &samples, &store, seed, out)?;
        for (i, loss) in run.epoch_losses.iter().enumerate() {
            losses_csv.push_str(&format!("{variant},{},{loss}\n", i + 1));
        }
        manifest.output(&run.checkpoint);
        manifest.output(&run.checkpoint.with_extension("json"));
        outln!(
            "{variant}: {} epochs, mean loss {:.4} -> {:.4} in {:.1}s",
            run.epoch_losses.len(),
            run.epoch_losses.first().copied().unwrap_or(f64::NAN),
            run.epoch_losses.last().copied().unwrap_or(f64::NAN),
            run.wall_clock_s
        );
    }

    let losses_path = out.join("losses.csv");
    std::fs::write(&losses_path, &losses_csv)?;
    manifest.output(&losses_path);
    let cfg_path = out.join("config.json");
    save_config(&ctx.cfg, &cfg_path)?;
    manifest.output(&cfg_path);
    manifest.write(out, started)?;
    Ok(())
}

fn cmd_eval(
    ctx: &Ctx,
    ckpt: &Path,
    set: SetKind,
    theta: Option<f64>,
    mask_dwell: bool,
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    let mut manifest = ctx.manifest("eval", None)?;
    std::fs::create_dir_all(out)?;

    let model = load_model(ckpt, &mut manifest)?;
    let data = &ctx.cfg.paths.data_dir;
    let news_path = data.join("news.jsonl");
    let test_path = data.join("test.jsonl");
    manifest.input(&news_path)?;
    manifest.input(&test_path)?;
    let news = read_catalog(&news_path)?;
    let test = read_impressions(&test_path)?;
    let store = resolve_store(ctx, &news, model.cfg.d, &mut manifest)?;

    let mode: EvalMode = set.into();
    let theta = theta.unwrap_or(ctx.cfg.evaluation.theta_s);
    let mut eval_set = build_eval_set(&test, mode, theta)?;
    if mask_dwell {
        eval_set = mask_eval_dwell(&eval_set);
    }
    let report = evaluate(&model, &store, &eval_set)?;

    let text = serde_json::to_string_pretty(&report)?;
    outln!("{text}");
    let report_path = out.join("report.json");
    std::fs::write(&report_path, text + "\n")?;
    manifest.output(&report_path);
    manifest.write(out, started)?;
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, ckpt_dir: &Path, min: f64, max: f64, step: f64, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = ctx.manifest("sweep", None)?;
    std::fs::create_dir_all(out)?;
    let thresholds = sweep_thresholds(min, max, step)?;

    let mut models = Vec::new();
    for &variant in &ctx.cfg.training.variants {
        let ckpt = ckpt_dir.join(format!("{variant}.nrck"));
        models.push(load_model(&ckpt, &mut manifest)?);
    }
    let d = models[0].cfg.d;
    if let Some(other) = models.iter().find(|m| m.cfg.d != d) {
        return Err(Error::Config(format!(
            "checkpoints disagree on embedding dimension: {} uses {}, {} uses {d}",
            other.cfg.variant,
            other.cfg.d,
            models[0].cfg.variant
        )));
    }

    let data = &ctx.cfg.paths.data_dir;
    let news_path = data.join("news.jsonl");
    let test_path = data.join("test.jsonl");
    manifest.input(&news_path)?;
    manifest.input(&test_path)?;
    let news = read_catalog(&news_path)?;
    let test = read_impressions(&test_path)?;
    let store = resolve_store(ctx, &news, d, &mut manifest)?;

    let rows = run_sweep(&models, &store, &test, &thresholds)?;
    log_sweep_trends(&rows);

    let csv = sweep_csv(&rows);
    out!("{csv}");
    let csv_path = out.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;
    manifest.output(&csv_path);
    manifest.write(out, started)?;
    Ok(())
}

/// Per-variant AUC trend across the threshold range, on standard error.
fn log_sweep_trends(rows: &[SweepRow]) {
    let mut seen: Vec<&str> = Vec::new();
    for row in rows {
        if !seen.contains(&row.variant.name()) {
            seen.push(row.variant.name());
        }
    }
    for name in seen {
        let defined: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.variant.name() == name)
            .filter_map(|r| r.metrics.map(|m| (r.theta, m.auc)))
            .collect();
        let empty = rows
            .iter()
            .filter(|r| r.variant.name() == name && r.metrics.is_none())
            .count();
        match (defined.first(), defined.last()) {
            (Some(&(t0, a0)), Some(&(t1, a1))) => {
                let direction = if a1 > a0 { "up" } else if a1 < a0 { "down" } else { "flat" };
                errln!(
                    "{name}: auc {a0:.4} at {t0}s -> {a1:.4} at {t1}s ({direction}, {empty} empty sets)"
                );
            }
            _ => errln!("{name}: every threshold produced an empty evaluation set"),
        }
    }
}

fn cmd_grad_check(ctx: &Ctx, trials: usize, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = ctx.manifest("grad-check", Some(seed))?;
    std::fs::create_dir_all(out)?;

    let report = gradient_suite(trials, seed)?;
    let text = serde_json::to_string_pretty(&report)?;
    outln!("{text}");
    let report_path = out.join("grad_check_report.json");
    std::fs::write(&report_path, text + "\n")?;
    manifest.output(&report_path);
    manifest.write(out, started)?;

    if report.passes(1e-4) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient audit failed: max rel err {} at {}",
            report.max_rel_err, report.worst
        )))
    }
}
