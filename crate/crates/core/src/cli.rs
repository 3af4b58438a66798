//! Command-line driver: `train`, `eval`, `gradcheck`, `export`, plus
//! `synth` and `config` helpers.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 numeric failure,
//! 3 gradient check failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{check_compatible, RunConfig};
use crate::data::{save_jsonl, synth_generate, Dataset, Layout, Manifest, SkeletonSequence};
use crate::error::{Error, Result};
use crate::model::{evaluate, gradcheck_model, load_checkpoint, run_training, toy_batch, EvalMetrics, ModelState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

/// Environment variable capping worker threads for batched evaluation.
pub const THREADS_ENV: &str = "HGFORMER_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "hgformer",
    version,
    about = "Hypergraph transformer for skeleton action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, writing metrics.csv and checkpoints to the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every parameter group.
    Gradcheck(GradcheckArgs),
    /// Write embeddings, the out-phase hypergraph and predictions as CSV.
    Export(ExportArgs),
    /// Generate a synthetic JSON-lines dataset with a manifest.
    Synth(SynthArgs),
    /// Print a configuration file.
    Config(ConfigArgs),
}

#[derive(Args, Debug)]
struct Overrides {
    /// Config overrides as `--section.key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config is the base for overrides.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset source; defaults to the config stored in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to `val`, or `train` when there is no validation split.
    #[arg(long, value_enum)]
    split: Option<Split>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Defaults to the built-in toy configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale this group's analytic gradient by 1.5 before comparing.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<Split>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = "nwucla20")]
    layout: Layout,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    per_class: usize,
    #[arg(long, default_value_t = 2)]
    val_per_class: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Print the small toy configuration instead of the defaults.
    #[arg(long)]
    toy: bool,
}

/// Outcome of a command that did not fail with an error.
enum Outcome {
    Ok,
    GradcheckFailed,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) | Error::DegenerateAttention { .. } => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Parses `--a.b value` / `--a.b=value` pairs.
fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Argument(format!("expected --key, got {flag}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let value = it
                    .next()
                    .ok_or_else(|| Error::Argument(format!("missing value for --{key}")))?;
                out.push((key.to_string(), value.clone()));
            }
        }
    }
    Ok(out)
}

fn load_config(path: Option<&Path>, fallback: RunConfig, overrides: &Overrides) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => fallback,
    };
    base.with_overrides(&parse_overrides(&overrides.overrides)?)
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<Outcome> {
    let (mut state, cfg) = match &args.resume {
        Some(ckpt) => {
            let (state, stored) = load_checkpoint(ckpt)?;
            let base = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::from_json(stored)?,
            };
            let cfg = base.with_overrides(&parse_overrides(&args.overrides.overrides)?)?;
            if cfg.model != state.config {
                return Err(Error::Checkpoint("model section differs from the checkpoint".into()));
            }
            (state, cfg)
        }
        None => {
            let cfg = load_config(args.config.as_deref(), RunConfig::default(), &args.overrides)?;
            (ModelState::new(cfg.model.clone(), cfg.seed)?, cfg)
        }
    };
    let data = cfg.dataset()?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg.to_json())?,
    )?;
    log::info!(
        "training {} parameters on {} sequences from epoch {}",
        state.params.numel(),
        data.train.len(),
        state.epoch
    );
    let summary = run_training(
        &mut state,
        &data,
        &cfg.train_options(),
        Some(&cfg.output_dir),
        &cfg.to_json(),
    )?;
    if let Some(last) = summary.epochs.last() {
        println!(
            "epoch {} total {:.6} train_acc {:.4}{}",
            last.epoch,
            last.losses.total,
            last.train_acc,
            last.val_acc.map_or(String::new(), |v| format!(" val_acc {v:.4}"))
        );
    }
    println!("final checkpoint: {}", cfg.output_dir.join("final.bin").display());
    Ok(Outcome::Ok)
}

/// Model and dataset for commands that start from a checkpoint.
fn restore(checkpoint: &Path, config: Option<&Path>) -> Result<(ModelState, RunConfig, Dataset)> {
    let (state, stored) = load_checkpoint(checkpoint)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json(stored)?,
    };
    if cfg.model != state.config {
        return Err(Error::Checkpoint(
            "config model section does not match the checkpoint".into(),
        ));
    }
    let data = cfg.dataset()?;
    check_compatible(&data, &state.config)?;
    Ok((state, cfg, data))
}

fn pick_split(data: &Dataset, split: Option<Split>) -> Vec<SkeletonSequence> {
    match split {
        Some(Split::Train) => data.train.clone(),
        Some(Split::Val) => data.val.clone(),
        Some(Split::All) => data.train.iter().chain(&data.val).cloned().collect(),
        None if data.val.is_empty() => data.train.clone(),
        None => data.val.clone(),
    }
}

fn run_eval(state: &ModelState, cfg: &RunConfig, samples: &[SkeletonSequence]) -> Result<EvalMetrics> {
    evaluate(
        state,
        samples,
        &state.config.layout.adjacency(),
        cfg.batch_size,
        cfg.loss,
    )
}

fn cmd_eval(args: &EvalArgs) -> Result<Outcome> {
    let (state, cfg, data) = restore(&args.checkpoint, args.config.as_deref())?;
    let samples = pick_split(&data, args.split);
    let m = run_eval(&state, &cfg, &samples)?;
    let report = serde_json::json!({
        "samples": samples.len(),
        "top1_accuracy": m.top1,
        "per_class_accuracy": m.per_class,
        "class_counts": m.class_counts,
        "losses": m.losses,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Ok)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Outcome> {
    let cfg = load_config(args.config.as_deref(), RunConfig::toy(), &args.overrides)?;
    let state = ModelState::new(cfg.model.clone(), cfg.seed)?;
    let batch = toy_batch(&cfg.model, cfg.seed)?;
    let corrupt = args.corrupt.as_deref().map(|n| (n, 1.5));
    let report = gradcheck_model(&state, &batch, cfg.loss, corrupt)?;
    for g in &report.groups {
        let note = if g.zero_gradient { "  zero gradient" } else { "" };
        println!("{:<40} {:>7} {:.3e}{note}", g.name, g.numel, g.max_relative_error);
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e})",
        report.worst(),
        report.tolerance
    );
    if report.passed() {
        Ok(Outcome::Ok)
    } else {
        let names: Vec<_> = report.offending().iter().map(|g| g.name.as_str()).collect();
        eprintln!("gradient check failed for: {}", names.join(", "));
        Ok(Outcome::GradcheckFailed)
    }
}

fn cmd_export(args: &ExportArgs) -> Result<Outcome> {
    let (state, cfg, data) = restore(&args.checkpoint, args.config.as_deref())?;
    let samples = pick_split(&data, args.split.or(Some(Split::All)));
    let m = run_eval(&state, &cfg, &samples)?;
    fs::create_dir_all(&args.out_dir)?;

    let width = state.config.encoder.hidden;
    let mut emb = String::from("sample_id,label");
    (0..width).for_each(|i| write!(emb, ",e{i}").unwrap());
    emb.push('\n');
    for (i, (s, e)) in samples.iter().zip(&m.embeddings).enumerate() {
        write!(emb, "{i},{}", s.label).unwrap();
        e.iter().for_each(|x| write!(emb, ",{x}").unwrap());
        emb.push('\n');
    }
    fs::write(args.out_dir.join("embeddings.csv"), emb)?;

    let g = &state.outphase;
    let mut he = String::from("joint_id,hyperedge_id,weight\n");
    let assignment = g
        .assignment()
        .ok_or_else(|| Error::Checkpoint("out-phase hypergraph is not a partition".into()))?;
    for (joint, &edge) in assignment.iter().enumerate() {
        writeln!(he, "{joint},{edge},{}", g.weights()[edge]).unwrap();
    }
    fs::write(args.out_dir.join("hyperedges.csv"), he)?;

    let mut pred = String::from("sample_id,label,predicted");
    (0..state.config.classes).for_each(|k| write!(pred, ",p{k}").unwrap());
    pred.push('\n');
    for (i, ((s, p), probs)) in samples.iter().zip(&m.predictions).zip(&m.probs).enumerate() {
        write!(pred, "{i},{},{p}", s.label).unwrap();
        probs.iter().for_each(|x| write!(pred, ",{x}").unwrap());
        pred.push('\n');
    }
    fs::write(args.out_dir.join("predictions.csv"), pred)?;
    println!("wrote {} samples to {}", samples.len(), args.out_dir.display());
    Ok(Outcome::Ok)
}

fn cmd_synth(args: &SynthArgs) -> Result<Outcome> {
    fs::create_dir_all(&args.out)?;
    let train = synth_generate(
        args.layout,
        args.classes,
        args.per_class,
        args.frames,
        args.noise,
        args.seed,
    )?;
    save_jsonl(&args.out.join("train.jsonl"), &train)?;
    let mut manifest = Manifest {
        layout: args.layout,
        class_names: (0..args.classes).map(|c| format!("class{c}")).collect(),
        train: vec![PathBuf::from("train.jsonl")],
        val: Vec::new(),
    };
    if args.val_per_class > 0 {
        let val = synth_generate(
            args.layout,
            args.classes,
            args.val_per_class,
            args.frames,
            args.noise,
            args.seed.wrapping_add(1),
        )?;
        save_jsonl(&args.out.join("val.jsonl"), &val)?;
        manifest.val.push(PathBuf::from("val.jsonl"));
    }
    fs::write(args.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {}", args.out.join("manifest.json").display());
    Ok(Outcome::Ok)
}

fn dispatch(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Export(a) => cmd_export(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Config(a) => {
            let cfg = if a.toy { RunConfig::toy() } else { RunConfig::default() };
            println!("{}", serde_json::to_string_pretty(&cfg.to_json())?);
            Ok(Outcome::Ok)
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(&cli) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::GradcheckFailed) => EXIT_GRADCHECK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_pairs() {
        let raw: Vec<String> = ["--optim.lr", "0.1", "--seed=4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            parse_overrides(&raw).unwrap(),
            vec![("optim.lr".into(), "0.1".into()), ("seed".into(), "4".into())]
        );
        assert!(parse_overrides(&["--seed".to_string()]).is_err());
        assert!(parse_overrides(&["seed".to_string()]).is_err());
    }

    #[test]
    fn clap_accepts_trailing_overrides() {
        let cli = Cli::try_parse_from(["hgformer", "train", "--config", "c.json", "--optim.lr", "0.1"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.config, Some(PathBuf::from("c.json")));
        assert_eq!(a.overrides.overrides, vec!["--optim.lr", "0.1"]);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Numeric("x".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Argument("x".into())), EXIT_CONFIG);
        assert_eq!(
            run(["hgformer", "train", "--config", "/nonexistent/c.json"]),
            EXIT_CONFIG
        );
        assert_eq!(run(["hgformer", "bogus"]), EXIT_CONFIG);
    }
}
