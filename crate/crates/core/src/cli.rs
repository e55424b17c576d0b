//! `hiap` command line.
//!
//! Exit codes: 0 success, 1 failed verification or aborted training, 2 bad
//! usage or input.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{atomic_write, GatedCheckpoint};
use crate::cost::{cost_constants, oracle_count};
use crate::error::{Error, Result};
use crate::extraction::{extract, mask_from_architecture, read_descriptor, verify_equivalence, PrunedCheckpoint};
use crate::gating::SeededRng;
use crate::model::{Architecture, ModelConfig};
use crate::plot::{read_trace, render_svg};
use crate::trainer::{self, TrainConfig, TrainOutcome, CHECKPOINT_FILE, METRICS_FILE, TRACE_FILE};

#[derive(Debug, Parser)]
#[command(name = "hiap", version, about = "Hierarchical structured pruning for Vision Transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Jointly train weights and pruning gates.
    Train(TrainArgs),
    /// Harden a gated checkpoint and physically remove pruned structure.
    Extract(ExtractArgs),
    /// Check that an extracted model reproduces the masked gated model.
    Verify(VerifyArgs),
    /// Print the analytic compute cost of an architecture.
    Macs(MacsArgs),
    /// Render a gate trace CSV as an SVG heatmap.
    TracePlot(TracePlotArgs),
    /// Train once per macro:micro penalty ratio and write a Pareto table.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the configuration.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Output directory for `architecture.json` and `weights.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Gated checkpoint the model was extracted from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `extract`.
    #[arg(long)]
    pub pruned: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct MacsSource {
    /// Architecture descriptor (`architecture.json`).
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Dense preset: `deit-small` or `vit-tiny`.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct MacsArgs {
    #[command(flatten)]
    pub source: MacsSource,
}

#[derive(Debug, Args)]
pub struct TracePlotArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub base_config: PathBuf,
    /// Comma-separated settings: `a:b@x` sets λ_macro = x and
    /// λ_micro = x·b/a; `macro@x` and `micro@x` set one λ and zero the other.
    #[arg(long)]
    pub ratios: String,
    /// Pareto CSV path; defaults to `<output_dir>/pareto.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run settings concurrently, at most `HIAP_THREADS` at a time.
    #[arg(long)]
    pub parallel: bool,
}

/// One sweep setting.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioSetting {
    pub label: String,
    pub lambda_macro: f64,
    pub lambda_micro: f64,
}

pub fn parse_ratios(spec: &str) -> Result<Vec<RatioSetting>> {
    let bad = |item: &str, why: &str| Error::invalid("ratios", format!("{item:?}: {why}"));
    let num = |item: &str, s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| bad(item, "expected a non-negative number"))
    };
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim) {
        if item.is_empty() {
            return Err(bad(item, "empty setting"));
        }
        let (kind, scale) = item.split_once('@').ok_or_else(|| bad(item, "missing '@'"))?;
        let x = num(item, scale)?;
        let (lambda_macro, lambda_micro) = match kind.trim() {
            "macro" => (x, 0.0),
            "micro" => (0.0, x),
            r => {
                let (a, b) = r.split_once(':').ok_or_else(|| bad(item, "expected a:b, macro or micro"))?;
                let (a, b) = (num(item, a)?, num(item, b)?);
                if a == 0.0 {
                    return Err(bad(item, "macro weight must be positive"));
                }
                (x, x * b / a)
            }
        };
        out.push(RatioSetting {
            label: item.to_string(),
            lambda_macro,
            lambda_micro,
        });
    }
    Ok(out)
}

/// Parses arguments, runs the command and maps the result to an exit code.
pub fn run() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Aborted(_) | Error::NonFinite(_) => 1,
        _ => 2,
    }
}

/// Runs one command; `Ok(false)` means a verification failure.
pub fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Macs(a) => cmd_macs(&a),
        Command::TracePlot(a) => cmd_trace_plot(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<bool> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(d) = &a.output_dir {
        cfg.output_dir = d.clone();
    }
    let dir = cfg.output_dir.clone();
    let out = trainer::train(cfg)?;
    println!(
        "val_acc {:.4}  hardened cost {} ({:.1}% of dense)",
        out.val_acc,
        out.hardened_cost,
        100.0 * out.hardened_cost_fraction
    );
    for f in [CHECKPOINT_FILE, METRICS_FILE, TRACE_FILE] {
        println!("wrote {}", dir.join(f).display());
    }
    Ok(true)
}

fn cmd_extract(a: &ExtractArgs) -> Result<bool> {
    let ck = GatedCheckpoint::load(&a.checkpoint)?;
    let pruned = extract(&ck, a.threshold)?;
    pruned.export(&a.out)?;
    let k = cost_constants(&ck.config);
    let heads: Vec<usize> = pruned.architecture.per_layer.iter().map(|l| l.heads.len()).collect();
    println!("heads per layer {heads:?}");
    println!(
        "prunable cost {} formula units ({} halved), {:.1}% of dense",
        pruned.cost.formula_units,
        pruned.cost.formula_units_halved,
        100.0 * pruned.cost.formula_units as f64 / k.dense_prunable_total as f64
    );
    println!("wrote {}", a.out.display());
    Ok(true)
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let ck = GatedCheckpoint::load(&a.checkpoint)?;
    let pruned = PrunedCheckpoint::import(&a.pruned)?;
    let r = verify_equivalence(&ck, &pruned, a.trials, &mut SeededRng::new(a.seed))?;
    println!("max abs logit diff {:.3e} over {} inputs", r.max_abs_diff, r.trials);
    if r.passed {
        println!("PASS");
    } else {
        match r.offending_layer {
            Some(l) => println!("FAIL: first diverging layer {l}"),
            None => println!("FAIL: all blocks agree, classifier differs"),
        }
    }
    Ok(r.passed)
}

/// Text report of a descriptor's cost.
pub fn macs_report(arch: &Architecture) -> String {
    let k = cost_constants(&arch.config);
    let units = oracle_count(&mask_from_architecture(arch), &k);
    let mut s = String::new();
    let _ = writeln!(s, "C1 {}  C2 {}  C3 {}  C_const {}", k.c1, k.c2, k.c3, k.c_const);
    let _ = writeln!(s, "prunable formula units {units}");
    let _ = writeln!(s, "prunable halved {}", units / 2);
    let _ = writeln!(
        s,
        "fraction of dense {:.4}",
        units as f64 / k.dense_prunable_total as f64
    );
    let _ = writeln!(s, "total with constant part {}", units + k.c_const);
    let _ = writeln!(s, "total halved {}", (units + k.c_const) / 2);
    s
}

fn cmd_macs(a: &MacsArgs) -> Result<bool> {
    let arch = match (&a.source.arch, &a.source.preset) {
        (Some(p), _) => {
            let d = read_descriptor(p)?;
            Architecture {
                config: d.config,
                per_layer: d.per_layer,
            }
        }
        (None, Some(name)) => {
            let cfg = ModelConfig::preset(name)
                .ok_or_else(|| Error::invalid("preset", format!("unknown preset {name:?}; use deit-small or vit-tiny")))?;
            Architecture::dense(&cfg)
        }
        (None, None) => return Err(Error::invalid("arch", "pass --arch or --preset")),
    };
    print!("{}", macs_report(&arch));
    Ok(true)
}

fn cmd_trace_plot(a: &TracePlotArgs) -> Result<bool> {
    let records = read_trace(&a.trace)?;
    atomic_write(&a.out, render_svg(&records)?.as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(true)
}

fn threads() -> usize {
    std::env::var("HIAP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

/// Directory-safe form of a sweep label.
fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            ':' => '-',
            '@' => '_',
            c if c.is_ascii_alphanumeric() || c == '.' => c,
            _ => '_',
        })
        .collect()
}

pub const PARETO_HEADER: &str = "label,lambda_macro,lambda_micro,val_acc,formula_units,formula_units_halved,cost_fraction,pareto";

/// Marks rows not dominated in (higher accuracy, lower cost).
pub fn pareto_front(points: &[(f64, u64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(acc, cost)| {
            !points
                .iter()
                .any(|&(a, c)| a >= acc && c <= cost && (a > acc || c < cost))
        })
        .collect()
}

fn cmd_sweep(a: &SweepArgs) -> Result<bool> {
    let settings = parse_ratios(&a.ratios)?;
    let base = TrainConfig::load(&a.base_config)?;
    base.validate()?;
    let configs: Vec<TrainConfig> = settings
        .iter()
        .map(|s| {
            let mut c = base.clone();
            c.penalty.lambda_macro = s.lambda_macro;
            c.penalty.lambda_micro = s.lambda_micro;
            c.output_dir = base.output_dir.join(slug(&s.label));
            c
        })
        .collect();
    for c in &configs {
        c.penalty.validate(&c.model)?;
    }

    let outcomes: Vec<Result<TrainOutcome>> = if a.parallel {
        let width = threads().max(1);
        let mut results = Vec::with_capacity(configs.len());
        for chunk in configs.chunks(width) {
            let done: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|c| s.spawn(|| trainer::train(c.clone()))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Aborted("training thread panicked".into()))))
                    .collect()
            });
            results.extend(done);
        }
        results
    } else {
        configs
            .iter()
            .map(|c| {
                log::info!("sweep: {}", c.output_dir.display());
                trainer::train(c.clone())
            })
            .collect()
    };
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let dense = cost_constants(&base.model).dense_prunable_total as f64;
    let points: Vec<(f64, u64)> = outcomes.iter().map(|o| (o.val_acc, o.hardened_cost)).collect();
    let front = pareto_front(&points);
    let mut csv = format!("{PARETO_HEADER}\n");
    for ((s, o), on) in settings.iter().zip(&outcomes).zip(&front) {
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{},{},{:.6},{}",
            s.label,
            s.lambda_macro,
            s.lambda_micro,
            o.val_acc,
            o.hardened_cost,
            o.hardened_cost / 2,
            o.hardened_cost as f64 / dense,
            on
        );
    }
    let out = a.out.clone().unwrap_or_else(|| base.output_dir.join("pareto.csv"));
    atomic_write(&out, csv.as_bytes())?;
    print!("{csv}");
    println!("wrote {}", out.display());
    Ok(true)
}

/// Convenience for tests and scripts: runs a command line without exiting.
pub fn run_args<I, S>(args: I) -> std::result::Result<bool, (u8, String)>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| (if e.use_stderr() { 2 } else { 0 }, e.to_string()))?;
    dispatch(cli.command).map_err(|e| (exit_code(&e), e.to_string()))
}
