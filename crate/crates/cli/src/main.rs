use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pptp_core::harness::{self, report, ExperimentManifest, Factor, Phase, RunOptions};

/// Layer-level membership-privacy audits and privacy-preserving retraining.
#[derive(Parser, Debug)]
#[command(name = "pptp", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment manifest (TOML). The built-in desk manifest when omitted.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output root; overrides the manifest's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Repetitions run in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Added to every repetition seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Continue partially completed repetitions instead of restarting them.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw and persist the h1/h2 split.
    Split,
    /// Train the paired models.
    Pretrain,
    /// Measure feature distances and locate the risk onset.
    Profile,
    /// Fit stage-wise linear probes.
    Probe,
    /// Freeze, rewind and retrain the risky stages (with baseline and ablations).
    Pptp,
    /// Run the membership-inference suite on every trained model.
    Attack,
    /// Profile one run per value of a factor.
    Sweep {
        /// augmentation, feature_map_size, channel_size or depth. Defaults to
        /// the manifest's sweep section.
        #[arg(long)]
        factor: Option<String>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Re-render reports from existing run records.
    Report,
    /// The full pipeline.
    Run,
    /// Print the built-in desk manifest.
    Manifest,
}

fn manifest(g: &Global) -> Result<ExperimentManifest> {
    match &g.manifest {
        Some(p) => Ok(ExperimentManifest::load(p)?),
        None => Ok(ExperimentManifest::desk()),
    }
}

fn options(g: &Global, stop_after: Option<Phase>) -> RunOptions {
    RunOptions {
        resume: g.resume,
        workers: g.workers,
        seed_offset: g.seed_offset,
        stop_after,
        output_dir: g.out.clone(),
    }
}

fn run_until(g: &Global, phase: Option<Phase>) -> Result<serde_json::Value> {
    let m = manifest(g)?;
    let out = harness::run_experiment(&m, &options(g, phase))?;
    Ok(json!({
        "root": out.root,
        "repetitions": out.records.len(),
        "cache_hits": out.cache_hits,
        "completed": out.records.iter().map(|r| &r.completed).collect::<Vec<_>>(),
        "onsets": out.records.iter().map(|r| r.onset_stage).collect::<Vec<_>>(),
    }))
}

fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let g = &cli.global;
    match &cli.command {
        Command::Split => run_until(g, Some(Phase::Split)),
        Command::Pretrain => run_until(g, Some(Phase::Pretrain)),
        Command::Profile => run_until(g, Some(Phase::Profile)),
        Command::Probe => run_until(g, Some(Phase::Probe)),
        Command::Pptp => run_until(g, Some(Phase::Ablation)),
        Command::Attack => run_until(g, Some(Phase::Attack)),
        Command::Run => run_until(g, None),
        Command::Sweep { factor, values } => {
            let m = manifest(g)?;
            let (factor, values) = match (factor, &m.sweep) {
                (Some(f), _) => (Factor::parse(f).ok_or_else(|| anyhow!("unknown factor `{f}`"))?, values.clone()),
                (None, Some(s)) => (s.factor, if values.is_empty() { s.values.clone() } else { values.clone() }),
                (None, None) => return Err(anyhow!("no --factor given and the manifest has no sweep section")),
            };
            if values.is_empty() {
                return Err(anyhow!("no sweep values"));
            }
            let rep = harness::factor_sweep(&m, factor, &values, &options(g, None))?;
            Ok(serde_json::to_value(rep)?)
        }
        Command::Report => {
            let m = manifest(g)?;
            let root = harness::run_root(&m, &options(g, None));
            let records = harness::load_records(&root).with_context(|| format!("reading records under {}", root.display()))?;
            if records.is_empty() {
                return Err(anyhow!("no run records under {}", root.display()));
            }
            for r in &records {
                report::render_run(r, &root.join(r.repetition.to_string()).join("plots"))?;
            }
            let agg = report::aggregate(&records);
            report::render_report(&records, &agg, &root.join("report"))?;
            Ok(json!({ "root": root, "repetitions": records.len() }))
        }
        Command::Manifest => {
            print!("{}", manifest(g)?.to_toml()?);
            Ok(serde_json::Value::Null)
        }
    }
}

/// Structured failure record printed on stderr.
fn error_record(e: &anyhow::Error) -> serde_json::Value {
    let (kind, phase) = match e.downcast_ref::<pptp_core::Error>() {
        Some(pptp_core::Error::Phase { phase, source }) => (source.kind(), Some(phase.clone())),
        Some(inner) => (inner.kind(), None),
        None => ("cli", None),
    };
    json!({
        "status": "error",
        "kind": kind,
        "phase": phase,
        "message": e.to_string(),
        "chain": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", json!({ "status": "ok", "result": v }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
