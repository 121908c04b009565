use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pipeguard::adversary::AttackKind;
use pipeguard::harness::{compare_runs, run_experiment, selftest, ExperimentConfig, ReferenceTables, RunSummary, SUMMARY_FILE};
use pipeguard::protocol::Mode;
use pipeguard::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "pipeguard", version, about = "Pipeline-parallel training under attack, with verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configured scenario and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// baseline | robust_direct | robust_central
        #[arg(long)]
        mode: Option<String>,
        /// none | forward_flip | backward_gauss | stealthy_forward | crash
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate two or more summary.json files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
        /// Also print the bundled published reference tables.
        #[arg(long)]
        reference: bool,
    },
    /// Run the gradient, equivalence and detection self-checks.
    Selftest,
}

fn parse_attack(s: &str) -> pipeguard::Result<AttackKind> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::config("attack.kind", format!("unknown attack `{s}`")))
}

fn load_config(
    path: &Path,
    mode: Option<String>,
    attack: Option<String>,
    rate: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> pipeguard::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(m) = mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(a) = attack {
        cfg.attack.kind = parse_attack(&a)?;
    }
    if let Some(r) = rate {
        cfg.attack.rate = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.seeds = None;
    }
    if out.is_some() {
        cfg.output_dir = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(
    config: PathBuf,
    mode: Option<String>,
    attack: Option<String>,
    rate: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let cfg = match load_config(&config, mode, attack, rate, seed, out) {
        Ok(cfg) => cfg,
        Err(e @ (Error::Config { .. } | Error::Json(_))) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_CONFIG));
        }
        Err(e) => return Err(e).with_context(|| format!("loading {}", config.display())),
    };
    let out_dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
    let outcome = run_experiment(&cfg, Some(&out_dir))?;
    let s = &outcome.summary;
    println!(
        "{} iterations, final loss {:.6} (ppl {:.4}), eval loss {:.6}, {} alerts, {} restarts, final mode {}",
        s.completed_iterations,
        s.final_loss,
        s.final_ppl,
        s.final_eval_loss,
        s.alerts,
        s.restarts,
        s.final_mode.as_str()
    );
    for ev in &s.skip_events {
        println!("skip {:?} installed at iteration {}", ev.pair, ev.iteration);
    }
    println!("artifacts in {}", out_dir.display());
    if let Some(reason) = outcome.aborted() {
        eprintln!("run {reason}");
        return Ok(ExitCode::from(EXIT_ABORTED));
    }
    Ok(ExitCode::SUCCESS)
}

/// The run directory name for `<dir>/summary.json`, else the path itself.
fn label(path: &Path) -> String {
    let dir = path.parent().and_then(|d| d.file_name());
    match (path.file_name().and_then(|n| n.to_str()), dir) {
        (Some(SUMMARY_FILE), Some(d)) => d.to_string_lossy().into_owned(),
        _ => path.display().to_string(),
    }
}

fn compare(paths: Vec<PathBuf>, reference: bool) -> Result<ExitCode> {
    let runs = paths
        .iter()
        .map(|p| {
            let s = RunSummary::load(p).with_context(|| format!("reading {}", p.display()))?;
            Ok((label(p), s))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = compare_runs(&runs)?;
    print!("{report}");
    if reference {
        println!();
        print!("{}", ReferenceTables::bundled());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            config,
            mode,
            attack,
            rate,
            seed,
            out,
        } => run(config, mode, attack, rate, seed, out),
        Command::Compare { summaries, reference } => compare(summaries, reference),
        Command::Selftest => {
            let mut ok = true;
            for check in selftest()? {
                println!("{} {}: {}", if check.passed { "PASS" } else { "FAIL" }, check.name, check.detail);
                ok &= check.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
