//! Running one configured experiment and persisting its artifacts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::AttackKind;
use crate::error::{Error, Result};
use crate::protocol::{MessageCounts, Mode, RunMetrics, Seeds, SkipEvent, TraceRecord, Trainer};

use super::config::ExperimentConfig;
use super::data::{Dataset, Task};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ALERTS_FILE: &str = "alerts.jsonl";
pub const ATTACKS_FILE: &str = "attacks.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "resolved-config.json";
pub const TRACE_FILE: &str = "trace.jsonl";

/// Fields two runs must share to be comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub input_dim: usize,
    pub classes: usize,
    pub stages: usize,
    pub width: usize,
    pub batch_size: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub spec: TaskSpec,
    pub mode: Mode,
    pub final_mode: Mode,
    pub attack: AttackKind,
    pub attack_rate: f64,
    pub seed: u64,
    pub seeds: Seeds,
    pub completed_iterations: usize,
    /// Rows of `metrics.csv` averaged into `final_loss`.
    pub tail_window: usize,
    /// Mean training loss over the last `tail_window` rows of `metrics.csv`.
    #[serde(deserialize_with = "null_as_nan")]
    pub final_loss: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub final_ppl: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub initial_eval_loss: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub final_eval_loss: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub final_eval_ppl: f64,
    pub alerts: usize,
    pub restarts: u64,
    pub escalations: Vec<usize>,
    pub skip_events: Vec<SkipEvent>,
    /// Iterations in which an attack hit an active stage.
    pub attacked_iterations: Vec<usize>,
    /// Attacked iterations that raised at least one alert, over all attacked
    /// iterations.
    pub detection_rate: Option<f64>,
    /// Detected attacks whose suspect set contained the attacker.
    pub localization_rate: Option<f64>,
    pub messages: MessageCounts,
    pub messages_total: u64,
    pub recomputations: u64,
    pub aborted: Option<String>,
}

/// Non-finite floats are written as `null`; read them back as NaN.
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Tail window used for the headline loss: the last tenth of the run.
pub fn tail_window(completed: usize) -> usize {
    (completed / 10).max(1).min(completed.max(1))
}

/// Mean of the last `window` values, summed in order.
pub fn tail_mean(losses: &[f64], window: usize) -> f64 {
    if losses.is_empty() {
        return f64::NAN;
    }
    let tail = &losses[losses.len() - window.min(losses.len())..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

impl RunSummary {
    pub fn from_metrics(cfg: &ExperimentConfig, metrics: &RunMetrics, aborted: Option<String>) -> Self {
        let cfg = cfg.resolved();
        let (input_dim, classes) = cfg.task_dims();
        let losses = metrics.losses();
        let window = tail_window(losses.len());
        let final_loss = tail_mean(&losses, window);

        let attacked: BTreeSet<usize> = metrics
            .attacks
            .iter()
            .filter(|a| a.effective)
            .map(|a| a.iteration)
            .collect();
        let alerted: BTreeSet<usize> = metrics.alerts.iter().map(|a| a.iteration).collect();
        let detection_rate = (!attacked.is_empty())
            .then(|| attacked.intersection(&alerted).count() as f64 / attacked.len() as f64);

        Self {
            spec: TaskSpec {
                task: cfg.dataset.task,
                input_dim,
                classes,
                stages: cfg.stages,
                width: cfg.width_or_default(),
                batch_size: cfg.batch_size,
                iterations: cfg.iterations,
            },
            mode: cfg.mode,
            final_mode: metrics.rows.last().map_or(cfg.mode, |r| r.mode),
            attack: cfg.attack.kind,
            attack_rate: cfg.attack.rate,
            seed: cfg.seed,
            seeds: cfg.seeds_or_derived(),
            completed_iterations: losses.len(),
            tail_window: window,
            final_loss,
            final_ppl: final_loss.exp(),
            initial_eval_loss: metrics.initial_eval_loss,
            final_eval_loss: metrics.final_eval_loss,
            final_eval_ppl: metrics.final_eval_loss.exp(),
            alerts: metrics.alerts.len(),
            restarts: metrics.restarts,
            escalations: metrics.escalations.clone(),
            skip_events: metrics.skip_events.clone(),
            attacked_iterations: attacked.into_iter().collect(),
            detection_rate,
            localization_rate: metrics.localization_rate(),
            messages: metrics.messages.clone(),
            messages_total: metrics.messages.total(),
            recomputations: metrics.recomputations,
            aborted,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.attack == AttackKind::None || self.attack_rate == 0.0
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub metrics: RunMetrics,
    pub trace: Vec<TraceRecord>,
}

impl RunOutcome {
    pub fn aborted(&self) -> Option<&str> {
        self.summary.aborted.as_deref()
    }
}

/// Validates `cfg`, trains, and writes the artifacts to `out_dir` when given.
/// An aborted run is not an error here: its partial metrics and the reason
/// are persisted and reported through [`RunOutcome::aborted`].
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = Dataset::generate(cfg);
    let pipeline = cfg.pipeline_config()?;
    let mut trainer = Trainer::<f64, _>::new(&pipeline, &cfg.attack, &data)?;
    if cfg.trace {
        trainer = trainer.with_trace();
    }
    let (metrics, trace, aborted) = match trainer.run() {
        Ok((metrics, trace)) => (metrics, trace, None),
        Err(Error::Aborted { iteration, reason, metrics }) => {
            (*metrics, Vec::new(), Some(format!("aborted at iteration {iteration}: {reason}")))
        }
        Err(e) => return Err(e),
    };
    let outcome = RunOutcome {
        summary: RunSummary::from_metrics(cfg, &metrics, aborted),
        metrics,
        trace,
    };
    if let Some(dir) = out_dir {
        write_artifacts(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

pub fn metrics_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("iteration,loss,ppl,alerts,mode,restarts,messages,recomputations\n");
    for r in &metrics.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.iteration,
            r.loss,
            r.ppl,
            r.alerts,
            r.mode.as_str(),
            r.restarts,
            r.messages,
            r.recomputations
        );
    }
    out
}

/// Parses the `loss` column back out of a `metrics.csv` document.
pub fn losses_from_csv(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Comparison(format!("malformed metrics row `{line}`")))
        })
        .collect()
}

fn jsonl<S: Serialize>(items: &[S]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let write = |name: &str, body: &str| -> Result<()> {
        let mut f = fs::File::create(dir.join(name))?;
        f.write_all(body.as_bytes())?;
        Ok(())
    };
    write(METRICS_FILE, &metrics_csv(&outcome.metrics))?;
    write(ALERTS_FILE, &jsonl(&outcome.metrics.alerts)?)?;
    write(ATTACKS_FILE, &jsonl(&outcome.metrics.attacks)?)?;
    write(SUMMARY_FILE, &(serde_json::to_string_pretty(&outcome.summary)? + "\n"))?;
    write(CONFIG_FILE, &(serde_json::to_string_pretty(&cfg.resolved())? + "\n"))?;
    if cfg.trace {
        write(TRACE_FILE, &jsonl(&outcome.trace)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_window_is_last_tenth() {
        assert_eq!(tail_window(2000), 200);
        assert_eq!(tail_window(5), 1);
        assert_eq!(tail_mean(&[1.0, 2.0, 3.0, 5.0], 2), 4.0);
    }

    #[test]
    fn csv_losses_round_trip_exactly() {
        let mut m = RunMetrics::default();
        for (i, loss) in [0.1f64, 1.0 / 3.0, 1.234_567_890_123_456_7, 1e-17].into_iter().enumerate() {
            m.rows.push(crate::protocol::IterationRecord {
                iteration: i,
                loss,
                ppl: loss.exp(),
                alerts: 0,
                mode: Mode::Baseline,
                restarts: 0,
                messages: 0,
                recomputations: 0,
            });
        }
        let parsed = losses_from_csv(&metrics_csv(&m)).unwrap();
        assert_eq!(parsed, m.losses());
    }
}
