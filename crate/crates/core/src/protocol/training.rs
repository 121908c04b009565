//! Iteration driver: attempts, recovery, parameter updates and metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversary::{Adversary, AttackConfig, AttackKind, AttackPlan, Direction};
use crate::defense::{sync_duplicates, AlertEvent, RecoveryAction, RecoveryState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ordered_mean;

use super::bus::MessageBus;
use super::config::{Mode, PipelineConfig};
use super::engine::{run_attempt, AttemptOutcome};
use super::message::{MessageCounts, MessageId, MessageKind, Node, Payload, PipelineMessage, TraceRecord};
use super::state::{BatchSource, PipelineState, SkipEvent};

/// One row of the per-iteration log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Training loss of the committed attempt.
    pub loss: f64,
    pub ppl: f64,
    pub alerts: usize,
    pub mode: Mode,
    pub restarts: usize,
    pub messages: u64,
    pub recomputations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub iteration: usize,
    pub attempt: usize,
    pub target: usize,
    pub kind: AttackKind,
    pub direction: Direction,
    /// The target was an active stage when the attack fired.
    pub effective: bool,
    pub detected: bool,
    pub localized: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub rows: Vec<IterationRecord>,
    pub alerts: Vec<AlertEvent>,
    pub attacks: Vec<AttackRecord>,
    pub skip_events: Vec<SkipEvent>,
    /// Iterations at which the run switched to central routing.
    pub escalations: Vec<usize>,
    pub messages: MessageCounts,
    pub recomputations: u64,
    pub restarts: u64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RunMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    /// Share of effective attacks that raised an alert in their attempt;
    /// `None` when nothing effective was attempted.
    pub fn detection_rate(&self) -> Option<f64> {
        let effective: Vec<_> = self.attacks.iter().filter(|a| a.effective).collect();
        if effective.is_empty() {
            return None;
        }
        let hits = effective.iter().filter(|a| a.detected).count();
        Some(hits as f64 / effective.len() as f64)
    }

    /// Share of detected attacks whose suspect set contained the attacker.
    pub fn localization_rate(&self) -> Option<f64> {
        let detected: Vec<_> = self.attacks.iter().filter(|a| a.detected).collect();
        if detected.is_empty() {
            return None;
        }
        let hits = detected.iter().filter(|a| a.localized).count();
        Some(hits as f64 / detected.len() as f64)
    }
}

/// Result of one committed iteration.
#[derive(Debug, Clone)]
pub struct IterationResult {
    pub record: IterationRecord,
    pub alerts: Vec<AlertEvent>,
    pub actions: Vec<RecoveryAction>,
}

pub struct Trainer<'d, T: Scalar, D: BatchSource<T>> {
    state: PipelineState<T>,
    data: &'d D,
    adversary: Adversary,
    recovery: RecoveryState,
    metrics: RunMetrics,
    trace: Option<Vec<TraceRecord>>,
    forced: Vec<AttackPlan>,
}

impl<'d, T: Scalar, D: BatchSource<T>> Trainer<'d, T, D> {
    pub fn new(cfg: &PipelineConfig, attack: &AttackConfig, data: &'d D) -> Result<Self> {
        let state = PipelineState::build(cfg)?;
        let adversary = Adversary::new(attack.clone(), cfg.stages, cfg.iterations, cfg.seeds.adversary)?;
        let initial = state.evaluate(&data.eval_set())?.widen();
        Ok(Self {
            state,
            data,
            adversary,
            recovery: RecoveryState::new(cfg.recovery),
            metrics: RunMetrics {
                initial_eval_loss: initial,
                ..RunMetrics::default()
            },
            trace: None,
            forced: Vec::new(),
        })
    }

    /// Records every routed message for the trace dump.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    /// Queues a fault that replaces the adversary's decision for the matching
    /// `(iteration, attempt)`.
    pub fn inject(&mut self, plan: AttackPlan) {
        self.forced.push(plan);
    }

    pub fn state(&self) -> &PipelineState<T> {
        &self.state
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Appends records from a finished bus, renumbering ids so they stay
    /// unique and increasing across the whole run.
    fn extend_trace(&mut self, records: Vec<TraceRecord>) {
        if let Some(trace) = &mut self.trace {
            for mut r in records {
                r.id = trace.len() as u64;
                trace.push(r);
            }
        }
    }

    fn plan(&mut self, iteration: usize, attempt: usize) -> Option<AttackPlan> {
        let forced = self
            .forced
            .iter()
            .position(|p| p.iteration == iteration && p.attempt == attempt)
            .map(|i| self.forced.remove(i));
        let drawn = self.adversary.plan(iteration, attempt);
        forced.or(drawn)
    }

    /// Runs the current iteration to a committed update, restarting or
    /// bypassing stages as alerts demand.
    pub fn step(&mut self) -> Result<IterationResult> {
        if self.recovery.take_escalation() {
            self.state.set_mode(Mode::RobustCentral);
            self.metrics.escalations.push(self.state.iteration());
        }
        let cfg = self.state.config().clone();
        let iteration = self.state.iteration();
        let batch = self.data.batch(iteration, cfg.batch_size);
        let mut counts = MessageCounts::default();
        let mut recomputations = 0;
        let mut alerts = Vec::new();
        let mut actions = Vec::new();
        let mut failed = 0;

        let (row_losses, grads) = loop {
            let attempt = failed;
            let plan = self.plan(iteration, attempt);
            let report = run_attempt(
                &self.state,
                &batch,
                plan.as_ref(),
                self.adversary.noise(),
                attempt,
                self.trace.is_some(),
            )?;
            counts.merge(&report.counts);
            recomputations += report.recomputations;
            self.extend_trace(report.trace);
            let topology = self.state.topology();
            match report.outcome {
                AttemptOutcome::Completed { row_losses, grads } => {
                    if let Some(p) = plan {
                        self.record_attack(&p, topology.is_active(p.target), None);
                    }
                    break (row_losses, grads);
                }
                AttemptOutcome::Alerted(alert) => {
                    failed += 1;
                    self.state.note_retry();
                    if let Some(p) = plan {
                        self.record_attack(&p, topology.is_active(p.target), Some(&alert));
                    }
                    let action = self.recovery.recover(&alert, self.state.mode(), &topology, failed);
                    self.metrics.alerts.push(alert.clone());
                    alerts.push(alert);
                    actions.push(action.clone());
                    match action {
                        RecoveryAction::Restart => {}
                        RecoveryAction::Escalate => {
                            self.state.set_mode(Mode::RobustCentral);
                            self.metrics.escalations.push(iteration);
                        }
                        RecoveryAction::InstallSkip { pair } => {
                            let event = self.state.install_skip(pair)?;
                            counts.merge(&self.announce_bridge(&event, attempt));
                            self.metrics.skip_events.push(event);
                        }
                        RecoveryAction::Abort { reason } => {
                            self.metrics.messages.merge(&counts);
                            self.metrics.recomputations += recomputations;
                            self.metrics.restarts += failed as u64;
                            return Err(Error::Aborted {
                                iteration,
                                reason,
                                metrics: Box::new(self.metrics.clone()),
                            });
                        }
                    }
                }
            }
        };

        let lr = T::narrow(cfg.lr);
        let topology = self.state.topology();
        for s in topology.active() {
            if self.state.frozen().originals.contains(&s) {
                continue;
            }
            if let Some(g) = &grads[s - 1] {
                self.state.stage_mut(s).apply_update(g, lr)?;
            }
        }
        let mut bus = MessageBus::new(topology, self.trace.is_some());
        sync_duplicates(&mut self.state, &mut bus, failed)?;
        let (sync_counts, sync_trace) = bus.into_parts();
        counts.merge(&sync_counts);
        self.extend_trace(sync_trace);

        let n = T::from_usize(row_losses.len()).expect("batch size fits scalar");
        let loss = ordered_mean(&row_losses, n).widen();
        let record = IterationRecord {
            iteration,
            loss,
            ppl: loss.exp(),
            alerts: alerts.len(),
            mode: self.state.mode(),
            restarts: failed,
            messages: counts.total(),
            recomputations,
        };
        self.metrics.messages.merge(&counts);
        self.metrics.recomputations += recomputations;
        self.metrics.restarts += failed as u64;
        self.metrics.rows.push(record.clone());
        self.state.advance_iteration();
        Ok(IterationResult {
            record,
            alerts,
            actions,
        })
    }

    /// The bridging stage receives its copy of the frozen module through the
    /// server.
    fn announce_bridge(&mut self, event: &SkipEvent, attempt: usize) -> MessageCounts {
        let (owner, holder) = event.bridge;
        let mut bus = MessageBus::<T>::new(self.state.topology(), self.trace.is_some());
        let blob = self.state.stage(owner).snapshot();
        for (sender, receiver) in [(Node::Stage(owner), Node::Server), (Node::Server, Node::Stage(holder))] {
            bus.route(PipelineMessage {
                id: MessageId::default(),
                kind: MessageKind::ParamSync,
                iteration: event.iteration,
                attempt,
                micro: 0,
                sender,
                receiver,
                payload: Payload::Params(blob.clone()),
            });
        }
        let (counts, trace) = bus.into_parts();
        self.extend_trace(trace);
        counts
    }

    fn record_attack(&mut self, plan: &AttackPlan, effective: bool, alert: Option<&AlertEvent>) {
        self.metrics.attacks.push(AttackRecord {
            iteration: plan.iteration,
            attempt: plan.attempt,
            target: plan.target,
            kind: plan.kind,
            direction: plan.direction,
            effective,
            detected: alert.is_some(),
            localized: alert.is_some_and(|a| a.suspects.contains(&plan.target)),
        });
    }

    /// Evaluates the current model and returns the metrics so far.
    pub fn finish(mut self) -> Result<(RunMetrics, Vec<TraceRecord>)> {
        self.metrics.final_eval_loss = self.state.evaluate(&self.data.eval_set())?.widen();
        Ok((self.metrics, self.trace.unwrap_or_default()))
    }

    /// Trains for the configured number of iterations. On abort the error
    /// carries metrics including the final evaluation of the partial model.
    pub fn run(mut self) -> Result<(RunMetrics, Vec<TraceRecord>)> {
        let started = Instant::now();
        let iterations = self.state.config().iterations;
        while self.state.iteration() < iterations {
            if let Err(e) = self.step() {
                return Err(match e {
                    Error::Aborted { iteration, reason, .. } => {
                        self.metrics.wall_time_secs = started.elapsed().as_secs_f64();
                        let (metrics, _) = self.finish()?;
                        Error::Aborted {
                            iteration,
                            reason,
                            metrics: Box::new(metrics),
                        }
                    }
                    other => other,
                });
            }
        }
        self.metrics.wall_time_secs = started.elapsed().as_secs_f64();
        self.finish()
    }
}

/// Builds a trainer and runs it to completion.
pub fn run_training<T: Scalar, D: BatchSource<T>>(
    cfg: &PipelineConfig,
    attack: &AttackConfig,
    data: &D,
) -> Result<RunMetrics> {
    Ok(Trainer::new(cfg, attack, data)?.run()?.0)
}
