//! One attempt of one training iteration, driven by a deterministic round
//! scheduler.
//!
//! Each round, every active stage (ascending) performs at most one unit of
//! work: the next micro-batch forward until all `m` are done, then the next
//! micro-batch backward. A stage only starts a unit once every message it
//! needs (activation pair, jump, gradient, expected gradient) is in its
//! inbox. In central mode the server runs after the stages each round and
//! relays everything. When the system makes no progress for `round_budget`
//! consecutive rounds the earliest stuck stage raises a timeout.

use std::collections::BTreeMap;

use crate::adversary::{tamper_backward, tamper_forward, tamper_stealthy, AttackKind, AttackPlan, Direction};
use crate::defense::{compare, expected_backward, localize, recompute_forward, verify_jump, AlertEvent, CheckKind};
use crate::error::{Error, Result};
use crate::model::{ForwardCache, Gradients};
use crate::random::RandomStream;
use crate::scalar::Scalar;
use crate::tensor::{gaussian, softmax_cross_entropy_rows, Tensor};

use super::bus::{MessageBus, Topology};
use super::config::Mode;
use super::message::{MessageCounts, MessageId, MessageKind, Node, Payload, PipelineMessage, TraceRecord};
use super::state::{Batch, PipelineState};

#[derive(Debug, Clone)]
pub enum AttemptOutcome<T: Scalar> {
    Completed {
        /// Per-row losses in batch order.
        row_losses: Vec<T>,
        /// Accumulated parameter gradients, indexed by `stage - 1`; `None`
        /// for bypassed stages.
        grads: Vec<Option<Gradients<T>>>,
    },
    Alerted(AlertEvent),
}

#[derive(Debug, Clone)]
pub struct AttemptReport<T: Scalar> {
    pub outcome: AttemptOutcome<T>,
    pub counts: MessageCounts,
    pub trace: Vec<TraceRecord>,
    /// Duplicate-block forward recomputations plus expected-gradient computations.
    pub recomputations: u64,
    pub rounds: usize,
}

enum Step {
    Progress,
    Waiting,
    Alert(AlertEvent),
}

#[derive(Debug)]
struct Worker<T: Scalar> {
    fwd: usize,
    bwd: usize,
    caches: Vec<ForwardCache<T>>,
    dup_caches: Vec<Option<ForwardCache<T>>>,
    loss_grads: Vec<Tensor<T>>,
    grads: Gradients<T>,
    crashed: bool,
}

#[derive(Debug, Default)]
struct Server<T: Scalar> {
    /// Activations by (stage, micro); stage 0 holds the raw input of stage 1.
    activations: BTreeMap<(usize, usize), Tensor<T>>,
    /// Gradient claims by (claimant, micro): (gradient consumed, gradient sent).
    claims: BTreeMap<(usize, usize), (Tensor<T>, Tensor<T>)>,
    expected: BTreeMap<(usize, usize), Tensor<T>>,
}

struct Engine<'a, T: Scalar> {
    state: &'a PipelineState<T>,
    batch: &'a Batch<T>,
    plan: Option<&'a AttackPlan>,
    noise: &'a mut RandomStream,
    topo: Topology,
    mode: Mode,
    tolerance: f64,
    iteration: usize,
    attempt: usize,
    micro_size: usize,
    micros: usize,
    bus: MessageBus<T>,
    workers: Vec<Option<Worker<T>>>,
    server: Option<Server<T>>,
    row_losses: Vec<T>,
    recomputations: u64,
}

/// Runs one attempt of the current iteration without touching `state`.
pub fn run_attempt<T: Scalar>(
    state: &PipelineState<T>,
    batch: &Batch<T>,
    plan: Option<&AttackPlan>,
    noise: &mut RandomStream,
    attempt: usize,
    trace: bool,
) -> Result<AttemptReport<T>> {
    let cfg = state.config();
    if batch.len() != cfg.batch_size || batch.x.cols() != state.dims().input {
        return Err(Error::shape(
            "batch",
            (cfg.batch_size, state.dims().input),
            batch.x.shape(),
        ));
    }
    let topo = state.topology();
    let workers = (1..=state.stages())
        .map(|s| {
            topo.is_active(s).then(|| Worker {
                fwd: 0,
                bwd: 0,
                caches: Vec::new(),
                dup_caches: Vec::new(),
                loss_grads: Vec::new(),
                grads: state.stage(s).zero_grads(),
                crashed: matches!(plan, Some(p) if p.kind == AttackKind::Crash && p.target == s),
            })
        })
        .collect();
    let mode = state.mode();
    let mut engine = Engine {
        state,
        batch,
        plan,
        noise,
        bus: MessageBus::new(topo.clone(), trace),
        topo,
        mode,
        tolerance: cfg.tolerance,
        iteration: state.iteration(),
        attempt,
        micro_size: cfg.micro_batch_size,
        micros: cfg.micro_batches(),
        workers,
        server: (mode == Mode::RobustCentral).then(Server::default),
        row_losses: Vec::with_capacity(cfg.batch_size),
        recomputations: 0,
    };
    let (outcome, rounds) = engine.run(cfg.round_budget)?;
    let recomputations = engine.recomputations;
    let (counts, trace) = engine.bus.into_parts();
    Ok(AttemptReport {
        outcome,
        counts,
        trace,
        recomputations,
        rounds,
    })
}

impl<'a, T: Scalar> Engine<'a, T> {
    fn run(&mut self, round_budget: usize) -> Result<(AttemptOutcome<T>, usize)> {
        let active = self.topo.active();
        let mut idle = 0;
        let mut round = 0;
        loop {
            self.bus.deliver();
            let mut progressed = false;
            for &s in &active {
                let worker = self.workers[s - 1].as_ref().expect("active stage has a worker");
                if worker.crashed {
                    continue;
                }
                let step = if worker.fwd < self.micros {
                    self.forward_step(s)?
                } else if worker.bwd < self.micros {
                    self.backward_step(s)?
                } else {
                    Step::Waiting
                };
                match step {
                    Step::Progress => progressed = true,
                    Step::Waiting => {}
                    Step::Alert(alert) => return Ok((self.raise(alert), round + 1)),
                }
            }
            if self.server.is_some() {
                let (handled, alert) = self.server_step()?;
                progressed |= handled;
                if let Some(alert) = alert {
                    return Ok((self.raise(alert), round + 1));
                }
            }
            round += 1;
            if self.finished() {
                return Ok((self.completed(), round));
            }
            if progressed || self.bus.in_flight() {
                idle = 0;
            } else {
                idle += 1;
                if idle >= round_budget {
                    let alert = self.timeout_alert()?;
                    return Ok((self.raise(alert), round));
                }
            }
        }
    }

    fn finished(&self) -> bool {
        self.workers
            .iter()
            .flatten()
            .all(|w| !w.crashed && w.bwd == self.micros)
    }

    fn completed(&mut self) -> AttemptOutcome<T> {
        let grads = self
            .workers
            .iter_mut()
            .map(|w| w.take().map(|w| w.grads))
            .collect();
        AttemptOutcome::Completed {
            row_losses: std::mem::take(&mut self.row_losses),
            grads,
        }
    }

    /// Notifies the initiator and returns the alert as the outcome.
    fn raise(&mut self, alert: AlertEvent) -> AttemptOutcome<T> {
        self.send(
            MessageKind::Alert,
            alert.micro,
            Node::Stage(alert.stage),
            Node::Initiator,
            Payload::Alert(Box::new(alert.clone())),
        );
        AttemptOutcome::Alerted(alert)
    }

    fn alert(&self, stage: usize, micro: usize, direction: Direction, check: CheckKind, diff: Option<f64>) -> AlertEvent {
        AlertEvent {
            iteration: self.iteration,
            attempt: self.attempt,
            micro,
            stage,
            direction,
            check,
            mode: self.mode,
            suspects: localize(stage, direction, self.mode, &self.topo),
            max_abs_diff: diff.filter(|d| d.is_finite()),
        }
    }

    fn timeout_alert(&self) -> Result<AlertEvent> {
        let k = self.topo.stages();
        let live: Vec<(usize, &Worker<T>)> = self
            .topo
            .active()
            .into_iter()
            .filter_map(|s| self.workers[s - 1].as_ref().filter(|w| !w.crashed).map(|w| (s, w)))
            .collect();
        let forward_done = self.workers[k - 1].as_ref().is_some_and(|w| w.fwd == self.micros);
        let found = if !forward_done {
            live.iter()
                .find(|(s, w)| *s > 1 && w.fwd < self.micros)
                .map(|(s, w)| (*s, Direction::Forward, w.fwd))
        } else {
            live.iter()
                .rev()
                .find(|(s, w)| *s < k && w.bwd < self.micros)
                .map(|(s, w)| (*s, Direction::Backward, w.bwd))
        };
        let (stage, direction, micro) = found
            .ok_or_else(|| Error::Structure("scheduler stalled with no waiting stage".into()))?;
        Ok(self.alert(stage, micro, direction, CheckKind::Timeout, None))
    }

    fn send(&mut self, kind: MessageKind, micro: usize, sender: Node, receiver: Node, payload: Payload<T>) {
        self.bus.route(PipelineMessage {
            id: MessageId::default(),
            kind,
            iteration: self.iteration,
            attempt: self.attempt,
            micro,
            sender,
            receiver,
            payload,
        });
    }

    fn has(&self, at: usize, kind: MessageKind, micro: usize, from: Node) -> bool {
        self.bus.contains(Node::Stage(at), |m| m.kind == kind && m.micro == micro && m.sender == from)
    }

    fn take(&mut self, at: usize, kind: MessageKind, micro: usize, from: Node) -> PipelineMessage<T> {
        self.bus
            .take(Node::Stage(at), |m| m.kind == kind && m.micro == micro && m.sender == from)
            .expect("presence checked before take")
    }

    fn attack_on(&self, stage: usize, direction: Direction) -> Option<AttackKind> {
        self.plan
            .filter(|p| p.target == stage && p.direction == direction)
            .map(|p| p.kind)
    }

    fn upstream_node(&self, neighbour: usize) -> Node {
        if self.mode == Mode::RobustCentral {
            Node::Server
        } else {
            Node::Stage(neighbour)
        }
    }

    fn forward_step(&mut self, s: usize) -> Result<Step> {
        let state = self.state;
        let k = self.topo.stages();
        let j = self.workers[s - 1].as_ref().unwrap().fwd;
        let robust = self.mode.is_robust();
        let direct_robust = self.mode == Mode::RobustDirect;

        let input = if s == 1 {
            self.batch.x.slice_rows(j * self.micro_size, (j + 1) * self.micro_size)?
        } else {
            let pred = self.topo.pred(s).expect("non-first stage has a predecessor");
            let from = self.upstream_node(pred);
            let jump_from = if direct_robust { self.topo.pred(pred) } else { None };
            if !self.has(s, MessageKind::FwdAct, j, from) {
                return Ok(Step::Waiting);
            }
            if let Some(g) = jump_from {
                if !self.has(s, MessageKind::FwdJump, j, Node::Stage(g)) {
                    return Ok(Step::Waiting);
                }
            }
            let msg = self.take(s, MessageKind::FwdAct, j, from);
            let (a_dup, a_out) = match msg.payload {
                Payload::Pair { dup, out } => (Some(dup), out),
                Payload::Single(out) => (None, out),
                _ => return Err(Error::Structure("forward message without tensors".into())),
            };
            if robust {
                let dup_module = state
                    .verification_duplicate(s)
                    .ok_or_else(|| Error::Structure(format!("stage {s} holds no duplicate")))?;
                let Some(a_dup) = a_dup else {
                    return Ok(Step::Alert(self.alert(s, j, Direction::Forward, CheckKind::DupBlock, None)));
                };
                let (verdict, cache) = recompute_forward(dup_module, &a_dup, &a_out, self.tolerance);
                self.recomputations += 1;
                if !verdict.is_match() {
                    return Ok(Step::Alert(self.alert(
                        s,
                        j,
                        Direction::Forward,
                        CheckKind::DupBlock,
                        Some(verdict.max_abs_diff),
                    )));
                }
                self.workers[s - 1].as_mut().unwrap().dup_caches.push(cache);
                if let Some(g) = jump_from {
                    let jump = single(self.take(s, MessageKind::FwdJump, j, Node::Stage(g)))?;
                    let verdict = verify_jump(&a_dup, &jump, self.tolerance);
                    if !verdict.is_match() {
                        return Ok(Step::Alert(self.alert(
                            s,
                            j,
                            Direction::Forward,
                            CheckKind::Jump,
                            Some(verdict.max_abs_diff),
                        )));
                    }
                }
            }
            a_out
        };

        let module = state.stage(s);
        let (out, cache) = module.forward(&input)?;
        self.workers[s - 1].as_mut().unwrap().caches.push(cache);

        if s == k {
            let start = j * self.micro_size;
            let labels = &self.batch.labels[start..start + self.micro_size];
            let denom = T::from_usize(self.batch.len()).expect("batch size fits scalar");
            let (losses, grad) = softmax_cross_entropy_rows(&out, labels, denom)?;
            self.row_losses.extend(losses);
            self.workers[s - 1].as_mut().unwrap().loss_grads.push(grad);
        } else {
            let (dup_sent, out_sent) = match self.attack_on(s, Direction::Forward) {
                Some(AttackKind::ForwardFlip) => (input, tamper_forward(&out)),
                Some(AttackKind::StealthyForward) => {
                    let fake = gaussian(self.noise, input.rows(), input.cols());
                    tamper_stealthy(module, &fake)?
                }
                _ => (input, out),
            };
            let succ = self.topo.succ(s).expect("non-final stage has a successor");
            let to = if self.mode == Mode::RobustCentral { Node::Server } else { Node::Stage(succ) };
            let jump = (direct_robust && s + 2 <= k).then(|| out_sent.clone());
            let payload = if robust {
                Payload::Pair {
                    dup: dup_sent,
                    out: out_sent,
                }
            } else {
                Payload::Single(out_sent)
            };
            self.send(MessageKind::FwdAct, j, Node::Stage(s), to, payload);
            if let Some(out) = jump {
                self.send(MessageKind::FwdJump, j, Node::Stage(s), Node::Stage(s + 2), Payload::Single(out));
            }
        }
        self.workers[s - 1].as_mut().unwrap().fwd += 1;
        Ok(Step::Progress)
    }

    fn backward_step(&mut self, s: usize) -> Result<Step> {
        let state = self.state;
        let k = self.topo.stages();
        let j = self.workers[s - 1].as_ref().unwrap().bwd;
        let robust = self.mode.is_robust();
        let direct_robust = self.mode == Mode::RobustDirect;

        let g = if s == k {
            self.workers[s - 1].as_ref().unwrap().loss_grads[j].clone()
        } else {
            let succ = self.topo.succ(s).expect("non-final stage has a successor");
            let from = self.upstream_node(succ);
            let expected_from = if direct_robust { self.topo.succ(succ) } else { None };
            if !self.has(s, MessageKind::BwdGrad, j, from) {
                return Ok(Step::Waiting);
            }
            if let Some(e) = expected_from {
                if !self.has(s, MessageKind::BwdJump, j, Node::Stage(e)) {
                    return Ok(Step::Waiting);
                }
            }
            let claim = match self.take(s, MessageKind::BwdGrad, j, from).payload {
                Payload::Pair { out, .. } | Payload::Single(out) => out,
                _ => return Err(Error::Structure("gradient message without tensors".into())),
            };
            if let Some(e) = expected_from {
                let expected = single(self.take(s, MessageKind::BwdJump, j, Node::Stage(e)))?;
                let verdict = compare(&expected, &claim, self.tolerance);
                if !verdict.is_match() {
                    return Ok(Step::Alert(self.alert(
                        s,
                        j,
                        Direction::Backward,
                        CheckKind::BackwardMirror,
                        Some(verdict.max_abs_diff),
                    )));
                }
            }
            claim
        };

        let module = state.stage(s);
        let grad_in = {
            let w = self.workers[s - 1].as_mut().unwrap();
            module.backward_into(&w.caches[j], &g, &mut w.grads)?
        };

        if let Some(pred) = self.topo.pred(s) {
            let to = self.upstream_node(pred);
            let sent = match self.attack_on(s, Direction::Backward) {
                Some(AttackKind::BackwardGauss) => tamper_backward(grad_in.shape(), self.noise),
                _ => grad_in.clone(),
            };
            let payload = if robust {
                Payload::Pair { dup: g, out: sent }
            } else {
                Payload::Single(sent)
            };
            self.send(MessageKind::BwdGrad, j, Node::Stage(s), to, payload);

            if let (true, Some(grand)) = (robust, self.topo.pred(pred)) {
                let dup_module = state
                    .verification_duplicate(s)
                    .ok_or_else(|| Error::Structure(format!("stage {s} holds no duplicate")))?;
                let dup_cache = self.workers[s - 1].as_ref().unwrap().dup_caches[j]
                    .as_ref()
                    .ok_or_else(|| Error::Structure("missing duplicate cache".into()))?;
                let expected = expected_backward(dup_module, dup_cache, &grad_in)?;
                self.recomputations += 1;
                let to = self.upstream_node(grand);
                self.send(MessageKind::BwdJump, j, Node::Stage(s), to, Payload::Single(expected));
            }
        }
        self.workers[s - 1].as_mut().unwrap().bwd += 1;
        Ok(Step::Progress)
    }

    /// Central relay: stores every activation and gradient, forwards
    /// `[a_out of predecessor (own record), a_out]` pairs, and adjudicates
    /// gradient claims against the expected tensors.
    fn server_step(&mut self) -> Result<(bool, Option<AlertEvent>)> {
        let inbox = self.bus.drain(Node::Server);
        let handled = !inbox.is_empty();
        for msg in inbox {
            let Node::Stage(s) = msg.sender else {
                continue;
            };
            let j = msg.micro;
            match (msg.kind, msg.payload) {
                (MessageKind::FwdAct, Payload::Pair { dup, out }) => {
                    let server = self.server.as_mut().unwrap();
                    if s == 1 {
                        server.activations.insert((0, j), dup);
                    }
                    let prev = self.topo.pred(s).unwrap_or(0);
                    let recorded_input = server.activations[&(prev, j)].clone();
                    server.activations.insert((s, j), out.clone());
                    let succ = self.topo.succ(s).expect("non-final stage has a successor");
                    self.send(
                        MessageKind::FwdAct,
                        j,
                        Node::Server,
                        Node::Stage(succ),
                        Payload::Pair {
                            dup: recorded_input,
                            out,
                        },
                    );
                }
                (MessageKind::BwdGrad, Payload::Pair { dup, out }) => {
                    self.server.as_mut().unwrap().claims.insert((s, j), (dup, out));
                    if let Some(alert) = self.release_claim(s, j) {
                        return Ok((true, Some(alert)));
                    }
                }
                (MessageKind::BwdJump, Payload::Single(expected)) => {
                    let claimant = self.topo.pred(s).expect("expected gradient has a claimant");
                    self.server.as_mut().unwrap().expected.insert((claimant, j), expected);
                    if let Some(alert) = self.release_claim(claimant, j) {
                        return Ok((true, Some(alert)));
                    }
                }
                (kind, _) => {
                    return Err(Error::Structure(format!("server cannot relay {kind:?}")));
                }
            }
        }
        Ok((handled, None))
    }

    fn release_claim(&mut self, claimant: usize, j: usize) -> Option<AlertEvent> {
        let receiver = self.topo.pred(claimant)?;
        let needs_expected = self.topo.succ(claimant).is_some();
        let server = self.server.as_mut().unwrap();
        if !server.claims.contains_key(&(claimant, j)) {
            return None;
        }
        if needs_expected && !server.expected.contains_key(&(claimant, j)) {
            return None;
        }
        let (consumed, claim) = server.claims.remove(&(claimant, j)).unwrap();
        if needs_expected {
            let expected = server.expected.remove(&(claimant, j)).unwrap();
            let verdict = compare(&expected, &claim, self.tolerance);
            if !verdict.is_match() {
                return Some(self.alert(
                    receiver,
                    j,
                    Direction::Backward,
                    CheckKind::BackwardMirror,
                    Some(verdict.max_abs_diff),
                ));
            }
        }
        self.send(
            MessageKind::BwdGrad,
            j,
            Node::Server,
            Node::Stage(receiver),
            Payload::Pair {
                dup: consumed,
                out: claim,
            },
        );
        None
    }
}

fn single<T: Scalar>(msg: PipelineMessage<T>) -> Result<Tensor<T>> {
    match msg.payload {
        Payload::Single(t) => Ok(t),
        _ => Err(Error::Structure(format!("{:?} expected a single tensor", msg.kind))),
    }
}
