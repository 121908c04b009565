use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{MessageBus, MessageKind, Mode, Node, Payload, PipelineMessage, PipelineState, Topology};
use crate::scalar::Scalar;

use super::AlertEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryPolicy {
    /// Alerted iterations (or failed attempts of one iteration) tolerated in
    /// direct mode before escalating to central routing. With escalation
    /// disabled, the per-iteration restart cap.
    #[serde(default = "RecoveryPolicy::default_retry_cap")]
    pub retry_cap: usize,
    #[serde(default = "RecoveryPolicy::default_escalate")]
    pub escalate: bool,
    /// Hard cap on attempts of a single iteration in any mode.
    #[serde(default = "RecoveryPolicy::default_max_attempts")]
    pub max_attempts: usize,
}

impl Default for RecoveryPolicy {
    fn default() -> Self {
        Self {
            retry_cap: Self::default_retry_cap(),
            escalate: Self::default_escalate(),
            max_attempts: Self::default_max_attempts(),
        }
    }
}

impl RecoveryPolicy {
    fn default_retry_cap() -> usize {
        3
    }
    fn default_escalate() -> bool {
        true
    }
    fn default_max_attempts() -> usize {
        64
    }

    pub fn validate(&self) -> Result<()> {
        if self.retry_cap == 0 {
            return Err(Error::config("recovery.retry_cap", "must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("recovery.max_attempts", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryAction {
    /// Replay the iteration with the same batch.
    Restart,
    /// Switch to central routing now and replay the iteration.
    Escalate,
    /// Bypass the pair and replay the iteration over the bridged route.
    InstallSkip { pair: (usize, usize) },
    Abort { reason: String },
}

/// Escalation bookkeeping: restart → central routing → skip layer. Never
/// steps back down within a run.
#[derive(Debug, Clone, Default)]
pub struct RecoveryState {
    policy: RecoveryPolicy,
    alerted_iterations: BTreeSet<usize>,
    escalation_pending: bool,
    escalated: bool,
}

impl RecoveryState {
    pub fn new(policy: RecoveryPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn alerted_iterations(&self) -> usize {
        self.alerted_iterations.len()
    }

    /// Decides the response to `alert`; `failed_attempts` counts failed
    /// attempts of the current iteration including this one.
    pub fn recover(
        &mut self,
        alert: &AlertEvent,
        mode: Mode,
        topology: &Topology,
        failed_attempts: usize,
    ) -> RecoveryAction {
        if failed_attempts >= self.policy.max_attempts {
            return RecoveryAction::Abort {
                reason: format!(
                    "iteration {} failed {failed_attempts} attempts",
                    alert.iteration
                ),
            };
        }
        match mode {
            Mode::Baseline => RecoveryAction::Restart,
            Mode::RobustDirect => {
                self.alerted_iterations.insert(alert.iteration);
                if self.policy.escalate {
                    if self.escalated {
                        RecoveryAction::Restart
                    } else if failed_attempts >= self.policy.retry_cap {
                        // One iteration keeps failing: waiting for the boundary
                        // would never end under a persistent attacker.
                        self.escalated = true;
                        self.escalation_pending = false;
                        RecoveryAction::Escalate
                    } else {
                        if self.alerted_iterations.len() >= self.policy.retry_cap {
                            self.escalation_pending = true;
                        }
                        RecoveryAction::Restart
                    }
                } else if failed_attempts > self.policy.retry_cap {
                    RecoveryAction::Abort {
                        reason: format!(
                            "retry cap {} exceeded at iteration {}",
                            self.policy.retry_cap, alert.iteration
                        ),
                    }
                } else {
                    RecoveryAction::Restart
                }
            }
            Mode::RobustCentral => {
                self.alerted_iterations.insert(alert.iteration);
                if topology.skip().is_none() {
                    RecoveryAction::InstallSkip {
                        pair: choose_skip_pair(&alert.suspects, topology),
                    }
                } else {
                    RecoveryAction::Restart
                }
            }
        }
    }

    /// Consumes a pending escalation at an iteration boundary.
    pub fn take_escalation(&mut self) -> bool {
        if self.escalation_pending {
            self.escalation_pending = false;
            self.escalated = true;
            true
        } else {
            false
        }
    }
}

/// Adjacent interior pair to bypass for a suspect set: the suspect pair
/// itself when adjacent, otherwise the lowest suspect and its successor
/// (or predecessor when the successor is the final stage).
pub fn choose_skip_pair(suspects: &[usize], topology: &Topology) -> (usize, usize) {
    let last_interior = topology.stages() - 1;
    if let Some(w) = suspects.windows(2).find(|w| w[1] == w[0] + 1) {
        return (w[0], w[1]);
    }
    let s = suspects.first().copied().unwrap_or(2).clamp(2, last_interior);
    if s < last_interior {
        (s, s + 1)
    } else {
        (s - 1, s)
    }
}

/// Pushes each updated owner's parameters to the holder of its duplicate.
/// Frozen or bypassed owners are left alone; returns the number of blobs sent.
pub fn sync_duplicates<T: Scalar>(
    state: &mut PipelineState<T>,
    bus: &mut MessageBus<T>,
    attempt: usize,
) -> Result<usize> {
    if !state.mode().is_robust() {
        return Ok(0);
    }
    let topology = state.topology();
    let central = state.mode() == Mode::RobustCentral;
    let iteration = state.iteration();
    let mut sent = 0;
    for owner in topology.active() {
        let holder = owner + 1;
        if holder > topology.stages()
            || !topology.is_active(holder)
            || state.frozen().originals.contains(&owner)
        {
            continue;
        }
        let blob = state.stage(owner).snapshot();
        let hops: Vec<(Node, Node)> = if central {
            vec![(Node::Stage(owner), Node::Server), (Node::Server, Node::Stage(holder))]
        } else {
            vec![(Node::Stage(owner), Node::Stage(holder))]
        };
        for (sender, receiver) in hops {
            bus.route(PipelineMessage {
                id: Default::default(),
                kind: MessageKind::ParamSync,
                iteration,
                attempt,
                micro: 0,
                sender,
                receiver,
                payload: Payload::Params(blob.clone()),
            });
        }
        bus.deliver();
        let delivered = bus
            .take(Node::Stage(holder), |m| m.kind == MessageKind::ParamSync)
            .expect("sync message just delivered");
        if let Payload::Params(b) = &delivered.payload {
            state.load_duplicate(holder, b)?;
        }
        // Central relay leaves the first hop in the server inbox.
        bus.drain(Node::Server);
        sent += 1;
    }
    Ok(sent)
}
