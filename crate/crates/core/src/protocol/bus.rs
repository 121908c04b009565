//! In-memory message bus with per-edge FIFO delivery.
//!
//! Messages sent during scheduler round `r` become visible to receivers at
//! the start of round `r + 1`, in send order, which preserves per-edge
//! ordering.

use std::collections::{BTreeMap, VecDeque};

use crate::scalar::Scalar;

use super::message::{MessageCounts, MessageId, MessageKind, Node, Payload, PipelineMessage, TraceRecord};

/// Stage graph after an optional skip-layer bypass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    stages: usize,
    skip: Option<(usize, usize)>,
}

impl Topology {
    pub fn new(stages: usize, skip: Option<(usize, usize)>) -> Self {
        Self { stages, skip }
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn skip(&self) -> Option<(usize, usize)> {
        self.skip
    }

    pub fn is_skipped(&self, s: usize) -> bool {
        matches!(self.skip, Some((a, b)) if s == a || s == b)
    }

    pub fn is_active(&self, s: usize) -> bool {
        (1..=self.stages).contains(&s) && !self.is_skipped(s)
    }

    pub fn is_immune(&self, s: usize) -> bool {
        s == 1 || s == self.stages
    }

    pub fn is_interior(&self, s: usize) -> bool {
        s >= 2 && s < self.stages
    }

    pub fn active(&self) -> Vec<usize> {
        (1..=self.stages).filter(|&s| self.is_active(s)).collect()
    }

    /// Nearest active stage before `s`.
    pub fn pred(&self, s: usize) -> Option<usize> {
        (1..s).rev().find(|&p| self.is_active(p))
    }

    /// Nearest active stage after `s`.
    pub fn succ(&self, s: usize) -> Option<usize> {
        (s + 1..=self.stages).find(|&n| self.is_active(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Queued(MessageId),
    /// Addressed to or from a bypassed stage; a control notice was logged.
    Dropped(MessageId),
}

#[derive(Debug)]
pub struct MessageBus<T: Scalar> {
    topology: Topology,
    pending: Vec<PipelineMessage<T>>,
    inboxes: BTreeMap<Node, VecDeque<PipelineMessage<T>>>,
    next_id: u64,
    counts: MessageCounts,
    trace: Option<Vec<TraceRecord>>,
}

impl<T: Scalar> MessageBus<T> {
    pub fn new(topology: Topology, trace: bool) -> Self {
        Self {
            topology,
            pending: Vec::new(),
            inboxes: BTreeMap::new(),
            next_id: 0,
            counts: MessageCounts::default(),
            trace: trace.then(Vec::new),
        }
    }

    fn stamp(&mut self, msg: &mut PipelineMessage<T>) {
        msg.id = MessageId(self.next_id);
        self.next_id += 1;
        self.counts.bump(msg.kind);
        if let Some(trace) = &mut self.trace {
            trace.push(msg.trace_record());
        }
    }

    /// Queues `msg` for delivery in the next round.
    pub fn route(&mut self, mut msg: PipelineMessage<T>) -> Delivery {
        let touches_skipped = [msg.sender, msg.receiver]
            .iter()
            .any(|n| matches!(n, Node::Stage(s) if self.topology.is_skipped(*s)));
        self.stamp(&mut msg);
        if touches_skipped {
            let dropped = msg.id;
            let mut notice = PipelineMessage {
                id: MessageId(0),
                kind: MessageKind::Control,
                iteration: msg.iteration,
                attempt: msg.attempt,
                micro: msg.micro,
                sender: Node::Server,
                receiver: msg.sender,
                payload: Payload::Control(format!(
                    "dropped {:?} {} -> {}: bypassed stage",
                    msg.kind, msg.sender, msg.receiver
                )),
            };
            self.stamp(&mut notice);
            return Delivery::Dropped(dropped);
        }
        let id = msg.id;
        self.pending.push(msg);
        Delivery::Queued(id)
    }

    /// Moves everything sent last round into the receivers' inboxes.
    pub fn deliver(&mut self) {
        for msg in self.pending.drain(..) {
            self.inboxes.entry(msg.receiver).or_default().push_back(msg);
        }
    }

    /// Removes the first message in `node`'s inbox matching `pred`.
    pub fn take(
        &mut self,
        node: Node,
        pred: impl Fn(&PipelineMessage<T>) -> bool,
    ) -> Option<PipelineMessage<T>> {
        let inbox = self.inboxes.get_mut(&node)?;
        let pos = inbox.iter().position(pred)?;
        inbox.remove(pos)
    }

    pub fn contains(&self, node: Node, pred: impl Fn(&PipelineMessage<T>) -> bool) -> bool {
        self.inboxes.get(&node).is_some_and(|q| q.iter().any(pred))
    }

    /// Drains `node`'s inbox in arrival order.
    pub fn drain(&mut self, node: Node) -> Vec<PipelineMessage<T>> {
        self.inboxes
            .get_mut(&node)
            .map(|q| q.drain(..).collect())
            .unwrap_or_default()
    }

    pub fn in_flight(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn counts(&self) -> &MessageCounts {
        &self.counts
    }

    pub fn into_parts(self) -> (MessageCounts, Vec<TraceRecord>) {
        (self.counts, self.trace.unwrap_or_default())
    }
}
