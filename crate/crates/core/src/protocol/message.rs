use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::defense::AlertEvent;
use crate::model::ParamBlob;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Addressable participant on the message bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Stage(usize),
    Server,
    Initiator,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Stage(i) => write!(f, "stage{i}"),
            Node::Server => f.write_str("server"),
            Node::Initiator => f.write_str("initiator"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    FwdAct,
    FwdJump,
    BwdGrad,
    BwdJump,
    ParamSync,
    Alert,
    Control,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::FwdAct,
        MessageKind::FwdJump,
        MessageKind::BwdGrad,
        MessageKind::BwdJump,
        MessageKind::ParamSync,
        MessageKind::Alert,
        MessageKind::Control,
    ];
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageId(pub u64);

#[derive(Debug, Clone)]
pub enum Payload<T: Scalar> {
    /// `(dup, out)`: the sender's input and output (forward), or the gradient
    /// it consumed and the gradient it produced (backward).
    Pair { dup: Tensor<T>, out: Tensor<T> },
    Single(Tensor<T>),
    Params(ParamBlob),
    Alert(Box<AlertEvent>),
    Control(String),
}

impl<T: Scalar> Payload<T> {
    /// SHA-256 prefix over the payload bytes (tensors widened to f64 LE).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut tensor = |t: &Tensor<T>| {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.widen().to_le_bytes());
            }
        };
        match self {
            Payload::Pair { dup, out } => {
                tensor(dup);
                tensor(out);
            }
            Payload::Single(t) => tensor(t),
            Payload::Params(b) => h.update(b.as_bytes()),
            Payload::Alert(a) => h.update(serde_json::to_vec(a).unwrap_or_default()),
            Payload::Control(s) => h.update(s.as_bytes()),
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineMessage<T: Scalar> {
    pub id: MessageId,
    pub kind: MessageKind,
    pub iteration: usize,
    pub attempt: usize,
    pub micro: usize,
    pub sender: Node,
    pub receiver: Node,
    pub payload: Payload<T>,
}

impl<T: Scalar> PipelineMessage<T> {
    pub fn trace_record(&self) -> TraceRecord {
        TraceRecord {
            id: self.id.0,
            kind: self.kind,
            iteration: self.iteration,
            attempt: self.attempt,
            micro: self.micro,
            sender: self.sender,
            receiver: self.receiver,
            checksum: self.payload.checksum(),
        }
    }
}

/// One line of the message-trace JSONL dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: u64,
    pub kind: MessageKind,
    pub iteration: usize,
    pub attempt: usize,
    pub micro: usize,
    pub sender: Node,
    pub receiver: Node,
    pub checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCounts(BTreeMap<MessageKind, u64>);

impl MessageCounts {
    pub fn bump(&mut self, kind: MessageKind) {
        *self.0.entry(kind).or_insert(0) += 1;
    }

    pub fn get(&self, kind: MessageKind) -> u64 {
        self.0.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn merge(&mut self, other: &MessageCounts) {
        for (&k, &v) in &other.0 {
            *self.0.entry(k).or_insert(0) += v;
        }
    }
}
