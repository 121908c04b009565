//! The K-stage pipeline: configuration, stage state, the message bus, the
//! attempt scheduler and the training loop.

mod bus;
mod config;
mod engine;
mod message;
mod state;
mod training;

pub use bus::{Delivery, MessageBus, Topology};
pub use config::{uniform_layout, Dims, Mode, PipelineConfig, Seeds};
pub use engine::{run_attempt, AttemptOutcome, AttemptReport};
pub use message::{MessageCounts, MessageId, MessageKind, Node, Payload, PipelineMessage, TraceRecord};
pub use state::{Batch, BatchSource, FrozenSet, PipelineState, SkipEvent, StageNode};
pub use training::{run_training, AttackRecord, IterationRecord, IterationResult, RunMetrics, Trainer};
