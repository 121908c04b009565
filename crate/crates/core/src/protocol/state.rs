use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamBlob, StageModule};
use crate::random::{RandomStream, StreamId};
use crate::scalar::Scalar;
use crate::tensor::{ordered_mean, softmax_cross_entropy_rows, Tensor};

use super::bus::Topology;
use super::config::{Dims, Mode, PipelineConfig};

/// One pipeline participant: its own layers `M_i`, the duplicated
/// predecessor block `M_{i-1}'`, and, after a skip is installed at a
/// bridging stage, a copy of the frozen module it now receives from.
#[derive(Debug, Clone)]
pub struct StageNode<T: Scalar> {
    pub(crate) module: StageModule<T>,
    pub(crate) duplicate: Option<StageModule<T>>,
    pub(crate) bridge: Option<StageModule<T>>,
}

/// Parameters excluded from updates after a skip-layer bypass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenSet {
    /// Owners `i` whose original `M_i` is frozen.
    pub originals: BTreeSet<usize>,
    /// Holders `h` whose duplicate `M_{h-1}'` is frozen.
    pub duplicates: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEvent {
    pub iteration: usize,
    pub pair: (usize, usize),
    pub bridge: (usize, usize),
    pub frozen: FrozenSet,
}

/// A labelled batch of rows.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            x: self.x.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
        })
    }
}

/// Source of training batches and the held-out evaluation set.
pub trait BatchSource<T: Scalar> {
    fn batch(&self, iteration: usize, batch_size: usize) -> Batch<T>;
    fn eval_set(&self) -> Batch<T>;
}

#[derive(Debug, Clone)]
pub struct PipelineState<T: Scalar> {
    cfg: PipelineConfig,
    dims: Dims,
    nodes: Vec<StageNode<T>>,
    mode: Mode,
    skip: Option<(usize, usize)>,
    frozen: FrozenSet,
    iteration: usize,
    retries: usize,
}

impl<T: Scalar> PipelineState<T> {
    /// Creates stages `1..=K` from the init stream; in robust modes every
    /// stage `i >= 2` also gets a bit-identical copy of `M_{i-1}`.
    pub fn build(cfg: &PipelineConfig) -> Result<Self> {
        let dims = cfg.validate()?;
        let mut stream = RandomStream::new(cfg.seeds.init, StreamId::Init);
        let modules = cfg
            .stage_specs
            .iter()
            .enumerate()
            .map(|(i, specs)| StageModule::init(specs, i + 1, &mut stream))
            .collect::<Result<Vec<_>>>()?;
        let nodes = modules
            .iter()
            .enumerate()
            .map(|(i, m)| StageNode {
                module: m.clone(),
                duplicate: (i > 0 && cfg.mode.is_robust()).then(|| modules[i - 1].clone()),
                bridge: None,
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            dims,
            nodes,
            mode: cfg.mode,
            skip: None,
            frozen: FrozenSet::default(),
            iteration: 0,
            retries: 0,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn stages(&self) -> usize {
        self.nodes.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn retries(&self) -> usize {
        self.retries
    }

    pub fn skip(&self) -> Option<(usize, usize)> {
        self.skip
    }

    pub fn frozen(&self) -> &FrozenSet {
        &self.frozen
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.stages(), self.skip)
    }

    pub fn is_immune(&self, stage: usize) -> bool {
        stage == 1 || stage == self.stages()
    }

    fn node(&self, stage: usize) -> &StageNode<T> {
        &self.nodes[stage - 1]
    }

    /// `M_i` (1-based).
    pub fn stage(&self, stage: usize) -> &StageModule<T> {
        &self.node(stage).module
    }

    /// `M_{i-1}'` held at stage `i`.
    pub fn duplicate(&self, stage: usize) -> Option<&StageModule<T>> {
        self.node(stage).duplicate.as_ref()
    }

    pub fn bridge_duplicate(&self, stage: usize) -> Option<&StageModule<T>> {
        self.node(stage).bridge.as_ref()
    }

    /// Module stage `s` uses to recompute its active predecessor's output.
    pub fn verification_duplicate(&self, stage: usize) -> Option<&StageModule<T>> {
        let node = self.node(stage);
        match self.topology().pred(stage) {
            Some(p) if p + 1 == stage => node.duplicate.as_ref(),
            Some(_) => node.bridge.as_ref(),
            None => None,
        }
    }

    pub(crate) fn stage_mut(&mut self, stage: usize) -> &mut StageModule<T> {
        &mut self.nodes[stage - 1].module
    }

    pub(crate) fn load_duplicate(&mut self, holder: usize, blob: &ParamBlob) -> Result<()> {
        self.nodes[holder - 1]
            .duplicate
            .as_mut()
            .ok_or_else(|| Error::Structure(format!("stage {holder} holds no duplicate")))?
            .load(blob)
    }

    pub(crate) fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub(crate) fn advance_iteration(&mut self) {
        self.iteration += 1;
    }

    pub(crate) fn note_retry(&mut self) {
        self.retries += 1;
    }

    /// Every original/duplicate pair that should agree does so bitwise:
    /// `M_{i-1}'` at each active stage `i >= 2` whose predecessor block is
    /// the live `M_{i-1}` (or frozen alongside it), plus bridge copies.
    pub fn duplicates_consistent(&self) -> bool {
        if !self.mode.is_robust() {
            return true;
        }
        let topo = self.topology();
        (2..=self.stages()).all(|h| {
            let node = self.node(h);
            let dup_ok = match &node.duplicate {
                Some(d) if topo.is_active(h) => d.params_bit_eq(self.stage(h - 1)),
                Some(_) => true,
                None => false,
            };
            let bridge_ok = match (&node.bridge, topo.pred(h)) {
                (Some(b), Some(p)) => b.params_bit_eq(self.stage(p)),
                _ => true,
            };
            dup_ok && bridge_ok
        })
    }

    /// Bypasses `(i, i+1)`: freezes `M_{i-1}` and the duplicate `M_{i+1}'` at
    /// stage `i+2`, and gives stage `i+2` a copy of the frozen `M_{i-1}` so it
    /// can keep verifying its new predecessor.
    pub(crate) fn install_skip(&mut self, pair: (usize, usize)) -> Result<SkipEvent> {
        let (i, j) = pair;
        let k = self.stages();
        if self.skip.is_some() {
            return Err(Error::Structure("skip layer already installed".into()));
        }
        if j != i + 1 || i < 2 || j > k - 1 {
            return Err(Error::Structure(format!(
                "skip pair ({i}, {j}) is not an adjacent interior pair"
            )));
        }
        let before = i - 1;
        let after = j + 1;
        self.skip = Some(pair);
        self.frozen.originals.insert(before);
        self.frozen.duplicates.insert(after);
        let copy = self.stage(before).clone();
        self.nodes[after - 1].bridge = Some(copy);
        Ok(SkipEvent {
            iteration: self.iteration,
            pair,
            bridge: (before, after),
            frozen: self.frozen.clone(),
        })
    }

    /// Honest forward pass through the active stages.
    pub fn forward_active(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut a = x.clone();
        for s in self.topology().active() {
            a = self.stage(s).forward(&a)?.0;
        }
        Ok(a)
    }

    /// Mean cross-entropy of the current model on `batch`.
    pub fn evaluate(&self, batch: &Batch<T>) -> Result<T> {
        let logits = self.forward_active(&batch.x)?;
        let n = T::from_usize(batch.len()).expect("batch size fits scalar");
        let (losses, _) = softmax_cross_entropy_rows(&logits, &batch.labels, n)?;
        Ok(ordered_mean(&losses, n))
    }
}
