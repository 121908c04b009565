//! Synthetic datasets: Gaussian-cluster classification and next-character
//! prediction over a bundled Latin text.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::protocol::{Batch, BatchSource};
use crate::random::{RandomStream, StreamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::ExperimentConfig;

const CORPUS: &str = include_str!("../../data/liber_primus.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    GaussClassify,
    CharLm,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::GaussClassify => "gauss_classify",
            Task::CharLm => "char_lm",
        }
    }
}

/// Lowercased corpus with whitespace runs collapsed to single spaces.
pub fn corpus() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| {
        CORPUS
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase()
    })
}

/// Sorted symbol set of [`corpus`].
pub fn vocabulary() -> &'static [char] {
    static VOCAB: OnceLock<Vec<char>> = OnceLock::new();
    VOCAB.get_or_init(|| {
        let mut v: Vec<char> = corpus().chars().collect();
        v.sort_unstable();
        v.dedup();
        v
    })
}

#[derive(Debug, Clone)]
enum Rows {
    Dense { dim: usize, x: Vec<f64> },
    /// Row `r` one-hot encodes `ids[anchor - context .. anchor]`.
    Text { ids: Vec<usize>, vocab: usize, context: usize },
}

#[derive(Debug, Clone)]
struct Split {
    /// Row index into dense storage, or anchor position in the text.
    rows: Vec<usize>,
    labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    task: Task,
    input_dim: usize,
    classes: usize,
    train: Split,
    eval: Split,
    train_store: Rows,
    eval_store: Rows,
    /// Visiting order of training rows; batches walk it cyclically.
    order: Vec<usize>,
}

impl Dataset {
    /// Builds the configured dataset from the data seed alone.
    pub fn generate(cfg: &ExperimentConfig) -> Self {
        let seed = cfg.seeds_or_derived().data;
        let mut stream = RandomStream::new(seed, StreamId::Data);
        let (input_dim, classes) = cfg.task_dims();
        let d = &cfg.dataset;
        match d.task {
            Task::GaussClassify => gauss_classify(&mut stream, input_dim, classes, d.samples, d.eval_samples),
            Task::CharLm => char_lm(&mut stream, d.context, d.eval_samples),
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn train_len(&self) -> usize {
        self.train.labels.len()
    }

    pub fn eval_len(&self) -> usize {
        self.eval.labels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.train.labels {
            counts[l] += 1;
        }
        counts
    }

    /// SHA-256 over task, shapes, features, labels and visiting order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task.as_str());
        for n in [self.input_dim, self.classes, self.train_len(), self.eval_len()] {
            h.update((n as u64).to_le_bytes());
        }
        for (split, store) in [(&self.train, &self.train_store), (&self.eval, &self.eval_store)] {
            let x = gather::<f64>(store, &split.rows, self.input_dim);
            for v in x.data() {
                h.update(v.to_le_bytes());
            }
            for &l in &split.labels {
                h.update((l as u64).to_le_bytes());
            }
        }
        for &o in &self.order {
            h.update((o as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Training rows `start..start + len` in visiting order, wrapping around.
    pub fn window<T: Scalar>(&self, start: usize, len: usize) -> Batch<T> {
        let n = self.order.len();
        let picks: Vec<usize> = (0..len).map(|r| self.order[(start + r) % n]).collect();
        let rows: Vec<usize> = picks.iter().map(|&p| self.train.rows[p]).collect();
        Batch {
            x: gather(&self.train_store, &rows, self.input_dim),
            labels: picks.iter().map(|&p| self.train.labels[p]).collect(),
        }
    }
}

impl<T: Scalar> BatchSource<T> for Dataset {
    fn batch(&self, iteration: usize, batch_size: usize) -> Batch<T> {
        self.window(iteration * batch_size, batch_size)
    }

    fn eval_set(&self) -> Batch<T> {
        Batch {
            x: gather(&self.eval_store, &self.eval.rows, self.input_dim),
            labels: self.eval.labels.clone(),
        }
    }
}

fn gather<T: Scalar>(store: &Rows, rows: &[usize], input_dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); rows.len() * input_dim];
    for (r, &row) in rows.iter().enumerate() {
        let out = &mut data[r * input_dim..(r + 1) * input_dim];
        match store {
            Rows::Dense { dim, x } => {
                for (o, &v) in out.iter_mut().zip(&x[row * dim..(row + 1) * dim]) {
                    *o = T::narrow(v);
                }
            }
            Rows::Text { ids, vocab, context } => {
                for c in 0..*context {
                    out[c * vocab + ids[row - context + c]] = T::one();
                }
            }
        }
    }
    Tensor::from_vec(rows.len(), input_dim, data).expect("gathered rows match width")
}

/// Class centers `~ N(0, 4I)`; each row is its center plus `N(0, I)` noise.
/// Labels cycle through the classes, so counts differ by at most one.
fn gauss_classify(
    stream: &mut RandomStream,
    input_dim: usize,
    classes: usize,
    samples: usize,
    eval_samples: usize,
) -> Dataset {
    let centers: Vec<f64> = (0..classes * input_dim)
        .map(|_| 2.0 * stream.standard_normal())
        .collect();
    let mut draw = |n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut x = Vec::with_capacity(n * input_dim);
        for &l in &labels {
            for k in 0..input_dim {
                x.push(centers[l * input_dim + k] + stream.standard_normal());
            }
        }
        (
            Split {
                rows: (0..n).collect(),
                labels,
            },
            Rows::Dense { dim: input_dim, x },
        )
    };
    let (train, train_store) = draw(samples);
    let (eval, eval_store) = draw(eval_samples);
    let mut order: Vec<usize> = (0..samples).collect();
    stream.shuffle(&mut order);
    Dataset {
        task: Task::GaussClassify,
        input_dim,
        classes,
        train,
        eval,
        train_store,
        eval_store,
        order,
    }
}

/// Next-character pairs: the leading 90% of the text trains, up to
/// `eval_samples` positions from the remainder evaluate.
fn char_lm(stream: &mut RandomStream, context: usize, eval_samples: usize) -> Dataset {
    let vocab = vocabulary();
    let ids: Vec<usize> = corpus()
        .chars()
        .map(|c| vocab.binary_search(&c).expect("corpus symbol in vocabulary"))
        .collect();
    let cut = ids.len() * 9 / 10;
    let train_rows: Vec<usize> = (context..cut).collect();
    let eval_rows: Vec<usize> = (cut.max(context)..ids.len()).take(eval_samples).collect();
    let split = |rows: Vec<usize>| Split {
        labels: rows.iter().map(|&p| ids[p]).collect(),
        rows,
    };
    let train = split(train_rows);
    let eval = split(eval_rows);
    let store = Rows::Text {
        ids,
        vocab: vocab.len(),
        context,
    };
    let mut order: Vec<usize> = (0..train.rows.len()).collect();
    stream.shuffle(&mut order);
    Dataset {
        task: Task::CharLm,
        input_dim: vocab.len() * context,
        classes: vocab.len(),
        train,
        eval,
        train_store: store.clone(),
        eval_store: store,
        order,
    }
}
