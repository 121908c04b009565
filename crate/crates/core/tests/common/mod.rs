//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use pipeguard::harness::{Dataset, ExperimentConfig};
use pipeguard::model::{Layer, LayerSpec, StageModule};
use pipeguard::protocol::{BatchSource, Mode, PipelineConfig, PipelineState};
use pipeguard::tensor::{Activation, Tensor};

/// Textbook triple loop with a fresh accumulator per output element.
pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Cross-entropy of one row straight from the definition
/// `-log(exp(z_y) / sum_k exp(z_k))`, shifted by the row max.
pub fn naive_ce(row: &[f64], label: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|z| (z - max).exp()).sum();
    -((row[label] - max).exp() / denom).ln()
}

enum MonoLayer {
    Affine {
        inp: usize,
        out: usize,
        w: Vec<f64>,
        b: Vec<f64>,
    },
    Act(Activation),
}

/// Single-process MLP over plain vectors, trained with full-batch SGD.
/// Loop orders follow the usual row-major conventions: dot products
/// accumulate over the shared index in ascending order, parameter gradients
/// add one sample at a time.
pub struct Monolithic {
    layers: Vec<MonoLayer>,
}

impl Monolithic {
    /// Copies the initial parameters of every stage in order.
    pub fn from_state(state: &PipelineState<f64>) -> Self {
        let mut layers = Vec::new();
        for s in 1..=state.stages() {
            for layer in state.stage(s).layers() {
                layers.push(match layer {
                    Layer::Affine { weight, bias } => MonoLayer::Affine {
                        inp: weight.rows(),
                        out: weight.cols(),
                        w: weight.data().to_vec(),
                        b: bias.data().to_vec(),
                    },
                    Layer::Nonlinearity(a) => MonoLayer::Act(*a),
                });
            }
        }
        Self { layers }
    }

    fn act(a: Activation, x: f64) -> f64 {
        match a {
            Activation::Tanh => libm::tanh(x),
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    fn act_grad(a: Activation, x: f64) -> f64 {
        match a {
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// One SGD step on `(x, labels)`; returns the mean loss before the update.
    pub fn step(&mut self, x: &[f64], rows: usize, labels: &[usize], lr: f64) -> f64 {
        let mut inputs: Vec<Vec<f64>> = Vec::new();
        let mut h = x.to_vec();
        let mut width = x.len() / rows;
        for layer in &self.layers {
            let next = match layer {
                MonoLayer::Affine { inp, out, w, b } => {
                    let mut y = vec![0.0; rows * out];
                    for r in 0..rows {
                        for c in 0..*out {
                            let mut acc = 0.0;
                            for k in 0..*inp {
                                acc += h[r * inp + k] * w[k * out + c];
                            }
                            y[r * out + c] = acc + b[c];
                        }
                    }
                    width = *out;
                    y
                }
                MonoLayer::Act(a) => h.iter().map(|&v| Self::act(*a, v)).collect(),
            };
            inputs.push(std::mem::replace(&mut h, next));
        }

        let n = rows as f64;
        let classes = width;
        let mut loss_sum = 0.0;
        let mut g = vec![0.0; rows * classes];
        for r in 0..rows {
            let z = &h[r * classes..(r + 1) * classes];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in z {
                sum += libm::exp(v - max);
            }
            loss_sum += libm::log(sum) - (z[labels[r]] - max);
            for k in 0..classes {
                let p = libm::exp(z[k] - max) / sum;
                let t = if k == labels[r] { 1.0 } else { 0.0 };
                g[r * classes + k] = (p - t) / n;
            }
        }

        let mut updates: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let x = &inputs[idx];
            g = match layer {
                MonoLayer::Affine { inp, out, w, .. } => {
                    let mut gw = vec![0.0; inp * out];
                    let mut gb = vec![0.0; *out];
                    for r in 0..rows {
                        for i in 0..*inp {
                            for c in 0..*out {
                                gw[i * out + c] += x[r * inp + i] * g[r * out + c];
                            }
                        }
                    }
                    for r in 0..rows {
                        for c in 0..*out {
                            gb[c] += g[r * out + c];
                        }
                    }
                    let mut gi = vec![0.0; rows * inp];
                    for r in 0..rows {
                        for i in 0..*inp {
                            let mut acc = 0.0;
                            for c in 0..*out {
                                acc += g[r * out + c] * w[i * out + c];
                            }
                            gi[r * inp + i] = acc;
                        }
                    }
                    updates.push((idx, gw, gb));
                    gi
                }
                MonoLayer::Act(a) => g.iter().zip(x).map(|(&u, &v)| u * Self::act_grad(*a, v)).collect(),
            };
        }
        for (idx, gw, gb) in updates {
            if let MonoLayer::Affine { w, b, .. } = &mut self.layers[idx] {
                for (p, d) in w.iter_mut().zip(&gw) {
                    *p -= lr * d;
                }
                for (p, d) in b.iter_mut().zip(&gb) {
                    *p -= lr * d;
                }
            }
        }
        loss_sum / n
    }
}

/// Gaussian-cluster experiment with the given geometry.
pub fn gauss_config(stages: usize, micro: usize, mode: Mode, seed: u64, iterations: usize) -> ExperimentConfig {
    ExperimentConfig {
        stages,
        micro_batch_size: micro,
        mode,
        seed,
        iterations,
        ..ExperimentConfig::default()
    }
}

/// Smaller, faster variant for protocol-level tests.
pub fn small_config(stages: usize, mode: Mode, seed: u64, iterations: usize) -> ExperimentConfig {
    let mut cfg = gauss_config(stages, 1, mode, seed, iterations);
    cfg.width = Some(8);
    cfg.dataset.samples = 256;
    cfg.dataset.eval_samples = 64;
    cfg
}

pub fn build(cfg: &ExperimentConfig) -> (PipelineConfig, Dataset) {
    (cfg.pipeline_config().unwrap(), Dataset::generate(cfg))
}

/// Runs the monolithic oracle over the same batches the pipeline sees.
pub fn oracle_losses(cfg: &ExperimentConfig) -> Vec<f64> {
    let (pipeline, data) = build(cfg);
    let state = PipelineState::<f64>::build(&pipeline).unwrap();
    let mut mono = Monolithic::from_state(&state);
    (0..pipeline.iterations)
        .map(|it| {
            let b = BatchSource::<f64>::batch(&data, it, pipeline.batch_size);
            mono.step(b.x.data(), b.len(), &b.labels, pipeline.lr)
        })
        .collect()
}

/// Random chain of affine and activation layers with widths in `1..=max_width`.
pub fn random_specs(draw: &mut impl FnMut(u64) -> u64, max_width: u64) -> Vec<LayerSpec> {
    let affines = 1 + draw(3) as usize;
    let mut width = 1 + draw(max_width) as usize;
    let mut specs = Vec::new();
    for _ in 0..affines {
        let out = 1 + draw(max_width) as usize;
        specs.push(LayerSpec::Affine { in_dim: width, out_dim: out });
        width = out;
        match draw(3) {
            0 => specs.push(LayerSpec::Nonlinearity { activation: Activation::Tanh }),
            1 => specs.push(LayerSpec::Nonlinearity { activation: Activation::Relu }),
            _ => {}
        }
    }
    specs
}

/// `sum(module(x) ⊙ r)`.
pub fn probe(module: &StageModule<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let y = module.forward(x).unwrap().0;
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error between analytic gradients of `probe` and central
/// differences with step `h`, over every parameter and input element.
/// Entries smaller than `floor` are compared on an absolute scale.
pub fn finite_difference_error(
    module: &StageModule<f64>,
    x: &Tensor<f64>,
    r: &Tensor<f64>,
    h: f64,
    floor: f64,
) -> f64 {
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let (_, cache) = module.forward(x).unwrap();
    let (gx, grads) = module.backward(&cache, r).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.tensors().iter().enumerate() {
        for e in 0..g.len() {
            let mut plus = module.clone();
            let mut minus = module.clone();
            plus.params_mut().nth(pi).unwrap().data_mut()[e] += h;
            minus.params_mut().nth(pi).unwrap().data_mut()[e] -= h;
            let numeric = (probe(&plus, x, r) - probe(&minus, x, r)) / (2.0 * h);
            worst = worst.max(rel(g.data()[e], numeric));
        }
    }
    for e in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[e] += h;
        xm.data_mut()[e] -= h;
        let numeric = (probe(module, &xp, r) - probe(module, &xm, r)) / (2.0 * h);
        worst = worst.max(rel(gx.data()[e], numeric));
    }
    worst
}
