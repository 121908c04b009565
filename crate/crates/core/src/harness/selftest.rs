//! Quick runtime checks of the numerical kernels and the protocol: finite
//! differences, pipeline-vs-monolithic equivalence, detection soundness and
//! completeness.

use crate::adversary::{AttackConfig, AttackKind, AttackPlan};
use crate::error::Result;
use crate::model::{LayerSpec, StageModule};
use crate::protocol::{BatchSource, Mode, PipelineConfig, Trainer};
use crate::random::{RandomStream, StreamId};
use crate::tensor::{gaussian, ordered_mean, softmax_cross_entropy_rows, Activation, Tensor};

use super::config::ExperimentConfig;
use super::data::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn selftest() -> Result<Vec<CheckResult>> {
    Ok(vec![
        gradient_check(20, 7)?,
        pipeline_equivalence()?,
        soundness()?,
        completeness()?,
    ])
}

fn random_specs(stream: &mut RandomStream) -> Vec<LayerSpec> {
    let affines = 1 + stream.next_below(3) as usize;
    let mut width = 1 + stream.next_below(6) as usize;
    let mut specs = Vec::new();
    for _ in 0..affines {
        let out = 1 + stream.next_below(6) as usize;
        specs.push(LayerSpec::Affine {
            in_dim: width,
            out_dim: out,
        });
        width = out;
        if stream.bernoulli(0.7) {
            let activation = if stream.bernoulli(0.5) {
                Activation::Tanh
            } else {
                Activation::Relu
            };
            specs.push(LayerSpec::Nonlinearity { activation });
        }
    }
    specs
}

/// `sum(module(x) ⊙ r)`, whose gradient w.r.t. the output is `r`.
fn probe(module: &StageModule<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    let y = module.forward(x)?.0;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference gradients
/// (parameters and input) over `count` random modules.
pub(crate) fn gradient_check(count: usize, seed: u64) -> Result<CheckResult> {
    const H: f64 = 1e-5;
    let mut stream = RandomStream::new(seed, StreamId::Custom(0x6ead));
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let specs = random_specs(&mut stream);
        let mut module = StageModule::<f64>::init(&specs, i + 2, &mut stream)?;
        for p in module.params_mut() {
            *p = gaussian(&mut stream, p.rows(), p.cols());
        }
        let rows = 1 + stream.next_below(4) as usize;
        let x = gaussian(&mut stream, rows, module.in_dim());
        let r = gaussian(&mut stream, rows, module.out_dim());
        let (_, cache) = module.forward(&x)?;
        let (gx, grads) = module.backward(&cache, &r)?;

        for (pi, g) in grads.tensors().iter().enumerate() {
            for e in 0..g.len() {
                let mut plus = module.clone();
                let mut minus = module.clone();
                plus.params_mut().nth(pi).unwrap().data_mut()[e] += H;
                minus.params_mut().nth(pi).unwrap().data_mut()[e] -= H;
                let numeric = (probe(&plus, &x, &r)? - probe(&minus, &x, &r)?) / (2.0 * H);
                worst = worst.max(rel_err(g.data()[e], numeric));
            }
        }
        for e in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[e] += H;
            xm.data_mut()[e] -= H;
            let numeric = (probe(&module, &xp, &r)? - probe(&module, &xm, &r)?) / (2.0 * H);
            worst = worst.max(rel_err(gx.data()[e], numeric));
        }
    }
    Ok(CheckResult {
        name: "finite-difference gradients",
        passed: worst <= 1e-5,
        detail: format!("{count} modules, max relative error {worst:.3e}"),
    })
}

fn small_config(mode: Mode, seed: u64, iterations: usize) -> Result<(ExperimentConfig, PipelineConfig)> {
    let mut cfg = ExperimentConfig {
        stages: 5,
        width: Some(8),
        iterations,
        mode,
        seed,
        micro_batch_size: 2,
        ..ExperimentConfig::default()
    };
    cfg.dataset.samples = 64;
    cfg.dataset.eval_samples = 16;
    let pipeline = cfg.pipeline_config()?;
    Ok((cfg, pipeline))
}

/// Clean pipeline training against full-batch SGD on the concatenated model.
fn pipeline_equivalence() -> Result<CheckResult> {
    let iterations = 30;
    let (cfg, pipeline) = small_config(Mode::Baseline, 11, iterations)?;
    let data = Dataset::generate(&cfg);
    let mut trainer = Trainer::<f64, _>::new(&pipeline, &AttackConfig::none(), &data)?;
    let parts: Vec<StageModule<f64>> = (1..=pipeline.stages).map(|s| trainer.state().stage(s).clone()).collect();
    let mut mono = StageModule::merged(0, &parts.iter().collect::<Vec<_>>())?;

    let mut equal = true;
    for it in 0..iterations {
        let pipe_loss = trainer.step()?.record.loss;
        let batch = BatchSource::<f64>::batch(&data, it, pipeline.batch_size);
        let (logits, cache) = mono.forward(&batch.x)?;
        let n = batch.len() as f64;
        let (losses, g) = softmax_cross_entropy_rows(&logits, &batch.labels, n)?;
        let (_, grads) = mono.backward(&cache, &g)?;
        mono.apply_update(&grads, pipeline.lr)?;
        equal &= ordered_mean(&losses, n).to_bits() == pipe_loss.to_bits();
    }
    Ok(CheckResult {
        name: "pipeline equals monolithic training",
        passed: equal,
        detail: format!("{iterations} iterations, K={}, m={}", pipeline.stages, pipeline.micro_batches()),
    })
}

fn soundness() -> Result<CheckResult> {
    let mut alerts = 0;
    for (mode, seed) in [(Mode::RobustDirect, 1), (Mode::RobustCentral, 2)] {
        let (cfg, pipeline) = small_config(mode, seed, 40)?;
        let data = Dataset::generate(&cfg);
        let (metrics, _) = Trainer::<f64, _>::new(&pipeline, &AttackConfig::none(), &data)?.run()?;
        alerts += metrics.alerts.len();
    }
    Ok(CheckResult {
        name: "no alerts without attacks",
        passed: alerts == 0,
        detail: format!("{alerts} alerts over 80 clean iterations"),
    })
}

fn completeness() -> Result<CheckResult> {
    let mut attacks = 0;
    let mut missed = 0;
    for mode in [Mode::RobustDirect, Mode::RobustCentral] {
        for kind in [AttackKind::ForwardFlip, AttackKind::BackwardGauss, AttackKind::StealthyForward] {
            let (cfg, mut pipeline) = small_config(mode, 5, 4)?;
            pipeline.recovery.escalate = false;
            pipeline.recovery.retry_cap = 8;
            let data = Dataset::generate(&cfg);
            let mut trainer = Trainer::<f64, _>::new(&pipeline, &AttackConfig::none(), &data)?;
            for (it, target) in (2..pipeline.stages).enumerate() {
                trainer.inject(AttackPlan {
                    iteration: it,
                    attempt: 0,
                    target,
                    direction: kind.direction().expect("attack has a direction"),
                    kind,
                });
            }
            let (metrics, _) = trainer.run()?;
            for a in metrics.attacks.iter().filter(|a| a.effective) {
                attacks += 1;
                if !(a.detected && a.localized) {
                    missed += 1;
                }
            }
        }
    }
    Ok(CheckResult {
        name: "every tamper detected and localized",
        passed: missed == 0 && attacks > 0,
        detail: format!("{attacks} injected on active stages, {missed} missed"),
    })
}
