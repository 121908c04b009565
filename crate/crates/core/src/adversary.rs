//! The attacker: per-iteration attack decisions and the tamper functions it
//! applies to inter-stage transmissions.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StageModule;
use crate::random::{RandomStream, StreamId};
use crate::scalar::Scalar;
use crate::tensor::{gaussian, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    ForwardFlip,
    BackwardGauss,
    StealthyForward,
    Crash,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::ForwardFlip => "forward_flip",
            AttackKind::BackwardGauss => "backward_gauss",
            AttackKind::StealthyForward => "stealthy_forward",
            AttackKind::Crash => "crash",
        }
    }

    pub fn direction(self) -> Option<Direction> {
        match self {
            AttackKind::None => None,
            AttackKind::BackwardGauss => Some(Direction::Backward),
            _ => Some(Direction::Forward),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    Bernoulli,
    ExactCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "AttackConfig::default_kind")]
    pub kind: AttackKind,
    #[serde(default)]
    pub rate: f64,
    #[serde(default = "AttackConfig::default_scheduling")]
    pub scheduling: Scheduling,
    /// Pins every attack to one stage (a persistent attacker). `None` draws
    /// the target uniformly from the interior stages on every attempt.
    #[serde(default)]
    pub target: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl AttackConfig {
    fn default_kind() -> AttackKind {
        AttackKind::None
    }

    fn default_scheduling() -> Scheduling {
        Scheduling::Bernoulli
    }

    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            rate: 0.0,
            scheduling: Scheduling::Bernoulli,
            target: None,
        }
    }

    pub fn bernoulli(kind: AttackKind, rate: f64) -> Self {
        Self {
            kind,
            rate,
            ..Self::none()
        }
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::config(
                "attack.rate",
                format!("{} is outside [0, 1]", self.rate),
            ));
        }
        if let Some(t) = self.target {
            if t < 2 || t + 1 > stages {
                return Err(Error::config(
                    "attack.target",
                    format!("stage {t} is not in [2, {}]", stages.saturating_sub(1)),
                ));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.kind != AttackKind::None && self.rate > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub iteration: usize,
    pub attempt: usize,
    pub target: usize,
    pub direction: Direction,
    pub kind: AttackKind,
}

/// Builds a crash fault for `target`, which must be an interior stage.
pub fn inject_crash(iteration: usize, attempt: usize, target: usize, stages: usize) -> Result<AttackPlan> {
    if target < 2 || target + 1 > stages {
        return Err(Error::config(
            "attack.target",
            format!("crash target {target} is not an interior stage"),
        ));
    }
    Ok(AttackPlan {
        iteration,
        attempt,
        target,
        direction: Direction::Forward,
        kind: AttackKind::Crash,
    })
}

/// Stateful attacker driven by its own seeded streams.
#[derive(Debug, Clone)]
pub struct Adversary {
    cfg: AttackConfig,
    stages: usize,
    schedule: Option<BTreeSet<usize>>,
    decisions: RandomStream,
    noise: RandomStream,
}

impl Adversary {
    pub fn new(cfg: AttackConfig, stages: usize, iterations: usize, seed: u64) -> Result<Self> {
        cfg.validate(stages)?;
        if stages < 4 {
            return Err(Error::config("stages", "at least 4 stages are required"));
        }
        let mut decisions = RandomStream::new(seed, StreamId::Adversary);
        let schedule = match cfg.scheduling {
            Scheduling::Bernoulli => None,
            Scheduling::ExactCount => {
                let count = exact_attack_count(cfg.rate, iterations);
                let mut order: Vec<usize> = (0..iterations).collect();
                decisions.shuffle(&mut order);
                Some(order.into_iter().take(count).collect())
            }
        };
        Ok(Self {
            cfg,
            stages,
            schedule,
            decisions,
            noise: RandomStream::new(seed, StreamId::Custom(0xA77AC)),
        })
    }

    pub fn config(&self) -> &AttackConfig {
        &self.cfg
    }

    /// Decision for one attempt of `iteration`. Bernoulli scheduling redraws
    /// on every attempt; exact-count scheduling only attacks attempt 0 of the
    /// chosen iterations.
    pub fn plan(&mut self, iteration: usize, attempt: usize) -> Option<AttackPlan> {
        let direction = self.cfg.kind.direction()?;
        let attack = match &self.schedule {
            None => self.decisions.bernoulli(self.cfg.rate),
            Some(chosen) => attempt == 0 && chosen.contains(&iteration),
        };
        if !attack {
            return None;
        }
        let target = match self.cfg.target {
            Some(t) => t,
            None => 2 + self.decisions.next_below((self.stages - 2) as u64) as usize,
        };
        Some(AttackPlan {
            iteration,
            attempt,
            target,
            direction,
            kind: self.cfg.kind,
        })
    }

    pub fn noise(&mut self) -> &mut RandomStream {
        &mut self.noise
    }
}

/// `⌊p·N⌋`, nudged so decimal rates like 0.29 hit their intended count.
pub fn exact_attack_count(rate: f64, iterations: usize) -> usize {
    ((rate * iterations as f64) + 1e-9).floor() as usize
}

/// Forward attack: the transmitted activation is negated.
pub fn tamper_forward<T: Scalar>(a_out: &Tensor<T>) -> Tensor<T> {
    a_out.neg()
}

/// Backward attack: the gradient is replaced by standard-normal noise of the
/// same shape, independent of the true gradient.
pub fn tamper_backward<T: Scalar>(shape: (usize, usize), stream: &mut RandomStream) -> Tensor<T> {
    gaussian(stream, shape.0, shape.1)
}

/// Stealthy forward attack: an internally consistent pair computed from a
/// fabricated input, so recomputation with the duplicate block agrees.
pub fn tamper_stealthy<T: Scalar>(
    module: &StageModule<T>,
    fake_input: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out, _) = module.forward(fake_input)?;
    Ok((fake_input.clone(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_bounds() {
        let mut adv = Adversary::new(AttackConfig::bernoulli(AttackKind::ForwardFlip, 0.0), 6, 100, 1).unwrap();
        assert!((0..100).all(|i| adv.plan(i, 0).is_none()));
        let mut adv = Adversary::new(AttackConfig::bernoulli(AttackKind::ForwardFlip, 1.0), 6, 100, 1).unwrap();
        assert!((0..100).all(|i| adv.plan(i, 0).is_some()));
    }

    #[test]
    fn bernoulli_fraction() {
        let n = 10_000;
        let mut adv = Adversary::new(AttackConfig::bernoulli(AttackKind::BackwardGauss, 0.7), 6, n, 99).unwrap();
        let hits = (0..n).filter(|&i| adv.plan(i, 0).is_some()).count();
        let frac = hits as f64 / n as f64;
        assert!((0.68..=0.72).contains(&frac), "{frac}");
    }

    #[test]
    fn invalid_rate_names_key() {
        let err = AttackConfig::bernoulli(AttackKind::ForwardFlip, 1.5).validate(6).unwrap_err();
        assert!(err.to_string().contains("attack.rate"));
    }

    #[test]
    fn kind_none_never_attacks() {
        let mut adv = Adversary::new(AttackConfig { rate: 1.0, ..AttackConfig::none() }, 6, 10, 1).unwrap();
        assert!((0..10).all(|i| adv.plan(i, 0).is_none()));
    }

    #[test]
    fn tamper_forward_cases() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 0.0]]);
        assert_eq!(tamper_forward(&x), Tensor::from_rows(&[&[-1.0, 2.0, -0.0]]));
        let z = Tensor::<f64>::zeros(2, 2);
        assert_eq!(tamper_forward(&z), z);
        assert!(tamper_forward(&tamper_forward(&x)).bit_eq(&x));
    }

    #[test]
    fn tamper_backward_shape_and_determinism() {
        let mut s1 = RandomStream::new(4, StreamId::Adversary);
        let mut s2 = RandomStream::new(4, StreamId::Adversary);
        let a: Tensor<f64> = tamper_backward((2, 3), &mut s1);
        let b: Tensor<f64> = tamper_backward((2, 3), &mut s2);
        assert_eq!(a.shape(), (2, 3));
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn crash_target_must_be_interior() {
        assert!(inject_crash(0, 0, 1, 6).is_err());
        assert!(inject_crash(0, 0, 6, 6).is_err());
        assert!(inject_crash(0, 0, 3, 6).is_ok());
    }
}
