use serde::{Deserialize, Serialize};

use crate::defense::RecoveryPolicy;
use crate::error::{Error, Result};
use crate::model::{chain_widths, LayerSpec};
use crate::tensor::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain pipeline: no duplicates, no verification.
    Baseline,
    /// Duplicated blocks plus jumping connections over direct edges.
    RobustDirect,
    /// All traffic relayed by the trusted central server.
    RobustCentral,
}

impl Mode {
    pub fn is_robust(self) -> bool {
        !matches!(self, Mode::Baseline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::RobustDirect => "robust_direct",
            Mode::RobustCentral => "robust_central",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "robust_direct" => Ok(Mode::RobustDirect),
            "robust_central" => Ok(Mode::RobustCentral),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub adversary: u64,
    pub schedule: u64,
}

impl Seeds {
    /// Derives the four stream seeds from one master seed (SplitMix64 steps).
    pub fn from_master(seed: u64) -> Self {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        Self {
            init: next(),
            data: next(),
            adversary: next(),
            schedule: next(),
        }
    }
}

/// Inter-stage geometry shared by all stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub width: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stages: usize,
    pub stage_specs: Vec<Vec<LayerSpec>>,
    pub batch_size: usize,
    pub micro_batch_size: usize,
    pub lr: f64,
    pub iterations: usize,
    pub mode: Mode,
    pub seeds: Seeds,
    /// Max absolute difference accepted by verification; 0 means bitwise.
    pub tolerance: f64,
    pub recovery: RecoveryPolicy,
    /// Idle scheduler rounds tolerated before a waiting stage times out.
    pub round_budget: usize,
}

/// Stage layout with `blocks` affine+activation blocks per stage; the final
/// stage ends with a plain affine head onto `classes`.
pub fn uniform_layout(
    stages: usize,
    input: usize,
    width: usize,
    classes: usize,
    activation: Activation,
    blocks: usize,
) -> Vec<Vec<LayerSpec>> {
    let blocks = blocks.max(1);
    (1..=stages)
        .map(|s| {
            let mut layers = Vec::new();
            let mut in_dim = if s == 1 { input } else { width };
            let hidden = if s == stages { blocks - 1 } else { blocks };
            for _ in 0..hidden {
                layers.push(LayerSpec::Affine {
                    in_dim,
                    out_dim: width,
                });
                layers.push(LayerSpec::Nonlinearity { activation });
                in_dim = width;
            }
            if s == stages {
                layers.push(LayerSpec::Affine {
                    in_dim,
                    out_dim: classes,
                });
            }
            layers
        })
        .collect()
}

impl PipelineConfig {
    pub fn new(stage_specs: Vec<Vec<LayerSpec>>, seed: u64) -> Self {
        Self {
            stages: stage_specs.len(),
            stage_specs,
            batch_size: 4,
            micro_batch_size: 1,
            lr: 0.05,
            iterations: 100,
            mode: Mode::RobustDirect,
            seeds: Seeds::from_master(seed),
            tolerance: 0.0,
            recovery: RecoveryPolicy::default(),
            round_budget: 2,
        }
    }

    pub fn micro_batches(&self) -> usize {
        self.batch_size / self.micro_batch_size
    }

    pub fn validate(&self) -> Result<Dims> {
        if self.stages < 4 {
            return Err(Error::config(
                "stages",
                format!("{} stages given; at least 4 are required", self.stages),
            ));
        }
        if self.stage_specs.len() != self.stages {
            return Err(Error::config(
                "stage_specs",
                format!("{} stage specs for {} stages", self.stage_specs.len(), self.stages),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.micro_batch_size == 0 || !self.batch_size.is_multiple_of(self.micro_batch_size) {
            return Err(Error::config(
                "micro_batch_size",
                format!(
                    "{} does not divide batch size {}",
                    self.micro_batch_size, self.batch_size
                ),
            ));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !self.tolerance.is_finite() || self.tolerance < 0.0 {
            return Err(Error::config("tolerance", "must be finite and non-negative"));
        }
        if self.round_budget == 0 {
            return Err(Error::config("round_budget", "must be at least 1"));
        }
        self.recovery.validate()?;

        let widths = self
            .stage_specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                chain_widths(s).map_err(|e| match e {
                    Error::Config { path, message } => {
                        Error::config(format!("stage_specs[{i}].{path}"), message)
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let width = widths[0].1;
        let dims = Dims {
            input: widths[0].0,
            width,
            classes: widths[self.stages - 1].1,
        };
        for (i, &(inp, out)) in widths.iter().enumerate().skip(1) {
            let expected_out = if i + 1 == self.stages { dims.classes } else { width };
            if inp != width || out != expected_out {
                return Err(Error::config(
                    format!("stage_specs[{i}]"),
                    format!(
                        "stage {} maps {inp}->{out}, expected {width}->{expected_out}",
                        i + 1
                    ),
                ));
            }
        }
        Ok(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(stages: usize) -> PipelineConfig {
        PipelineConfig::new(uniform_layout(stages, 5, 8, 3, Activation::Tanh, 1), 1)
    }

    #[test]
    fn uniform_layout_validates() {
        let dims = cfg(6).validate().unwrap();
        assert_eq!(
            dims,
            Dims {
                input: 5,
                width: 8,
                classes: 3
            }
        );
    }

    #[test]
    fn three_stages_rejected() {
        let err = cfg(3).validate().unwrap_err();
        assert!(err.to_string().contains("`stages`"));
    }

    #[test]
    fn micro_batch_must_divide() {
        let mut c = cfg(4);
        c.micro_batch_size = 3;
        assert!(c.validate().unwrap_err().to_string().contains("micro_batch_size"));
    }

    #[test]
    fn interior_width_rule() {
        let mut c = cfg(5);
        c.stage_specs[2] = vec![LayerSpec::Affine { in_dim: 8, out_dim: 7 }];
        assert!(c.validate().unwrap_err().to_string().contains("stage_specs[2]"));
    }

    #[test]
    fn master_seed_derivation_is_stable() {
        assert_eq!(Seeds::from_master(42), Seeds::from_master(42));
        let s = Seeds::from_master(42);
        assert_ne!(s.init, s.data);
    }
}
