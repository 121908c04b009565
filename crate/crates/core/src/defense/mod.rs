//! Detection and localization: duplicated-block recomputation, jumping
//! connections, mirrored backward checks and the suspect-set rules.

mod recovery;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adversary::Direction;
use crate::error::Result;
use crate::model::{ForwardCache, StageModule};
use crate::protocol::{MessageId, Mode, Topology};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use recovery::{choose_skip_pair, sync_duplicates, RecoveryAction, RecoveryPolicy, RecoveryState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictResult {
    Match,
    Mismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub result: VerdictResult,
    /// Largest elementwise deviation; infinite for structural mismatches.
    pub max_abs_diff: f64,
    pub location: Option<MessageId>,
}

impl Verdict {
    pub fn is_match(&self) -> bool {
        self.result == VerdictResult::Match
    }

    fn structural() -> Self {
        Self {
            result: VerdictResult::Mismatch,
            max_abs_diff: f64::INFINITY,
            location: None,
        }
    }

    pub fn at(mut self, id: MessageId) -> Self {
        self.location = Some(id);
        self
    }
}

/// Elementwise comparison: `Match` iff the max-abs difference is `<= tolerance`.
pub fn compare<T: Scalar>(expected: &Tensor<T>, claimed: &Tensor<T>, tolerance: f64) -> Verdict {
    match expected.max_abs_diff(claimed) {
        Ok(d) => {
            let d = d.widen();
            Verdict {
                result: if d <= tolerance {
                    VerdictResult::Match
                } else {
                    VerdictResult::Mismatch
                },
                max_abs_diff: d,
                location: None,
            }
        }
        Err(_) => Verdict::structural(),
    }
}

/// Recomputes `dup(a_dup)` and compares it with the claimed output. Also
/// returns the recomputation cache, which the mirrored backward check reuses.
pub fn recompute_forward<T: Scalar>(
    dup: &StageModule<T>,
    a_dup: &Tensor<T>,
    a_out_claimed: &Tensor<T>,
    tolerance: f64,
) -> (Verdict, Option<ForwardCache<T>>) {
    match dup.forward(a_dup) {
        Ok((recomputed, cache)) => (compare(&recomputed, a_out_claimed, tolerance), Some(cache)),
        Err(_) => (Verdict::structural(), None),
    }
}

/// Duplicated-block check on a received `(a_dup, a_out)` pair.
pub fn verify_forward<T: Scalar>(
    dup: &StageModule<T>,
    a_dup: &Tensor<T>,
    a_out_claimed: &Tensor<T>,
    tolerance: f64,
) -> Verdict {
    recompute_forward(dup, a_dup, a_out_claimed, tolerance).0
}

/// Jumping-connection check: the claimed `a_dup` must equal what the
/// grand-predecessor sent directly.
pub fn verify_jump<T: Scalar>(a_dup_claimed: &Tensor<T>, a_jump: &Tensor<T>, tolerance: f64) -> Verdict {
    compare(a_jump, a_dup_claimed, tolerance)
}

/// Mirrored backward check. The holder of `M_i'` recomputes the gradient
/// stage `i` should send backward, from the input it cached during forward
/// verification and the gradient it itself produced; the result is compared
/// with what stage `i` actually sent.
pub fn verify_backward<T: Scalar>(
    dup: &StageModule<T>,
    dup_cache: &ForwardCache<T>,
    g_consumed: &Tensor<T>,
    g_claimed: &Tensor<T>,
    tolerance: f64,
) -> Result<(Tensor<T>, Verdict)> {
    let expected = expected_backward(dup, dup_cache, g_consumed)?;
    let verdict = compare(&expected, g_claimed, tolerance);
    Ok((expected, verdict))
}

/// Gradient w.r.t. the duplicate's input; parameter gradients are discarded.
pub fn expected_backward<T: Scalar>(
    dup: &StageModule<T>,
    dup_cache: &ForwardCache<T>,
    g_consumed: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(dup.backward(dup_cache, g_consumed)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    DupBlock,
    Jump,
    BackwardMirror,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertEvent {
    pub iteration: usize,
    pub attempt: usize,
    pub micro: usize,
    /// Stage that raised the alert (for server-adjudicated backward checks,
    /// the stage the gradient was addressed to).
    pub stage: usize,
    pub direction: Direction,
    pub check: CheckKind,
    pub mode: Mode,
    pub suspects: Vec<usize>,
    /// `None` for timeouts and structural mismatches.
    pub max_abs_diff: Option<f64>,
}

/// Stages that could explain an alert raised at `stage`.
///
/// Direct forward at `i`: `{i-2, i-1, i}`. Direct backward at `j`:
/// `{j, j+1, j+2}`. Central forward at `i+1`: `{i, i+1}`. Central backward
/// at `j`: `{j+1, j+2}`. Neighbours follow the active topology, and immune
/// or out-of-range stages are removed.
pub fn localize(stage: usize, direction: Direction, mode: Mode, topology: &Topology) -> Vec<usize> {
    let before = |s: Option<usize>| s.and_then(|s| topology.pred(s));
    let after = |s: Option<usize>| s.and_then(|s| topology.succ(s));
    let here = Some(stage);
    let candidates: Vec<Option<usize>> = match (mode, direction) {
        (Mode::RobustCentral, Direction::Forward) => vec![before(here), here],
        (Mode::RobustCentral, Direction::Backward) => vec![after(here), after(after(here))],
        (_, Direction::Forward) => vec![before(before(here)), before(here), here],
        (_, Direction::Backward) => vec![here, after(here), after(after(here))],
    };
    let set: BTreeSet<usize> = candidates
        .into_iter()
        .flatten()
        .filter(|&s| topology.is_interior(s))
        .collect();
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{tamper_forward, tamper_stealthy};
    use crate::model::LayerSpec;
    use crate::random::{RandomStream, StreamId};
    use crate::tensor::{gaussian, Activation};

    fn module(seed: u64) -> StageModule<f64> {
        let specs = [
            LayerSpec::Affine { in_dim: 4, out_dim: 4 },
            LayerSpec::Nonlinearity { activation: Activation::Tanh },
        ];
        StageModule::init(&specs, 3, &mut RandomStream::new(seed, StreamId::Init)).unwrap()
    }

    #[test]
    fn honest_forward_matches_exactly() {
        let m = module(1);
        let x = gaussian(&mut RandomStream::new(2, StreamId::Data), 1, 4);
        let (y, _) = m.forward(&x).unwrap();
        let v = verify_forward(&m.clone(), &x, &y, 0.0);
        assert!(v.is_match());
        assert_eq!(v.max_abs_diff, 0.0);
    }

    #[test]
    fn flipped_or_perturbed_output_mismatches() {
        let m = module(1);
        let x = gaussian(&mut RandomStream::new(2, StreamId::Data), 1, 4);
        let (y, _) = m.forward(&x).unwrap();
        assert!(!verify_forward(&m, &x, &tamper_forward(&y), 0.0).is_match());

        let mut nudged = y.clone();
        nudged.set(0, 2, y.get(0, 2) + 1e-9);
        assert!(!verify_forward(&m, &x, &nudged, 0.0).is_match());
        assert!(verify_forward(&m, &x, &nudged, 1e-8).is_match());
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let m = module(1);
        let v = verify_forward(&m, &Tensor::zeros(1, 3), &Tensor::zeros(1, 4), 0.0);
        assert!(!v.is_match());
        assert!(v.max_abs_diff.is_infinite());
    }

    #[test]
    fn stealthy_pair_fools_duplicate_but_not_jump() {
        let m = module(5);
        let mut s = RandomStream::new(6, StreamId::Adversary);
        let true_input = gaussian(&mut s, 1, 4);
        let fake = gaussian(&mut s, 1, 4);
        let (a_dup, a_out) = tamper_stealthy(&m, &fake).unwrap();
        assert!(verify_forward(&m, &a_dup, &a_out, 0.0).is_match());
        assert!(!verify_jump(&a_dup, &true_input, 0.0).is_match());

        let (honest_dup, _) = tamper_stealthy(&m, &true_input).unwrap();
        assert!(verify_jump(&honest_dup, &true_input, 0.0).is_match());
    }

    #[test]
    fn backward_mirror_cases() {
        let m = module(3);
        let mut s = RandomStream::new(4, StreamId::Data);
        let x = gaussian(&mut s, 2, 4);
        let g = gaussian(&mut s, 2, 4);
        let (_, cache) = m.forward(&x).unwrap();
        let (honest, _) = m.backward(&cache, &g).unwrap();

        let (expected, v) = verify_backward(&m, &cache, &g, &honest, 0.0).unwrap();
        assert!(v.is_match() && v.max_abs_diff == 0.0);
        assert!(expected.bit_eq(&honest));

        let noise = gaussian(&mut RandomStream::new(9, StreamId::Adversary), 2, 4);
        assert!(!verify_backward(&m, &cache, &g, &noise, 0.0).unwrap().1.is_match());

        let zero = Tensor::zeros(2, 4);
        let (expected, _) = verify_backward(&m, &cache, &zero, &zero, 0.0).unwrap();
        assert!(expected.is_zero());
        let mut claim = zero.clone();
        claim.set(1, 1, 1e-12);
        assert!(!verify_backward(&m, &cache, &zero, &claim, 0.0).unwrap().1.is_match());
    }

    #[test]
    fn localization_rules() {
        let t = Topology::new(6, None);
        assert_eq!(localize(5, Direction::Forward, Mode::RobustDirect, &t), vec![3, 4, 5]);
        assert_eq!(localize(3, Direction::Forward, Mode::RobustDirect, &t), vec![2, 3]);
        assert_eq!(localize(6, Direction::Forward, Mode::RobustCentral, &t), vec![5]);
        assert_eq!(localize(4, Direction::Forward, Mode::RobustCentral, &t), vec![3, 4]);
        assert_eq!(localize(1, Direction::Backward, Mode::RobustDirect, &t), vec![2, 3]);
        assert_eq!(localize(2, Direction::Backward, Mode::RobustCentral, &t), vec![3, 4]);
    }

    #[test]
    fn localization_follows_skip_bridge() {
        let t = Topology::new(6, Some((3, 4)));
        assert_eq!(localize(5, Direction::Forward, Mode::RobustCentral, &t), vec![2, 5]);
        assert_eq!(localize(1, Direction::Backward, Mode::RobustCentral, &t), vec![2, 5]);
    }
}
