mod common;

use common::small_config;
use pipeguard::adversary::{inject_crash, AttackConfig, AttackKind, AttackPlan, Direction, Scheduling};
use pipeguard::defense::{localize, CheckKind};
use pipeguard::harness::Dataset;
use pipeguard::protocol::{run_training, MessageKind, Mode, Node, Topology, Trainer};
use pipeguard::Error;
use proptest::prelude::*;

fn clean_counts(stages: usize, micro: usize, mode: Mode) -> Vec<u64> {
    let mut cfg = small_config(stages, mode, 1, 3);
    cfg.micro_batch_size = micro;
    let data = Dataset::generate(&cfg);
    let m = run_training::<f64, _>(&cfg.pipeline_config().unwrap(), &AttackConfig::none(), &data).unwrap();
    MessageKind::ALL.iter().map(|&k| m.messages.get(k) / 3).collect()
}

#[test]
fn message_counts_per_iteration() {
    for (k, micro) in [(4u64, 1usize), (5, 2), (6, 4)] {
        let m = 4 / micro as u64;
        let counts = |mode| clean_counts(k as usize, micro, mode);
        // FwdAct, FwdJump, BwdGrad, BwdJump, ParamSync, Alert, Control
        assert_eq!(counts(Mode::Baseline), vec![(k - 1) * m, 0, (k - 1) * m, 0, 0, 0, 0]);
        assert_eq!(
            counts(Mode::RobustDirect),
            vec![(k - 1) * m, (k - 2) * m, (k - 1) * m, (k - 2) * m, k - 1, 0, 0]
        );
        assert_eq!(
            counts(Mode::RobustCentral),
            vec![2 * (k - 1) * m, 0, 2 * (k - 1) * m, (k - 2) * m, 2 * (k - 1), 0, 0]
        );
    }
}

#[test]
fn restarted_iterations_replay_the_clean_run_bitwise() {
    for mode in [Mode::RobustDirect, Mode::RobustCentral] {
        for kind in [AttackKind::ForwardFlip, AttackKind::BackwardGauss, AttackKind::StealthyForward] {
            let mut cfg = small_config(6, mode, 21, 40);
            cfg.recovery.escalate = false;
            let data = Dataset::generate(&cfg);
            let pipeline = cfg.pipeline_config().unwrap();
            let clean = run_training::<f64, _>(&pipeline, &AttackConfig::none(), &data).unwrap();
            let attack = AttackConfig {
                kind,
                rate: 0.5,
                scheduling: Scheduling::ExactCount,
                target: None,
            };
            let attacked = run_training::<f64, _>(&pipeline, &attack, &data).unwrap();
            assert_eq!(attacked.attacks.len(), 20);
            if mode == Mode::RobustDirect {
                assert_eq!(attacked.restarts, 20);
                let same = clean.losses().iter().zip(attacked.losses()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{mode:?} {kind:?}");
            } else {
                // The first alert bypasses a pair, so the model differs from then on.
                assert_eq!(attacked.skip_events.len(), 1);
                let first = attacked.skip_events[0].iteration;
                assert_eq!(clean.losses()[..first], attacked.losses()[..first]);
            }
        }
    }
}

#[test]
fn crash_raises_timeout_alert_and_recovers() {
    for mode in [Mode::RobustDirect, Mode::RobustCentral, Mode::Baseline] {
        let mut cfg = small_config(5, mode, 3, 4);
        cfg.recovery.escalate = false;
        let data = Dataset::generate(&cfg);
        let pipeline = cfg.pipeline_config().unwrap();
        let mut trainer = Trainer::<f64, _>::new(&pipeline, &AttackConfig::none(), &data).unwrap();
        trainer.inject(inject_crash(1, 0, 3, 5).unwrap());
        trainer.step().unwrap();
        let res = trainer.step().unwrap();
        assert_eq!(res.alerts.len(), 1, "{mode:?}");
        let alert = &res.alerts[0];
        assert_eq!(alert.check, CheckKind::Timeout);
        assert_eq!(alert.stage, 4, "downstream neighbour waits on the crashed stage");
        assert!(alert.suspects.contains(&3));
        assert_eq!(res.record.restarts, 1);
    }
    assert!(inject_crash(0, 0, 1, 5).is_err());
    assert!(inject_crash(0, 0, 5, 5).is_err());
}

#[test]
fn persistent_attacker_without_escalation_aborts() {
    let mut cfg = small_config(5, Mode::RobustDirect, 4, 10);
    cfg.recovery.escalate = false;
    cfg.recovery.retry_cap = 2;
    let data = Dataset::generate(&cfg);
    let attack = AttackConfig {
        target: Some(2),
        ..AttackConfig::bernoulli(AttackKind::ForwardFlip, 1.0)
    };
    match run_training::<f64, _>(&cfg.pipeline_config().unwrap(), &attack, &data) {
        Err(Error::Aborted { iteration, metrics, .. }) => {
            assert_eq!(iteration, 0);
            assert_eq!(metrics.alerts.len(), 3);
            assert!(metrics.rows.is_empty());
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn baseline_never_alerts_on_tampering() {
    let cfg = small_config(5, Mode::Baseline, 4, 30);
    let data = Dataset::generate(&cfg);
    let attack = AttackConfig::bernoulli(AttackKind::ForwardFlip, 1.0);
    let m = run_training::<f64, _>(&cfg.pipeline_config().unwrap(), &attack, &data).unwrap();
    assert!(m.alerts.is_empty());
    assert_eq!(m.attacks.len(), 30);
    assert!(m.attacks.iter().all(|a| a.effective && !a.detected));
}

#[test]
fn escalation_then_skip_freezes_blocks() {
    let mut cfg = small_config(6, Mode::RobustDirect, 8, 30);
    cfg.attack = AttackConfig {
        target: Some(4),
        ..AttackConfig::bernoulli(AttackKind::BackwardGauss, 1.0)
    };
    let data = Dataset::generate(&cfg);
    let pipeline = cfg.pipeline_config().unwrap();
    let mut trainer = Trainer::<f64, _>::new(&pipeline, &cfg.attack, &data).unwrap();
    trainer.step().unwrap();
    let state = trainer.state();
    assert_eq!(state.mode(), Mode::RobustCentral);
    let (i, j) = state.skip().expect("skip installed in the first iteration");
    assert!(i == 4 || j == 4);
    assert!(state.frozen().originals.contains(&(i - 1)));
    assert!(state.frozen().duplicates.contains(&(j + 1)));
    assert!(state.bridge_duplicate(j + 1).unwrap().params_bit_eq(state.stage(i - 1)));
    let frozen = state.stage(i - 1).snapshot();
    for _ in 1..30 {
        let res = trainer.step().unwrap();
        assert!(res.alerts.is_empty());
        assert!(trainer.state().duplicates_consistent());
    }
    assert_eq!(trainer.state().stage(i - 1).snapshot(), frozen);
    let (metrics, _) = trainer.finish().unwrap();
    assert_eq!(metrics.escalations, vec![0]);
    assert_eq!(metrics.skip_events.len(), 1);
    assert_eq!(metrics.messages.get(MessageKind::ParamSync) % 2, 0);
}

#[test]
fn attacks_on_bypassed_stages_are_ineffective() {
    let cfg = small_config(6, Mode::RobustCentral, 2, 3);
    let data = Dataset::generate(&cfg);
    let pipeline = cfg.pipeline_config().unwrap();
    let mut trainer = Trainer::<f64, _>::new(&pipeline, &AttackConfig::none(), &data).unwrap();
    let plan = |iteration, target| AttackPlan {
        iteration,
        attempt: 0,
        target,
        direction: Direction::Forward,
        kind: AttackKind::ForwardFlip,
    };
    trainer.inject(plan(0, 3));
    trainer.inject(plan(1, 3));
    trainer.inject(plan(2, 4));
    for _ in 0..3 {
        trainer.step().unwrap();
    }
    let (m, _) = trainer.finish().unwrap();
    assert_eq!(m.skip_events[0].pair, (3, 4));
    let effective: Vec<bool> = m.attacks.iter().map(|a| a.effective).collect();
    assert_eq!(effective, vec![true, false, false]);
    assert_eq!(m.alerts.len(), 1);
}

#[test]
fn trace_covers_every_message() {
    let mut cfg = small_config(5, Mode::RobustDirect, 6, 6);
    cfg.attack = AttackConfig::bernoulli(AttackKind::ForwardFlip, 0.5);
    let data = Dataset::generate(&cfg);
    let pipeline = cfg.pipeline_config().unwrap();
    let (m, trace) = Trainer::<f64, _>::new(&pipeline, &cfg.attack, &data).unwrap().with_trace().run().unwrap();
    assert_eq!(trace.len() as u64, m.messages.total());
    let alerts = trace.iter().filter(|r| r.kind == MessageKind::Alert).count();
    assert_eq!(alerts, m.alerts.len());
    assert!(trace.iter().filter(|r| r.kind == MessageKind::Alert).all(|r| r.receiver == Node::Initiator));
    assert!(trace.windows(2).all(|w| w[0].id < w[1].id));
}

#[test]
fn single_precision_pipeline_trains() {
    let cfg = small_config(4, Mode::RobustDirect, 5, 200);
    let data = Dataset::generate(&cfg);
    let m = run_training::<f32, _>(&cfg.pipeline_config().unwrap(), &AttackConfig::none(), &data).unwrap();
    assert!(m.alerts.is_empty());
    assert!(m.final_eval_loss < m.initial_eval_loss);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_tamper_is_caught_and_localized(
        seed in 0u64..1000,
        stages in 4usize..8,
        central in any::<bool>(),
        kind_idx in 0usize..3,
        target_pick in 0usize..8,
        micro in prop::sample::select(vec![1usize, 2, 4]),
    ) {
        let kind = [AttackKind::ForwardFlip, AttackKind::BackwardGauss, AttackKind::StealthyForward][kind_idx];
        let mode = if central { Mode::RobustCentral } else { Mode::RobustDirect };
        let target = 2 + target_pick % (stages - 2);
        let mut cfg = small_config(stages, mode, seed, 2);
        cfg.micro_batch_size = micro;
        let data = Dataset::generate(&cfg);
        let pipeline = cfg.pipeline_config().unwrap();
        let mut trainer = Trainer::<f64, _>::new(&pipeline, &AttackConfig::none(), &data).unwrap();
        trainer.inject(AttackPlan { iteration: 1, attempt: 0, target, direction: kind.direction().unwrap(), kind });
        trainer.step().unwrap();
        let res = trainer.step().unwrap();
        prop_assert_eq!(res.alerts.len(), 1);
        prop_assert!(res.alerts[0].suspects.contains(&target));
        prop_assert!(trainer.state().duplicates_consistent());
    }

    #[test]
    fn clean_runs_keep_duplicates_in_sync(seed in 0u64..1000, stages in 4usize..8, central in any::<bool>()) {
        let mode = if central { Mode::RobustCentral } else { Mode::RobustDirect };
        let cfg = small_config(stages, mode, seed, 5);
        let data = Dataset::generate(&cfg);
        let pipeline = cfg.pipeline_config().unwrap();
        let mut trainer = Trainer::<f64, _>::new(&pipeline, &AttackConfig::none(), &data).unwrap();
        for _ in 0..5 {
            prop_assert!(trainer.step().unwrap().alerts.is_empty());
            prop_assert!(trainer.state().duplicates_consistent());
        }
    }

    #[test]
    fn suspect_sets_are_interior_and_bounded(stages in 4usize..10, at in 1usize..10, backward in any::<bool>(), central in any::<bool>()) {
        let at = 1 + (at - 1) % stages;
        let topo = Topology::new(stages, None);
        let mode = if central { Mode::RobustCentral } else { Mode::RobustDirect };
        let dir = if backward { Direction::Backward } else { Direction::Forward };
        let s = localize(at, dir, mode, &topo);
        prop_assert!(s.iter().all(|&x| x >= 2 && x < stages));
        let cap = if central { 2 } else { 3 };
        prop_assert!(s.len() <= cap);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
    }
}
