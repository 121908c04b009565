mod common;

use common::small_config;
use pipeguard::adversary::{AttackConfig, AttackKind};
use pipeguard::harness::{
    apply_env_overrides, compare_runs, losses_from_csv, run_experiment, tail_mean, Dataset, ExperimentConfig,
    RunSummary, ALERTS_FILE, ATTACKS_FILE, CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, TRACE_FILE,
};
use pipeguard::protocol::{BatchSource, Mode, TraceRecord};
use pipeguard::Error;

fn attacked(mode: Mode) -> ExperimentConfig {
    let mut cfg = small_config(5, mode, 12, 120);
    cfg.attack = AttackConfig::bernoulli(AttackKind::ForwardFlip, 0.4);
    cfg
}

#[test]
fn artifacts_are_complete_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = attacked(Mode::RobustDirect);
    cfg.trace = true;
    let out = run_experiment(&cfg, Some(dir.path())).unwrap();
    let read = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap();

    let csv = read(METRICS_FILE);
    assert_eq!(csv.lines().count(), cfg.iterations + 1);
    assert!(csv.starts_with("iteration,loss,ppl,alerts,mode,restarts,messages,recomputations\n"));
    let losses = losses_from_csv(&csv).unwrap();
    assert_eq!(losses, out.metrics.losses());

    let summary = RunSummary::load(&dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary, out.summary);
    let recomputed = tail_mean(&losses, summary.tail_window);
    assert!((recomputed - summary.final_loss).abs() <= 1e-12);
    assert_eq!(summary.tail_window, cfg.iterations / 10);
    assert!(summary.alerts > 0);
    assert_eq!(summary.detection_rate, Some(1.0));

    assert_eq!(read(ALERTS_FILE).lines().count(), summary.alerts);
    assert_eq!(read(ATTACKS_FILE).lines().count(), out.metrics.attacks.len());
    let resolved: ExperimentConfig = serde_json::from_str(&read(CONFIG_FILE)).unwrap();
    assert_eq!(resolved, cfg.resolved());

    let trace: Vec<TraceRecord> = read(TRACE_FILE).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(trace.len() as u64, summary.messages_total);
}

#[test]
fn repeated_runs_are_byte_identical() {
    for mode in [Mode::Baseline, Mode::RobustDirect, Mode::RobustCentral] {
        let cfg = attacked(mode);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&cfg, Some(a.path())).unwrap();
        run_experiment(&cfg, Some(b.path())).unwrap();
        for f in [METRICS_FILE, ALERTS_FILE, ATTACKS_FILE, SUMMARY_FILE, CONFIG_FILE] {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert!(x == y, "{f} differs in {mode:?}");
        }
    }
}

#[test]
fn seeds_change_the_run() {
    let a = run_experiment(&attacked(Mode::RobustDirect), None).unwrap();
    let mut cfg = attacked(Mode::RobustDirect);
    cfg.seed += 1;
    let b = run_experiment(&cfg, None).unwrap();
    assert_ne!(a.metrics.losses(), b.metrics.losses());
}

#[test]
fn aborted_runs_still_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(5, Mode::RobustDirect, 1, 20);
    cfg.recovery.escalate = false;
    cfg.attack = AttackConfig {
        target: Some(3),
        ..AttackConfig::bernoulli(AttackKind::BackwardGauss, 1.0)
    };
    let out = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert!(out.aborted().is_some());
    let summary = RunSummary::load(&dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(summary.completed_iterations, 0);
    assert!(summary.aborted.is_some());
}

#[test]
fn comparing_identical_runs_gives_unit_ratios() {
    let s = run_experiment(&small_config(4, Mode::Baseline, 2, 50), None).unwrap().summary;
    let cmp = compare_runs(&[("a".into(), s.clone()), ("b".into(), s)]).unwrap();
    assert!(cmp.rows.iter().all(|r| r.loss_ratio == 1.0 && r.message_overhead == 1.0));
    assert_eq!(cmp.overhead_reference, "a");
    assert!(cmp.to_string().contains("loss_ratio"));
}

#[test]
fn comparison_ratios_pick_the_right_runs() {
    let run = |mode, kind, rate| {
        let mut cfg = small_config(5, mode, 3, 100);
        cfg.attack = AttackConfig::bernoulli(kind, rate);
        run_experiment(&cfg, None).unwrap().summary
    };
    let clean = run(Mode::Baseline, AttackKind::None, 0.0);
    let bad = run(Mode::Baseline, AttackKind::ForwardFlip, 0.5);
    let good = run(Mode::RobustCentral, AttackKind::ForwardFlip, 0.5);
    let cmp = compare_runs(&[("good".into(), good.clone()), ("clean".into(), clean.clone()), ("bad".into(), bad.clone())])
        .unwrap();
    assert_eq!(cmp.overhead_reference, "clean");
    assert_eq!(cmp.attacked_over_clean, Some(bad.final_loss / clean.final_loss));
    assert_eq!(cmp.attacked_over_defended, Some(bad.final_loss / good.final_loss));
    assert_eq!(cmp.defended_over_clean, Some(good.final_loss / clean.final_loss));
    assert!(cmp.rows[0].message_overhead > 1.0);
}

#[test]
fn mismatched_tasks_cannot_be_compared() {
    let a = run_experiment(&small_config(4, Mode::Baseline, 2, 20), None).unwrap().summary;
    let b = run_experiment(&small_config(5, Mode::Baseline, 2, 20), None).unwrap().summary;
    assert!(matches!(compare_runs(&[("a".into(), a.clone()), ("b".into(), b)]), Err(Error::Comparison(_))));
    assert!(matches!(compare_runs(&[("a".into(), a)]), Err(Error::Comparison(_))));
}

#[test]
fn char_lm_runs_end_to_end() {
    let cfg = ExperimentConfig::from_json(
        r#"{"K": 4, "iterations": 150, "batch_size": 8, "micro_batch_size": 2,
            "dataset": {"task": "char_lm", "eval_samples": 200}}"#,
    )
    .unwrap();
    let data = Dataset::generate(&cfg);
    let eval: pipeguard::protocol::Batch<f64> = data.eval_set();
    assert_eq!(eval.len(), 200);
    let out = run_experiment(&cfg, None).unwrap();
    assert_eq!(out.summary.alerts, 0);
    assert!(out.summary.final_eval_loss < out.summary.initial_eval_loss);
    assert!((out.summary.final_ppl - out.summary.final_loss.exp()).abs() < 1e-9);
}

#[test]
fn bad_configs_name_the_offending_field() {
    let field = |json: &str| match ExperimentConfig::from_json(json).and_then(|c| c.validate().map(|_| c)) {
        Err(Error::Config { path, .. }) => path,
        other => panic!("expected config error, got {other:?}"),
    };
    assert_eq!(field(r#"{"K": 3}"#), "stages");
    assert_eq!(field(r#"{"batch_size": 6, "micro_batch_size": 4}"#), "micro_batch_size");
    assert_eq!(field(r#"{"attack": {"kind": "forward_flip", "rate": -0.1}}"#), "attack.rate");
    assert_eq!(field(r#"{"attack": {"kind": "forward_flip", "rate": 0.5, "target": 6}}"#), "attack.target");
    assert_eq!(field(r#"{"dataset": {"classes": 1}}"#), "dataset.classes");
    assert_eq!(field(r#"{"recovery": {"retry_cap": 0}}"#), "recovery.retry_cap");
    assert!(ExperimentConfig::from_json(r#"{"stagez": 4}"#).is_err());
}

#[test]
fn environment_overrides_nested_keys() {
    let mut doc = serde_json::json!({"K": 5, "attack": {"kind": "forward_flip"}});
    let vars = vec![
        ("PIPEGUARD_ATTACK__RATE".to_string(), "0.25".to_string()),
        ("PIPEGUARD_MODE".to_string(), "robust_central".to_string()),
        ("OTHER".to_string(), "1".to_string()),
    ];
    apply_env_overrides(&mut doc, vars).unwrap();
    let cfg = ExperimentConfig::from_value(doc).unwrap();
    assert_eq!(cfg.attack.rate, 0.25);
    assert_eq!(cfg.mode, Mode::RobustCentral);
    assert_eq!(cfg.stages, 5);
}

#[test]
fn reference_model_fits_the_default_dataset() {
    for seed in [1, 2, 3] {
        let cfg = common::gauss_config(6, 1, Mode::Baseline, seed, 2000);
        let losses = common::oracle_losses(&cfg);
        let tail = tail_mean(&losses, 200);
        assert!(tail < 0.3, "seed {seed}: {tail}");
    }
}
