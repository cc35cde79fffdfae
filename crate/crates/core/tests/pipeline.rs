use gatecraft::controller::Target;
use gatecraft::model::{cross_entropy, GateMode};
use gatecraft::pipeline::*;
use gatecraft::rng::seeded;
use gatecraft::sparsity::RegimeKind;
use gatecraft::Error;

fn small(regime: RegimeKind, target: Target) -> PruneRunConfig {
    let mut c = PruneRunConfig::toy(regime, target);
    c.epochs = PerStage { train: 2, prune: 2, finetune: 1 };
    c.steps_per_epoch = 5;
    c.lr_warmup_steps = PerStage { train: 2, prune: 2, finetune: 1 };
    c.schedule.warmup_steps = 5;
    c.batch_size = 8;
    c.eval_size = 64;
    c
}

fn mac(t: f64) -> PruneRunConfig {
    small(RegimeKind::MacOverall, Target::Overall(t))
}

#[test]
fn zero_epoch_training_is_a_no_op() {
    let mut c = mac(0.5);
    c.epochs.train = 0;
    let init = init_model(&c).unwrap();
    let r = run_stage(Stage::Train, &c, init.deep_clone(), None).unwrap();
    assert!(r.rows.is_empty());
    assert!(same_weights(&init, &r.model));
}

fn step_rows(runner: &mut StageRunner, c: &PruneRunConfig, n: usize) -> Vec<MetricsRow> {
    (0..n).map(|_| runner.step(c).unwrap()).collect()
}

#[test]
fn resumed_prune_step_matches_uninterrupted_step() {
    let c = mac(0.5);
    let mut a = StageRunner::new(Stage::Prune, init_model(&c).unwrap(), &c).unwrap();
    step_rows(&mut a, &c, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    a.checkpoint().save(&path).unwrap();
    let mut b = StageRunner::resume(Checkpoint::load(&path).unwrap(), &c).unwrap();
    assert_eq!(b.steps_done(), 3);
    let ra = step_rows(&mut a, &c, 2);
    let rb = step_rows(&mut b, &c, 2);
    assert_eq!(ra, rb);
    assert!(same_weights(&a.model, &b.model));
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
}

#[test]
fn resumed_finetune_matches_too() {
    let c = mac(0.3);
    let (_, _, ex) = prune_and_extract(&c, init_model(&c).unwrap(), None).unwrap();
    let mut a = StageRunner::new(Stage::Finetune, ModelState::Extracted(ex), &c).unwrap();
    step_rows(&mut a, &c, 2);
    let mut b = StageRunner::resume(Checkpoint::from_bytes(&a.checkpoint().to_bytes()).unwrap(), &c).unwrap();
    assert_eq!(step_rows(&mut a, &c, 1), step_rows(&mut b, &c, 1));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let c = mac(0.5);
    let runner = StageRunner::new(Stage::Prune, init_model(&c).unwrap(), &c).unwrap();
    let bytes = runner.checkpoint().to_bytes();

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let err = Checkpoint::from_bytes(&bad).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");

    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint { .. })));

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(&longer).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    std::fs::write(&path, b"not a checkpoint at all").unwrap();
    match Checkpoint::load(&path) {
        Err(Error::Checkpoint { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn toy_checkpoint_is_small() {
    let c = mac(0.5);
    let runner = StageRunner::new(Stage::Prune, init_model(&c).unwrap(), &c).unwrap();
    let n = runner.checkpoint().to_bytes().len();
    // Parameters, gates and two moments each, as f64.
    let params = runner.model.network().parameter_count();
    assert!(n > 3 * 8 * params && n < 10 * 1024 * 1024, "{n} bytes");
}

#[test]
fn nan_abort_keeps_last_good_checkpoint() {
    let mut c = mac(0.5);
    c.learning_rates.train = 1e150;
    c.lr_warmup_steps.train = 0;
    c.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let err = run_stage(Stage::Train, &c, init_model(&c).unwrap(), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NanLoss { .. } | Error::NonFiniteGradient(_) | Error::NonFinite { .. }), "{err}");
    let path = checkpoint_path(dir.path(), Stage::Train);
    let ckpt = Checkpoint::load(&path).unwrap();
    assert!(ckpt.step >= 1 && ckpt.step < c.stage_steps(Stage::Train));
    let rows = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), ckpt.step + 1);
}

#[test]
fn pipeline_writes_identical_metrics_twice() {
    let c = mac(0.4);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o1 = run_pipeline(&c, Some(d1.path())).unwrap();
    let o2 = run_pipeline(&c, Some(d2.path())).unwrap();
    assert_eq!(o1, o2);
    for f in ["metrics.csv", "controller.csv", "architecture.csv", "summary.json", "extracted.ckpt"] {
        let a = std::fs::read(d1.path().join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, std::fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(d1.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,stage,loss,accuracy,sparsity_overall,sparsity_cnn,sparsity_trans,macs_expected,lambda1,lambda2,lr\n"));
    assert_eq!(metrics.lines().count(), 1 + c.stage_steps(Stage::Train) + c.stage_steps(Stage::Prune) + c.stage_steps(Stage::Finetune));
}

#[test]
fn stages_reject_the_wrong_model_kind() {
    let c = mac(0.5);
    let dense = init_model(&c).unwrap();
    assert!(matches!(StageRunner::new(Stage::Finetune, dense.deep_clone(), &c), Err(Error::Config(_))));
    let gated = StageRunner::new(Stage::Prune, dense, &c).unwrap().model;
    assert!(matches!(StageRunner::new(Stage::Train, gated, &c), Err(Error::Config(_))));
}

#[test]
fn single_sample_loss_averages_like_an_expectation() {
    let c = mac(0.5);
    let ModelState::Gated(m) = StageRunner::new(Stage::Prune, init_model(&c).unwrap(), &c).unwrap().model else { unreachable!() };
    for g in m.gate_groups() {
        g.log_alpha.set_data(&vec![0.0; g.len()]);
    }
    let (x, y) = generate_batch(&c.task, &mut seeded(9, 99), 4);
    let mut rng = seeded(9, 100);
    let mut sample = || cross_entropy(&m.logits(&x, GateMode::Train(&mut rng)).unwrap(), &y).unwrap().item();
    let single: Vec<f64> = (0..64).map(|_| sample()).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    assert!(var(&single) > 0.0);
    let means: Vec<f64> = (0..16).map(|_| mean(&(0..64).map(|_| sample()).collect::<Vec<_>>())).collect();
    // Variance of 64-sample means against single-sample variance / 64; the
    // ratio of two variance estimates stays well within [0.25, 4].
    let ratio = var(&means) / (var(&single) / 64.0);
    assert!((0.25..4.0).contains(&ratio), "ratio {ratio}");
    assert!((mean(&means) - mean(&single)).abs() < 4.0 * (var(&single) / 64.0).sqrt());
}

#[test]
fn config_round_trip_and_overrides() {
    let c = PruneRunConfig::toy(RegimeKind::SizeSeparate, Target::Separate { cnn: 0.2, trans: 0.4 });
    let text = c.to_json();
    assert_eq!(PruneRunConfig::from_json(&text).unwrap(), c);

    let o = load_config(&text, &["seed=7".into(), "schedule.warmup_steps=10".into(), "task.noise_std=0.5".into()]).unwrap();
    assert_eq!((o.seed, o.schedule.warmup_steps, o.task.noise_std), (7, 10, 0.5));

    let mac_text = PruneRunConfig::toy(RegimeKind::MacOverall, Target::Overall(0.5)).to_json();
    let o = load_config(&mac_text, &["schedule.final_target=0.3".into()]).unwrap();
    assert_eq!(o.final_target(), Target::Overall(0.3));
    // The wav2vec2 frontend needs more samples than the toy task provides.
    assert!(load_config(&mac_text, &["architecture=wav2vec2_base".into()]).is_err());
    let o = load_config(&mac_text, &["architecture=wav2vec2_base".into(), "task.seq_len=16000".into(), "virtual_seconds=10".into()]);
    assert!(o.is_ok(), "{o:?}");

    for bad in ["gate_lr=0.1", "schedule.final_target=1.5", "batch_size=0", "nonsense=1", "architecture=resnet", "threshold=1"] {
        assert!(load_config(&mac_text, &[bad.into()]).is_err(), "{bad}");
    }
    assert!(load_config(&mac_text, &["schedule.final_target=[0.2,0.3]".into()]).is_err());
    assert!(load_config(&mac_text, &["no_equals_sign".into()]).is_err());
    assert!(load_config(&mac_text, &["seed.x=1".into()]).is_err());
}
