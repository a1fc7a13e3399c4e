use facemark::autodiff::Checkpoint;
use facemark::data::{make_example, synth_faces, Example, FaceSample, Split};
use facemark::models::HeadKind;
use facemark::training::{collate, fit, FitOptions, LossKind, StopReason, TrainConfig, Trainer};

fn faces(n: usize) -> (Vec<FaceSample>, Vec<FaceSample>) {
    synth_faces(n, 64, 5).unwrap().into_iter().partition(|f| f.meta.split == Split::Train)
}

fn small(loss: LossKind, steps: u64) -> TrainConfig {
    let head = if loss.fits(HeadKind::Pwc) { HeadKind::Pwc } else { HeadKind::Direct };
    TrainConfig { head, loss, batch_size: 4, max_steps: steps, val_interval: 3, ..TrainConfig::default() }
}

fn detector_tensors(ck: &Checkpoint<f32>) -> Vec<(String, Vec<f32>)> {
    ck.to_map().into_iter().filter(|(n, _)| n.starts_with("detector/")).map(|(n, t)| (n, t.data().to_vec())).collect()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (train, _) = faces(10);
    let mut cfg = small(LossKind::Pwc, 1);
    cfg.adam.lr = 0.0;
    let spec = cfg.model_spec(train[0].landmarks.scheme());
    let mut t = Trainer::new(cfg.clone(), spec.clone()).unwrap();
    let before = detector_tensors(&t.checkpoint());
    let ex: Vec<Example> = train[..4].iter().map(|f| make_example(f, spec.input_size, spec.map_size(), spec.head, cfg.target).unwrap()).collect();
    let batch = collate(&ex.iter().collect::<Vec<_>>()).unwrap();
    t.train_step(&batch).unwrap();
    assert_eq!(t.step, 1);
    // Running statistics move; weights do not.
    for ((n, a), (_, b)) in before.iter().zip(detector_tensors(&t.checkpoint())) {
        if n.starts_with("detector/param/") {
            assert_eq!(a, &b, "{n}");
        }
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (train, val) = faces(20);
    let cfg = small(LossKind::Hybrid, 5);
    let a = fit(&cfg, &train, &val, &FitOptions::default()).unwrap();
    let b = fit(&cfg, &train, &val, &FitOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.trainer.checkpoint().to_bytes(), b.trainer.checkpoint().to_bytes());
    let mut other = cfg.clone();
    other.seed = 1;
    let c = fit(&other, &train, &val, &FitOptions::default()).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn hybrid_with_zero_beta_follows_pwc() {
    let (train, val) = faces(20);
    let pwc = fit(&small(LossKind::Pwc, 4), &train, &val, &FitOptions::default()).unwrap();
    let mut h = small(LossKind::Hybrid, 4);
    h.beta = 0.0;
    let hyb = fit(&h, &train, &val, &FitOptions::default()).unwrap();
    assert_eq!(detector_tensors(&pwc.trainer.checkpoint()), detector_tensors(&hyb.trainer.checkpoint()));
    let losses = |log: &str| -> Vec<String> { log.lines().skip(1).filter(|l| l.contains(",train,")).map(|l| l.split(',').nth(2).unwrap().to_string()).collect() };
    assert_eq!(losses(&pwc.log), losses(&hyb.log));
}

#[test]
fn zero_step_budget() {
    let (train, val) = faces(10);
    let dir = tempfile::tempdir().unwrap();
    let r = fit(&small(LossKind::Pwc, 0), &train, &val, &FitOptions { out_dir: Some(dir.path().into()), verbose: false }).unwrap();
    assert_eq!(r.report.steps_run, 0);
    assert_eq!(r.report.best_step, None);
    assert_eq!(r.report.stop_reason, StopReason::MaxSteps);
    for f in ["train_log.csv", "report.json", "best.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn flat_validation_stops_after_patience() {
    let (train, val) = faces(10);
    let mut cfg = small(LossKind::Pwc, 50);
    cfg.adam.lr = 0.0;
    cfg.augment = false;
    cfg.val_interval = 1;
    cfg.patience = 3;
    let r = fit(&cfg, &train, &val, &FitOptions::default()).unwrap();
    assert_eq!(r.report.stop_reason, StopReason::EarlyStop);
    // Validation changes only through running statistics; what matters is
    // that training stopped long before the budget.
    assert!(r.report.steps_run < 50);
}

#[test]
fn returned_model_is_best_validation() {
    let (train, val) = faces(20);
    let mut cfg = small(LossKind::Reg, 9);
    cfg.head = HeadKind::Direct;
    cfg.adam.lr = 3e-3;
    cfg.val_interval = 1;
    let r = fit(&cfg, &train, &val, &FitOptions::default()).unwrap();
    let best = r.report.validations.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).unwrap();
    assert_eq!(r.report.best_step, Some(best.step));
    let spec = r.trainer.spec().clone();
    let ex: Vec<Example> = val.iter().map(|f| make_example(f, spec.input_size, spec.map_size(), spec.head, cfg.target).unwrap()).collect();
    let v = r.trainer.validate(&ex).unwrap();
    assert!((v.loss - best.loss).abs() < 1e-9, "{} vs {}", v.loss, best.loss);
}

#[test]
fn checkpoint_roundtrip_predicts_identically() {
    let (train, val) = faces(20);
    let r = fit(&small(LossKind::HybridDisc, 2), &train, &val, &FitOptions::default()).unwrap();
    let ck = Checkpoint::from_bytes(&r.trainer.checkpoint().to_bytes()).unwrap();
    let back = Trainer::from_checkpoint(&ck).unwrap();
    let spec = back.spec().clone();
    let ex: Vec<Example> = val.iter().map(|f| make_example(f, spec.input_size, spec.map_size(), spec.head, back.config.target).unwrap()).collect();
    let refs: Vec<&Example> = ex.iter().collect();
    assert_eq!(r.trainer.predict(&refs).unwrap(), back.predict(&refs).unwrap());
    assert_eq!(back.step, r.trainer.step);
}
