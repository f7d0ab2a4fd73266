use implicit_align::checkpoint::{load_model, save_model};
use implicit_align::data::{generate_domain_pair, load_dataset, make_profile, save_dataset, Layout, PairSpec, ProfileKind, ShiftSpec};
use implicit_align::harness::presets::desk_config;
use implicit_align::harness::{evaluate, train, SamplerKind, TrainData};
use implicit_align::objectives::TransferKind;
use implicit_align::{AdaptationModelF32, AdaptationModelF64};

fn spec() -> PairSpec {
    let shift = ShiftSpec {
        translation: [0.25, 0.0],
        rotation: 0.0,
        scale: 1.0,
    };
    let mut s = PairSpec::new(4, 3, shift);
    s.layout = Layout::Line;
    s.radius = 1.0;
    s.sigma = 0.15;
    s
}

#[test]
fn generate_save_train_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let sp = make_profile(ProfileKind::Mild, 4, 40, 3.0).unwrap();
    let tp = make_profile(ProfileKind::Balanced, 4, 40, 0.0).unwrap();
    let pair = generate_domain_pair(11, &spec(), &sp, &tp).unwrap();
    assert_eq!(pair.source.dim(), 3);

    save_dataset(&pair.source, &dir.path().join("s.csv")).unwrap();
    save_dataset(&pair.target, &dir.path().join("t.csv")).unwrap();
    let source = load_dataset(&dir.path().join("s.csv"), 4).unwrap();
    let target = load_dataset(&dir.path().join("t.csv"), 4).unwrap();
    assert_eq!(source, pair.source);
    assert_eq!(target, pair.target);

    let data = TrainData {
        source: &source,
        target: &target,
        target_labels: Some(&pair.target_labels),
    };
    let mut cfg = desk_config(SamplerKind::Aligned, TransferKind::MddMasked);
    cfg.steps = 300;
    cfg.warmup_steps = 100;
    cfg.eval_period = 100;
    let out = train::<f64>(&cfg, &data).unwrap();
    assert_eq!(out.log.len(), 3);
    let last = out.log.last().unwrap();
    assert!(last.target_per_class_accuracy.unwrap() > 0.5, "{last:?}");

    let path = dir.path().join("model.json");
    save_model(&out.model, &path).unwrap();
    let back: AdaptationModelF64 = load_model(&path).unwrap();
    let mut trained = out.model.clone();
    trained.zero_grad();
    assert_eq!(back, trained);
    let report = evaluate(&back, target.features(), pair.target_labels.as_slice()).unwrap().unwrap();
    assert_eq!(Some(report.accuracy), last.target_accuracy);
    assert_eq!(Some(report.per_class_accuracy), last.target_per_class_accuracy);

    // a checkpoint loads at the other precision with close predictions
    let single: AdaptationModelF32 = load_model(&path).unwrap();
    let r32 = evaluate(&single, target.features(), pair.target_labels.as_slice()).unwrap().unwrap();
    assert!((r32.accuracy - report.accuracy).abs() <= 2.0 / target.len() as f64);
}

#[test]
fn single_precision_training_tracks_double() {
    let sp = make_profile(ProfileKind::Balanced, 4, 30, 0.0).unwrap();
    let pair = generate_domain_pair(2, &spec(), &sp, &sp).unwrap();
    let data = TrainData {
        source: &pair.source,
        target: &pair.target,
        target_labels: Some(&pair.target_labels),
    };
    let mut cfg = desk_config(SamplerKind::Random, TransferKind::Dann);
    cfg.steps = 200;
    cfg.eval_period = 200;
    let a = train::<f64>(&cfg, &data).unwrap();
    let b = train::<f32>(&cfg, &data).unwrap();
    let (ra, rb) = (&a.log[0], &b.log[0]);
    assert!((ra.source_loss - rb.source_loss).abs() < 1e-3, "{} vs {}", ra.source_loss, rb.source_loss);
    assert!((ra.source_accuracy - rb.source_accuracy).abs() <= 0.05);
}
