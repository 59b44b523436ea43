use satnet::datasets::{split, synth_generate, LabeledDataset, Split, SplitSpec};
use satnet::engine::{Tape, Tensor};
use satnet::models::{Model, ModelSpec, Variant};
use satnet::regularization::AugmentConfig;
use satnet::training::{self, history_csv, EvalSettings, OptimizerKind, Schedule, TrainConfig, HISTORY_HEADER};

fn ce(logits: Tensor<f64>, labels: &[usize], weights: &[f64]) -> f64 {
    let mut t = Tape::new();
    let x = t.constant(logits);
    let l = t.weighted_cross_entropy(x, labels, weights).unwrap();
    t.value(l).item().unwrap()
}

#[test]
fn cross_entropy_reference_values() {
    let ln10 = 10f64.ln();
    let zeros = Tensor::zeros(&[1, 10]);
    let mut w = vec![1.0; 10];
    assert!((ce(zeros.clone(), &[4], &w) - ln10).abs() < 1e-12);
    w[4] = 1.3;
    assert!((ce(zeros.clone(), &[4], &w) - 1.3 * ln10).abs() < 1e-12);
    w[7] = 0.8;
    let two = Tensor::zeros(&[2, 10]);
    assert!((ce(two, &[4, 7], &w) - (1.3 + 0.8) / 2.0 * ln10).abs() < 1e-12);
    // a confident correct prediction costs almost nothing
    let mut sharp = vec![0.0; 10];
    sharp[2] = 50.0;
    assert!(ce(Tensor::new(&[1, 10], sharp).unwrap(), &[2], &[1.0; 10]) < 1e-20);
}

fn tiny_setup() -> (LabeledDataset, Split, Model<f32>, TrainConfig) {
    let ds = synth_generate(10, 21).unwrap();
    let s = split(&ds, &SplitSpec::default()).unwrap();
    let spec = ModelSpec::new(Variant::Baseline, 4).with_channels(vec![8, 16, 16]);
    let model = Model::<f32>::build(&spec, 21).unwrap();
    let mut cfg = TrainConfig::preset(Variant::Baseline, 21);
    cfg.batch_size = 8;
    cfg.epochs = 8;
    cfg.early_stop_patience = Some(2);
    cfg.schedule = Schedule::Constant;
    let a = &cfg.augment;
    cfg.augment = AugmentConfig::normalize_only(a.normalize_mean, a.normalize_std);
    (ds, s, model, cfg)
}

#[test]
fn early_stopping_keeps_the_best_checkpoint() {
    let (ds, s, mut model, cfg) = tiny_setup();
    let out = training::train(&mut model, &ds, &s.train, &s.val, &cfg).unwrap();
    let best = out.history.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.best_val_acc, best);
    assert_eq!(out.best.epoch, out.best_epoch);
    let first_best = out.history.iter().find(|r| r.val_acc == best).unwrap().epoch;
    assert_eq!(out.best_epoch, first_best);
    if out.stopped_early {
        assert_eq!(out.history.len(), out.best_epoch + 2);
    } else {
        assert_eq!(out.history.len(), cfg.epochs);
    }
    let mut restored = out.best.restore().unwrap();
    let settings = EvalSettings {
        batch_size: cfg.batch_size,
        ..EvalSettings::default()
    };
    let val = training::evaluate(&mut restored, &ds, &s.val, &settings).unwrap();
    assert_eq!(val.accuracy, best);
}

#[test]
fn training_is_reproducible_and_adam_matches_adamw_without_decay() {
    let (ds, s, _, mut cfg) = tiny_setup();
    cfg.epochs = 2;
    cfg.early_stop_patience = None;
    cfg.augment = AugmentConfig::default();
    let run = |cfg: &TrainConfig| {
        let spec = ModelSpec::new(Variant::Baseline, 4).with_channels(vec![8, 16, 16]);
        let mut m = Model::<f32>::build(&spec, 21).unwrap();
        history_csv(&training::train(&mut m, &ds, &s.train, &s.val, cfg).unwrap().history)
    };
    cfg.optimizer = OptimizerKind::Adam;
    let a = run(&cfg);
    assert_eq!(a, run(&cfg));
    cfg.optimizer = OptimizerKind::AdamW;
    assert_eq!(a, run(&cfg));
    assert!(a.starts_with(HISTORY_HEADER));
    assert_eq!(a.lines().count(), 3);
}

#[test]
fn history_lists_every_fusion_weight() {
    let ds = synth_generate(10, 22).unwrap();
    let s = split(&ds, &SplitSpec::default()).unwrap();
    let spec = ModelSpec::new(Variant::Balanced12, 4).with_channels(vec![8, 8, 16, 16]);
    let mut m = Model::<f32>::build(&spec, 22).unwrap();
    let mut cfg = TrainConfig::preset(Variant::Balanced12, 22);
    cfg.epochs = 1;
    cfg.batch_size = 16;
    let out = training::train(&mut m, &ds, &s.train, &s.val, &cfg).unwrap();
    let csv = history_csv(&out.history);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row.len(), 8);
    let per_block: Vec<f64> = row[7].split(';').map(|v| v.parse().unwrap()).collect();
    assert_eq!(per_block.len(), 11);
    let mean: f64 = row[6].parse().unwrap();
    assert!((mean - per_block.iter().sum::<f64>() / 11.0).abs() < 1e-9);
    assert_eq!(per_block, m.alphas().unwrap());
}

#[test]
fn mismatched_class_count_is_rejected() {
    let (ds, s, _, cfg) = tiny_setup();
    let mut m = Model::<f32>::build(&ModelSpec::new(Variant::Baseline, 10).with_channels(vec![4, 4, 4]), 0).unwrap();
    assert!(matches!(
        training::train(&mut m, &ds, &s.train, &s.val, &cfg),
        Err(satnet::Error::Config(_))
    ));
}
