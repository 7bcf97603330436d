use amd_core::config::{toy_config, ModelConfig};
use amd_core::data::{gen_synthetic, make_windows, Series, SynthKind, SynthSpec};
use amd_core::model::AmdModel;
use amd_core::tensor::{grad_check, Graph};
use amd_core::train::{evaluate, predict_all, train};
use amd_core::{AmdError, Tensor};

fn sine(len: usize) -> Series {
    gen_synthetic(&SynthSpec {
        kind: SynthKind::Sine,
        length: len,
        channels: 2,
        period: 8.0,
        noise: 0.01,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> ModelConfig {
    let mut cfg = toy_config();
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg
}

#[test]
fn loss_falls_and_best_parameters_are_kept() {
    let s = sine(200);
    let cfg = quick(8);
    let tr = make_windows(&s, 16, 4, 1, 0..140).unwrap();
    let va = make_windows(&s, 16, 4, 1, 124..200).unwrap();
    let mut model = AmdModel::<f64>::new(cfg, 3).unwrap();
    let mut seen = Vec::new();
    let report = train(&mut model, &tr, &va, |log| seen.push(log.epoch)).unwrap();
    assert_eq!(seen, (1..=8).collect::<Vec<_>>());
    assert_eq!(report.loss_curve.len(), 8 * tr.len().div_ceil(16));
    assert!(report.epochs.last().unwrap().train_mse < report.epochs[0].train_mse);
    let best = report
        .epochs
        .iter()
        .map(|e| e.val.mse)
        .fold(report.initial_val.mse, f64::min);
    assert_eq!(report.best_val.mse, best);
    assert_eq!(evaluate(&model, &va, 7).unwrap().mse, report.best_val.mse);
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let s = sine(120);
    let tr = make_windows(&s, 16, 4, 1, 0..80).unwrap();
    let va = make_windows(&s, 16, 4, 1, 60..120).unwrap();
    let mut model = AmdModel::<f64>::new(quick(0), 4).unwrap();
    let before = model.params.clone();
    let report = train(&mut model, &tr, &va, |_| {}).unwrap();
    assert!(report.epochs.is_empty() && report.loss_curve.is_empty());
    assert_eq!(report.best_epoch, 0);
    assert_eq!(report.best_val, report.initial_val);
    assert!(model.params.bitwise_eq(&before));
}

#[test]
fn shape_mismatch_is_rejected_before_training() {
    let s = sine(120);
    let tr = make_windows(&s, 16, 8, 1, 0..80).unwrap();
    let va = make_windows(&s, 16, 8, 1, 60..120).unwrap();
    let mut model = AmdModel::<f64>::new(quick(1), 4).unwrap();
    assert!(matches!(train(&mut model, &tr, &va, |_| {}), Err(AmdError::Data(_))));
}

#[test]
fn diverging_run_reports_the_batch() {
    let s = sine(120);
    let tr = make_windows(&s, 16, 4, 1, 0..80).unwrap();
    let va = make_windows(&s, 16, 4, 1, 60..120).unwrap();
    let mut cfg = quick(3);
    cfg.train.learning_rate = 1e300;
    let mut model = AmdModel::<f64>::new(cfg, 4).unwrap();
    let err = train(&mut model, &tr, &va, |_| {}).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn batching_does_not_change_predictions() {
    let s = sine(100);
    let ds = make_windows(&s, 16, 4, 3, 0..100).unwrap();
    let model = AmdModel::<f64>::new(toy_config(), 5).unwrap();
    let (y1, g1) = predict_all(&model, &ds, 1).unwrap();
    let (y2, g2) = predict_all(&model, &ds, 64).unwrap();
    assert_eq!(y1.shape(), &[ds.len(), 4, 2]);
    assert_eq!(g1.shape(), &[ds.len(), 2, 2]);
    for (a, b) in y1.data().iter().zip(y2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn composite_expression_gradients() {
    let a = Tensor::from_f64(&[2, 3], &[0.3, -0.8, 1.1, 0.4, 0.05, -1.3]).unwrap();
    let b = Tensor::from_f64(&[3, 2], &[0.9, -0.2, 0.1, 0.7, -0.5, 0.3]).unwrap();
    let rep = grad_check(
        |g: &mut Graph<'_, f64>, v| {
            let m = g.matmul(v[0], v[1])?;
            let s = g.softmax(m)?;
            let e = g.gelu(m);
            let p = g.mul(s, e)?;
            let q = g.softplus(p);
            let t = g.transpose(q)?;
            let r = g.var_axis(t, 1, false)?;
            Ok(g.sum_all(r))
        },
        &[a, b],
        1e-6,
    )
    .unwrap();
    assert!(rep.max_relative_error < 1e-7, "{rep:?}");
}

#[test]
fn backward_twice_is_an_error() {
    let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.param(&x);
    let y = g.sum_all(v);
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(AmdError::GraphConsumed)));
}
