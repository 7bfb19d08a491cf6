use gridcast::cells::ConvParams;
use gridcast::checkpoint;
use gridcast::linalg::{Activation, Vector};
use gridcast::measurement::{generate_state_series, GridTopology, LoadProfile, StateSeries};
use gridcast::metrics::{evaluate_nrmse, Predictor};
use gridcast::model::{Architecture, ModelConfig};
use gridcast::training::{split_dataset, train, SplitSpec, TrainOptions};
use gridcast::Error;

fn series(buses: usize, steps: usize, seed: u64) -> StateSeries {
    generate_state_series(&GridTopology::chain(buses).unwrap(), steps, seed, LoadProfile::SinusoidalLoad).unwrap()
}

fn small(arch: Architecture, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::standard(arch, 4, 4, 5, 3, seed);
    cfg.depth = 2;
    if let Some(c) = cfg.conv.as_mut() {
        c.filters = 3;
        c.kernel = 3;
    }
    cfg
}

fn opts(epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions { epochs, batch_size: 8, lr: 5e-3, seed, ..TrainOptions::default() }
}

#[test]
fn default_split_of_twenty_thousand() {
    let data = series(2, 20_000, 1);
    let s = split_dataset(&data, &SplitSpec::default(), 10).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (15_000, 1_000, 4_000));
    assert_eq!(s.train.states()[14_999], data.states()[14_999]);
    assert_eq!(s.val.states()[0], data.states()[15_000]);
    assert_eq!(s.test.states()[0], data.states()[16_000]);
}

#[test]
fn conv_output_length() {
    let p = ConvParams::zeros(2, 5, 3, 1, Activation::Relu);
    assert_eq!(p.output_len(20), Some(16));
    assert_eq!(ConvParams::zeros(2, 5, 3, 2, Activation::Relu).output_len(20), Some(8));
    assert_eq!(p.output_len(4), None);
}

#[test]
fn training_is_deterministic_in_process() {
    let data = series(2, 300, 4);
    for arch in Architecture::ALL {
        let run = || train(&small(arch, 9), &data, &SplitSpec::default(), &opts(3, 9)).unwrap();
        let (fa, ra) = run();
        let (fb, rb) = run();
        assert_eq!(ra.to_canonical_json().unwrap(), rb.to_canonical_json().unwrap(), "{arch}");
        assert_eq!(checkpoint::encode(&fa).unwrap(), checkpoint::encode(&fb).unwrap(), "{arch}");
    }
}

#[test]
fn different_seeds_give_different_models() {
    let data = series(2, 300, 4);
    let (a, _) = train(&small(Architecture::Gru, 1), &data, &SplitSpec::default(), &opts(2, 1)).unwrap();
    let (b, _) = train(&small(Architecture::Gru, 2), &data, &SplitSpec::default(), &opts(2, 2)).unwrap();
    assert_ne!(checkpoint::encode(&a).unwrap(), checkpoint::encode(&b).unwrap());
}

#[test]
fn returned_model_is_the_best_validation_epoch() {
    let data = series(2, 400, 6);
    let o = TrainOptions { lr: 3e-2, patience: 2, ..opts(25, 3) };
    let (f, r) = train(&small(Architecture::Bigru, 3), &data, &SplitSpec::default(), &o).unwrap();
    let min = r.val_nrmse.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(r.val_nrmse[r.best_epoch - 1], min);
    assert_eq!(r.val_nrmse.len(), r.stopped_epoch);
    assert!(r.stopped_epoch == 25 || r.stopped_epoch == r.best_epoch + 2);
    let split = split_dataset(&data, &SplitSpec::default(), 8).unwrap();
    assert_eq!(evaluate_nrmse(&f, &split.val, 3).unwrap().overall, min);
    assert_eq!(evaluate_nrmse(&f, &split.test, 3).unwrap().overall, r.test_nrmse);
}

#[test]
fn forecast_of_fifty_steps() {
    let data = series(2, 300, 4);
    let (f, _) = train(&small(Architecture::ConvBigru, 2), &data, &SplitSpec::default(), &opts(1, 2)).unwrap();
    let window = &data.states()[data.len() - 5..];
    let out = f.predict(window, 50).unwrap();
    assert_eq!(out.len(), 50);
    assert!(out.iter().all(|v| v.dim() == 4 && v.iter().all(|x| x.is_finite())));
}

#[test]
fn constant_series_is_fitted() {
    let state = Vector::from(vec![1.02, 0.98, -0.05, 0.03]);
    let data = StateSeries::new(2, vec![state; 400]).unwrap();
    let mut cfg = ModelConfig::standard(Architecture::Bigru, 4, 4, 5, 2, 1);
    cfg.depth = 1;
    let o = TrainOptions { epochs: 20, batch_size: 8, lr: 1e-2, standardize: false, ..TrainOptions::default() };
    let (f, r) = train(&cfg, &data, &SplitSpec::default(), &o).unwrap();
    assert!(*r.epoch_losses.last().unwrap() < 1e-6, "{:?}", r.epoch_losses);
    for w in r.epoch_losses[3..].windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{:?}", r.epoch_losses);
    }
    let pred = f.predict(&data.states()[..5], 2).unwrap();
    for v in pred {
        for (a, b) in v.iter().zip(data.states()[0].iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}

#[test]
fn gradient_clipping_keeps_training_finite() {
    let data = series(2, 300, 4);
    let o = TrainOptions { clip_norm: Some(1e-3), lr: 0.5, ..opts(2, 1) };
    let (_, r) = train(&small(Architecture::Rnn, 1), &data, &SplitSpec::default(), &o).unwrap();
    assert!(r.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn mismatched_input_dim_is_rejected() {
    let data = series(3, 300, 4);
    let err = train(&small(Architecture::Gru, 1), &data, &SplitSpec::default(), &opts(1, 1)).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err:?}");
}

#[test]
fn short_series_is_rejected() {
    let data = series(2, 30, 4);
    let err = train(&small(Architecture::Gru, 1), &data, &SplitSpec::default(), &opts(1, 1)).unwrap_err();
    assert!(matches!(err, Error::SequenceTooShort { .. }), "{err:?}");
}
