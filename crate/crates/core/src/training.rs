//! Least-squares objective, Adam, chronological splitting, sliding-window
//! supervision, the training loop with early stopping, and the
//! finite-difference gradient checker.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::Mode;
use crate::error::{check_dim, Error, Result};
use crate::linalg::Vector;
use crate::measurement::StateSeries;
use crate::metrics::{evaluate_nrmse, Predictor};
use crate::model::{build_model, Model, ModelConfig};
use crate::params::Parameters;
use crate::rng::{derive_seed, seeded};
use crate::scaling::Standardizer;

/// `Σ_t Σ_i ½ (y_t[i] − ŷ_t[i])²`
pub fn least_squares_loss(targets: &[Vector], predictions: &[Vector]) -> Result<f64> {
    check_dim("loss sequence length", targets.len(), predictions.len())?;
    let mut total = 0.0;
    for (y, p) in targets.iter().zip(predictions) {
        check_dim("loss vector dim", y.dim(), p.dim())?;
        total += y
            .iter()
            .zip(p.iter())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new<P: Parameters>(params: &P, lr: f64) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let grads = grads.tensors();
    let params = params.tensors_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Layout("Adam state, parameters and gradients disagree".into()));
    }
    for ((p, g), m) in params.iter().zip(&grads).zip(&state.m) {
        check_dim("adam tensor", p.len(), g.data.len())?;
        check_dim("adam moment", p.len(), m.len())?;
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.75,
            val_frac: 0.05,
            test_frac: 0.20,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Config(format!("split fractions must be positive, got {fr:?}")));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("split fractions must sum to 1, got {fr:?}")));
        }
        Ok(())
    }

    /// Segment lengths for a series of `total` steps; boundaries are floored
    /// and the test segment takes the remainder.
    pub fn lengths(&self, total: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((total as f64) * f + 1e-9).floor() as usize;
        let train = floor(self.train_frac).min(total);
        let val = floor(self.val_frac).min(total - train);
        (train, val, total - train - val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: StateSeries,
    pub val: StateSeries,
    pub test: StateSeries,
}

/// Contiguous chronological split; each segment must hold at least
/// `min_len` steps.
pub fn split_dataset(series: &StateSeries, spec: &SplitSpec, min_len: usize) -> Result<Split> {
    spec.validate()?;
    let (tr, va, te) = spec.lengths(series.len());
    if let Some(&short) = [tr, va, te].iter().filter(|&&n| n < min_len.max(1)).min() {
        return Err(Error::SequenceTooShort {
            needed: min_len.max(1),
            got: short,
        });
    }
    Ok(Split {
        train: series.slice(0..tr),
        val: series.slice(tr..tr + va),
        test: series.slice(tr + va..series.len()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub start: usize,
    pub window: Vec<Vector>,
    pub target: Vec<Vector>,
}

/// One example per start index `s`: window `states[s..s+l]`, target
/// `states[s+l..s+l+horizon]`.
pub fn make_examples(states: &[Vector], seq_len: usize, horizon: usize) -> Result<Vec<Example>> {
    let needed = seq_len + horizon;
    if seq_len == 0 || horizon == 0 {
        return Err(Error::Config("seq_len and horizon must be at least 1".into()));
    }
    if states.len() < needed {
        return Err(Error::SequenceTooShort {
            needed,
            got: states.len(),
        });
    }
    Ok((0..=states.len() - needed)
        .map(|s| Example {
            start: s,
            window: states[s..s + seq_len].to_vec(),
            target: states[s + seq_len..s + needed].to_vec(),
        })
        .collect())
}

/// A trained model together with the standardisation of its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecaster {
    pub model: Model,
    pub scaler: Standardizer,
}

impl Predictor for Forecaster {
    fn seq_len(&self) -> usize {
        self.model.config().seq_len
    }

    fn predict(&self, window: &[Vector], horizon: usize) -> Result<Vec<Vector>> {
        let scaled: Vec<Vector> = window.iter().map(|v| self.scaler.transform(v)).collect();
        Ok(self
            .model
            .forecast(&scaled, horizon, Mode::Eval, 0)?
            .iter()
            .map(|v| self.scaler.inverse(v))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    /// Rescale the batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    pub standardize: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            patience: 10,
            seed: 0,
            clip_norm: None,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub architecture: String,
    pub epoch_losses: Vec<f64>,
    pub val_nrmse: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub test_nrmse: f64,
    pub seed: u64,
    pub param_count: usize,
    /// Not part of the canonical report; see [`TrainReport::to_canonical_json`].
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    /// Canonical JSON of everything except wall-clock time, so identical runs
    /// serialise to identical bytes.
    pub fn to_canonical_json(&self) -> Result<String> {
        crate::json::to_canonical_json(self)
    }
}

fn batch_gradient(
    model: &Model,
    examples: &[Example],
    batch: &[usize],
    seed: u64,
    epoch: usize,
) -> Result<(f64, Model)> {
    let per_example: Vec<Result<(f64, Model)>> = batch
        .par_iter()
        .map(|&i| {
            let ex = &examples[i];
            let s = derive_seed(seed, &[epoch as u64, i as u64]);
            model
                .loss_and_gradient(&ex.window, &ex.target, Mode::Train, s)
                .map(|(loss, g)| (loss, g.params))
        })
        .collect();
    let mut total = model.zeroed();
    let mut loss_sum = 0.0;
    for r in per_example {
        let (loss, g) = r?;
        loss_sum += loss;
        total.accumulate(&g);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((loss_sum, total))
}

/// Trains with mini-batch Adam and patience-based early stopping on the
/// validation NRMSE, restoring the best-validation parameters.
pub fn train(
    cfg: &ModelConfig,
    data: &StateSeries,
    spec: &SplitSpec,
    opts: &TrainOptions,
) -> Result<(Forecaster, TrainReport)> {
    let clock = Instant::now();
    cfg.validate()?;
    check_dim("model input_dim vs data state dim", cfg.input_dim, data.state_dim())?;
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", opts.lr)));
    }
    let split = split_dataset(data, spec, cfg.seq_len + cfg.horizon)?;
    let scaler = if opts.standardize {
        Standardizer::fit(split.train.states())?
    } else {
        Standardizer::identity(cfg.input_dim)
    };
    let scaled_train: Vec<Vector> = split.train.states().iter().map(|v| scaler.transform(v)).collect();
    let examples = make_examples(&scaled_train, cfg.seq_len, cfg.horizon)?;

    let mut current = Forecaster {
        model: build_model(cfg)?,
        scaler,
    };
    let mut adam = AdamState::new(&current.model, opts.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut val_trace = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0;
    let mut stopped_epoch = 0;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut seeded(derive_seed(opts.seed, &[u64::MAX, epoch as u64])));
        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let (loss, mut grad) = batch_gradient(&current.model, &examples, batch, opts.seed, epoch)?;
            loss_sum += loss;
            if let Some(max_norm) = opts.clip_norm {
                let norm = grad.squared_norm().sqrt();
                if norm > max_norm {
                    grad.scale(max_norm / norm);
                }
            }
            adam_step(&mut current.model, &grad, &mut adam)?;
        }
        let mean_loss = loss_sum / examples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        epoch_losses.push(mean_loss);

        let val = evaluate_nrmse(&current, &split.val, cfg.horizon)?.overall;
        val_trace.push(val);
        stopped_epoch = epoch;
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, epoch, current.model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= opts.patience {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, model)) => {
            current.model = model;
            epoch
        }
        None => 0,
    };
    let test_nrmse = evaluate_nrmse(&current, &split.test, cfg.horizon)?.overall;
    let report = TrainReport {
        architecture: cfg.architecture.name().to_string(),
        epoch_losses,
        val_nrmse: val_trace,
        best_epoch,
        stopped_epoch,
        test_nrmse,
        seed: opts.seed,
        param_count: current.model.param_count(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    };
    Ok((current, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    /// Name of the parameter tensor holding the worst entry.
    pub worst_tensor: String,
    pub trials: usize,
    pub params_checked: usize,
}

/// `L(ŷ⁺) − L(ŷ⁻)` for the least-squares loss, factored per entry as
/// `(ŷ⁺ − ŷ⁻)(½(ŷ⁺ + ŷ⁻) − y)` so nearly equal losses do not cancel.
fn loss_difference(targets: &[Vector], plus: &[Vector], minus: &[Vector]) -> f64 {
    let mut total = 0.0;
    for ((y, p), m) in targets.iter().zip(plus).zip(minus) {
        for ((yi, pi), mi) in y.iter().zip(p.iter()).zip(m.iter()) {
            total += (pi - mi) * (0.5 * (pi + mi) - yi);
        }
    }
    total
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference stencil used by [`gradcheck_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(L(θ+h) − L(θ−h)) / 2h`
    TwoPoint,
    /// `(8(L(θ+h) − L(θ−h)) − (L(θ+2h) − L(θ−2h))) / 12h`, fourth-order
    /// accurate; tolerates a larger step and so less roundoff.
    FourPoint,
}

/// Compares analytic gradients of the least-squares loss with two-point
/// central differences for every scalar parameter, over `trials` random
/// models and examples (training mode, fixed dropout masks).
pub fn gradcheck(cfg: &ModelConfig, step: f64, trials: usize, seed: u64) -> Result<GradcheckReport> {
    gradcheck_with(cfg, step, trials, seed, Stencil::TwoPoint)
}

pub fn gradcheck_with(
    cfg: &ModelConfig,
    step: f64,
    trials: usize,
    seed: u64,
    stencil: Stencil,
) -> Result<GradcheckReport> {
    cfg.validate()?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut worst = 0.0;
    let mut worst_tensor = String::new();
    let mut checked = 0;
    for trial in 0..trials {
        let trial_seed = derive_seed(seed, &[trial as u64]);
        let mut trial_cfg = cfg.clone();
        trial_cfg.seed = trial_seed;
        let mut model = build_model(&trial_cfg)?;
        let mut rng = seeded(derive_seed(trial_seed, &[1]));
        // non-zero biases so their gradients are exercised away from zero
        for t in model.tensors_mut() {
            if t.iter().all(|&v| v == 0.0) {
                t.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
        let mut random_seq = |len: usize| -> Vec<Vector> {
            (0..len)
                .map(|_| Vector::from((0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                .collect()
        };
        let window = random_seq(cfg.seq_len);
        let targets = random_seq(cfg.horizon);
        let mask_seed = derive_seed(trial_seed, &[2]);

        let (_, analytic) = model.loss_and_gradient(&window, &targets, Mode::Train, mask_seed)?;
        let analytic = analytic.params;
        let names: Vec<String> = analytic.tensors().iter().map(|t| t.name.clone()).collect();
        let analytic_flat: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();

        let outputs_at = |m: &Model| -> Result<Vec<Vector>> {
            let teacher = cfg.teacher_forcing.then_some(targets.as_slice());
            Ok(m.forward(&window, targets.len(), Mode::Train, mask_seed, teacher)?
                .outputs()
                .to_vec())
        };
        let sizes: Vec<usize> = analytic_flat.iter().map(Vec::len).collect();
        for (ti, &size) in sizes.iter().enumerate() {
            for i in 0..size {
                let mut symmetric_difference = |h: f64| -> Result<f64> {
                    let original = model.tensors_mut()[ti][i];
                    model.tensors_mut()[ti][i] = original + h;
                    let plus = outputs_at(&model)?;
                    model.tensors_mut()[ti][i] = original - h;
                    let minus = outputs_at(&model)?;
                    model.tensors_mut()[ti][i] = original;
                    Ok(loss_difference(&targets, &plus, &minus))
                };
                let numeric = match stencil {
                    Stencil::TwoPoint => symmetric_difference(step)? / (2.0 * step),
                    Stencil::FourPoint => {
                        let mut h = step;
                        loop {
                            let near = symmetric_difference(h)? / (2.0 * h);
                            let far = symmetric_difference(2.0 * h)? / (4.0 * h);
                            // On smooth stretches the two estimates agree to
                            // O(h²); a gross disagreement means a ReLU kink
                            // lies inside the stencil, so shrink it.
                            let kinked = (near - far).abs() > 1e-3 * near.abs().max(far.abs()).max(1e-6);
                            if !kinked || h < step * 1e-3 {
                                break (4.0 * near - far) / 3.0;
                            }
                            h /= 10.0;
                        }
                    }
                };
                let err = relative_error(analytic_flat[ti][i], numeric);
                checked += 1;
                if err > worst || worst_tensor.is_empty() {
                    worst = err;
                    worst_tensor = names[ti].clone();
                }
            }
        }
    }
    Ok(GradcheckReport {
        max_relative_error: worst,
        worst_tensor,
        trials,
        params_checked: checked,
    })
}
