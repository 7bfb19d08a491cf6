//! Recurrent, convolutional, dropout and readout layers with hand-written
//! backward passes.
//!
//! Every step function has a `*_backward` counterpart that takes the gradient
//! of the loss with respect to the step's output, accumulates parameter
//! gradients into a zeroed copy of the parameters, and returns the gradient
//! with respect to the step's inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{Activation, Matrix, Vector};
use crate::params::{with_prefix, ParamTensor, Parameters};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients for a parameter set `P` plus the gradient with respect to the
/// input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<P> {
    pub params: P,
    pub dx: Vec<Vector>,
}

/// A single-step state transition `h_t = f(h_{t-1}, x_t)` with an analytic
/// backward pass.
pub trait RecurrentCell: Parameters {
    type StepCache: Clone + std::fmt::Debug;

    fn input_size(&self) -> usize;
    fn hidden_size(&self) -> usize;

    fn step_cached(&self, h_prev: &[f64], x: &[f64]) -> (Vec<f64>, Self::StepCache);

    /// Accumulates parameter gradients into `grads`, adds the input gradient
    /// into `dx` and returns the gradient with respect to `h_prev`.
    fn step_backward(
        &self,
        cache: &Self::StepCache,
        dh: &[f64],
        grads: &mut Self,
        dx: &mut [f64],
    ) -> Vec<f64>;
}

// ---------------------------------------------------------------------------
// Elman RNN

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    /// hidden → hidden, `n × n`
    pub w: Matrix,
    /// input → hidden, `n × d`
    pub u: Matrix,
    pub b: Vector,
    pub activation: Activation,
}

impl RnnParams {
    pub fn new(w: Matrix, u: Matrix, b: Vector, activation: Activation) -> Result<Self> {
        let n = w.rows();
        check_dim("rnn W columns", n, w.cols())?;
        check_dim("rnn U rows", n, u.rows())?;
        check_dim("rnn bias", n, b.dim())?;
        Ok(RnnParams { w, u, b, activation })
    }

    pub fn zeros(hidden: usize, input: usize, activation: Activation) -> Self {
        RnnParams {
            w: Matrix::zeros(hidden, hidden),
            u: Matrix::zeros(hidden, input),
            b: Vector::zeros(hidden),
            activation,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RnnStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub deriv: Vec<f64>,
}

impl Parameters for RnnParams {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        vec![
            ParamTensor::matrix("W", &self.w),
            ParamTensor::matrix("U", &self.u),
            ParamTensor::vector("b", &self.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_mut_slice(),
            self.u.as_mut_slice(),
            self.b.as_mut_slice(),
        ]
    }
}

impl RecurrentCell for RnnParams {
    type StepCache = RnnStepCache;

    fn input_size(&self) -> usize {
        self.u.cols()
    }

    fn hidden_size(&self) -> usize {
        self.w.rows()
    }

    fn step_cached(&self, h_prev: &[f64], x: &[f64]) -> (Vec<f64>, RnnStepCache) {
        let mut h = self.b.as_slice().to_vec();
        self.w.matvec_acc(h_prev, &mut h);
        self.u.matvec_acc(x, &mut h);
        let mut deriv = vec![0.0; h.len()];
        self.activation.apply_in_place(&mut h, &mut deriv);
        let cache = RnnStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            deriv,
        };
        (h, cache)
    }

    fn step_backward(
        &self,
        cache: &RnnStepCache,
        dh: &[f64],
        grads: &mut Self,
        dx: &mut [f64],
    ) -> Vec<f64> {
        let da: Vec<f64> = dh.iter().zip(&cache.deriv).map(|(g, d)| g * d).collect();
        grads.w.add_outer(&da, &cache.h_prev);
        grads.u.add_outer(&da, &cache.x);
        grads.b.add_assign(&da);
        self.u.t_matvec_acc(&da, dx);
        let mut dh_prev = vec![0.0; self.hidden_size()];
        self.w.t_matvec_acc(&da, &mut dh_prev);
        dh_prev
    }
}

/// `h = φ(W·h_prev + U·x + b)`
pub fn rnn_step(p: &RnnParams, h_prev: &Vector, x: &Vector) -> Result<Vector> {
    check_dim("rnn_step h_prev", p.hidden_size(), h_prev.dim())?;
    check_dim("rnn_step x", p.input_size(), x.dim())?;
    Ok(Vector::from(p.step_cached(h_prev.as_slice(), x.as_slice()).0))
}

// ---------------------------------------------------------------------------
// GRU

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_zx: Matrix,
    pub w_zh: Matrix,
    pub b_z: Vector,
    pub w_rx: Matrix,
    pub w_rh: Matrix,
    pub b_r: Vector,
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub b: Vector,
}

impl GruParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_zx: Matrix::zeros(hidden, input),
            w_zh: Matrix::zeros(hidden, hidden),
            b_z: Vector::zeros(hidden),
            w_rx: Matrix::zeros(hidden, input),
            w_rh: Matrix::zeros(hidden, hidden),
            b_r: Vector::zeros(hidden),
            w_x: Matrix::zeros(hidden, input),
            w_h: Matrix::zeros(hidden, hidden),
            b: Vector::zeros(hidden),
        }
    }

    /// Checks that every tensor agrees with the hidden size of `w_h` and the
    /// input size of `w_x`.
    pub fn validate(&self) -> Result<()> {
        let n = self.w_h.rows();
        let d = self.w_x.cols();
        for m in [&self.w_zx, &self.w_rx, &self.w_x] {
            check_dim("gru input-side rows", n, m.rows())?;
            check_dim("gru input-side cols", d, m.cols())?;
        }
        for m in [&self.w_zh, &self.w_rh, &self.w_h] {
            check_dim("gru hidden-side rows", n, m.rows())?;
            check_dim("gru hidden-side cols", n, m.cols())?;
        }
        for b in [&self.b_z, &self.b_r, &self.b] {
            check_dim("gru bias", n, b.dim())?;
        }
        Ok(())
    }
}

/// Saved activations of one GRU step. `dsig_z`, `dsig_r` and `dtanh` are the
/// activation derivatives at the step's pre-activations.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub h: Vec<f64>,
    pub dsig_z: Vec<f64>,
    pub dsig_r: Vec<f64>,
    pub dtanh: Vec<f64>,
}

impl Parameters for GruParams {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        vec![
            ParamTensor::matrix("W_zx", &self.w_zx),
            ParamTensor::matrix("W_zh", &self.w_zh),
            ParamTensor::vector("b_z", &self.b_z),
            ParamTensor::matrix("W_rx", &self.w_rx),
            ParamTensor::matrix("W_rh", &self.w_rh),
            ParamTensor::vector("b_r", &self.b_r),
            ParamTensor::matrix("W_x", &self.w_x),
            ParamTensor::matrix("W_h", &self.w_h),
            ParamTensor::vector("b", &self.b),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_zx.as_mut_slice(),
            self.w_zh.as_mut_slice(),
            self.b_z.as_mut_slice(),
            self.w_rx.as_mut_slice(),
            self.w_rh.as_mut_slice(),
            self.b_r.as_mut_slice(),
            self.w_x.as_mut_slice(),
            self.w_h.as_mut_slice(),
            self.b.as_mut_slice(),
        ]
    }
}

impl RecurrentCell for GruParams {
    type StepCache = GruStepCache;

    fn input_size(&self) -> usize {
        self.w_x.cols()
    }

    fn hidden_size(&self) -> usize {
        self.w_h.rows()
    }

    fn step_cached(&self, h_prev: &[f64], x: &[f64]) -> (Vec<f64>, GruStepCache) {
        let n = self.hidden_size();

        let mut z = self.b_z.as_slice().to_vec();
        self.w_zx.matvec_acc(x, &mut z);
        self.w_zh.matvec_acc(h_prev, &mut z);
        let mut dsig_z = vec![0.0; n];
        Activation::Sigmoid.apply_in_place(&mut z, &mut dsig_z);

        let mut r = self.b_r.as_slice().to_vec();
        self.w_rx.matvec_acc(x, &mut r);
        self.w_rh.matvec_acc(h_prev, &mut r);
        let mut dsig_r = vec![0.0; n];
        Activation::Sigmoid.apply_in_place(&mut r, &mut dsig_r);

        let reset_h: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let mut h_tilde = self.b.as_slice().to_vec();
        self.w_h.matvec_acc(&reset_h, &mut h_tilde);
        self.w_x.matvec_acc(x, &mut h_tilde);
        let mut dtanh = vec![0.0; n];
        Activation::Tanh.apply_in_place(&mut h_tilde, &mut dtanh);

        let h: Vec<f64> = (0..n)
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * h_tilde[i])
            .collect();

        let cache = GruStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            h_tilde,
            h: h.clone(),
            dsig_z,
            dsig_r,
            dtanh,
        };
        (h, cache)
    }

    fn step_backward(
        &self,
        c: &GruStepCache,
        dh: &[f64],
        grads: &mut Self,
        dx: &mut [f64],
    ) -> Vec<f64> {
        let n = self.hidden_size();

        // candidate path: δ ⊙ z ⊙ dtanh
        let da_h: Vec<f64> = (0..n).map(|i| dh[i] * c.z[i] * c.dtanh[i]).collect();
        // update gate path: δ ⊙ (h̃_t − h_{t−1}) ⊙ dσ_z
        let da_z: Vec<f64> = (0..n)
            .map(|i| dh[i] * (c.h_tilde[i] - c.h_prev[i]) * c.dsig_z[i])
            .collect();

        let reset_h: Vec<f64> = c.r.iter().zip(&c.h_prev).map(|(a, b)| a * b).collect();
        let mut d_reset_h = vec![0.0; n];
        self.w_h.t_matvec_acc(&da_h, &mut d_reset_h);
        // reset gate path: (W_hᵀ da_h) ⊙ h_{t−1} ⊙ dσ_r
        let da_r: Vec<f64> = (0..n)
            .map(|i| d_reset_h[i] * c.h_prev[i] * c.dsig_r[i])
            .collect();

        grads.w_x.add_outer(&da_h, &c.x);
        grads.w_h.add_outer(&da_h, &reset_h);
        grads.b.add_assign(&da_h);
        grads.w_rx.add_outer(&da_r, &c.x);
        grads.w_rh.add_outer(&da_r, &c.h_prev);
        grads.b_r.add_assign(&da_r);
        grads.w_zx.add_outer(&da_z, &c.x);
        grads.w_zh.add_outer(&da_z, &c.h_prev);
        grads.b_z.add_assign(&da_z);

        self.w_rx.t_matvec_acc(&da_r, dx);
        self.w_x.t_matvec_acc(&da_h, dx);
        self.w_zx.t_matvec_acc(&da_z, dx);

        let mut dh_prev: Vec<f64> = (0..n)
            .map(|i| d_reset_h[i] * c.r[i] + dh[i] * (1.0 - c.z[i]))
            .collect();
        self.w_rh.t_matvec_acc(&da_r, &mut dh_prev);
        self.w_zh.t_matvec_acc(&da_z, &mut dh_prev);
        dh_prev
    }
}

/// One GRU transition; returns the new hidden state and everything the
/// backward pass needs.
pub fn gru_step(p: &GruParams, h_prev: &Vector, x: &Vector) -> Result<(Vector, GruStepCache)> {
    check_dim("gru_step h_prev", p.hidden_size(), h_prev.dim())?;
    check_dim("gru_step x", p.input_size(), x.dim())?;
    let (h, cache) = p.step_cached(h_prev.as_slice(), x.as_slice());
    Ok((Vector::from(h), cache))
}

// ---------------------------------------------------------------------------
// Readout

/// `o = W_fwd·h_fwd (+ W_bwd·h_bwd) + b`
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutParams {
    pub w_fwd: Matrix,
    pub w_bwd: Option<Matrix>,
    pub b: Vector,
}

impl ReadoutParams {
    pub fn zeros(out: usize, hidden: usize, bidirectional: bool) -> Self {
        ReadoutParams {
            w_fwd: Matrix::zeros(out, hidden),
            w_bwd: bidirectional.then(|| Matrix::zeros(out, hidden)),
            b: Vector::zeros(out),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.b.dim()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_fwd.cols()
    }

    pub fn is_bidirectional(&self) -> bool {
        self.w_bwd.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("readout rows", self.b.dim(), self.w_fwd.rows())?;
        if let Some(w) = &self.w_bwd {
            check_dim("readout backward rows", self.b.dim(), w.rows())?;
            check_dim("readout backward cols", self.w_fwd.cols(), w.cols())?;
        }
        Ok(())
    }

    pub(crate) fn apply(&self, h_fwd: &[f64], h_bwd: Option<&[f64]>) -> Vec<f64> {
        let mut o = self.b.as_slice().to_vec();
        self.w_fwd.matvec_acc(h_fwd, &mut o);
        if let (Some(w), Some(h)) = (&self.w_bwd, h_bwd) {
            w.matvec_acc(h, &mut o);
        }
        o
    }

    /// Accumulates readout gradients and adds `W_fwdᵀ·dy` / `W_bwdᵀ·dy` into
    /// the hidden-state gradients.
    pub(crate) fn backward(
        &self,
        dy: &[f64],
        h_fwd: &[f64],
        h_bwd: Option<&[f64]>,
        grads: &mut ReadoutParams,
        dh_fwd: &mut [f64],
        dh_bwd: Option<&mut [f64]>,
    ) {
        grads.w_fwd.add_outer(dy, h_fwd);
        grads.b.add_assign(dy);
        self.w_fwd.t_matvec_acc(dy, dh_fwd);
        if let (Some(w), Some(gw), Some(h), Some(dh)) =
            (&self.w_bwd, grads.w_bwd.as_mut(), h_bwd, dh_bwd)
        {
            gw.add_outer(dy, h);
            w.t_matvec_acc(dy, dh);
        }
    }
}

impl Parameters for ReadoutParams {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        let mut t = vec![ParamTensor::matrix("W_ofwd", &self.w_fwd)];
        if let Some(w) = &self.w_bwd {
            t.push(ParamTensor::matrix("W_obwd", w));
        }
        t.push(ParamTensor::vector("b_o", &self.b));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = vec![self.w_fwd.as_mut_slice()];
        if let Some(w) = &mut self.w_bwd {
            t.push(w.as_mut_slice());
        }
        t.push(self.b.as_mut_slice());
        t
    }
}

impl<A: Parameters, B: Parameters> Parameters for (A, B) {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        let mut t = with_prefix("0", self.0.tensors());
        t.extend(with_prefix("1", self.1.tensors()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.0.tensors_mut();
        t.extend(self.1.tensors_mut());
        t
    }
}

impl<A: Parameters, B: Parameters, C: Parameters> Parameters for (A, B, C) {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        let mut t = with_prefix("0", self.0.tensors());
        t.extend(with_prefix("1", self.1.tensors()));
        t.extend(with_prefix("2", self.2.tensors()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.0.tensors_mut();
        t.extend(self.1.tensors_mut());
        t.extend(self.2.tensors_mut());
        t
    }
}

// ---------------------------------------------------------------------------
// Sequence scans

/// Runs `cell` over `xs` from a zero state. Hidden states come back in time
/// order; caches in processing order (reversed when `reverse`).
pub(crate) fn scan<C: RecurrentCell>(
    cell: &C,
    xs: &[Vec<f64>],
    reverse: bool,
) -> (Vec<Vec<f64>>, Vec<C::StepCache>) {
    let t_len = xs.len();
    let mut h = vec![0.0; cell.hidden_size()];
    let mut hs = vec![Vec::new(); t_len];
    let mut caches = Vec::with_capacity(t_len);
    for p in 0..t_len {
        let t = if reverse { t_len - 1 - p } else { p };
        let (next, cache) = cell.step_cached(&h, &xs[t]);
        hs[t] = next.clone();
        caches.push(cache);
        h = next;
    }
    (hs, caches)
}

/// Backpropagation through time for [`scan`]. `dh_out[t]` is the loss
/// gradient on the hidden state emitted at time `t` (empty slices count as
/// zero); `d_final` is an extra gradient on the last processed state.
pub(crate) fn scan_backward<C: RecurrentCell>(
    cell: &C,
    caches: &[C::StepCache],
    dh_out: &[Vec<f64>],
    d_final: Option<&[f64]>,
    reverse: bool,
    grads: &mut C,
) -> Vec<Vec<f64>> {
    let t_len = caches.len();
    let n = cell.hidden_size();
    let mut dxs = vec![vec![0.0; cell.input_size()]; t_len];
    let mut carry = vec![0.0; n];
    if let Some(df) = d_final {
        carry.copy_from_slice(df);
    }
    for p in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - p } else { p };
        if let Some(d) = dh_out.get(t).filter(|d| !d.is_empty()) {
            for (c, g) in carry.iter_mut().zip(d) {
                *c += g;
            }
        }
        carry = cell.step_backward(&caches[p], &carry, grads, &mut dxs[t]);
    }
    dxs
}

fn to_rows(xs: &[Vector]) -> Vec<Vec<f64>> {
    xs.iter().map(|v| v.as_slice().to_vec()).collect()
}

fn check_sequence(context: &'static str, xs: &[Vector], dim: usize) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptySequence(context));
    }
    xs.iter().try_for_each(|x| check_dim(context, dim, x.dim()))
}

/// Cache of a unidirectional GRU pass with per-step readout.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub steps: Vec<GruStepCache>,
    pub outputs: Vec<Vector>,
}

/// GRU over `xs` from `h_0 = 0`, emitting `ŷ_t = W_oh·h_t + b_o` each step.
pub fn gru_forward(
    p: &GruParams,
    ro: &ReadoutParams,
    xs: &[Vector],
) -> Result<(Vec<Vector>, GruCache)> {
    p.validate()?;
    ro.validate()?;
    check_dim("gru readout width", p.hidden_size(), ro.hidden_size())?;
    check_sequence("gru_forward", xs, p.input_size())?;
    let (hs, steps) = scan(p, &to_rows(xs), false);
    let outputs: Vec<Vector> = hs
        .iter()
        .map(|h| Vector::from(ro.apply(h, None)))
        .collect();
    Ok((
        outputs.clone(),
        GruCache { steps, outputs },
    ))
}

fn residuals(outputs: &[Vector], targets: &[Vector]) -> Result<Vec<Vec<f64>>> {
    check_dim("targets length", outputs.len(), targets.len())?;
    outputs
        .iter()
        .zip(targets)
        .map(|(o, y)| {
            check_dim("target dim", o.dim(), y.dim())?;
            Ok(o.iter().zip(y.iter()).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Gradients of `Σ_t ½‖y_t − ŷ_t‖²` for a [`gru_forward`] pass.
pub fn gru_backward(
    p: &GruParams,
    ro: &ReadoutParams,
    cache: &GruCache,
    targets: &[Vector],
) -> Result<GradSet<(GruParams, ReadoutParams)>> {
    if cache.steps.len() != cache.outputs.len()
        || cache
            .steps
            .first()
            .is_some_and(|s| s.h.len() != p.hidden_size() || s.x.len() != p.input_size())
    {
        return Err(Error::Layout("GRU cache does not match parameters".into()));
    }
    let dys = residuals(&cache.outputs, targets)?;
    let mut g_ro = ro.zeroed();
    let dh_out: Vec<Vec<f64>> = dys
        .iter()
        .zip(&cache.steps)
        .map(|(dy, s)| {
            let mut dh = vec![0.0; p.hidden_size()];
            ro.backward(dy, &s.h, None, &mut g_ro, &mut dh, None);
            dh
        })
        .collect();
    let mut g = p.zeroed();
    let dx = scan_backward(p, &cache.steps, &dh_out, None, false, &mut g);
    Ok(GradSet {
        params: (g, g_ro),
        dx: dx.into_iter().map(Vector::from).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct BiGruCache {
    /// Forward-direction steps, `t = 1..T`.
    pub fwd: Vec<GruStepCache>,
    /// Backward-direction steps in processing order, `t = T..1`.
    pub bwd: Vec<GruStepCache>,
    pub h_fwd: Vec<Vec<f64>>,
    /// Backward-direction hidden states indexed by time.
    pub h_bwd: Vec<Vec<f64>>,
    pub outputs: Vec<Vector>,
}

/// Two independent GRU scans in opposite directions combined by a linear
/// readout: `o_t = W_ofwd·h→_t + W_obwd·h←_t + b_o`.
pub fn bigru_forward(
    fwd: &GruParams,
    bwd: &GruParams,
    ro: &ReadoutParams,
    xs: &[Vector],
) -> Result<(Vec<Vector>, BiGruCache)> {
    fwd.validate()?;
    bwd.validate()?;
    ro.validate()?;
    if !ro.is_bidirectional() {
        return Err(Error::Layout("BiGRU needs a two-sided readout".into()));
    }
    check_dim("bigru input sizes", fwd.input_size(), bwd.input_size())?;
    check_dim("bigru hidden sizes", fwd.hidden_size(), bwd.hidden_size())?;
    check_dim("bigru readout width", fwd.hidden_size(), ro.hidden_size())?;
    check_sequence("bigru_forward", xs, fwd.input_size())?;

    let rows = to_rows(xs);
    let (h_fwd, c_fwd) = scan(fwd, &rows, false);
    let (h_bwd, c_bwd) = scan(bwd, &rows, true);
    let outputs: Vec<Vector> = h_fwd
        .iter()
        .zip(&h_bwd)
        .map(|(hf, hb)| Vector::from(ro.apply(hf, Some(hb))))
        .collect();
    Ok((
        outputs.clone(),
        BiGruCache {
            fwd: c_fwd,
            bwd: c_bwd,
            h_fwd,
            h_bwd,
            outputs,
        },
    ))
}

/// Gradients of `Σ_t ½‖y_t − o_t‖²` for a [`bigru_forward`] pass, returned as
/// (forward cell, backward cell, readout).
pub fn bigru_backward(
    fwd: &GruParams,
    bwd: &GruParams,
    ro: &ReadoutParams,
    cache: &BiGruCache,
    targets: &[Vector],
) -> Result<GradSet<(GruParams, GruParams, ReadoutParams)>> {
    let t_len = cache.outputs.len();
    if cache.fwd.len() != t_len
        || cache.bwd.len() != t_len
        || cache
            .fwd
            .first()
            .is_some_and(|s| s.h.len() != fwd.hidden_size() || s.x.len() != fwd.input_size())
    {
        return Err(Error::Layout("BiGRU cache does not match parameters".into()));
    }
    let dys = residuals(&cache.outputs, targets)?;
    let n = fwd.hidden_size();
    let mut g_ro = ro.zeroed();
    let mut dh_f = vec![vec![0.0; n]; t_len];
    let mut dh_b = vec![vec![0.0; n]; t_len];
    for t in 0..t_len {
        ro.backward(
            &dys[t],
            &cache.h_fwd[t],
            Some(&cache.h_bwd[t]),
            &mut g_ro,
            &mut dh_f[t],
            Some(&mut dh_b[t]),
        );
    }
    let mut g_f = fwd.zeroed();
    let mut g_b = bwd.zeroed();
    let dx_f = scan_backward(fwd, &cache.fwd, &dh_f, None, false, &mut g_f);
    let dx_b = scan_backward(bwd, &cache.bwd, &dh_b, None, true, &mut g_b);
    let dx = dx_f
        .into_iter()
        .zip(dx_b)
        .map(|(a, b)| Vector::from(a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>()))
        .collect();
    Ok(GradSet {
        params: (g_f, g_b, g_ro),
        dx,
    })
}

// ---------------------------------------------------------------------------
// Conv1D

/// `F` filters of `kernel` taps over `in_dim` channels. Row `f` of `filters`
/// stores tap-major weights: entry `τ·in_dim + c` multiplies `x[t+τ][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub filters: Matrix,
    pub bias: Vector,
    pub kernel: usize,
    pub in_dim: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl ConvParams {
    pub fn new(
        filters: Matrix,
        bias: Vector,
        kernel: usize,
        in_dim: usize,
        stride: usize,
        activation: Activation,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("kernel and stride must be at least 1".into()));
        }
        check_dim("conv filter width", kernel * in_dim, filters.cols())?;
        check_dim("conv bias", filters.rows(), bias.dim())?;
        Ok(ConvParams {
            filters,
            bias,
            kernel,
            in_dim,
            stride,
            activation,
        })
    }

    pub fn zeros(filters: usize, kernel: usize, in_dim: usize, stride: usize, activation: Activation) -> Self {
        ConvParams {
            filters: Matrix::zeros(filters, kernel * in_dim),
            bias: Vector::zeros(filters),
            kernel,
            in_dim,
            stride,
            activation,
        }
    }

    pub fn filter_count(&self) -> usize {
        self.filters.rows()
    }

    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        (input_len >= self.kernel).then(|| (input_len - self.kernel) / self.stride + 1)
    }

    /// One output position from a flattened window of `kernel` inputs.
    pub(crate) fn window_forward(&self, window: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut out = self.bias.as_slice().to_vec();
        self.filters.matvec_acc(window, &mut out);
        let mut deriv = vec![0.0; out.len()];
        self.activation.apply_in_place(&mut out, &mut deriv);
        (out, deriv)
    }

    pub(crate) fn window_backward(
        &self,
        window: &[f64],
        deriv: &[f64],
        d_out: &[f64],
        grads: &mut ConvParams,
        d_window: &mut [f64],
    ) {
        let da: Vec<f64> = d_out.iter().zip(deriv).map(|(g, d)| g * d).collect();
        grads.filters.add_outer(&da, window);
        grads.bias.add_assign(&da);
        self.filters.t_matvec_acc(&da, d_window);
    }
}

impl Parameters for ConvParams {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        vec![
            ParamTensor::matrix("filters", &self.filters),
            ParamTensor::vector("bias", &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.filters.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: Vec<Vec<f64>>,
    pub deriv: Vec<Vec<f64>>,
}

fn window_at(input: &[Vec<f64>], start: usize, kernel: usize) -> Vec<f64> {
    input[start..start + kernel].concat()
}

/// Valid (unpadded) correlation with the same filters at every position:
/// `out_t[f] = φ(Σ_τ ω_f[τ]·x[t·stride + τ] + b_f)`.
pub fn conv1d_forward(p: &ConvParams, xs: &[Vector]) -> Result<(Vec<Vector>, ConvCache)> {
    check_sequence("conv1d_forward", xs, p.in_dim)?;
    let out_len = p.output_len(xs.len()).ok_or(Error::SequenceTooShort {
        needed: p.kernel,
        got: xs.len(),
    })?;
    let input = to_rows(xs);
    let mut outputs = Vec::with_capacity(out_len);
    let mut deriv = Vec::with_capacity(out_len);
    for t in 0..out_len {
        let (o, d) = p.window_forward(&window_at(&input, t * p.stride, p.kernel));
        outputs.push(Vector::from(o));
        deriv.push(d);
    }
    Ok((outputs, ConvCache { input, deriv }))
}

/// Filter, bias and input gradients given `d_out`, the loss gradient on each
/// output position. Filter gradients sum over all positions.
pub fn conv1d_backward(
    p: &ConvParams,
    cache: &ConvCache,
    d_out: &[Vector],
) -> Result<GradSet<ConvParams>> {
    check_dim("conv1d_backward positions", cache.deriv.len(), d_out.len())?;
    let mut grads = p.zeroed();
    let mut dx = vec![vec![0.0; p.in_dim]; cache.input.len()];
    let width = p.kernel * p.in_dim;
    for (t, (g, deriv)) in d_out.iter().zip(&cache.deriv).enumerate() {
        check_dim("conv1d_backward filters", p.filter_count(), g.dim())?;
        let start = t * p.stride;
        let window = window_at(&cache.input, start, p.kernel);
        let mut d_window = vec![0.0; width];
        p.window_backward(&window, deriv, g.as_slice(), &mut grads, &mut d_window);
        for (tau, chunk) in d_window.chunks_exact(p.in_dim).enumerate() {
            for (a, b) in dx[start + tau].iter_mut().zip(chunk) {
                *a += b;
            }
        }
    }
    Ok(GradSet {
        params: grads,
        dx: dx.into_iter().map(Vector::from).collect(),
    })
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 − rate)`.
pub fn dropout_mask(dim: usize, rate: f64, seed: u64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    if rate == 0.0 {
        return vec![1.0; dim];
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = seeded(seed);
    (0..dim)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn dropout_apply(v: &Vector, rate: f64, seed: u64, mode: Mode) -> Vector {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    match mode {
        Mode::Eval => v.clone(),
        Mode::Train if rate == 0.0 => v.clone(),
        Mode::Train => {
            let mask = dropout_mask(v.dim(), rate, seed);
            Vector::from(v.iter().zip(&mask).map(|(a, m)| a * m).collect::<Vec<_>>())
        }
    }
}
