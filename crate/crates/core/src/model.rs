//! Encoder-decoder forecaster.
//!
//! The encoder runs an optional Conv1D front end followed by `depth` stacked
//! recurrent layers over the input window. The decoder continues the same
//! stack forward in time: each layer starts from the encoder's final state
//! for that layer (for BiGRU layers the sum of the final forward state and
//! the backward state at the first step) and the forward-direction cell is
//! stepped autoregressively, fed the previous prediction. The first decoder
//! input is the last window state.
//!
//! Between stacked layers the sequences are passed directly (BiGRU layers
//! emit `h→_t + h←_t`), with inverted dropout on those connections in
//! training mode. The readout is only applied to the top decoder state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{
    scan, scan_backward, ConvParams, GradSet, GruParams, GruStepCache, Mode, ReadoutParams,
    RecurrentCell, RnnParams, RnnStepCache,
};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{Activation, Vector};
use crate::params::{with_prefix, ParamTensor, Parameters};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Rnn,
    Gru,
    Bigru,
    ConvBigru,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Rnn,
        Architecture::Gru,
        Architecture::Bigru,
        Architecture::ConvBigru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Rnn => "rnn",
            Architecture::Gru => "gru",
            Architecture::Bigru => "bigru",
            Architecture::ConvBigru => "conv_bigru",
        }
    }

    fn is_bidirectional(self) -> bool {
        matches!(self, Architecture::Bigru | Architecture::ConvBigru)
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

fn default_rnn_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// State dimension `2K`; also the output dimension of each forecast step.
    pub input_dim: usize,
    pub hidden_size: usize,
    /// Number of recurrent layers (the Conv1D front end is not counted).
    pub depth: usize,
    pub seq_len: usize,
    pub horizon: usize,
    #[serde(default)]
    pub conv: Option<ConvSpec>,
    pub dropout_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub teacher_forcing: bool,
    #[serde(default = "default_rnn_activation")]
    pub rnn_activation: Activation,
}

impl ModelConfig {
    /// Three recurrent layers, 5% dropout; Conv1D front end with 64 filters
    /// of width 5 and stride 1 for `conv_bigru`.
    pub fn standard(architecture: Architecture, input_dim: usize, hidden_size: usize, seq_len: usize, horizon: usize, seed: u64) -> Self {
        ModelConfig {
            architecture,
            input_dim,
            hidden_size,
            depth: 3,
            seq_len,
            horizon,
            conv: (architecture == Architecture::ConvBigru).then_some(ConvSpec {
                filters: 64,
                kernel: 5,
                stride: 1,
            }),
            dropout_rate: 0.05,
            seed,
            teacher_forcing: false,
            rnn_activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.hidden_size == 0 {
            return bad("input_dim and hidden_size must be positive".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.seq_len == 0 || self.horizon == 0 {
            return bad("seq_len and horizon must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        match (self.architecture, &self.conv) {
            (Architecture::ConvBigru, None) => {
                return bad("conv_bigru requires a conv spec".into());
            }
            (Architecture::ConvBigru, Some(c)) => {
                if c.filters == 0 || c.kernel == 0 || c.stride == 0 {
                    return bad("conv filters, kernel and stride must be at least 1".into());
                }
                if self.seq_len < c.kernel {
                    return bad(format!(
                        "seq_len {} is shorter than the conv kernel {}",
                        self.seq_len, c.kernel
                    ));
                }
            }
            (arch, Some(_)) => {
                return bad(format!("architecture {arch} takes no conv front end"));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecurrentLayer {
    Rnn(RnnParams),
    Gru(GruParams),
    BiGru { fwd: GruParams, bwd: GruParams },
}

impl RecurrentLayer {
    fn input_size(&self) -> usize {
        match self {
            RecurrentLayer::Rnn(p) => p.input_size(),
            RecurrentLayer::Gru(p) => p.input_size(),
            RecurrentLayer::BiGru { fwd, .. } => fwd.input_size(),
        }
    }
}

impl Parameters for RecurrentLayer {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        match self {
            RecurrentLayer::Rnn(p) => p.tensors(),
            RecurrentLayer::Gru(p) => p.tensors(),
            RecurrentLayer::BiGru { fwd, bwd } => {
                let mut t = with_prefix("fwd", fwd.tensors());
                t.extend(with_prefix("bwd", bwd.tensors()));
                t
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            RecurrentLayer::Rnn(p) => p.tensors_mut(),
            RecurrentLayer::Gru(p) => p.tensors_mut(),
            RecurrentLayer::BiGru { fwd, bwd } => {
                let mut t = fwd.tensors_mut();
                t.extend(bwd.tensors_mut());
                t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub conv: Option<ConvParams>,
    pub layers: Vec<RecurrentLayer>,
    pub readout: ReadoutParams,
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<ParamTensor<'_>> {
        let mut t = Vec::new();
        if let Some(c) = &self.conv {
            t.extend(with_prefix("conv", c.tensors()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            t.extend(with_prefix(&format!("layer{i}"), l.tensors()));
        }
        t.extend(with_prefix("readout", self.readout.tensors()));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = Vec::new();
        if let Some(c) = &mut self.conv {
            t.extend(c.tensors_mut());
        }
        for l in &mut self.layers {
            t.extend(l.tensors_mut());
        }
        t.extend(self.readout.tensors_mut());
        t
    }
}

/// Builds a model with all weights zero; see [`build_model`] for the
/// initialised version.
fn zero_model(cfg: &ModelConfig) -> Model {
    let n = cfg.hidden_size;
    let conv = cfg.conv.map(|c| {
        ConvParams::zeros(c.filters, c.kernel, cfg.input_dim, c.stride, Activation::Relu)
    });
    let first_input = conv.as_ref().map_or(cfg.input_dim, |c| c.filter_count());
    let layers = (0..cfg.depth)
        .map(|i| {
            let d = if i == 0 { first_input } else { n };
            match cfg.architecture {
                Architecture::Rnn => RecurrentLayer::Rnn(RnnParams::zeros(n, d, cfg.rnn_activation)),
                Architecture::Gru => RecurrentLayer::Gru(GruParams::zeros(n, d)),
                Architecture::Bigru | Architecture::ConvBigru => RecurrentLayer::BiGru {
                    fwd: GruParams::zeros(n, d),
                    bwd: GruParams::zeros(n, d),
                },
            }
        })
        .collect();
    Model {
        config: cfg.clone(),
        conv,
        layers,
        readout: ReadoutParams::zeros(cfg.input_dim, n, cfg.architecture.is_bidirectional()),
    }
}

/// Glorot-uniform weights drawn in tensor order from `cfg.seed`; zero biases.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut model = zero_model(cfg);
    let shapes: Vec<Vec<usize>> = model.tensors().into_iter().map(|t| t.shape).collect();
    let mut rng = seeded(cfg.seed);
    for (data, shape) in model.tensors_mut().into_iter().zip(shapes) {
        if let [rows, cols] = shape[..] {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            data.iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..=limit));
        }
    }
    Ok(model)
}

/// Rebuilds a model from its configuration and a flat parameter list in
/// [`Parameters::tensors`] order.
pub fn model_from_tensors(cfg: &ModelConfig, tensors: Vec<(Vec<usize>, Vec<f64>)>) -> Result<Model> {
    cfg.validate()?;
    let mut model = zero_model(cfg);
    let shapes: Vec<Vec<usize>> = model.tensors().into_iter().map(|t| t.shape).collect();
    if shapes.len() != tensors.len() {
        return Err(Error::Layout(format!(
            "expected {} tensors, found {}",
            shapes.len(),
            tensors.len()
        )));
    }
    for ((dst, expected), (shape, data)) in model.tensors_mut().into_iter().zip(&shapes).zip(tensors) {
        if &shape != expected {
            return Err(Error::Layout(format!(
                "tensor shape {shape:?} does not match expected {expected:?}"
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("checkpoint tensor"));
        }
        dst.copy_from_slice(&data);
    }
    Ok(model)
}

#[derive(Debug, Clone)]
enum LayerTape {
    Rnn(Vec<RnnStepCache>),
    Gru(Vec<GruStepCache>),
    BiGru {
        fwd: Vec<GruStepCache>,
        bwd: Vec<GruStepCache>,
    },
}

#[derive(Debug, Clone)]
enum DecoderCell {
    Rnn(RnnStepCache),
    Gru(GruStepCache),
}

#[derive(Debug, Clone)]
struct DecoderStep {
    conv_deriv: Option<Vec<f64>>,
    /// Dropout mask on the input of each layer; empty means identity.
    masks: Vec<Vec<f64>>,
    cells: Vec<DecoderCell>,
    top: Vec<f64>,
}

/// Everything [`Model::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    param_count: usize,
    window: Vec<Vec<f64>>,
    enc_conv_deriv: Vec<Vec<f64>>,
    /// `enc_masks[layer][t]`, empty when no dropout applies.
    enc_masks: Vec<Vec<Vec<f64>>>,
    enc_layers: Vec<LayerTape>,
    dec_steps: Vec<DecoderStep>,
    /// Window followed by the values fed back into the decoder.
    buffer: Vec<Vec<f64>>,
    feedback_is_prediction: bool,
    outputs: Vec<Vector>,
}

impl ForwardTape {
    pub fn outputs(&self) -> &[Vector] {
        &self.outputs
    }
}

const ENCODER_STREAM: u64 = 0;
const DECODER_STREAM: u64 = 1;

fn mask_for(dim: usize, rate: f64, mode: Mode, seed: u64, stream: &[u64]) -> Vec<f64> {
    if mode == Mode::Eval || rate == 0.0 {
        Vec::new()
    } else {
        crate::cells::dropout_mask(dim, rate, derive_seed(seed, stream))
    }
}

fn apply_mask(v: &mut [f64], mask: &[f64]) {
    if !mask.is_empty() {
        v.iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    fn conv_window(&self, buffer: &[Vec<f64>], end: usize) -> Vec<f64> {
        let conv = self.conv.as_ref().expect("conv front end");
        buffer[end - conv.kernel..end].concat()
    }

    fn readout_forward(&self, h: &[f64]) -> Vec<f64> {
        if self.readout.is_bidirectional() {
            self.readout.apply(h, Some(h))
        } else {
            self.readout.apply(h, None)
        }
    }

    /// Forecast `horizon` future states following `window`.
    pub fn forecast(&self, window: &[Vector], horizon: usize, mode: Mode, seed: u64) -> Result<Vec<Vector>> {
        Ok(self.forward(window, horizon, mode, seed, None)?.outputs)
    }

    /// Cached forward pass. With `teacher` set, the decoder is fed the given
    /// ground-truth states instead of its own predictions.
    pub fn forward(
        &self,
        window: &[Vector],
        horizon: usize,
        mode: Mode,
        seed: u64,
        teacher: Option<&[Vector]>,
    ) -> Result<ForwardTape> {
        let cfg = &self.config;
        check_dim("forecast window length", cfg.seq_len, window.len())?;
        for w in window {
            check_dim("forecast window state", cfg.input_dim, w.dim())?;
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if let Some(t) = teacher {
            check_dim("teacher-forcing targets", horizon, t.len())?;
        }
        let rate = cfg.dropout_rate;
        let window: Vec<Vec<f64>> = window.iter().map(|v| v.as_slice().to_vec()).collect();

        // Encoder.
        let mut enc_conv_deriv = Vec::new();
        let mut enc_masks = Vec::with_capacity(self.layers.len());
        let mut seq: Vec<Vec<f64>> = match &self.conv {
            Some(conv) => {
                let positions = conv.output_len(window.len()).ok_or(Error::SequenceTooShort {
                    needed: conv.kernel,
                    got: window.len(),
                })?;
                let mut masks = Vec::with_capacity(positions);
                let out = (0..positions)
                    .map(|p| {
                        let start = p * conv.stride;
                        let (mut o, d) = conv.window_forward(&window[start..start + conv.kernel].concat());
                        let m = mask_for(o.len(), rate, mode, seed, &[ENCODER_STREAM, 0, p as u64]);
                        apply_mask(&mut o, &m);
                        enc_conv_deriv.push(d);
                        masks.push(m);
                        o
                    })
                    .collect();
                enc_masks.push(masks);
                out
            }
            None => {
                enc_masks.push(vec![Vec::new(); window.len()]);
                window.clone()
            }
        };

        let mut enc_layers = Vec::with_capacity(self.layers.len());
        let mut finals = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            if li > 0 {
                let masks: Vec<Vec<f64>> = seq
                    .iter_mut()
                    .enumerate()
                    .map(|(t, v)| {
                        let m = mask_for(v.len(), rate, mode, seed, &[ENCODER_STREAM, li as u64, t as u64]);
                        apply_mask(v, &m);
                        m
                    })
                    .collect();
                enc_masks.push(masks);
            }
            let (tape, out, fin) = match layer {
                RecurrentLayer::Rnn(p) => {
                    let (hs, c) = scan(p, &seq, false);
                    let fin = hs.last().cloned().expect("non-empty");
                    (LayerTape::Rnn(c), hs, fin)
                }
                RecurrentLayer::Gru(p) => {
                    let (hs, c) = scan(p, &seq, false);
                    let fin = hs.last().cloned().expect("non-empty");
                    (LayerTape::Gru(c), hs, fin)
                }
                RecurrentLayer::BiGru { fwd, bwd } => {
                    let (hf, cf) = scan(fwd, &seq, false);
                    let (hb, cb) = scan(bwd, &seq, true);
                    let fin: Vec<f64> = hf
                        .last()
                        .expect("non-empty")
                        .iter()
                        .zip(&hb[0])
                        .map(|(a, b)| a + b)
                        .collect();
                    let out = hf
                        .iter()
                        .zip(&hb)
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                        .collect();
                    (LayerTape::BiGru { fwd: cf, bwd: cb }, out, fin)
                }
            };
            enc_layers.push(tape);
            finals.push(fin);
            seq = out;
        }

        // Decoder.
        let mut states = finals;
        let mut buffer = window.clone();
        let mut dec_steps = Vec::with_capacity(horizon);
        let mut outputs = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let mut masks = Vec::with_capacity(self.layers.len());
            let (mut input, conv_deriv) = match &self.conv {
                Some(conv) => {
                    let (mut o, d) = conv.window_forward(&self.conv_window(&buffer, buffer.len()));
                    let m = mask_for(o.len(), rate, mode, seed, &[DECODER_STREAM, k as u64, 0]);
                    apply_mask(&mut o, &m);
                    masks.push(m);
                    (o, Some(d))
                }
                None => {
                    masks.push(Vec::new());
                    (buffer.last().expect("non-empty buffer").clone(), None)
                }
            };
            let mut cells = Vec::with_capacity(self.layers.len());
            for (li, layer) in self.layers.iter().enumerate() {
                if li > 0 {
                    let m = mask_for(input.len(), rate, mode, seed, &[DECODER_STREAM, k as u64, li as u64]);
                    apply_mask(&mut input, &m);
                    masks.push(m);
                }
                let (h, cell) = match layer {
                    RecurrentLayer::Rnn(p) => {
                        let (h, c) = p.step_cached(&states[li], &input);
                        (h, DecoderCell::Rnn(c))
                    }
                    RecurrentLayer::Gru(p) | RecurrentLayer::BiGru { fwd: p, .. } => {
                        let (h, c) = p.step_cached(&states[li], &input);
                        (h, DecoderCell::Gru(c))
                    }
                };
                states[li] = h.clone();
                cells.push(cell);
                input = h;
            }
            let y = self.readout_forward(&input);
            match teacher {
                Some(t) => buffer.push(t[k].as_slice().to_vec()),
                None => buffer.push(y.clone()),
            }
            outputs.push(Vector::from(y));
            dec_steps.push(DecoderStep {
                conv_deriv,
                masks,
                cells,
                top: input,
            });
        }

        Ok(ForwardTape {
            param_count: self.param_count(),
            window,
            enc_conv_deriv,
            enc_masks,
            enc_layers,
            dec_steps,
            buffer,
            feedback_is_prediction: teacher.is_none(),
            outputs,
        })
    }

    /// Gradients of `Σ_k ½‖y_k − ŷ_k‖²` through the decoder (including the
    /// prediction feedback path), the encoder and the conv front end.
    pub fn backward(&self, tape: &ForwardTape, targets: &[Vector]) -> Result<GradSet<Model>> {
        if tape.param_count != self.param_count() || tape.enc_layers.len() != self.layers.len() {
            return Err(Error::Layout("forward tape was produced by a different model".into()));
        }
        let horizon = tape.outputs.len();
        check_dim("targets length", horizon, targets.len())?;
        for y in targets {
            check_dim("target dim", self.config.input_dim, y.dim())?;
        }
        let n = self.config.hidden_size;
        let depth = self.layers.len();
        let seq_len = tape.window.len();
        let mut grads = self.zeroed();

        let mut d_buffer: Vec<Vec<f64>> = tape.buffer.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut dh_carry = vec![vec![0.0; n]; depth];

        for k in (0..horizon).rev() {
            let step = &tape.dec_steps[k];
            let mut dy: Vec<f64> = tape.outputs[k]
                .iter()
                .zip(targets[k].iter())
                .map(|(a, b)| a - b)
                .collect();
            if tape.feedback_is_prediction {
                add_into(&mut dy, &d_buffer[seq_len + k]);
            }
            let mut dh_top = vec![0.0; n];
            if self.readout.is_bidirectional() {
                let mut dh_b = vec![0.0; n];
                self.readout.backward(&dy, &step.top, Some(&step.top), &mut grads.readout, &mut dh_top, Some(&mut dh_b));
                add_into(&mut dh_top, &dh_b);
            } else {
                self.readout.backward(&dy, &step.top, None, &mut grads.readout, &mut dh_top, None);
            }

            let mut d_from_above = dh_top;
            for li in (0..depth).rev() {
                let mut dh = std::mem::take(&mut dh_carry[li]);
                add_into(&mut dh, &d_from_above);
                let mut dx = vec![0.0; self.layers[li].input_size()];
                dh_carry[li] = match (&self.layers[li], &mut grads.layers[li], &step.cells[li]) {
                    (RecurrentLayer::Rnn(p), RecurrentLayer::Rnn(g), DecoderCell::Rnn(c)) => {
                        p.step_backward(c, &dh, g, &mut dx)
                    }
                    (RecurrentLayer::Gru(p), RecurrentLayer::Gru(g), DecoderCell::Gru(c))
                    | (
                        RecurrentLayer::BiGru { fwd: p, .. },
                        RecurrentLayer::BiGru { fwd: g, .. },
                        DecoderCell::Gru(c),
                    ) => p.step_backward(c, &dh, g, &mut dx),
                    _ => return Err(Error::Layout("decoder cache kind mismatch".into())),
                };
                apply_mask(&mut dx, &step.masks[li]);
                d_from_above = dx;
            }

            // d_from_above now holds the gradient on the decoder input.
            let end = seq_len + k;
            match (&self.conv, &step.conv_deriv) {
                (Some(conv), Some(deriv)) => {
                    let window = self.conv_window(&tape.buffer, end);
                    let mut d_window = vec![0.0; window.len()];
                    conv.window_backward(
                        &window,
                        deriv,
                        &d_from_above,
                        grads.conv.as_mut().expect("conv grads"),
                        &mut d_window,
                    );
                    for (tau, chunk) in d_window.chunks_exact(conv.in_dim).enumerate() {
                        add_into(&mut d_buffer[end - conv.kernel + tau], chunk);
                    }
                }
                _ => add_into(&mut d_buffer[end - 1], &d_from_above),
            }
        }

        // Encoder, top layer first. Only the final states of each layer feed
        // the decoder; intermediate outputs feed the layer above.
        let mut d_seq: Vec<Vec<f64>> = Vec::new();
        for li in (0..depth).rev() {
            let d_final = &dh_carry[li];
            let mut dxs = match (&self.layers[li], &mut grads.layers[li], &tape.enc_layers[li]) {
                (RecurrentLayer::Rnn(p), RecurrentLayer::Rnn(g), LayerTape::Rnn(c)) => {
                    scan_backward(p, c, &d_seq, Some(d_final), false, g)
                }
                (RecurrentLayer::Gru(p), RecurrentLayer::Gru(g), LayerTape::Gru(c)) => {
                    scan_backward(p, c, &d_seq, Some(d_final), false, g)
                }
                (
                    RecurrentLayer::BiGru { fwd, bwd },
                    RecurrentLayer::BiGru { fwd: gf, bwd: gb },
                    LayerTape::BiGru { fwd: cf, bwd: cb },
                ) => {
                    let mut a = scan_backward(fwd, cf, &d_seq, Some(d_final), false, gf);
                    let b = scan_backward(bwd, cb, &d_seq, Some(d_final), true, gb);
                    for (x, y) in a.iter_mut().zip(&b) {
                        add_into(x, y);
                    }
                    a
                }
                _ => return Err(Error::Layout("encoder cache kind mismatch".into())),
            };
            for (dx, m) in dxs.iter_mut().zip(&tape.enc_masks[li]) {
                apply_mask(dx, m);
            }
            d_seq = dxs;
        }

        let mut d_window = std::mem::take(&mut d_buffer);
        d_window.truncate(seq_len);
        match &self.conv {
            Some(conv) => {
                let g_conv = grads.conv.as_mut().expect("conv grads");
                for (p, (g, deriv)) in d_seq.iter().zip(&tape.enc_conv_deriv).enumerate() {
                    let start = p * conv.stride;
                    let window = tape.window[start..start + conv.kernel].concat();
                    let mut dw = vec![0.0; window.len()];
                    conv.window_backward(&window, deriv, g, g_conv, &mut dw);
                    for (tau, chunk) in dw.chunks_exact(conv.in_dim).enumerate() {
                        add_into(&mut d_window[start + tau], chunk);
                    }
                }
            }
            None => {
                for (dst, src) in d_window.iter_mut().zip(&d_seq) {
                    add_into(dst, src);
                }
            }
        }

        Ok(GradSet {
            params: grads,
            dx: d_window.into_iter().map(Vector::from).collect(),
        })
    }

    /// Least-squares loss of one (window, targets) example and its gradient.
    /// The decoder is teacher-forced when the configuration asks for it.
    pub fn loss_and_gradient(
        &self,
        window: &[Vector],
        targets: &[Vector],
        mode: Mode,
        seed: u64,
    ) -> Result<(f64, GradSet<Model>)> {
        let teacher = self.config.teacher_forcing.then_some(targets);
        let tape = self.forward(window, targets.len(), mode, seed, teacher)?;
        let loss = crate::training::least_squares_loss(targets, &tape.outputs)?;
        let grads = self.backward(&tape, targets)?;
        Ok((loss, grads))
    }
}

/// Free-function form of [`Model::forecast`].
pub fn forecast(m: &Model, window: &[Vector], horizon: usize, mode: Mode, seed: u64) -> Result<Vec<Vector>> {
    m.forecast(window, horizon, mode, seed)
}

/// Forward pass followed by [`Model::backward`] in training mode.
pub fn model_backward(m: &Model, window: &[Vector], targets: &[Vector], seed: u64) -> Result<GradSet<Model>> {
    Ok(m.loss_and_gradient(window, targets, Mode::Train, seed)?.1)
}
