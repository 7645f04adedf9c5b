//! Bit-accurate LSTM engine for the recurrent autoencoder and classifier.
//!
//! Every multiply-accumulate goes through [`crate::fxp`], in a fixed
//! row-major order, so a forward pass is reproducible bit for bit. Gate
//! order is i, f, g, o everywhere (weights, biases, masks).
//!
//! Bayesian layers take a [`MaskSet`]; the gate-`k` input and hidden
//! replicas are multiplied by the gate-`k` masks before their MVMs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fxp::{self, Activation, ActLut, Fx, FxpError, QFormat};
use crate::mcrng::{sample_mask_set, BernoulliSampler, LfsrMode, MaskSet, DROPOUT_P};
use crate::metrics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {layer} is Bayesian but no masks were supplied")]
    MissingMasks { layer: usize },
    #[error("layer {layer} is not Bayesian but masks were supplied")]
    UnexpectedMasks { layer: usize },
    #[error("expected {expected} mask sets (one per Bayesian layer), got {got}")]
    MaskCount { expected: usize, got: usize },
    #[error(transparent)]
    Fxp(#[from] FxpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Autoencoder,
    Classifier,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Autoencoder => "autoencoder",
            Task::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "autoencoder" | "anomaly" | "ae" => Ok(Task::Autoencoder),
            "classifier" | "classification" | "cls" => Ok(Task::Classifier),
            other => Err(EngineError::Arch(format!("unknown task `{other}`"))),
        }
    }
}

/// Network architecture: hidden size, LSTM layers per part, and which
/// layers apply Monte Carlo Dropout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arch {
    pub hidden: usize,
    pub nl: usize,
    pub bayes: Vec<bool>,
}

impl Arch {
    pub fn new(hidden: usize, nl: usize, bayes: &str) -> Result<Arch, EngineError> {
        let bayes = bayes
            .trim()
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'Y' => Ok(true),
                'N' => Ok(false),
                other => Err(EngineError::Arch(format!("bad Bayesian flag `{other}`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Arch { hidden, nl, bayes })
    }

    /// Number of LSTM layers in the whole network.
    pub fn layer_count(&self, task: Task) -> usize {
        match task {
            Task::Autoencoder => 2 * self.nl,
            Task::Classifier => self.nl,
        }
    }

    pub fn bayes_string(&self) -> String {
        self.bayes.iter().map(|&b| if b { 'Y' } else { 'N' }).collect()
    }

    pub fn bayesian_layers(&self) -> usize {
        self.bayes.iter().filter(|&&b| b).count()
    }

    pub fn validate(&self, task: Task) -> Result<(), EngineError> {
        if self.nl == 0 || self.hidden == 0 {
            return Err(EngineError::Arch("hidden size and layer count must be positive".into()));
        }
        if task == Task::Autoencoder && self.hidden % 2 != 0 {
            return Err(EngineError::Arch(format!(
                "autoencoder hidden size must be even, got {}",
                self.hidden
            )));
        }
        let want = self.layer_count(task);
        if self.bayes.len() != want {
            return Err(EngineError::Arch(format!(
                "B-string `{}` has {} flags, {task} with NL={} needs {want}",
                self.bayes_string(),
                self.bayes.len(),
                self.nl
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.hidden, self.nl, self.bayes_string())
    }
}

impl FromStr for Arch {
    type Err = EngineError;

    /// Parses `H,NL,B`, e.g. `16,2,YNYN`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [h, nl, b] = parts.as_slice() else {
            return Err(EngineError::Arch(format!("expected H,NL,B but got `{s}`")));
        };
        let h = h.parse().map_err(|_| EngineError::Arch(format!("bad hidden size `{h}`")))?;
        let nl = nl.parse().map_err(|_| EngineError::Arch(format!("bad layer count `{nl}`")))?;
        Arch::new(h, nl, b)
    }
}

/// (input, hidden) dimensions of every LSTM layer in execution order.
///
/// Autoencoder encoder: I->H, H->H, ..., H->H/2. Decoder: H/2->H, H->H, ...
/// With NL=1 the encoder is the single layer I->H/2.
pub fn layer_plan(task: Task, arch: &Arch, input_dim: usize) -> Result<Vec<(usize, usize)>, EngineError> {
    arch.validate(task)?;
    if input_dim == 0 {
        return Err(EngineError::Arch("input dimension must be positive".into()));
    }
    let h = arch.hidden;
    let mut plan = Vec::with_capacity(arch.layer_count(task));
    match task {
        Task::Classifier => {
            let mut prev = input_dim;
            for _ in 0..arch.nl {
                plan.push((prev, h));
                prev = h;
            }
        }
        Task::Autoencoder => {
            let mut prev = input_dim;
            for k in 0..arch.nl {
                let out = if k + 1 == arch.nl { h / 2 } else { h };
                plan.push((prev, out));
                prev = out;
            }
            for _ in 0..arch.nl {
                plan.push((prev, h));
                prev = h;
            }
        }
    }
    Ok(plan)
}

/// Sequence length and input/output feature counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetDims {
    pub timesteps: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl NetDims {
    /// ECG5000 shapes: 140 single-lead samples, 4 classes for the classifier.
    pub fn ecg(task: Task) -> NetDims {
        NetDims {
            timesteps: 140,
            input_dim: 1,
            output_dim: match task {
                Task::Autoencoder => 1,
                Task::Classifier => 4,
            },
        }
    }
}

/// Number formats used by the datapath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Formats {
    /// Weights, biases, inputs, activations and hidden state.
    pub weight: QFormat,
    /// MVM accumulators and the cell state.
    pub accum: QFormat,
}

impl Default for Formats {
    fn default() -> Self {
        Formats { weight: QFormat::Q6_10, accum: QFormat::Q12_20 }
    }
}

impl Formats {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.weight.total_bits() != 16 || self.accum.total_bits() != 32 {
            return Err(EngineError::Arch("datapath needs a 16-bit weight and a 32-bit accumulator format".into()));
        }
        if self.accum.frac_bits() != 2 * self.weight.frac_bits() {
            return Err(EngineError::Arch(format!(
                "accumulator {} does not align with products of {}",
                self.accum, self.weight
            )));
        }
        Ok(())
    }
}

/// Formats plus the activation tables built for them.
#[derive(Debug, Clone, PartialEq)]
pub struct Datapath {
    pub formats: Formats,
    pub sigmoid: ActLut,
    pub tanh: ActLut,
}

impl Datapath {
    pub fn new(formats: Formats) -> Result<Datapath, EngineError> {
        formats.validate()?;
        Ok(Datapath {
            formats,
            sigmoid: ActLut::standard(Activation::Sigmoid, formats.weight, formats.weight),
            tanh: ActLut::standard(Activation::Tanh, formats.weight, formats.weight),
        })
    }
}

impl Default for Datapath {
    fn default() -> Self {
        Datapath::new(Formats::default()).expect("default formats are valid")
    }
}

/// Row-major fixed-point matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Fx>,
}

impl FxMatrix {
    pub fn zeros(rows: usize, cols: usize, format: QFormat) -> FxMatrix {
        FxMatrix { rows, cols, data: vec![Fx::zero(format); rows * cols] }
    }

    pub fn from_fx(rows: usize, cols: usize, data: Vec<Fx>) -> Result<FxMatrix, EngineError> {
        if data.len() != rows * cols {
            return Err(EngineError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(FxMatrix { rows, cols, data })
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64], format: QFormat) -> Result<FxMatrix, EngineError> {
        Self::from_fx(rows, cols, values.iter().map(|&v| fxp::quantize(v, format)).collect())
    }

    pub fn identity(n: usize, format: QFormat) -> FxMatrix {
        let mut m = FxMatrix::zeros(n, n, format);
        for i in 0..n {
            m.data[i * n + i] = fxp::quantize(1.0, format);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Fx {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Fx) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[Fx] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[Fx] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).iter().map(|v| v.to_f64()).collect()).collect()
    }
}

/// `W x` with every product accumulated in `accum` by [`fxp::fx_mac`],
/// row by row, columns in ascending order.
pub fn mvm(w: &FxMatrix, x: &[Fx], accum: QFormat) -> Result<Vec<Fx>, EngineError> {
    if w.cols != x.len() {
        return Err(EngineError::Shape(format!(
            "{}x{} matrix times vector of length {}",
            w.rows,
            w.cols,
            x.len()
        )));
    }
    (0..w.rows)
        .map(|r| {
            w.row(r)
                .iter()
                .zip(x)
                .try_fold(Fx::zero(accum), |acc, (&a, &b)| fxp::fx_mac(acc, a, b))
                .map_err(EngineError::from)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmLayerParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// H x I per gate.
    pub w_x: [FxMatrix; 4],
    /// H x H per gate.
    pub w_h: [FxMatrix; 4],
    pub b: [Vec<Fx>; 4],
    pub is_bayesian: bool,
}

impl LstmLayerParams {
    pub fn zeros(input_dim: usize, hidden: usize, is_bayesian: bool, format: QFormat) -> Self {
        LstmLayerParams {
            input_dim,
            hidden,
            w_x: std::array::from_fn(|_| FxMatrix::zeros(hidden, input_dim, format)),
            w_h: std::array::from_fn(|_| FxMatrix::zeros(hidden, hidden, format)),
            b: std::array::from_fn(|_| vec![Fx::zero(format); hidden]),
            is_bayesian,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        for g in 0..4 {
            let ok = self.w_x[g].rows == self.hidden
                && self.w_x[g].cols == self.input_dim
                && self.w_h[g].rows == self.hidden
                && self.w_h[g].cols == self.hidden
                && self.b[g].len() == self.hidden;
            if !ok {
                return Err(EngineError::Shape(format!(
                    "gate {g} parameters do not match an {}->{} layer",
                    self.input_dim, self.hidden
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseParams {
    /// O x H_L.
    pub w: FxMatrix,
    pub b: Vec<Fx>,
}

fn apply_mask(v: &[Fx], mask: &[bool]) -> Vec<Fx> {
    v.iter()
        .zip(mask)
        .map(|(&x, &keep)| if keep { x } else { Fx::zero(x.format()) })
        .collect()
}

fn sat_add(a: &[Fx], b: &[Fx]) -> Result<Vec<Fx>, EngineError> {
    a.iter().zip(b).map(|(&x, &y)| fxp::fx_add(x, y).map_err(EngineError::from)).collect()
}

/// One LSTM time step. `h_prev` is in the weight format, `c_prev` in the
/// accumulator format; returns `(h_t, c_t)` in the same formats.
pub fn lstm_step(
    dp: &Datapath,
    p: &LstmLayerParams,
    x_t: &[Fx],
    h_prev: &[Fx],
    c_prev: &[Fx],
    masks: Option<&MaskSet>,
) -> Result<(Vec<Fx>, Vec<Fx>), EngineError> {
    let Formats { weight, accum } = dp.formats;
    if x_t.len() != p.input_dim || h_prev.len() != p.hidden || c_prev.len() != p.hidden {
        return Err(EngineError::Shape(format!(
            "step got x {}, h {}, c {} for an {}->{} layer",
            x_t.len(),
            h_prev.len(),
            c_prev.len(),
            p.input_dim,
            p.hidden
        )));
    }
    if c_prev.iter().any(|c| c.format() != accum) || h_prev.iter().any(|h| h.format() != weight) {
        return Err(FxpError::FormatMismatch("state vectors are not in datapath formats".into()).into());
    }
    if let Some(m) = masks {
        if m.input_dim() != p.input_dim || m.hidden() != p.hidden {
            return Err(EngineError::Shape(format!(
                "masks for {}->{} applied to an {}->{} layer",
                m.input_dim(),
                m.hidden(),
                p.input_dim,
                p.hidden
            )));
        }
    }
    let mut gates: [Vec<Fx>; 4] = Default::default();
    for g in 0..4 {
        let (xg, hg) = match masks {
            Some(m) => (apply_mask(x_t, &m.x[g]), apply_mask(h_prev, &m.h[g])),
            None => (x_t.to_vec(), h_prev.to_vec()),
        };
        let from_x = mvm(&p.w_x[g], &xg, accum)?;
        let from_h = mvm(&p.w_h[g], &hg, accum)?;
        let bias: Vec<Fx> = p.b[g].iter().map(|&b| fxp::requantize(b, accum)).collect();
        let pre = sat_add(&sat_add(&from_x, &from_h)?, &bias)?;
        let lut = if g == 2 { &dp.tanh } else { &dp.sigmoid };
        gates[g] = pre.iter().map(|&v| lut.eval(fxp::requantize(v, weight))).collect();
    }
    let [i, f, g, o] = &gates;
    let mut h_t = Vec::with_capacity(p.hidden);
    let mut c_t = Vec::with_capacity(p.hidden);
    for k in 0..p.hidden {
        let keep = fxp::fx_mul(f[k], c_prev[k], accum);
        let write = fxp::fx_mul(i[k], g[k], accum);
        let c = fxp::fx_add(keep, write)?;
        let squashed = dp.tanh.eval(fxp::requantize(c, weight));
        h_t.push(fxp::fx_mul(o[k], squashed, weight));
        c_t.push(c);
    }
    Ok((h_t, c_t))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceOutput {
    pub h: Vec<Vec<Fx>>,
    pub c_last: Vec<Fx>,
}

/// Runs a layer over a whole sequence from zero state, applying the same
/// masks at every step.
pub fn run_sequence(
    dp: &Datapath,
    p: &LstmLayerParams,
    xs: &[Vec<Fx>],
    masks: Option<&MaskSet>,
) -> Result<SequenceOutput, EngineError> {
    run_sequence_observed(dp, p, xs, masks, |_, _| {})
}

/// [`run_sequence`] with a callback receiving the step index and the mask
/// reference used at that step.
pub fn run_sequence_observed(
    dp: &Datapath,
    p: &LstmLayerParams,
    xs: &[Vec<Fx>],
    masks: Option<&MaskSet>,
    mut on_step: impl FnMut(usize, Option<&MaskSet>),
) -> Result<SequenceOutput, EngineError> {
    if xs.is_empty() {
        return Err(EngineError::Shape("sequence must have at least one step".into()));
    }
    match (p.is_bayesian, masks) {
        (true, None) => return Err(EngineError::MissingMasks { layer: 0 }),
        (false, Some(_)) => return Err(EngineError::UnexpectedMasks { layer: 0 }),
        _ => {}
    }
    let mut h = vec![Fx::zero(dp.formats.weight); p.hidden];
    let mut c = vec![Fx::zero(dp.formats.accum); p.hidden];
    let mut hs = Vec::with_capacity(xs.len());
    for (t, x) in xs.iter().enumerate() {
        on_step(t, masks);
        let (h_next, c_next) = lstm_step(dp, p, x, &h, &c, masks)?;
        hs.push(h_next.clone());
        h = h_next;
        c = c_next;
    }
    Ok(SequenceOutput { h: hs, c_last: c })
}

/// How to fill weights when building a network from scratch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    Zeros,
    /// Independent U(-scale, scale) weights and biases.
    Uniform { scale: f64, seed: u64 },
}

/// Complete parameter set of a quantized network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub task: Task,
    pub arch: Arch,
    pub dims: NetDims,
    pub layers: Vec<LstmLayerParams>,
    pub dense: DenseParams,
    pub formats: Formats,
    /// Homoscedastic observation variance for regression outputs.
    pub aleatoric_var: f64,
    pub dropout_p: f64,
    /// Whether the 1/(1-p) dropout scale is already inside the weights.
    pub scale_folded: bool,
    datapath: Datapath,
}

impl NetworkParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task: Task,
        arch: Arch,
        dims: NetDims,
        layers: Vec<LstmLayerParams>,
        dense: DenseParams,
        formats: Formats,
        aleatoric_var: f64,
        scale_folded: bool,
    ) -> Result<NetworkParams, EngineError> {
        let plan = layer_plan(task, &arch, dims.input_dim)?;
        if dims.timesteps == 0 || dims.output_dim == 0 {
            return Err(EngineError::Arch("timesteps and output size must be positive".into()));
        }
        if layers.len() != plan.len() {
            return Err(EngineError::Shape(format!("{} layers, plan needs {}", layers.len(), plan.len())));
        }
        for (k, (layer, &(i, h))) in layers.iter().zip(&plan).enumerate() {
            layer.validate()?;
            if (layer.input_dim, layer.hidden) != (i, h) {
                return Err(EngineError::Shape(format!(
                    "layer {k} is {}->{}, expected {i}->{h}",
                    layer.input_dim, layer.hidden
                )));
            }
            if layer.is_bayesian != arch.bayes[k] {
                return Err(EngineError::Arch(format!("layer {k} Bayesian flag disagrees with B-string")));
            }
        }
        let last = plan.last().map(|p| p.1).unwrap_or(0);
        if dense.w.rows != dims.output_dim || dense.w.cols != last || dense.b.len() != dims.output_dim {
            return Err(EngineError::Shape(format!(
                "dense layer is {}x{} (+{} bias), expected {}x{last}",
                dense.w.rows,
                dense.w.cols,
                dense.b.len(),
                dims.output_dim
            )));
        }
        if !(aleatoric_var >= 0.0) || !aleatoric_var.is_finite() {
            return Err(EngineError::Arch(format!("aleatoric variance {aleatoric_var} is invalid")));
        }
        Ok(NetworkParams {
            task,
            arch,
            dims,
            layers,
            dense,
            formats,
            aleatoric_var,
            dropout_p: DROPOUT_P,
            scale_folded,
            datapath: Datapath::new(formats)?,
        })
    }

    pub fn datapath(&self) -> &Datapath {
        &self.datapath
    }

    /// Indices of layers that take masks.
    pub fn bayesian_layer_indices(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_bayesian).map(|(k, _)| k).collect()
    }
}

/// Builds a network following [`layer_plan`], with the dense head mapping
/// the last hidden size to `dims.output_dim`.
pub fn build_network(
    task: Task,
    arch: &Arch,
    dims: NetDims,
    init: ParamInit,
    formats: Formats,
) -> Result<NetworkParams, EngineError> {
    formats.validate()?;
    let plan = layer_plan(task, arch, dims.input_dim)?;
    let fmt = formats.weight;
    let mut draw: Box<dyn FnMut() -> Fx> = match init {
        ParamInit::Zeros => Box::new(move || Fx::zero(fmt)),
        ParamInit::Uniform { scale, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Box::new(move || fxp::quantize(rng.gen_range(-scale..=scale), fmt))
        }
    };
    let mut matrix = |rows: usize, cols: usize| {
        FxMatrix::from_fx(rows, cols, (0..rows * cols).map(|_| draw()).collect())
            .expect("generated length matches")
    };
    let mut layers = Vec::with_capacity(plan.len());
    for (k, &(i, h)) in plan.iter().enumerate() {
        let w_x = std::array::from_fn(|_| matrix(h, i));
        let w_h = std::array::from_fn(|_| matrix(h, h));
        let b = std::array::from_fn(|_| matrix(h, 1).data);
        layers.push(LstmLayerParams { input_dim: i, hidden: h, w_x, w_h, b, is_bayesian: arch.bayes[k] });
    }
    let last = plan.last().map(|p| p.1).unwrap_or(0);
    let dense = DenseParams { w: matrix(dims.output_dim, last), b: matrix(dims.output_dim, 1).data };
    NetworkParams::new(task, arch.clone(), dims, layers, dense, formats, 1.0, true)
}

/// Network output for one pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    /// T x O reconstruction.
    Sequence(Vec<Vec<f64>>),
    /// Softmax class probabilities.
    Probs(Vec<f64>),
}

impl Output {
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Output::Sequence(rows) => rows.iter().flatten().copied().collect(),
            Output::Probs(p) => p.clone(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Output::Sequence(rows) => (rows.len(), rows.first().map_or(0, Vec::len)),
            Output::Probs(p) => (1, p.len()),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn dense_forward(net: &NetworkParams, h: &[Fx]) -> Result<Vec<f64>, EngineError> {
    let Formats { weight, accum } = net.formats;
    let acc = mvm(&net.dense.w, h, accum)?;
    acc.iter()
        .zip(&net.dense.b)
        .map(|(&a, &b)| {
            let v = fxp::fx_add(a, fxp::requantize(b, accum))?;
            Ok(fxp::requantize(v, weight).to_f64())
        })
        .collect()
}

/// One deterministic forward pass. `mask_sets` holds one entry per Bayesian
/// layer, in layer order.
pub fn forward_once(net: &NetworkParams, x: &[Vec<f64>], mask_sets: &[MaskSet]) -> Result<Output, EngineError> {
    let bayes = net.bayesian_layer_indices();
    if mask_sets.len() != bayes.len() {
        return Err(EngineError::MaskCount { expected: bayes.len(), got: mask_sets.len() });
    }
    if x.len() != net.dims.timesteps || x.iter().any(|r| r.len() != net.dims.input_dim) {
        return Err(EngineError::Shape(format!(
            "input must be {}x{}",
            net.dims.timesteps, net.dims.input_dim
        )));
    }
    let dp = &net.datapath;
    let mut masks = mask_sets.iter();
    let mut seq: Vec<Vec<Fx>> =
        x.iter().map(|r| r.iter().map(|&v| fxp::quantize(v, net.formats.weight)).collect()).collect();
    let encoder_len = match net.task {
        Task::Autoencoder => net.arch.nl,
        Task::Classifier => net.layers.len(),
    };
    for (k, layer) in net.layers.iter().enumerate() {
        let m = if layer.is_bayesian { masks.next() } else { None };
        if k == encoder_len {
            // decoder input: the bottleneck repeated T times
            let code = seq.last().cloned().expect("non-empty sequence");
            seq = vec![code; net.dims.timesteps];
        }
        seq = run_sequence(dp, layer, &seq, m)
            .map_err(|e| match e {
                EngineError::MissingMasks { .. } => EngineError::MissingMasks { layer: k },
                other => other,
            })?
            .h;
    }
    match net.task {
        Task::Autoencoder => Ok(Output::Sequence(
            seq.iter().map(|h| dense_forward(net, h)).collect::<Result<_, _>>()?,
        )),
        Task::Classifier => {
            let logits = dense_forward(net, seq.last().expect("non-empty sequence"))?;
            Ok(Output::Probs(softmax(&logits)))
        }
    }
}

/// Mask sets for every Bayesian layer of `net`, drawn from one stream.
pub fn draw_masks<S: crate::mcrng::BitStream>(net: &NetworkParams, stream: &mut S, sample_index: usize) -> Vec<MaskSet> {
    net.layers
        .iter()
        .filter(|l| l.is_bayesian)
        .map(|l| sample_mask_set(l.input_dim, l.hidden, stream, sample_index))
        .collect()
}

/// Aggregate of S Monte Carlo passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Flattened mean output (T*O reconstruction or O class probabilities).
    pub mean: Vec<f64>,
    pub shape: (usize, usize),
    pub epistemic_var: Vec<f64>,
    pub aleatoric_var: f64,
    pub total_var: Vec<f64>,
    pub class_probs: Option<Vec<f64>>,
    /// Predictive entropy of the mean class probabilities, in nats.
    pub entropy: Option<f64>,
    pub samples_used: usize,
}

/// S-sample MC Dropout prediction with the default LFSR configuration.
pub fn mc_predict(net: &NetworkParams, x: &[Vec<f64>], samples: usize, seed: u64) -> Result<Prediction, EngineError> {
    mc_predict_with(net, x, samples, seed, LfsrMode::default())
}

/// S-sample MC Dropout prediction. Sample `s` draws its masks from a
/// sampler seeded by `(seed, s)`, so the result depends only on the inputs.
pub fn mc_predict_with(
    net: &NetworkParams,
    x: &[Vec<f64>],
    samples: usize,
    seed: u64,
    mode: LfsrMode,
) -> Result<Prediction, EngineError> {
    if samples == 0 {
        return Err(EngineError::Arch("need at least one MC sample".into()));
    }
    let mut outputs = Vec::with_capacity(samples);
    let mut shape = (0, 0);
    for s in 0..samples {
        let mut sampler = BernoulliSampler::for_sample(seed, s, mode);
        let masks = draw_masks(net, &mut sampler, s);
        let out = forward_once(net, x, &masks)?;
        shape = out.shape();
        outputs.push(out.flatten());
    }
    let aleatoric = match net.task {
        Task::Autoencoder => net.aleatoric_var,
        Task::Classifier => 0.0,
    };
    let u = metrics::uncertainty_decompose(&outputs, aleatoric);
    let (class_probs, entropy) = match net.task {
        Task::Classifier => (Some(u.mean.clone()), Some(metrics::predictive_entropy(&u.mean))),
        Task::Autoencoder => (None, None),
    };
    Ok(Prediction {
        mean: u.mean,
        shape,
        epistemic_var: u.epistemic,
        aleatoric_var: aleatoric,
        total_var: u.total,
        class_probs,
        entropy,
        samples_used: samples,
    })
}
