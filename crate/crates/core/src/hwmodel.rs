//! DSP resource model, initiation-interval/latency model and a
//! discrete-event simulator of the layer pipeline.
//!
//! Every LSTM layer has an x-engine (4·I·H multipliers), an h-engine
//! (4·H² multipliers) and a tail of 4·H DSPs. Reuse factors divide the
//! engine multipliers; the tail is never shared.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::rnn::{layer_plan, Arch, EngineError, NetDims, Task};

/// Default extra cycles between accepting a step and emitting its result.
pub const DEFAULT_PIPELINE_DEPTH: u64 = 32;
pub const DEFAULT_CLOCK_HZ: f64 = 100e6;

#[derive(Debug, Error)]
pub enum HwError {
    #[error("invalid hardware config: {0}")]
    Config(String),
    #[error("layer {layer}: iteration latency {il} is below the initiation interval {ii}")]
    IlBelowIi { layer: usize, ii: u64, il: u64 },
    #[error("calibration line {line}: {msg}")]
    Calibration { line: usize, msg: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("cannot read calibration file: {0}")]
    Io(#[from] std::io::Error),
}

/// Measured (II, IL) per layer index, overriding the default model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Calibration {
    pub layers: BTreeMap<usize, (u64, u64)>,
}

impl Calibration {
    /// Parses `layer_index II IL` records, one per line. Blank lines and
    /// `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Calibration, HwError> {
        let mut layers = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| HwError::Calibration { line: n + 1, msg };
            let fields: Vec<u64> = line
                .split_whitespace()
                .map(|f| f.parse::<u64>().map_err(|_| err(format!("`{f}` is not a non-negative integer"))))
                .collect::<Result<_, _>>()?;
            let [idx, ii, il] = fields[..] else {
                return Err(err(format!("expected `layer_index II IL`, got {} fields", fields.len())));
            };
            if ii == 0 {
                return Err(err("II must be at least 1".into()));
            }
            if layers.insert(idx as usize, (ii, il)).is_some() {
                return Err(err(format!("layer {idx} listed twice")));
            }
        }
        Ok(Calibration { layers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Calibration, HwError> {
        Calibration::parse(&std::fs::read_to_string(path)?)
    }

    /// One II and IL applied to the first `n_layers` layers.
    pub fn uniform(n_layers: usize, ii: u64, il: u64) -> Calibration {
        Calibration { layers: (0..n_layers).map(|k| (k, (ii, il))).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HwConfig {
    pub rx: u64,
    pub rh: u64,
    pub rd: u64,
    pub dsp_total: u64,
    pub clock_hz: f64,
    pub pipeline_depth: u64,
    pub calibration: Option<Calibration>,
}

impl HwConfig {
    pub fn new(rx: u64, rh: u64, rd: u64, dsp_total: u64) -> HwConfig {
        HwConfig {
            rx,
            rh,
            rd,
            dsp_total,
            clock_hz: DEFAULT_CLOCK_HZ,
            pipeline_depth: DEFAULT_PIPELINE_DEPTH,
            calibration: None,
        }
    }

    pub fn validate(&self) -> Result<(), HwError> {
        if self.rx == 0 || self.rh == 0 || self.rd == 0 {
            return Err(HwError::Config("reuse factors must be at least 1".into()));
        }
        if self.dsp_total == 0 {
            return Err(HwError::Config("dsp_total must be positive".into()));
        }
        if !(self.clock_hz > 0.0) || !self.clock_hz.is_finite() {
            return Err(HwError::Config(format!("clock {} Hz is not positive", self.clock_hz)));
        }
        Ok(())
    }
}

/// DSPs of one LSTM layer: x-engine, h-engine and the unshared tail.
pub fn dsp_layer(i: u64, h: u64, rx: u64, rh: u64) -> u64 {
    (4 * i * h).div_ceil(rx) + (4 * h * h).div_ceil(rh) + 4 * h
}

/// DSPs of the dense head. The autoencoder applies it at every time step.
pub fn dsp_dense(task: Task, h_last: u64, o: u64, t: u64, rd: u64) -> u64 {
    match task {
        Task::Autoencoder => (h_last * o * t).div_ceil(rd),
        Task::Classifier => (h_last * o).div_ceil(rd),
    }
}

/// Largest admissible design: ⌊1.05 · dsp_total⌋.
pub fn dsp_budget(dsp_total: u64) -> u64 {
    dsp_total * 105 / 100
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DspReport {
    pub per_layer: Vec<u64>,
    pub dense: u64,
    pub total: u64,
    pub budget: u64,
    pub feasible: bool,
}

pub fn dsp_design(arch: &Arch, task: Task, dims: NetDims, hw: &HwConfig) -> Result<DspReport, HwError> {
    hw.validate()?;
    let plan = layer_plan(task, arch, dims.input_dim)?;
    let per_layer: Vec<u64> = plan.iter().map(|&(i, h)| dsp_layer(i as u64, h as u64, hw.rx, hw.rh)).collect();
    let h_last = plan.last().map_or(0, |p| p.1) as u64;
    let dense = dsp_dense(task, h_last, dims.output_dim as u64, dims.timesteps as u64, hw.rd);
    let total = per_layer.iter().sum::<u64>() + dense;
    let budget = dsp_budget(hw.dsp_total);
    Ok(DspReport { per_layer, dense, total, budget, feasible: total <= budget })
}

/// Default II of one layer: each engine needs as many cycles as its
/// multipliers are reused, capped by the engine's multiply count.
pub fn ii_default(i: u64, h: u64, rx: u64, rh: u64) -> u64 {
    rx.min(4 * i * h).max(rh.min(4 * h * h))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IiReport {
    pub per_layer: Vec<u64>,
    /// All layers run at the slowest layer's II.
    pub design: u64,
    pub il_per_layer: Vec<u64>,
}

/// Per-layer II and IL: calibration first, then the default model with
/// IL = II + pipeline depth.
pub fn ii_estimate(plan: &[(usize, usize)], hw: &HwConfig) -> Result<IiReport, HwError> {
    hw.validate()?;
    let calibrated = |k: usize| hw.calibration.as_ref().and_then(|c| c.layers.get(&k).copied());
    let per_layer: Vec<u64> = plan
        .iter()
        .enumerate()
        .map(|(k, &(i, h))| calibrated(k).map_or_else(|| ii_default(i as u64, h as u64, hw.rx, hw.rh), |c| c.0))
        .collect();
    let design = per_layer.iter().copied().max().ok_or_else(|| HwError::Config("no layers".into()))?;
    let il_per_layer: Vec<u64> = (0..plan.len())
        .map(|k| calibrated(k).map_or(design + hw.pipeline_depth, |c| c.1))
        .collect();
    for (layer, &il) in il_per_layer.iter().enumerate() {
        if il < design {
            return Err(HwError::IlBelowIi { layer, ii: design, il });
        }
    }
    Ok(IiReport { per_layer, design, il_per_layer })
}

/// Closed-form latency of one pass with uniform IL and NL layers per part.
pub fn latency_design(ii: u64, il: u64, t: u64, nl: u64, task: Task) -> Result<u64, HwError> {
    let parts = match task {
        Task::Autoencoder => 2,
        Task::Classifier => 1,
    };
    latency_design_layers(ii, &vec![il; (parts * nl) as usize], t, task)
}

/// Closed-form latency of one pass with a per-layer IL. Each part costs
/// II·T plus the drain of its layers; the decoder waits for the encoder.
pub fn latency_design_layers(ii: u64, il: &[u64], t: u64, task: Task) -> Result<u64, HwError> {
    if ii == 0 || t == 0 || il.is_empty() {
        return Err(HwError::Config("II, T and the layer count must be at least 1".into()));
    }
    if let Some((layer, &bad)) = il.iter().enumerate().find(|(_, &v)| v < ii) {
        return Err(HwError::IlBelowIi { layer, ii, il: bad });
    }
    let parts = match task {
        Task::Autoencoder => {
            if il.len() % 2 != 0 {
                return Err(HwError::Config("autoencoder needs an even layer count".into()));
            }
            2
        }
        Task::Classifier => 1,
    };
    Ok(parts * ii * t + il.iter().map(|&v| v - ii).sum::<u64>())
}

/// Pipeline shape consumed by [`simulate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleSpec {
    pub ii: u64,
    pub il: Vec<u64>,
    /// Mask bits drawn per pass for Bayesian layers; the sampler produces
    /// one bit per cycle.
    pub mask_bits: Vec<Option<u64>>,
    pub timesteps: u64,
    /// Number of encoder layers for an autoencoder; `None` for a classifier.
    pub encoder_layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduleResult {
    pub makespan: u64,
    /// Completion cycle of every pass, in pass order.
    pub pass_done: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Arrival {
    time: u64,
    layer: usize,
    pass: usize,
    step: u64,
}

/// Event-driven simulation of `passes` back-to-back passes.
///
/// A layer accepts one step per II once the step has arrived and the
/// pass's masks are ready. A step accepted at `a` reaches the next layer
/// of the same part at `a + IL - II` and leaves the last layer at
/// `a + IL`. The decoder starts a pass once the encoder's final step is
/// done, re-reading the code word every II. Masks for pass `p` are drawn
/// while pass `p - 1` runs, starting at its first accept.
pub fn simulate(spec: &ScheduleSpec, passes: usize) -> Result<ScheduleResult, HwError> {
    let n_layers = spec.il.len();
    if spec.ii == 0 || spec.timesteps == 0 || n_layers == 0 || passes == 0 {
        return Err(HwError::Config("II, T, layers and passes must all be at least 1".into()));
    }
    if spec.mask_bits.len() != n_layers {
        return Err(HwError::Config("mask_bits must have one entry per layer".into()));
    }
    if let Some((layer, &bad)) = spec.il.iter().enumerate().find(|(_, &v)| v < spec.ii) {
        return Err(HwError::IlBelowIi { layer, ii: spec.ii, il: bad });
    }
    let (ii, t_last) = (spec.ii, spec.timesteps - 1);
    let enc_end = spec.encoder_layers.map(|e| e.saturating_sub(1));
    let mut next_free = vec![0u64; n_layers];
    let mut first_accept: Vec<Vec<u64>> = vec![Vec::with_capacity(passes); n_layers];
    let mut pass_done = vec![0u64; passes];
    let mut queue = BinaryHeap::new();
    queue.push(Reverse(Arrival { time: 0, layer: 0, pass: 0, step: 0 }));

    while let Some(Reverse(ev)) = queue.pop() {
        let Arrival { time, layer, pass, step } = ev;
        let ready = match (pass, spec.mask_bits[layer]) {
            (p, Some(bits)) if p > 0 => first_accept[layer][p - 1] + bits,
            _ => 0,
        };
        let accept = time.max(next_free[layer]).max(ready);
        next_free[layer] = accept + ii;
        if step == 0 {
            first_accept[layer].push(accept);
        }
        let done = accept + spec.il[layer];

        if layer == 0 {
            // inputs are buffered on chip, so the next step is always there
            let next = if step < t_last { Some((pass, step + 1)) } else if pass + 1 < passes { Some((pass + 1, 0)) } else { None };
            if let Some((p, s)) = next {
                queue.push(Reverse(Arrival { time: 0, layer: 0, pass: p, step: s }));
            }
        }
        if layer + 1 == n_layers {
            if step == t_last {
                pass_done[pass] = done;
            }
        } else if Some(layer) == enc_end {
            if step == t_last {
                for s in 0..spec.timesteps {
                    queue.push(Reverse(Arrival { time: done + s * ii, layer: layer + 1, pass, step: s }));
                }
            }
        } else {
            queue.push(Reverse(Arrival { time: done - ii, layer: layer + 1, pass, step }));
        }
    }
    let makespan = pass_done.iter().copied().max().unwrap_or(0);
    Ok(ScheduleResult { makespan, pass_done })
}

/// Builds the pipeline for a network and hardware config.
pub fn schedule_spec(arch: &Arch, task: Task, dims: NetDims, hw: &HwConfig) -> Result<ScheduleSpec, HwError> {
    let plan = layer_plan(task, arch, dims.input_dim)?;
    let ii = ii_estimate(&plan, hw)?;
    let mask_bits = plan
        .iter()
        .zip(&arch.bayes)
        .map(|(&(i, h), &b)| b.then_some(4 * (i + h) as u64))
        .collect();
    Ok(ScheduleSpec {
        ii: ii.design,
        il: ii.il_per_layer,
        mask_bits,
        timesteps: dims.timesteps as u64,
        encoder_layers: (task == Task::Autoencoder).then_some(arch.nl),
    })
}

/// Makespan in cycles of `n_inputs * samples` passes.
pub fn simulate_schedule(
    arch: &Arch,
    task: Task,
    dims: NetDims,
    hw: &HwConfig,
    samples: usize,
    n_inputs: usize,
) -> Result<u64, HwError> {
    let spec = schedule_spec(arch, task, dims, hw)?;
    Ok(simulate(&spec, samples * n_inputs)?.makespan)
}

pub fn cycles_to_time(cycles: u64, clock_hz: f64) -> f64 {
    cycles as f64 / clock_hz
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub dsp_per_layer: Vec<u64>,
    pub dsp_dense: u64,
    pub dsp_design: u64,
    pub dsp_budget: u64,
    pub feasible: bool,
    pub ii: u64,
    pub il_per_layer: Vec<u64>,
    /// Cycles for all MC passes of one input.
    pub latency_cycles: u64,
    pub latency_seconds: f64,
    pub samples: usize,
}

/// Full resource and latency estimate for one input processed with
/// `samples` MC passes.
pub fn cost_report(arch: &Arch, task: Task, dims: NetDims, hw: &HwConfig, samples: usize) -> Result<CostReport, HwError> {
    let dsp = dsp_design(arch, task, dims, hw)?;
    let spec = schedule_spec(arch, task, dims, hw)?;
    let latency_cycles = simulate(&spec, samples.max(1))?.makespan;
    Ok(CostReport {
        dsp_per_layer: dsp.per_layer,
        dsp_dense: dsp.dense,
        dsp_design: dsp.total,
        dsp_budget: dsp.budget,
        feasible: dsp.feasible,
        ii: spec.ii,
        il_per_layer: spec.il,
        latency_cycles,
        latency_seconds: cycles_to_time(latency_cycles, hw.clock_hz),
        samples: samples.max(1),
    })
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        writeln!(f, "dsp_per_layer={}", join(&self.dsp_per_layer))?;
        writeln!(f, "dsp_dense={}", self.dsp_dense)?;
        writeln!(f, "dsp_design={}", self.dsp_design)?;
        writeln!(f, "dsp_budget={}", self.dsp_budget)?;
        writeln!(f, "feasible={}", self.feasible)?;
        writeln!(f, "ii={}", self.ii)?;
        writeln!(f, "il_per_layer={}", join(&self.il_per_layer))?;
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "latency_cycles={}", self.latency_cycles)?;
        write!(f, "latency_ms={:.4}", self.latency_seconds * 1e3)
    }
}
