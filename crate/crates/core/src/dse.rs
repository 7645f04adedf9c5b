//! Two-stage design space exploration: pick an architecture from a lookup
//! table of benchmarked models, then pick reuse factors that fit the DSP
//! budget with the lowest initiation interval.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::hwmodel::{self, CostReport, HwConfig, HwError};
use crate::rnn::{layer_plan, Arch, EngineError, NetDims, Task};

#[derive(Debug, Error)]
pub enum DseError {
    #[error("lookup table: {0}")]
    Table(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("cannot read lookup table: {0}")]
    Io(#[from] std::io::Error),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("unknown optimization mode `{0}`")]
    UnknownMode(String),
    #[error("{mode} is not available for the {task} task")]
    InvalidMode { mode: Mode, task: Task },
    #[error("no feasible architecture: {0}")]
    NoFeasibleArchitecture(String),
    #[error("{arch} does not fit: needs at least {min_dsp} DSPs, budget is {budget}")]
    Infeasible { arch: String, min_dsp: u64, budget: u64 },
    #[error(transparent)]
    Hw(#[from] HwError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Metrics a lookup table may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Accuracy,
    Ap,
    Auc,
    Ar,
    Entropy,
    Rmse,
    Nll,
}

impl Metric {
    pub const ALL: [Metric; 7] =
        [Metric::Accuracy, Metric::Ap, Metric::Auc, Metric::Ar, Metric::Entropy, Metric::Rmse, Metric::Nll];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Ap => "ap",
            Metric::Auc => "auc",
            Metric::Ar => "ar",
            Metric::Entropy => "entropy",
            Metric::Rmse => "rmse",
            Metric::Nll => "nll",
        }
    }

    /// Error metrics pass a requirement when at or below the threshold.
    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::Rmse | Metric::Nll)
    }

    pub fn meets(self, value: f64, threshold: f64) -> bool {
        if self.lower_is_better() {
            value <= threshold
        } else {
            value >= threshold
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = DseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Metric::Accuracy,
            "ap" | "precision" | "average_precision" => Metric::Ap,
            "auc" => Metric::Auc,
            "ar" | "recall" | "average_recall" => Metric::Ar,
            "entropy" => Metric::Entropy,
            "rmse" => Metric::Rmse,
            "nll" => Metric::Nll,
            _ => return Err(DseError::UnknownMetric(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Latency,
    Accuracy,
    Precision,
    Recall,
    Auc,
    Entropy,
}

impl Mode {
    /// The table metric this mode maximizes; `None` for latency.
    pub fn metric(self) -> Option<Metric> {
        match self {
            Mode::Latency => None,
            Mode::Accuracy => Some(Metric::Accuracy),
            Mode::Precision => Some(Metric::Ap),
            Mode::Recall => Some(Metric::Ar),
            Mode::Auc => Some(Metric::Auc),
            Mode::Entropy => Some(Metric::Entropy),
        }
    }

    pub fn valid_for(self, task: Task) -> bool {
        match self {
            Mode::Recall | Mode::Entropy => task == Task::Classifier,
            Mode::Auc => task == Task::Autoencoder,
            _ => true,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Latency => "Opt-Latency",
            Mode::Accuracy => "Opt-Accuracy",
            Mode::Precision => "Opt-Precision",
            Mode::Recall => "Opt-Recall",
            Mode::Auc => "Opt-AUC",
            Mode::Entropy => "Opt-Entropy",
        })
    }
}

impl FromStr for Mode {
    type Err = DseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let key = lower.strip_prefix("opt-").or_else(|| lower.strip_prefix("opt_")).unwrap_or(&lower);
        Ok(match key {
            "latency" => Mode::Latency,
            "accuracy" => Mode::Accuracy,
            "precision" => Mode::Precision,
            "recall" => Mode::Recall,
            "auc" => Mode::Auc,
            "entropy" => Mode::Entropy,
            _ => return Err(DseError::UnknownMode(s.to_string())),
        })
    }
}

/// One benchmarked architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupEntry {
    pub task: Task,
    pub arch: Arch,
    /// MC samples the metrics were measured with.
    pub samples: usize,
    pub metrics: BTreeMap<Metric, f64>,
    pub source: String,
}

const FIXED_COLUMNS: [&str; 5] = ["task", "H", "NL", "B", "S"];

/// Parses a lookup table CSV with header `task,H,NL,B,S,<metric>...`. An
/// optional `source` column carries provenance; empty metric cells mean
/// "not measured".
pub fn read_table<R: Read>(reader: R) -> Result<Vec<LookupEntry>, DseError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() < FIXED_COLUMNS.len() || names[..5].iter().zip(FIXED_COLUMNS).any(|(a, b)| !a.eq_ignore_ascii_case(b)) {
        return Err(DseError::Table(format!("header must start with {}", FIXED_COLUMNS.join(","))));
    }
    enum Col {
        Metric(Metric),
        Source,
    }
    let extra: Vec<Col> = names[5..]
        .iter()
        .map(|n| if n.eq_ignore_ascii_case("source") { Ok(Col::Source) } else { n.parse().map(Col::Metric) })
        .collect::<Result<_, _>>()?;
    let mut entries = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let err = |msg: String| DseError::Table(format!("row {line}: {msg}"));
        let field = |k: usize| rec.get(k).ok_or_else(|| err(format!("missing column {}", names[k])));
        let task: Task = field(0)?.parse().map_err(|e: EngineError| err(e.to_string()))?;
        let hidden: usize = field(1)?.parse().map_err(|_| err("bad H".into()))?;
        let nl: usize = field(2)?.parse().map_err(|_| err("bad NL".into()))?;
        let arch = Arch::new(hidden, nl, field(3)?).map_err(|e| err(e.to_string()))?;
        arch.validate(task).map_err(|e| err(e.to_string()))?;
        let samples: usize = field(4)?.parse().map_err(|_| err("bad S".into()))?;
        if samples == 0 {
            return Err(err("S must be at least 1".into()));
        }
        let mut metrics = BTreeMap::new();
        let mut source = String::new();
        for (k, col) in extra.iter().enumerate() {
            let cell = rec.get(k + 5).unwrap_or("");
            match col {
                Col::Source => source = cell.to_string(),
                Col::Metric(m) if !cell.is_empty() => {
                    let v: f64 = cell.parse().map_err(|_| err(format!("bad {m} value `{cell}`")))?;
                    if !v.is_finite() {
                        return Err(err(format!("{m} is not finite")));
                    }
                    metrics.insert(*m, v);
                }
                Col::Metric(_) => {}
            }
        }
        entries.push(LookupEntry { task, arch, samples, metrics, source });
    }
    Ok(entries)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<Vec<LookupEntry>, DseError> {
    read_table(std::fs::File::open(path)?)
}

/// Writes entries with every metric that appears in any of them.
pub fn write_table<W: std::io::Write>(entries: &[LookupEntry], writer: W) -> Result<(), DseError> {
    let used: Vec<Metric> = Metric::ALL.into_iter().filter(|m| entries.iter().any(|e| e.metrics.contains_key(m))).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(used.iter().map(|m| m.name().to_string()));
    header.push("source".into());
    w.write_record(&header)?;
    for e in entries {
        let mut rec = vec![
            e.task.to_string(),
            e.arch.hidden.to_string(),
            e.arch.nl.to_string(),
            e.arch.bayes_string(),
            e.samples.to_string(),
        ];
        rec.extend(used.iter().map(|m| e.metrics.get(m).map_or(String::new(), |v| v.to_string())));
        rec.push(e.source.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationRequest {
    pub task: Task,
    pub mode: Mode,
    pub dsp_total: u64,
    pub clock_hz: f64,
    pub min_requirements: Vec<(Metric, f64)>,
    pub dims: NetDims,
    /// Template for clock, pipeline depth and calibration; its reuse
    /// factors are replaced by the search.
    pub hw_template: HwConfig,
}

impl OptimizationRequest {
    pub fn new(task: Task, mode: Mode, dsp_total: u64) -> OptimizationRequest {
        OptimizationRequest {
            task,
            mode,
            dsp_total,
            clock_hz: hwmodel::DEFAULT_CLOCK_HZ,
            min_requirements: Vec::new(),
            dims: NetDims::ecg(task),
            hw_template: HwConfig::new(1, 1, 1, dsp_total),
        }
    }

    fn template(&self) -> HwConfig {
        HwConfig { dsp_total: self.dsp_total, clock_hz: self.clock_hz, ..self.hw_template.clone() }
    }
}

/// Upper end of the reuse-factor grid: beyond it every engine already has
/// a single multiplier.
pub fn r_max(arch: &Arch, input_dim: usize) -> u64 {
    4 * (arch.hidden * input_dim.max(arch.hidden)) as u64
}

/// Exhaustive reuse-factor search. Among configs within budget, minimize
/// II, then DSPs, then (R_x, R_h). R_d follows R_x for the autoencoder and
/// is 1 for the classifier.
pub fn search_reuse_factors(
    arch: &Arch,
    task: Task,
    dims: NetDims,
    template: &HwConfig,
) -> Result<HwConfig, DseError> {
    template.validate()?;
    let plan: Vec<(u64, u64)> =
        layer_plan(task, arch, dims.input_dim)?.iter().map(|&(i, h)| (i as u64, h as u64)).collect();
    let h_last = plan.last().map_or(0, |p| p.1);
    let (o, t) = (dims.output_dim as u64, dims.timesteps as u64);
    let rd_of = |rx: u64| if task == Task::Autoencoder { rx } else { 1 };
    let dsp = |rx: u64, rh: u64| -> u64 {
        plan.iter().map(|&(i, h)| hwmodel::dsp_layer(i, h, rx, rh)).sum::<u64>()
            + hwmodel::dsp_dense(task, h_last, o, t, rd_of(rx))
    };
    let budget = hwmodel::dsp_budget(template.dsp_total);
    let rm = r_max(arch, dims.input_dim);
    let ii_of = |rx: u64, rh: u64| -> Result<u64, HwError> {
        let mut hw = template.clone();
        (hw.rx, hw.rh) = (rx, rh);
        let dims: Vec<(usize, usize)> = plan.iter().map(|&(i, h)| (i as usize, h as usize)).collect();
        Ok(hwmodel::ii_estimate(&dims, &hw)?.design)
    };
    let calibrated = template.calibration.is_some();
    let best = (1..=rm)
        .into_par_iter()
        .filter_map(|rx| {
            (1..=rm)
                .filter_map(|rh| {
                    let d = dsp(rx, rh);
                    if d > budget {
                        return None;
                    }
                    let ii = if calibrated {
                        ii_of(rx, rh).ok()?
                    } else {
                        plan.iter().map(|&(i, h)| hwmodel::ii_default(i, h, rx, rh)).max()?
                    };
                    Some((ii, d, rx, rh))
                })
                .min()
        })
        .min();
    match best {
        Some((_, _, rx, rh)) => Ok(HwConfig { rx, rh, rd: rd_of(rx), ..template.clone() }),
        None => Err(DseError::Infeasible { arch: arch.to_string(), min_dsp: dsp(rm, rm), budget }),
    }
}

/// An entry that passed the filters, with its hardware realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub entry: LookupEntry,
    pub hw: HwConfig,
    pub cost: CostReport,
}

impl Candidate {
    /// Latency tie chain: latency, DSPs, H, Bayesian layers, B, NL, S.
    fn latency_key(&self) -> (u64, u64, usize, usize, String, usize, usize) {
        let a = &self.entry.arch;
        (self.cost.latency_cycles, self.cost.dsp_design, a.hidden, a.bayesian_layers(), a.bayes_string(), a.nl, self.entry.samples)
    }
}

fn passes_filters(req: &OptimizationRequest, e: &LookupEntry) -> bool {
    e.task == req.task
        && req.mode.metric().map_or(true, |m| e.metrics.contains_key(&m))
        && req
            .min_requirements
            .iter()
            .all(|&(m, thr)| e.metrics.get(&m).is_some_and(|&v| m.meets(v, thr)))
}

/// Filters the table, realizes each surviving architecture in hardware and
/// returns the best one for the request's mode. Entries that cannot fit
/// the DSP budget at any reuse factor are dropped.
pub fn select_architecture(req: &OptimizationRequest, table: &[LookupEntry]) -> Result<Candidate, DseError> {
    if !req.mode.valid_for(req.task) {
        return Err(DseError::InvalidMode { mode: req.mode, task: req.task });
    }
    let template = req.template();
    template.validate()?;
    let filtered: Vec<&LookupEntry> = table.iter().filter(|e| passes_filters(req, e)).collect();
    if filtered.is_empty() {
        return Err(DseError::NoFeasibleArchitecture(format!(
            "no {} entry meets the requirements",
            req.task
        )));
    }
    let mut candidates = Vec::with_capacity(filtered.len());
    for e in &filtered {
        let hw = match search_reuse_factors(&e.arch, req.task, req.dims, &template) {
            Ok(hw) => hw,
            Err(DseError::Infeasible { .. }) => continue,
            Err(other) => return Err(other),
        };
        let cost = hwmodel::cost_report(&e.arch, req.task, req.dims, &hw, e.samples)?;
        candidates.push(Candidate { entry: (*e).clone(), hw, cost });
    }
    let best = match req.mode.metric() {
        None => candidates.into_iter().min_by(|a, b| a.latency_key().cmp(&b.latency_key())),
        Some(m) => candidates.into_iter().min_by(|a, b| {
            let (va, vb) = (a.entry.metrics[&m], b.entry.metrics[&m]);
            vb.total_cmp(&va).then_with(|| a.latency_key().cmp(&b.latency_key()))
        }),
    };
    best.ok_or_else(|| {
        DseError::NoFeasibleArchitecture(format!(
            "{} matching entries, none fits {} DSPs",
            filtered.len(),
            hwmodel::dsp_budget(req.dsp_total)
        ))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedConfig {
    pub mode: Mode,
    pub task: Task,
    pub entry: LookupEntry,
    pub hw: HwConfig,
    pub predicted: CostReport,
}

pub fn optimize(req: &OptimizationRequest, table: &[LookupEntry]) -> Result<SelectedConfig, DseError> {
    let c = select_architecture(req, table)?;
    debug_assert!(c.cost.feasible);
    Ok(SelectedConfig { mode: req.mode, task: req.task, entry: c.entry, hw: c.hw, predicted: c.cost })
}

impl SelectedConfig {
    /// Human-readable summary followed by a `key=value` block.
    pub fn report(&self) -> String {
        let a = &self.entry.arch;
        let p = &self.predicted;
        let metrics: Vec<String> = self.entry.metrics.iter().map(|(m, v)| format!("{m}={v}")).collect();
        let mut s = String::new();
        let _ = writeln!(s, "{} for {}", self.mode, self.task);
        let _ = writeln!(s, "  architecture  H={} NL={} B={} S={}", a.hidden, a.nl, a.bayes_string(), self.entry.samples);
        let _ = writeln!(s, "  reuse         R_x={} R_h={} R_d={}", self.hw.rx, self.hw.rh, self.hw.rd);
        let _ = writeln!(s, "  DSPs          {} of {} allowed ({} available)", p.dsp_design, p.dsp_budget, self.hw.dsp_total);
        let _ = writeln!(
            s,
            "  timing        II={} cycles, {} cycles for {} passes = {:.3} ms at {} MHz",
            p.ii,
            p.latency_cycles,
            p.samples,
            p.latency_seconds * 1e3,
            self.hw.clock_hz / 1e6
        );
        let _ = writeln!(s, "  table metrics {}", metrics.join(" "));
        let _ = writeln!(s);
        let _ = writeln!(s, "[selected]");
        let kv: Vec<(&str, String)> = vec![
            ("mode", self.mode.to_string()),
            ("task", self.task.to_string()),
            ("arch", a.to_string()),
            ("rx", self.hw.rx.to_string()),
            ("rh", self.hw.rh.to_string()),
            ("rd", self.hw.rd.to_string()),
            ("dsp_total", self.hw.dsp_total.to_string()),
            ("clock_hz", self.hw.clock_hz.to_string()),
        ];
        for (k, v) in kv {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "{p}");
        for (m, v) in &self.entry.metrics {
            let _ = writeln!(s, "metric.{m}={v}");
        }
        if !self.entry.source.is_empty() {
            let _ = writeln!(s, "source={}", self.entry.source);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TABLE: &str = "\
task,H,NL,B,S,accuracy,ap,auc,ar,entropy,source
autoencoder,8,1,NN,1,0.93,0.87,0.95,,,t1
autoencoder,16,2,YNYN,30,0.96,0.98,0.99,,,t2
classifier,8,1,N,1,0.90,0.62,,0.66,0.15,t3
classifier,8,3,NYN,30,0.93,0.67,,0.67,0.14,t4
classifier,8,3,YNY,30,0.92,0.69,,0.64,0.30,t5
classifier,8,2,YN,30,0.91,0.64,,0.67,0.20,t6
classifier,8,3,YNN,30,0.89,0.59,,0.64,0.60,t7
";

    fn table() -> Vec<LookupEntry> {
        read_table(TABLE.as_bytes()).unwrap()
    }

    fn pick(task: Task, mode: Mode) -> String {
        optimize(&OptimizationRequest::new(task, mode, 900), &table()).unwrap().entry.arch.to_string()
    }

    #[test]
    fn parse_names() {
        assert_eq!("Opt-AUC".parse::<Mode>().unwrap(), Mode::Auc);
        assert_eq!("latency".parse::<Mode>().unwrap(), Mode::Latency);
        assert!("Opt-Speed".parse::<Mode>().is_err());
        assert_eq!("precision".parse::<Metric>().unwrap(), Metric::Ap);
        assert!("f1".parse::<Metric>().is_err());
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
    }

    #[test]
    fn table_round_trip() {
        let t = table();
        assert_eq!(t.len(), 7);
        assert_eq!(t[1].metrics[&Metric::Auc], 0.99);
        assert!(!t[2].metrics.contains_key(&Metric::Auc));
        let mut buf = Vec::new();
        write_table(&t, &mut buf).unwrap();
        assert_eq!(read_table(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn table_errors() {
        assert!(read_table("H,NL\n".as_bytes()).is_err());
        assert!(read_table("task,H,NL,B,S,f1\n".as_bytes()).is_err());
        assert!(read_table("task,H,NL,B,S,accuracy\nclassifier,8,2,Y,30,0.9\n".as_bytes()).is_err());
        assert!(read_table("task,H,NL,B,S,accuracy\nclassifier,8,1,Y,30,abc\n".as_bytes()).is_err());
        assert!(read_table("task,H,NL,B,S,accuracy\nclassifier,8,1,Y,0,0.9\n".as_bytes()).is_err());
    }

    #[test]
    fn golden_selections() {
        for mode in [Mode::Accuracy, Mode::Precision, Mode::Auc] {
            assert_eq!(pick(Task::Autoencoder, mode), "16,2,YNYN");
        }
        assert_eq!(pick(Task::Autoencoder, Mode::Latency), "8,1,NN");
        assert_eq!(pick(Task::Classifier, Mode::Latency), "8,1,N");
        assert_eq!(pick(Task::Classifier, Mode::Accuracy), "8,3,NYN");
        assert_eq!(pick(Task::Classifier, Mode::Precision), "8,3,YNY");
        assert_eq!(pick(Task::Classifier, Mode::Recall), "8,2,YN");
        assert_eq!(pick(Task::Classifier, Mode::Entropy), "8,3,YNN");
    }

    #[test]
    fn invalid_modes() {
        let t = table();
        for (task, mode) in [(Task::Autoencoder, Mode::Recall), (Task::Autoencoder, Mode::Entropy), (Task::Classifier, Mode::Auc)] {
            assert!(matches!(
                optimize(&OptimizationRequest::new(task, mode, 900), &t),
                Err(DseError::InvalidMode { .. })
            ));
        }
    }

    #[test]
    fn requirements_filter() {
        let t = table();
        let mut req = OptimizationRequest::new(Task::Classifier, Mode::Latency, 900);
        req.min_requirements = vec![(Metric::Accuracy, 0.99)];
        assert!(matches!(optimize(&req, &t), Err(DseError::NoFeasibleArchitecture(_))));
        req.min_requirements = vec![(Metric::Entropy, 0.25)];
        let got = optimize(&req, &t).unwrap();
        assert!(got.entry.metrics[&Metric::Entropy] >= 0.25);
        let mut rm = OptimizationRequest::new(Task::Autoencoder, Mode::Latency, 900);
        let mut with_rmse = t.clone();
        with_rmse[0].metrics.insert(Metric::Rmse, 0.5);
        with_rmse[1].metrics.insert(Metric::Rmse, 0.2);
        rm.min_requirements = vec![(Metric::Rmse, 0.3)];
        assert_eq!(optimize(&rm, &with_rmse).unwrap().entry.arch.to_string(), "16,2,YNYN");
    }

    #[test]
    fn search_trivial_fit_and_tail_floor() {
        let arch = Arch::new(2, 1, "N").unwrap();
        let dims = NetDims { timesteps: 10, input_dim: 1, output_dim: 2 };
        let hw = search_reuse_factors(&arch, Task::Classifier, dims, &HwConfig::new(1, 1, 1, 1000)).unwrap();
        assert_eq!((hw.rx, hw.rh, hw.rd), (1, 1, 1));
        // tail alone is 4H = 8 DSPs
        let err = search_reuse_factors(&arch, Task::Classifier, dims, &HwConfig::new(1, 1, 1, 7)).unwrap_err();
        assert!(matches!(err, DseError::Infeasible { budget: 7, .. }));
    }

    #[test]
    fn search_minimizes_ii_then_dsp() {
        let arch = Arch::new(16, 2, "YNYN").unwrap();
        let dims = NetDims::ecg(Task::Autoencoder);
        let tpl = HwConfig::new(1, 1, 1, 900);
        let hw = search_reuse_factors(&arch, Task::Autoencoder, dims, &tpl).unwrap();
        let got = hwmodel::cost_report(&arch, Task::Autoencoder, dims, &hw, 1).unwrap();
        assert!(got.feasible);
        assert_eq!(hw.rd, hw.rx);
        // brute-force check of the objective on a coarse grid
        for rx in 1..=64 {
            for rh in 1..=64 {
                let cand = HwConfig { rx, rh, rd: rx, ..tpl.clone() };
                let c = hwmodel::cost_report(&arch, Task::Autoencoder, dims, &cand, 1).unwrap();
                if c.feasible {
                    assert!((got.ii, got.dsp_design) <= (c.ii, c.dsp_design), "({rx},{rh}) beats the search");
                }
            }
        }
    }

    #[test]
    fn report_has_key_values() {
        let sel = optimize(&OptimizationRequest::new(Task::Classifier, Mode::Precision, 900), &table()).unwrap();
        let r = sel.report();
        assert!(r.contains("[selected]"));
        assert!(r.contains("arch=8,3,YNY"));
        assert!(r.contains(&format!("rx={}", sel.hw.rx)));
        assert!(r.contains("metric.ap=0.69"));
        assert!(r.contains("feasible=true"));
    }

    fn shuffled(seed: u64) -> Vec<LookupEntry> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut t = table();
        t.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        t
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn selection_ignores_table_order(seed in any::<u64>()) {
            for (task, mode) in [(Task::Classifier, Mode::Recall), (Task::Classifier, Mode::Latency), (Task::Autoencoder, Mode::Accuracy)] {
                let req = OptimizationRequest::new(task, mode, 900);
                prop_assert_eq!(optimize(&req, &shuffled(seed)).unwrap(), optimize(&req, &table()).unwrap());
            }
        }

        #[test]
        fn selected_metric_is_maximal(thr in 0.5f64..0.95) {
            let t = table();
            let mut req = OptimizationRequest::new(Task::Classifier, Mode::Accuracy, 900);
            req.min_requirements = vec![(Metric::Ap, thr)];
            match optimize(&req, &t) {
                Ok(sel) => {
                    prop_assert!(sel.entry.metrics[&Metric::Ap] >= thr);
                    let best = sel.entry.metrics[&Metric::Accuracy];
                    for e in t.iter().filter(|e| e.task == Task::Classifier && e.metrics[&Metric::Ap] >= thr) {
                        prop_assert!(e.metrics[&Metric::Accuracy] <= best);
                    }
                }
                Err(DseError::NoFeasibleArchitecture(_)) => {
                    prop_assert!(t.iter().filter(|e| e.task == Task::Classifier).all(|e| e.metrics[&Metric::Ap] < thr));
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
