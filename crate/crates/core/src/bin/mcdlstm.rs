//! Command-line front end: anomaly detection, classification, hardware
//! estimates and design space exploration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mcd_lstm::datakit::{self, NoiseProbe, ThresholdSource};
use mcd_lstm::dse::{self, DseError, Metric, Mode, OptimizationRequest};
use mcd_lstm::hwmodel::{self, Calibration, HwConfig};
use mcd_lstm::rnn::{Arch, NetDims, Task};
use mcd_lstm::Error;

const EXIT_INVALID: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "mcdlstm", version, about = "Monte Carlo Dropout LSTM accelerator model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a UCR dataset with an autoencoder and report ROC metrics.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Write per-sample scores as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify a UCR dataset and report accuracy, AP, AR and entropy.
    Classify {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Also report mean entropy on Gaussian noise sequences.
        #[arg(long)]
        entropy_probe: bool,
    },
    /// DSP and latency estimate for one architecture and reuse setting.
    Estimate {
        /// H,NL,B, e.g. 16,2,YNYN
        #[arg(long)]
        arch: String,
        #[arg(long)]
        task: String,
        /// RX,RH[,RD]
        #[arg(long)]
        reuse: String,
        #[arg(long)]
        dsp_total: u64,
        #[arg(long, default_value_t = 1e8)]
        clock: f64,
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Pick an architecture and reuse factors from a lookup table.
    Dse {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        dsp_total: u64,
        /// Minimum requirement `metric=threshold`; repeatable.
        #[arg(long = "min")]
        min: Vec<String>,
        #[arg(long)]
        task: Option<String>,
    },
}

enum Failure {
    Invalid(String),
    Infeasible(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Dse(DseError::Infeasible { .. } | DseError::NoFeasibleArchitecture(_)) => Failure::Infeasible(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

macro_rules! impl_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}
impl_from!(mcd_lstm::datakit::DataError, DseError, mcd_lstm::hwmodel::HwError, mcd_lstm::rnn::EngineError);

fn parse_reuse(s: &str) -> Result<Vec<u64>, Failure> {
    let parts: Result<Vec<u64>, _> = s.split(',').map(|p| p.trim().parse::<u64>()).collect();
    match parts {
        Ok(v) if (2..=3).contains(&v.len()) && v.iter().all(|&r| r >= 1) => Ok(v),
        _ => Err(Failure::Invalid(format!("--reuse expects RX,RH[,RD] with positive integers, got `{s}`"))),
    }
}

fn parse_min(s: &str) -> Result<(Metric, f64), Failure> {
    let (m, v) = s.split_once('=').ok_or_else(|| Failure::Invalid(format!("--min expects metric=threshold, got `{s}`")))?;
    let metric: Metric = m.parse()?;
    let thr: f64 = v.trim().parse().map_err(|_| Failure::Invalid(format!("bad threshold `{v}`")))?;
    Ok((metric, thr))
}

fn check_samples(samples: usize) -> Result<(), Failure> {
    if samples == 0 {
        return Err(Failure::Invalid("--samples must be at least 1".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Detect { weights, data, samples, seed, report } => {
            check_samples(samples)?;
            let net = datakit::load_weights(&weights)?;
            let ds = datakit::load_ucr(&data)?;
            let rep = datakit::anomaly_pipeline(&net, &ds, samples, seed, 0, &ThresholdSource::Youden)?;
            println!("{}", rep.summary());
            if let Some(path) = report {
                std::fs::write(&path, rep.per_sample_csv()?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Classify { weights, data, samples, seed, entropy_probe } => {
            check_samples(samples)?;
            let net = datakit::load_weights(&weights)?;
            let ds = datakit::load_ucr(&data)?;
            let probe = entropy_probe.then(NoiseProbe::default);
            let rep = datakit::classify_pipeline(&net, &ds, samples, seed, probe)?;
            println!("{}", rep.summary());
        }
        Command::Estimate { arch, task, reuse, dsp_total, clock, calibration } => {
            let arch: Arch = arch.parse()?;
            let task: Task = task.parse()?;
            arch.validate(task)?;
            let r = parse_reuse(&reuse)?;
            let rd = r.get(2).copied().unwrap_or(if task == Task::Autoencoder { r[0] } else { 1 });
            let mut hw = HwConfig::new(r[0], r[1], rd, dsp_total);
            hw.clock_hz = clock;
            if let Some(path) = calibration {
                hw.calibration = Some(Calibration::load(path)?);
            }
            let cost = hwmodel::cost_report(&arch, task, NetDims::ecg(task), &hw, 1)?;
            println!("arch={arch}\ntask={task}\nrx={}\nrh={}\nrd={}\ndsp_total={dsp_total}", hw.rx, hw.rh, hw.rd);
            println!("{cost}");
            if !cost.feasible {
                return Err(Failure::Infeasible(format!(
                    "design needs {} DSPs, budget is {}",
                    cost.dsp_design, cost.dsp_budget
                )));
            }
        }
        Command::Dse { table, mode, dsp_total, min, task } => {
            let mode: Mode = mode.parse()?;
            let entries = dse::load_table(&table)?;
            let task = match task {
                Some(t) => t.parse::<Task>()?,
                None => infer_task(mode, &entries)?,
            };
            let mut req = OptimizationRequest::new(task, mode, dsp_total);
            req.min_requirements = min.iter().map(|s| parse_min(s)).collect::<Result<_, _>>()?;
            let sel = dse::optimize(&req, &entries)?;
            print!("{}", sel.report());
        }
    }
    Ok(())
}

fn infer_task(mode: Mode, entries: &[dse::LookupEntry]) -> Result<Task, Failure> {
    match mode {
        Mode::Auc => return Ok(Task::Autoencoder),
        Mode::Recall | Mode::Entropy => return Ok(Task::Classifier),
        _ => {}
    }
    let mut tasks: Vec<Task> = entries.iter().map(|e| e.task).collect();
    tasks.sort();
    tasks.dedup();
    match tasks[..] {
        [t] => Ok(t),
        [] => Err(Failure::Infeasible("lookup table is empty".into())),
        _ => Err(Failure::Invalid("table holds several tasks; pass --task".into())),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Infeasible(msg)) => {
            eprintln!("infeasible: {msg}");
            ExitCode::from(EXIT_INFEASIBLE)
        }
    }
}
