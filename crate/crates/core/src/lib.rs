//! Bit-accurate software model of a streaming FPGA accelerator for
//! Monte Carlo Dropout LSTMs.
//!
//! - [`fxp`]: fixed-point arithmetic and activation lookup tables
//! - [`mcrng`]: LFSR-based Bernoulli sampler and dropout masks
//! - [`rnn`]: LSTM engine, autoencoder/classifier topologies, MC prediction
//! - [`hwmodel`]: DSP and latency models plus a pipeline simulator
//! - [`dse`]: architecture and reuse-factor selection
//! - [`metrics`]: ROC/AP/accuracy, entropy, uncertainty decomposition
//! - [`datakit`]: UCR datasets, weight files and evaluation pipelines

pub mod datakit;
pub mod dse;
pub mod fxp;
pub mod hwmodel;
pub mod mcrng;
pub mod metrics;
pub mod rnn;

use thiserror::Error;

/// Any error raised by the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Fxp(#[from] fxp::FxpError),
    #[error(transparent)]
    Rng(#[from] mcrng::RngError),
    #[error(transparent)]
    Engine(#[from] rnn::EngineError),
    #[error(transparent)]
    Hw(#[from] hwmodel::HwError),
    #[error(transparent)]
    Dse(#[from] dse::DseError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Data(#[from] datakit::DataError),
}
