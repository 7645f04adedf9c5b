//! Dataset and weight-file I/O plus the end-to-end evaluation pipelines.
//!
//! Weight files are a text header (`key=value` lines after a magic line)
//! terminated by a blank line, followed by little-endian `i16` raw values:
//! for each layer W_x (gates i,f,g,o, each H×I row-major), W_h (H×H each)
//! and b (H each), then the dense W (O×H_L) and b (O). The header carries
//! the CRC-32 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::fxp::{Fx, QFormat};
use crate::metrics::{self, MetricsError, RocResult};
use crate::rnn::{self, Arch, DenseParams, EngineError, Formats, FxMatrix, LstmLayerParams, NetDims, NetworkParams, Task};

pub const WEIGHTS_MAGIC: &str = "MCDLSTM-WEIGHTS";
pub const WEIGHTS_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: ragged row with {got} values, expected {expected}")]
    Ragged { line: usize, expected: usize, got: usize },
    #[error("line {line}: constant sample cannot be z-normalized")]
    ConstantSample { line: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("not a weight file (missing `{WEIGHTS_MAGIC}` magic)")]
    BadMagic,
    #[error("unsupported weight file version `{0}`")]
    UnknownVersion(String),
    #[error("weight header: {0}")]
    Header(String),
    #[error("payload checksum mismatch: header says {expected:08x}, payload has {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("weights are for a {got} but a {expected} is required")]
    TaskMismatch { expected: Task, got: Task },
    #[error("dataset has T={got}, network expects T={expected}")]
    Length { expected: usize, got: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Unspecified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Vec<f64>>,
    /// 0-based contiguous class indices.
    pub labels: Vec<usize>,
    /// Original label value of each class index.
    pub class_values: Vec<f64>,
    pub split: Split,
    pub normalized: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.class_values.len()
    }

    /// `true` marks an anomaly: every class other than `normal_class`.
    pub fn anomaly_labels(&self, normal_class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l != normal_class).collect()
    }

    /// Rows whose label is `class`.
    pub fn filter_class(&self, class: usize, keep: bool) -> Dataset {
        let (samples, labels) = self
            .samples
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| (l == class) == keep)
            .map(|(s, &l)| (s.clone(), l))
            .unzip();
        Dataset { samples, labels, ..self.clone() }
    }

    /// Appends the anomalous rows of `train` after the rows of `self`.
    /// Both sets must share the class mapping.
    pub fn with_train_anomalies(&self, train: &Dataset, normal_class: usize) -> Dataset {
        let extra = train.filter_class(normal_class, false);
        let mut out = self.clone();
        out.samples.extend(extra.samples);
        out.labels.extend(extra.labels);
        out
    }
}

/// Z-normalizes in place with the population variance.
pub fn normalize_sample(x: &mut [f64]) -> Result<(), DataError> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(DataError::ConstantSample { line: 0 });
    }
    let sd = var.sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    Ok(())
}

/// Parses UCR rows `label, v1 ... vT` separated by commas and/or
/// whitespace, relabels classes by ascending original value and
/// z-normalizes every sample.
pub fn parse_ucr(text: &str, split: Split) -> Result<Dataset, DataError> {
    let mut raw_labels = Vec::new();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for (k, row) in text.lines().enumerate() {
        let line = k + 1;
        if row.trim().is_empty() {
            continue;
        }
        let values = row
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::Parse { line, msg: format!("`{f}` is not a finite number") })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        let (label, series) = values.split_first().ok_or(DataError::Parse { line, msg: "empty row".into() })?;
        if series.is_empty() {
            return Err(DataError::Parse { line, msg: "row has a label but no values".into() });
        }
        if let Some(first) = samples.first() {
            if first.len() != series.len() {
                return Err(DataError::Ragged { line, expected: first.len(), got: series.len() });
            }
        }
        let mut series = series.to_vec();
        normalize_sample(&mut series).map_err(|_| DataError::ConstantSample { line })?;
        raw_labels.push(*label);
        samples.push(series);
    }
    if samples.is_empty() {
        return Err(DataError::Empty);
    }
    let mut class_values = raw_labels.clone();
    class_values.sort_by(f64::total_cmp);
    class_values.dedup();
    let labels = raw_labels
        .iter()
        .map(|v| class_values.iter().position(|c| c == v).expect("label was collected"))
        .collect();
    Ok(Dataset { samples, labels, class_values, split, normalized: true })
}

/// Loads a UCR file. The split is taken from `TRAIN`/`TEST` in the file
/// name when present.
pub fn load_ucr(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let name = path.file_name().map(|n| n.to_string_lossy().to_ascii_uppercase()).unwrap_or_default();
    let split = if name.contains("TRAIN") {
        Split::Train
    } else if name.contains("TEST") {
        Split::Test
    } else {
        Split::Unspecified
    };
    parse_ucr(&std::fs::read_to_string(path)?, split)
}

fn push_fx(buf: &mut Vec<u8>, values: &[Fx]) {
    for v in values {
        buf.extend_from_slice(&(v.raw() as i16).to_le_bytes());
    }
}

/// Serializes a network into the weight-file format.
pub fn weights_to_bytes(net: &NetworkParams) -> Vec<u8> {
    let mut payload = Vec::new();
    for layer in &net.layers {
        for m in &layer.w_x {
            push_fx(&mut payload, m.as_slice());
        }
        for m in &layer.w_h {
            push_fx(&mut payload, m.as_slice());
        }
        for b in &layer.b {
            push_fx(&mut payload, b);
        }
    }
    push_fx(&mut payload, net.dense.w.as_slice());
    push_fx(&mut payload, &net.dense.b);
    let header = [
        format!("{WEIGHTS_MAGIC} {WEIGHTS_VERSION}"),
        format!("task={}", net.task),
        format!("hidden={}", net.arch.hidden),
        format!("layers={}", net.arch.nl),
        format!("bayes={}", net.arch.bayes_string()),
        format!("input={}", net.dims.input_dim),
        format!("output={}", net.dims.output_dim),
        format!("timesteps={}", net.dims.timesteps),
        format!("weight_format={}", net.formats.weight),
        format!("accum_format={}", net.formats.accum),
        format!("dropout_p={:?}", net.dropout_p),
        format!("aleatoric_var={:?}", net.aleatoric_var),
        format!("scale_folded={}", net.scale_folded),
        format!("payload_len={}", payload.len()),
        format!("checksum={:08x}", crc32fast::hash(&payload)),
    ];
    let mut out = header.join("\n").into_bytes();
    out.extend_from_slice(b"\n\n");
    out.extend_from_slice(&payload);
    out
}

pub fn save_weights(net: &NetworkParams, path: impl AsRef<Path>) -> Result<(), DataError> {
    std::fs::write(path, weights_to_bytes(net))?;
    Ok(())
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: QFormat,
}

impl PayloadReader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<Fx>, DataError> {
        let end = self.pos + 2 * n;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| DataError::Header("payload shorter than the shapes in the header".into()))?;
        self.pos = end;
        Ok(chunk
            .chunks_exact(2)
            .map(|c| Fx::from_raw(i16::from_le_bytes([c[0], c[1]]) as i64, self.format))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<FxMatrix, DataError> {
        Ok(FxMatrix::from_fx(rows, cols, self.take(rows * cols)?)?)
    }
}

/// Parses weight-file bytes, verifying magic, version, checksum and the
/// layer shape chain.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<NetworkParams, DataError> {
    let split = bytes.windows(2).position(|w| w == b"\n\n").ok_or(DataError::BadMagic)?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| DataError::BadMagic)?;
    let payload = &bytes[split + 2..];
    let mut lines = header.lines();
    let first = lines.next().unwrap_or("");
    let version = first.strip_prefix(WEIGHTS_MAGIC).ok_or(DataError::BadMagic)?.trim();
    if version != WEIGHTS_VERSION {
        return Err(DataError::UnknownVersion(version.to_string()));
    }
    let mut kv = BTreeMap::new();
    for line in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| DataError::Header(format!("malformed line `{line}`")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| DataError::Header(format!("missing `{k}`")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, DataError> {
        v.parse().map_err(|_| DataError::Header(format!("bad value `{v}` for `{k}`")))
    }
    let expected = u32::from_str_radix(get("checksum")?, 16).map_err(|_| DataError::Header("bad checksum".into()))?;
    let actual = crc32fast::hash(payload);
    if expected != actual {
        return Err(DataError::Checksum { expected, actual });
    }
    let declared: usize = num("payload_len", get("payload_len")?)?;
    if declared != payload.len() {
        return Err(DataError::Header(format!("payload is {} bytes, header says {declared}", payload.len())));
    }

    let task: Task = get("task")?.parse()?;
    let arch = Arch::new(num("hidden", get("hidden")?)?, num("layers", get("layers")?)?, get("bayes")?)?;
    let dims = NetDims {
        timesteps: num("timesteps", get("timesteps")?)?,
        input_dim: num("input", get("input")?)?,
        output_dim: num("output", get("output")?)?,
    };
    let formats = Formats {
        weight: get("weight_format")?.parse().map_err(|e| DataError::Header(format!("{e}")))?,
        accum: get("accum_format")?.parse().map_err(|e| DataError::Header(format!("{e}")))?,
    };
    formats.validate()?;
    let dropout_p: f64 = num("dropout_p", get("dropout_p")?)?;
    let aleatoric_var: f64 = num("aleatoric_var", get("aleatoric_var")?)?;
    let scale_folded: bool = num("scale_folded", get("scale_folded")?)?;

    let plan = rnn::layer_plan(task, &arch, dims.input_dim)?;
    let mut rd = PayloadReader { bytes: payload, pos: 0, format: formats.weight };
    let mut layers = Vec::with_capacity(plan.len());
    for (k, &(i, h)) in plan.iter().enumerate() {
        let mut w_x = Vec::with_capacity(4);
        for _ in 0..4 {
            w_x.push(rd.matrix(h, i)?);
        }
        let mut w_h = Vec::with_capacity(4);
        for _ in 0..4 {
            w_h.push(rd.matrix(h, h)?);
        }
        let mut b = Vec::with_capacity(4);
        for _ in 0..4 {
            b.push(rd.take(h)?);
        }
        layers.push(LstmLayerParams {
            input_dim: i,
            hidden: h,
            w_x: w_x.try_into().expect("four gates"),
            w_h: w_h.try_into().expect("four gates"),
            b: b.try_into().expect("four gates"),
            is_bayesian: arch.bayes[k],
        });
    }
    let h_last = plan.last().map_or(0, |p| p.1);
    let dense = DenseParams { w: rd.matrix(dims.output_dim, h_last)?, b: rd.take(dims.output_dim)? };
    if rd.pos != payload.len() {
        return Err(DataError::Header(format!("{} trailing payload bytes", payload.len() - rd.pos)));
    }
    let mut net = NetworkParams::new(task, arch, dims, layers, dense, formats, aleatoric_var, scale_folded)?;
    net.dropout_p = dropout_p;
    Ok(net)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkParams, DataError> {
    weights_from_bytes(&std::fs::read(path)?)
}

fn as_sequence(x: &[f64]) -> Vec<Vec<f64>> {
    x.iter().map(|&v| vec![v]).collect()
}

fn check_input(net: &NetworkParams, ds: &Dataset, task: Task) -> Result<(), DataError> {
    if net.task != task {
        return Err(DataError::TaskMismatch { expected: task, got: net.task });
    }
    if ds.is_empty() {
        return Err(DataError::Empty);
    }
    if net.dims.input_dim != 1 {
        return Err(EngineError::Shape("datasets are univariate; the network must take one feature".into()).into());
    }
    if ds.timesteps() != net.dims.timesteps {
        return Err(DataError::Length { expected: net.dims.timesteps, got: ds.timesteps() });
    }
    Ok(())
}

/// Per-sample outputs of the anomaly detector.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    /// RMSE between the mean reconstruction and the input.
    pub score: f64,
    /// Mean epistemic variance over the reconstruction.
    pub epistemic: f64,
    /// Gaussian NLL of the input under the predictive distribution; `None`
    /// when some predictive variance is zero.
    pub nll: Option<f64>,
}

/// MC reconstruction scores for every sample, computed in parallel with
/// per-sample seed `seed ^ index`.
pub fn reconstruction_scores(net: &NetworkParams, ds: &Dataset, samples: usize, seed: u64) -> Result<Vec<SampleScore>, DataError> {
    check_input(net, ds, Task::Autoencoder)?;
    ds.samples
        .par_iter()
        .enumerate()
        .map(|(n, x)| {
            let pred = rnn::mc_predict(net, &as_sequence(x), samples, seed ^ n as u64)?;
            let nll = match metrics::regression_metrics(&pred.mean, &pred.total_var, x) {
                Ok(reg) => Some(reg.nll),
                Err(MetricsError::NonPositiveVariance(_)) => None,
                Err(e) => return Err(e.into()),
            };
            let epistemic = pred.epistemic_var.iter().sum::<f64>() / pred.epistemic_var.len() as f64;
            Ok(SampleScore { score: metrics::rmse(&pred.mean, x), epistemic, nll })
        })
        .collect()
}

/// Where the anomaly cut-off comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdSource {
    /// Youden's J on the evaluated set.
    Youden,
    /// A quantile of the scores of normal training samples.
    TrainNormalQuantile { train: Dataset, normal_class: usize, quantile: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub per_sample: Vec<SampleScore>,
    pub labels: Vec<bool>,
    pub roc: RocResult,
    pub threshold: f64,
    pub accuracy: f64,
    pub mean_nll: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl AnomalyReport {
    pub fn summary(&self) -> String {
        let positives = self.labels.iter().filter(|&&l| l).count();
        let nll = self.mean_nll.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        format!(
            "samples={}\nanomalies={}\nmc_samples={}\nseed={}\nauc={:.6}\nap={:.6}\naccuracy={:.6}\nthreshold={:.6}\nyouden_threshold={:.6}\nmean_nll={}",
            self.labels.len(),
            positives,
            self.samples,
            self.seed,
            self.roc.auc,
            self.roc.ap,
            self.accuracy,
            self.threshold,
            self.roc.best_threshold,
            nll
        )
    }

    /// Per-sample CSV: index, label, score, epistemic variance, prediction.
    pub fn per_sample_csv(&self) -> Result<String, DataError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| DataError::Io(e.into());
        w.write_record(["index", "anomaly", "score", "epistemic_var", "nll", "predicted_anomaly"]).map_err(io)?;
        for (n, (s, &l)) in self.per_sample.iter().zip(&self.labels).enumerate() {
            w.write_record([
                n.to_string(),
                u8::from(l).to_string(),
                s.score.to_string(),
                s.epistemic.to_string(),
                s.nll.map_or(String::new(), |v| v.to_string()),
                u8::from(s.score >= self.threshold).to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| DataError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Scores every sample, then runs ROC analysis with anomalies (every class
/// but `normal_class`) as positives.
pub fn anomaly_pipeline(
    net: &NetworkParams,
    ds: &Dataset,
    samples: usize,
    seed: u64,
    normal_class: usize,
    threshold: &ThresholdSource,
) -> Result<AnomalyReport, DataError> {
    let per_sample = reconstruction_scores(net, ds, samples, seed)?;
    let labels = ds.anomaly_labels(normal_class);
    let scores: Vec<f64> = per_sample.iter().map(|s| s.score).collect();
    let roc = metrics::roc_analysis(&scores, &labels)?;
    let threshold = match threshold {
        ThresholdSource::Youden => roc.best_threshold,
        ThresholdSource::TrainNormalQuantile { train, normal_class, quantile } => {
            let normals = train.filter_class(*normal_class, true);
            if normals.is_empty() {
                return Err(DataError::Empty);
            }
            let mut s: Vec<f64> = reconstruction_scores(net, &normals, samples, seed)?.iter().map(|s| s.score).collect();
            s.sort_by(f64::total_cmp);
            let q = quantile.clamp(0.0, 1.0);
            s[((s.len() - 1) as f64 * q).round() as usize]
        }
    };
    let accuracy = metrics::accuracy_at(&scores, &labels, threshold);
    let mean_nll = per_sample.iter().map(|s| s.nll).sum::<Option<f64>>().map(|t| t / per_sample.len() as f64);
    Ok(AnomalyReport { per_sample, labels, roc, threshold, accuracy, mean_nll, samples, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyReport {
    pub probs: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub entropies: Vec<f64>,
    pub accuracy: f64,
    pub macro_ap: f64,
    pub macro_ar: f64,
    pub mean_entropy: f64,
    pub noise_entropy: Option<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl ClassifyReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "samples={}\nmc_samples={}\nseed={}\naccuracy={:.6}\nmacro_ap={:.6}\nmacro_ar={:.6}\nmean_entropy={:.6}",
            self.predictions.len(),
            self.samples,
            self.seed,
            self.accuracy,
            self.macro_ap,
            self.macro_ar,
            self.mean_entropy
        );
        if let Some(h) = self.noise_entropy {
            s.push_str(&format!("\nnoise_entropy={h:.6}"));
        }
        s
    }
}

/// Settings of the Gaussian-noise entropy probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseProbe {
    pub sequences: usize,
    pub seed: u64,
}

impl Default for NoiseProbe {
    fn default() -> Self {
        NoiseProbe { sequences: 500, seed: 0x5eed }
    }
}

fn class_predictions(net: &NetworkParams, inputs: &[Vec<f64>], samples: usize, seed: u64) -> Result<Vec<(Vec<f64>, f64)>, DataError> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(n, x)| {
            let p = rnn::mc_predict(net, &as_sequence(x), samples, seed ^ n as u64)?;
            Ok((p.class_probs.expect("classifier output"), p.entropy.expect("classifier output")))
        })
        .collect()
}

/// Mean predictive entropy on unit-variance Gaussian noise sequences of
/// the network's length.
pub fn noise_entropy_probe(net: &NetworkParams, samples: usize, seed: u64, probe: NoiseProbe) -> Result<f64, DataError> {
    if net.task != Task::Classifier {
        return Err(DataError::TaskMismatch { expected: Task::Classifier, got: net.task });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let noise: Vec<Vec<f64>> = (0..probe.sequences)
        .map(|_| (0..net.dims.timesteps).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let out = class_predictions(net, &noise, samples, seed)?;
    Ok(out.iter().map(|(_, h)| h).sum::<f64>() / out.len().max(1) as f64)
}

pub fn classify_pipeline(
    net: &NetworkParams,
    ds: &Dataset,
    samples: usize,
    seed: u64,
    probe: Option<NoiseProbe>,
) -> Result<ClassifyReport, DataError> {
    check_input(net, ds, Task::Classifier)?;
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= net.dims.output_dim) {
        return Err(MetricsError::LabelOutOfRange { label: bad, classes: net.dims.output_dim }.into());
    }
    let out = class_predictions(net, &ds.samples, samples, seed)?;
    let (probs, entropies): (Vec<Vec<f64>>, Vec<f64>) = out.into_iter().unzip();
    let cm = metrics::classification_metrics(&probs, &ds.labels)?;
    let predictions = probs.iter().map(|p| metrics::argmax(p)).collect();
    let noise_entropy = probe.map(|p| noise_entropy_probe(net, samples, seed, p)).transpose()?;
    Ok(ClassifyReport {
        mean_entropy: entropies.iter().sum::<f64>() / entropies.len() as f64,
        probs,
        predictions,
        entropies,
        accuracy: cm.accuracy,
        macro_ap: cm.macro_ap,
        macro_ar: cm.macro_ar,
        noise_entropy,
        samples,
        seed,
    })
}
