//! Shared test helpers: a double-precision reference LSTM and toy models.
#![allow(dead_code)]

use mcd_lstm::datakit::{Dataset, Split};
use mcd_lstm::fxp::{self, Fx, QFormat};
use mcd_lstm::mcrng::MaskSet;
use mcd_lstm::rnn::{
    build_network, Arch, DenseParams, Formats, FxMatrix, LstmLayerParams, NetDims, NetworkParams, ParamInit, Task,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(w: &FxMatrix, x: &[f64]) -> Vec<f64> {
    w.to_f64().iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn masked(v: &[f64], m: Option<&[bool]>) -> Vec<f64> {
    match m {
        Some(m) => v.iter().zip(m).map(|(&a, &k)| if k { a } else { 0.0 }).collect(),
        None => v.to_vec(),
    }
}

/// Float LSTM layer over a sequence from zero state; returns every h_t.
pub fn float_layer(p: &LstmLayerParams, xs: &[Vec<f64>], masks: Option<&MaskSet>) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; p.hidden];
    let mut c = vec![0.0; p.hidden];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let gate = |g: usize| -> Vec<f64> {
            let xg = masked(x, masks.map(|m| m.x[g].as_slice()));
            let hg = masked(&h, masks.map(|m| m.h[g].as_slice()));
            let a = matvec(&p.w_x[g], &xg);
            let b = matvec(&p.w_h[g], &hg);
            a.iter().zip(&b).zip(&p.b[g]).map(|((u, v), w)| u + v + w.to_f64()).collect()
        };
        let (i, f, g, o) = (gate(0), gate(1), gate(2), gate(3));
        for k in 0..p.hidden {
            c[k] = sigmoid(f[k]) * c[k] + sigmoid(i[k]) * g[k].tanh();
            h[k] = sigmoid(o[k]) * c[k].tanh();
        }
        out.push(h.clone());
    }
    out
}

fn float_dense(d: &DenseParams, h: &[f64]) -> Vec<f64> {
    matvec(&d.w, h).iter().zip(&d.b).map(|(a, b)| a + b.to_f64()).collect()
}

/// Float forward pass with the same weights and masks; flattened like
/// `Output::flatten`.
pub fn float_forward(net: &NetworkParams, x: &[Vec<f64>], masks: &[MaskSet]) -> Vec<f64> {
    let mut seq = x.to_vec();
    let mut it = masks.iter();
    let enc = match net.task {
        Task::Autoencoder => net.arch.nl,
        Task::Classifier => net.layers.len(),
    };
    for (k, layer) in net.layers.iter().enumerate() {
        if k == enc {
            let code = seq.last().unwrap().clone();
            seq = vec![code; net.dims.timesteps];
        }
        let m = if layer.is_bayesian { it.next() } else { None };
        seq = float_layer(layer, &seq, m);
    }
    match net.task {
        Task::Autoencoder => seq.iter().flat_map(|h| float_dense(&net.dense, h)).collect(),
        Task::Classifier => {
            let z = float_dense(&net.dense, seq.last().unwrap());
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
    }
}

/// Random network with weights drawn from U(-scale, scale).
pub fn synthetic_net(task: Task, arch: &str, dims: NetDims, scale: f64, seed: u64) -> NetworkParams {
    let arch: Arch = arch.parse().unwrap();
    build_network(task, &arch, dims, ParamInit::Uniform { scale, seed }, Formats::default()).unwrap()
}

/// Z-normalized ECG-like beat: a few Gaussian bumps plus noise.
pub fn ecg_like(t: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(0.0..t as f64), rng.gen_range(2.0..12.0), rng.gen_range(-2.0..4.0)))
        .collect();
    let mut x: Vec<f64> = (0..t)
        .map(|k| {
            let k = k as f64;
            bumps.iter().map(|&(c, w, a)| a * (-((k - c) / w).powi(2)).exp()).sum::<f64>() + rng.gen_range(-0.05..0.05)
        })
        .collect();
    let n = t as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    x
}

pub fn column(x: &[f64]) -> Vec<Vec<f64>> {
    x.iter().map(|&v| vec![v]).collect()
}

fn q(v: f64) -> Fx {
    fxp::quantize(v, QFormat::Q6_10)
}

/// Autoencoder whose every weight and bias is zero: it reconstructs 0.
pub fn zero_autoencoder(t: usize) -> NetworkParams {
    let arch: Arch = "4,1,NN".parse().unwrap();
    let dims = NetDims { timesteps: t, input_dim: 1, output_dim: 1 };
    build_network(Task::Autoencoder, &arch, dims, ParamInit::Zeros, Formats::default()).unwrap()
}

/// Classifier whose dense head is zero, so every class gets 1/4.
pub fn uniform_classifier(t: usize) -> NetworkParams {
    let arch: Arch = "8,1,N".parse().unwrap();
    let dims = NetDims { timesteps: t, input_dim: 1, output_dim: 4 };
    let mut net = build_network(Task::Classifier, &arch, dims, ParamInit::Uniform { scale: 0.5, seed: 1 }, Formats::default()).unwrap();
    net.dense = DenseParams { w: FxMatrix::zeros(4, 8, QFormat::Q6_10), b: vec![q(0.0); 4] };
    net
}

/// Class thresholds on the final input value used by [`perfect_classifier`].
pub const CLASS_CUTS: [f64; 3] = [-1.5, 0.0, 1.5];

/// Three-unit classifier that reads only the last input value: unit k
/// fires when x_T is above `CLASS_CUTS[k]`, and the dense layer maps the
/// resulting sign pattern to one of four classes.
pub fn perfect_classifier(t: usize) -> NetworkParams {
    let f = QFormat::Q6_10;
    let mut layer = LstmLayerParams::zeros(1, 3, false, f);
    for k in 0..3 {
        layer.b[0][k] = q(8.0); // input gate open
        layer.b[1][k] = q(-8.0); // forget gate shut
        layer.b[3][k] = q(8.0); // output gate open
        layer.w_x[2].set(k, 0, q(4.0));
        layer.b[2][k] = q(-4.0 * CLASS_CUTS[k]);
    }
    let mut w = FxMatrix::zeros(4, 3, f);
    for class in 0..4 {
        for unit in 0..3 {
            let fires = unit < class;
            w.set(class, unit, q(if fires { 4.0 } else { -4.0 }));
        }
    }
    let dense = DenseParams { w, b: vec![q(0.0); 4] };
    let arch: Arch = "3,1,N".parse().unwrap();
    let dims = NetDims { timesteps: t, input_dim: 1, output_dim: 4 };
    NetworkParams::new(Task::Classifier, arch, dims, vec![layer], dense, Formats::default(), 0.0, true).unwrap()
}

/// Raw UCR rows (before normalization) whose z-normalized final value
/// lands in the band of `class` for [`perfect_classifier`].
pub fn class_row(class: usize, t: usize, jitter: f64) -> Vec<f64> {
    let mut row: Vec<f64> = match class {
        0 | 3 => (0..t - 1).map(|k| 0.1 * ((k as f64) + jitter).sin()).collect(),
        _ => (0..t - 1).map(|k| if k % 2 == 0 { -1.0 } else { 1.0 } + 0.05 * jitter).collect(),
    };
    row.push(match class {
        0 => -1.0,
        1 => -0.7,
        2 => 0.7,
        _ => 1.0,
    });
    row
}

/// Unnormalized autoencoder toy set: normals at amplitude 0.1, anomalies
/// at 1.0 (class 1).
pub fn amplitude_dataset(t: usize, normals: usize, anomalies: usize) -> Dataset {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for n in 0..normals + anomalies {
        let amp = if n < normals { 0.1 } else { 1.0 };
        samples.push((0..t).map(|k| amp * ((k as f64) * 0.7 + n as f64).sin()).collect());
        labels.push(usize::from(n >= normals));
    }
    Dataset { samples, labels, class_values: vec![1.0, 2.0], split: Split::Test, normalized: false }
}

/// Writes rows as a UCR text file body.
pub fn ucr_text(rows: &[(f64, Vec<f64>)]) -> String {
    rows.iter()
        .map(|(label, v)| {
            let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            format!("{label},{}\n", vals.join(","))
        })
        .collect()
}
