//! Brute-force reference implementations shared by the integration tests
//! and the acceptance runner.

#![allow(dead_code)]

pub mod grad;
pub mod scales;

use std::f64::consts::PI;

use avau_core::audio::{AudioSignal, SAMPLE_RATE};
use avau_core::harness::Confusion;
use avau_core::temporal::{AuLabelMatrix, AuPrediction, Tcn, TcnConfig, AU_COUNT};
use avau_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const NFFT: usize = 512;
pub const BINS: usize = NFFT / 2 + 1;
pub const MELS: usize = 80;

/// One second of tones plus white noise and a DC offset.
pub fn random_signal(rng: &mut ChaCha8Rng, len: usize) -> AudioSignal {
    let tones: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(50.0..7900.0),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let dc = rng.random_range(-0.05..0.05);
    let samples = (0..len)
        .map(|n| {
            let t = n as f64 / f64::from(SAMPLE_RATE);
            dc + rng.random_range(-0.1..0.1)
                + tones
                    .iter()
                    .map(|&(f, a, p)| a * (2.0 * PI * f * t + p).sin())
                    .sum::<f64>()
        })
        .collect();
    AudioSignal::new(samples, SAMPLE_RATE).unwrap()
}

/// `S(t,k) = Σ_n x(n)·w(n − t·hop)·e^{−j2πkn/N}`, summed directly over the
/// absolute sample index.
pub fn direct_stft(x: &[f64]) -> (usize, Vec<Complex64>) {
    let frames = if x.len() < WINDOW {
        0
    } else {
        1 + (x.len() - WINDOW) / HOP
    };
    let w: Vec<f64> = (0..WINDOW)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / (WINDOW - 1) as f64).cos()))
        .collect();
    let twiddle: Vec<Complex64> = (0..NFFT)
        .map(|m| Complex64::from_polar(1.0, -2.0 * PI * m as f64 / NFFT as f64))
        .collect();
    let mut out = Vec::with_capacity(frames * BINS);
    for t in 0..frames {
        let start = t * HOP;
        for k in 0..BINS {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, &wi) in w.iter().enumerate() {
                let n = start + i;
                acc += twiddle[(k * n) % NFFT] * (x[n] * wi);
            }
            out.push(acc);
        }
    }
    (frames, out)
}

/// HTK-mel triangles over 0–8000 Hz, `MELS × BINS`.
pub fn direct_filterbank() -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(8000.0);
    let edge: Vec<f64> = (0..MELS + 2).map(|i| hz(top * i as f64 / (MELS + 1) as f64)).collect();
    let mut fb = vec![0.0; MELS * BINS];
    for m in 0..MELS {
        for k in 0..BINS {
            let f = k as f64 * 8000.0 / (BINS - 1) as f64;
            let rise = (f - edge[m]) / (edge[m + 1] - edge[m]);
            let fall = (edge[m + 2] - f) / (edge[m + 2] - edge[m + 1]);
            fb[m * BINS + k] = rise.min(fall).max(0.0);
        }
    }
    fb
}

pub fn direct_log_mel(spec: &[Complex64], fb: &[f64]) -> Vec<f64> {
    spec.chunks_exact(BINS)
        .flat_map(|frame| {
            (0..MELS).map(move |m| {
                let e: f64 = (0..BINS).map(|k| fb[m * BINS + k] * frame[k].norm_sqr()).sum();
                e.max(1e-10).ln()
            })
        })
        .collect()
}

/// Elementwise relative error, with magnitudes below `floor` compared
/// absolutely against it.
pub fn max_rel_error(a: impl IntoIterator<Item = (f64, f64)>, floor: f64) -> f64 {
    a.into_iter()
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn complex_rel_error(a: &[Complex64], b: &[Complex64]) -> f64 {
    let peak = b.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let floor = 1e-9 * peak;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).norm() / x.norm().max(y.norm()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale)).unwrap()
}

pub fn rand_prediction(rng: &mut ChaCha8Rng, frames: usize, p: f64) -> AuPrediction {
    let active: Vec<bool> = (0..frames * AU_COUNT).map(|_| rng.random_bool(p)).collect();
    AuPrediction {
        frames,
        probabilities: active.iter().map(|&a| f64::from(u8::from(a))).collect(),
        active,
    }
}

pub fn rand_labels(rng: &mut ChaCha8Rng, frames: usize, p: f64) -> AuLabelMatrix {
    AuLabelMatrix::new(
        frames,
        (0..frames * AU_COUNT).map(|_| u8::from(rng.random_bool(p))).collect(),
    )
    .unwrap()
}

/// Per-AU F1 from explicit counting loops.
pub fn f1_oracle(pred: &AuPrediction, truth: &AuLabelMatrix) -> [f64; AU_COUNT] {
    std::array::from_fn(|j| {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for t in 0..pred.frames {
            match (pred.active[t * AU_COUNT + j], truth.values()[t * AU_COUNT + j] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        }
    })
}

pub fn confusion(tp: usize, fp: usize, fn_: usize, tn: usize) -> Confusion {
    Confusion { tp, fp, fn_, tn }
}

/// `Σ_i α_i·A_i(⌊t/f_i⌋) + β_i·V_i(⌊t/f_i⌋)` over plain row-major buffers.
pub fn fusion_oracle(
    factors: &[usize],
    audio: &[Vec<f64>],
    visual: &[Vec<f64>],
    alpha: &[f64],
    beta: &[f64],
    t_len: usize,
    dim: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; t_len * dim];
    for t in 0..t_len {
        for c in 0..dim {
            let mut s = 0.0;
            for (i, &f) in factors.iter().enumerate() {
                let r = t / f;
                s += alpha[i] * audio[i][r * dim + c] + beta[i] * visual[i][r * dim + c];
            }
            out[t * dim + c] = s;
        }
    }
    out
}

/// Mean over consecutive groups of `f` rows, the last group partial.
pub fn pool_oracle(x: &[f64], t_len: usize, dim: usize, f: usize) -> Vec<f64> {
    let out_len = t_len.div_ceil(f);
    let mut out = vec![0.0; out_len * dim];
    for r in 0..out_len {
        let (lo, hi) = (r * f, ((r + 1) * f).min(t_len));
        for c in 0..dim {
            out[r * dim + c] = (lo..hi).map(|t| x[t * dim + c]).sum::<f64>() / (hi - lo) as f64;
        }
    }
    out
}

/// TCN whose convolutions all have positive weights and biases, so every
/// ReLU stays open and any input change propagates along every path.
pub fn positive_tcn(kernel: usize, dilations: &[usize], channels: usize, seed: u64) -> (ParamStore<f64>, Tcn) {
    let cfg = TcnConfig {
        kernel,
        dilations: dilations.to_vec(),
        channels,
        residual: true,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tcn = Tcn::new(cfg, channels, &mut store, "tcn", &mut rng).unwrap();
    for t in store.tensors_mut() {
        let fan = t.numel().max(1) as f64;
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.1..1.0) / fan.sqrt());
    }
    (store, tcn)
}

pub fn run_tcn(store: &ParamStore<f64>, tcn: &Tcn, x: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let xv = tape.leaf(x);
    let y = tcn.forward(&mut tape, &bound, xv).unwrap();
    tape.value(y).to_vec()
}

/// Extent from an impulse row to the last output row it reaches, or `None`
/// if anything before the impulse moves. Dilation gaps can leave holes
/// inside the reach, so only its ends are measured.
pub fn impulse_span(kernel: usize, dilations: &[usize], seed: u64) -> Option<usize> {
    let c = 3;
    let (store, tcn) = positive_tcn(kernel, dilations, c, seed);
    let rf = avau_core::temporal::receptive_field(kernel, dilations);
    let s = 7;
    let t_len = s + rf + 10;
    let base = Tensor::full(vec![t_len, c], 1.0).unwrap();
    let mut hit = base.clone();
    hit.data_mut()[s * c..(s + 1) * c].iter_mut().for_each(|v| *v += 1.0);
    let (y0, y1) = (run_tcn(&store, &tcn, &base), run_tcn(&store, &tcn, &hit));
    let changed: Vec<usize> = (0..t_len)
        .filter(|&t| y0[t * c..(t + 1) * c] != y1[t * c..(t + 1) * c])
        .collect();
    if changed.iter().any(|&t| t < s) {
        return None;
    }
    if changed.first() != Some(&s) {
        return None;
    }
    Some(changed.last()? - s + 1)
}

/// A small architecture that trains in seconds on 16 × 16 frames.
pub fn tiny_config() -> avau_core::harness::TrainConfig {
    avau_core::harness::TrainConfig::parse_str(
        "resolution = 16\nencoder_widths = 4,8\nencoder_depths = 1,1\nencoder_kernel = 3\n\
         dim = 8\ntcn_channels = 8\ndilations = 1,2\nhidden = 16\nepochs = 3\n",
    )
    .unwrap()
}
