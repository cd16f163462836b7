//! Raw audio to an 80-channel log-Mel spectrogram.
//!
//! Pipeline: downmix → resample to 16 kHz → peak-normalize → STFT (25 ms Hann
//! window, 10 ms hop, 512-point FFT) → triangular Mel projection → log with a
//! power floor. All arithmetic is in `f64`.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const NUM_MELS: usize = 80;
/// Spectrogram frames per second (10 ms hop).
pub const FRAME_RATE: f64 = 100.0;
pub const POWER_FLOOR: f64 = 1e-10;

const RESAMPLE_TAPS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::rejected("audio", "sample rate must be positive"));
        }
        Ok(AudioSignal { samples, sample_rate })
    }

    /// Mono mix of equally long channels by per-sample mean.
    pub fn downmix(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::rejected("audio", "no channels"));
        };
        if channels.iter().any(|c| c.len() != first.len()) {
            return Err(Error::rejected("audio", "channels differ in length"));
        }
        let inv = 1.0 / channels.len() as f64;
        let samples = (0..first.len())
            .map(|i| channels.iter().map(|c| c[i]).sum::<f64>() * inv)
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &s| m.max(s.abs()))
    }
}

/// Reads 16-bit PCM WAV (mono or stereo, any rate); samples are divided by 32768.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            format!(
                "expected 16-bit integer PCM, got {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::format(path, "no channels"));
    }
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    let mut channels = vec![Vec::with_capacity(raw.len() / n_ch); n_ch];
    for frame in raw.chunks_exact(n_ch) {
        for (c, &s) in frame.iter().enumerate() {
            channels[c].push(f64::from(s) / 32768.0);
        }
    }
    AudioSignal::downmix(&channels, spec.sample_rate)
}

/// Writes a mono 16-bit PCM WAV; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &signal.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling to 16 kHz with a Hann-windowed sinc, 16 taps per side.
pub fn resample_to_16k(signal: &AudioSignal) -> Result<AudioSignal> {
    if signal.is_empty() {
        return Err(Error::rejected("resample_to_16k", "empty signal"));
    }
    if signal.sample_rate == SAMPLE_RATE {
        return Ok(signal.clone());
    }
    let rate_in = f64::from(signal.sample_rate);
    let ratio = rate_in / f64::from(SAMPLE_RATE);
    let n_out = (signal.len() as f64 / ratio).round() as usize;
    // Cutoff relative to the input rate; below 1 when downsampling.
    let cutoff = (1.0 / ratio).min(1.0);
    let half = RESAMPLE_TAPS as f64;
    let x = &signal.samples;
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out {
        let pos = m as f64 * ratio;
        let base = pos.floor() as isize;
        let mut acc = 0.0;
        for i in (base - RESAMPLE_TAPS as isize + 1)..=(base + RESAMPLE_TAPS as isize) {
            if i < 0 || i as usize >= x.len() {
                continue;
            }
            let d = pos - i as f64;
            if d.abs() >= half {
                continue;
            }
            let window = 0.5 + 0.5 * (PI * d / half).cos();
            acc += x[i as usize] * cutoff * sinc(cutoff * d) * window;
        }
        out.push(acc);
    }
    AudioSignal::new(out, SAMPLE_RATE)
}

/// Scales so the peak magnitude is exactly 1; all-zero input stays zero.
pub fn normalize_amplitude(signal: &AudioSignal) -> AudioSignal {
    let peak = signal.peak();
    if peak == 0.0 {
        return signal.clone();
    }
    AudioSignal {
        samples: signal.samples.iter().map(|&s| (s / peak).clamp(-1.0, 1.0)).collect(),
        sample_rate: signal.sample_rate,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StftConfig {
    window: Vec<f64>,
    hop: usize,
    fft_size: usize,
}

impl Default for StftConfig {
    /// 25 ms Hann window, 10 ms hop, 512-point FFT at 16 kHz.
    fn default() -> Self {
        Self::new(400, 160, 512).expect("valid defaults")
    }
}

impl StftConfig {
    pub fn new(window_length: usize, hop: usize, fft_size: usize) -> Result<Self> {
        if window_length < 2 || hop == 0 || hop > window_length || fft_size < window_length {
            return Err(Error::rejected(
                "stft",
                format!("invalid window {window_length}, hop {hop}, fft {fft_size}"),
            ));
        }
        Ok(StftConfig {
            window: hann(window_length),
            hop,
            fft_size,
        })
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn window_length(&self) -> usize {
        self.window.len()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn fft_size(&self) -> usize {
        self.fft_size
    }

    /// Retained non-negative frequency bins, `fft_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `1 + floor((n - window) / hop)`, or 0 when shorter than one window.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        if num_samples < self.window.len() {
            0
        } else {
            1 + (num_samples - self.window.len()) / self.hop
        }
    }
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / denom).cos())
        .collect()
}

/// Complex short-time spectrum, `frames × bins`, row-major.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn from_parts(frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::rejected(
                "spectrogram",
                "data length disagrees with frames × bins",
            ));
        }
        Ok(Spectrogram { frames, bins, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// `|S(t,k)|²`
    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Short-time Fourier transform with a planned FFT.
pub struct Stft {
    config: StftConfig,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(config: StftConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Stft { config, fft }
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    /// `S(t,k) = Σ_n x(n)·w(n − t·hop)·exp(−j2πkn/fft_size)` with `n` the
    /// absolute sample index, each frame zero-padded to `fft_size`.
    pub fn process(&self, signal: &AudioSignal) -> Result<Spectrogram> {
        let cfg = &self.config;
        if signal.sample_rate != SAMPLE_RATE {
            return Err(Error::rejected(
                "stft",
                format!("expected {SAMPLE_RATE} Hz input, got {}", signal.sample_rate),
            ));
        }
        let frames = cfg.frame_count(signal.len());
        if frames == 0 {
            return Err(Error::rejected(
                "stft",
                format!(
                    "signal of {} samples is shorter than one window ({})",
                    signal.len(),
                    cfg.window_length()
                ),
            ));
        }
        let (n_fft, bins) = (cfg.fft_size, cfg.bins());
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * cfg.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (n, (&x, &w)) in signal.samples[start..start + cfg.window.len()]
                .iter()
                .zip(&cfg.window)
                .enumerate()
            {
                buf[n] = Complex64::new(x * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            // The frame-local FFT indexes n from the frame start; shift the phase
            // back to absolute time. (k·start) mod n_fft keeps the angle exact.
            for (k, c) in buf[..bins].iter().enumerate() {
                let turns = (k * start) % n_fft;
                let phase = Complex64::from_polar(1.0, -2.0 * PI * turns as f64 / n_fft as f64);
                data.push(c * phase);
            }
        }
        Ok(Spectrogram { frames, bins, data })
    }
}

pub fn stft(signal: &AudioSignal, cfg: &StftConfig) -> Result<Spectrogram> {
    Stft::new(cfg.clone()).process(signal)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, `num_mels × bins`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    num_mels: usize,
    bins: usize,
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn num_mels(&self) -> usize {
        self.num_mels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }
}

/// Mel filterbank over `fft_bins` bins of a 16 kHz spectrum.
///
/// Filter `m` peaks (weight 1) at the `m+1`-th of `num_mels + 2` points spaced
/// evenly in mel between `f_min` and `f_max`, and falls linearly to zero at its
/// neighbours' centers.
pub fn build_mel_filterbank(fft_bins: usize, num_mels: usize, f_min: f64, f_max: f64) -> Result<MelFilterbank> {
    let nyquist = f64::from(SAMPLE_RATE) / 2.0;
    if num_mels == 0 || fft_bins < 2 {
        return Err(Error::rejected(
            "mel_filterbank",
            "need at least one filter and two bins",
        ));
    }
    if f_max > nyquist || f_min < 0.0 || f_min >= f_max {
        return Err(Error::rejected(
            "mel_filterbank",
            format!("band {f_min}..{f_max} Hz invalid for Nyquist {nyquist} Hz"),
        ));
    }
    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let step = (mel_hi - mel_lo) / (num_mels + 1) as f64;
    let points: Vec<f64> = (0..num_mels + 2).map(|i| mel_to_hz(mel_lo + step * i as f64)).collect();
    let bin_hz = nyquist / (fft_bins - 1) as f64;
    let mut weights = vec![0.0; num_mels * fft_bins];
    for m in 0..num_mels {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..fft_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            weights[m * fft_bins + k] = w;
        }
    }
    Ok(MelFilterbank {
        num_mels,
        bins: fft_bins,
        weights,
        centers_hz: points[1..=num_mels].to_vec(),
    })
}

/// `T × num_mels` log-energies at 100 frames per second.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    frames: usize,
    mels: usize,
    data: Vec<f64>,
}

impl LogMelSpectrogram {
    pub fn from_parts(frames: usize, mels: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || mels == 0 || data.len() != frames * mels {
            return Err(Error::rejected("log_mel", "data length disagrees with frames × mels"));
        }
        Ok(LogMelSpectrogram { frames, mels, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn mels(&self) -> usize {
        self.mels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.mels..(t + 1) * self.mels]
    }

    pub fn frame_rate(&self) -> f64 {
        FRAME_RATE
    }
}

/// `X(t,f) = log(max(Σ_k M[f,k]·|S(t,k)|², POWER_FLOOR))`
pub fn log_mel(spec: &Spectrogram, fb: &MelFilterbank) -> Result<LogMelSpectrogram> {
    if spec.bins != fb.bins {
        return Err(Error::rejected(
            "log_mel",
            format!("spectrogram has {} bins, filterbank {}", spec.bins, fb.bins),
        ));
    }
    let power = spec.power();
    let mut data = Vec::with_capacity(spec.frames * fb.num_mels);
    for p in power.chunks_exact(spec.bins) {
        for m in 0..fb.num_mels {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, s)| w * s).sum();
            data.push(e.max(POWER_FLOOR).ln());
        }
    }
    LogMelSpectrogram::from_parts(spec.frames, fb.num_mels, data)
}

/// The full audio front end with a cached FFT plan and filterbank.
pub struct FeatureExtractor {
    stft: Stft,
    filterbank: MelFilterbank,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        let cfg = StftConfig::default();
        let filterbank = build_mel_filterbank(cfg.bins(), NUM_MELS, 0.0, 8000.0).expect("valid defaults");
        FeatureExtractor {
            stft: Stft::new(cfg),
            filterbank,
        }
    }
}

impl FeatureExtractor {
    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Resample, normalize, STFT and log-Mel.
    pub fn extract(&self, signal: &AudioSignal) -> Result<LogMelSpectrogram> {
        let resampled = resample_to_16k(signal)?;
        let normalized = normalize_amplitude(&resampled);
        let spec = self.stft.process(&normalized)?;
        log_mel(&spec, &self.filterbank)
    }
}
