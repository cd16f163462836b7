//! Synthetic clips with planted per-AU audio tones and visual patches, plus
//! the hand-coded detector that reads them back.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::{write_labels, write_manifest, Clip, ClipRecord};
use crate::audio::{build_mel_filterbank, write_wav, AudioSignal, StftConfig, NUM_MELS, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::temporal::{AuLabelMatrix, AuPrediction, AU_COUNT};
use crate::visual::{write_ppm, RgbImage};

/// Side of one patch cell in pixels; frames are an 8 × 8 grid of cells.
pub const CELL: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seconds: usize,
    pub fps: usize,
    pub resolution: usize,
    /// Probability that an AU is active in a given one-second segment.
    pub active_prob: f64,
    pub tone_amplitude: (f64, f64),
    pub audio_noise: f64,
    pub background: (f64, f64),
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seconds: 4,
            fps: 25,
            resolution: 64,
            active_prob: 0.35,
            tone_amplitude: (0.05, 0.07),
            audio_noise: 0.02,
            background: (0.25, 0.35),
            pixel_noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn noise_free() -> Self {
        SynthConfig {
            audio_noise: 0.0,
            pixel_noise: 0.0,
            ..SynthConfig::default()
        }
    }
}

/// Mel channel carrying AU `j`'s tone; channels are spread evenly over
/// 8..80.
pub fn au_channel(j: usize) -> usize {
    8 + ((j as f64 + 0.5) * 72.0 / AU_COUNT as f64).round() as usize
}

/// Tone frequency for AU `j`: the center of its mel channel.
pub fn au_tone_hz(j: usize) -> f64 {
    let fb = build_mel_filterbank(StftConfig::default().bins(), NUM_MELS, 0.0, 8000.0).expect("default filterbank");
    fb.centers_hz()[au_channel(j)]
}

/// Two horizontally mirrored cells `(row, col)` lit by AU `j`.
pub fn au_cells(j: usize) -> [(usize, usize); 2] {
    let row = 1 + j / 2;
    if j.is_multiple_of(2) {
        [(row, 1), (row, 6)]
    } else {
        [(row, 3), (row, 4)]
    }
}

/// HSV(30°·j, 0.8, 1.0) as RGB.
pub fn au_color(j: usize) -> [f64; 3] {
    let (s, v) = (0.8, 1.0);
    let h = (30.0 * j as f64) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// One synthetic clip before it is written to disk.
pub struct SynthClip {
    pub audio: AudioSignal,
    pub frames: Vec<RgbImage>,
    pub labels: AuLabelMatrix,
}

pub fn synth_clip(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<SynthClip> {
    if cfg.resolution != CELL * 8 {
        return Err(Error::Config(format!("synthetic frames are {}×{}", CELL * 8, CELL * 8)));
    }
    let segments: Vec<[bool; AU_COUNT]> = (0..cfg.seconds)
        .map(|_| std::array::from_fn(|_| rng.random_bool(cfg.active_prob)))
        .collect();
    let tones: Vec<f64> = (0..AU_COUNT).map(au_tone_hz).collect();

    let sr = SAMPLE_RATE as usize;
    let mut samples = vec![0.0; cfg.seconds * sr];
    for (s, active) in segments.iter().enumerate() {
        for (j, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            let amp = rng.random_range(cfg.tone_amplitude.0..=cfg.tone_amplitude.1);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU * tones[j] / sr as f64;
            for (n, x) in samples[s * sr..(s + 1) * sr].iter_mut().enumerate() {
                *x += amp * (w * n as f64 + phase).sin();
            }
        }
    }
    if cfg.audio_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.audio_noise).expect("positive sigma");
        samples.iter_mut().for_each(|x| *x += normal.sample(rng));
    }

    let n = cfg.resolution;
    let background = rng.random_range(cfg.background.0..=cfg.background.1);
    let pixel_noise = (cfg.pixel_noise > 0.0).then(|| Normal::new(0.0, cfg.pixel_noise).expect("positive sigma"));
    let total = cfg.seconds * cfg.fps;
    let mut frames = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total * AU_COUNT);
    for t in 0..total {
        let active = &segments[t / cfg.fps];
        labels.extend(active.iter().map(|&a| u8::from(a)));
        let mut px = vec![[background; 3]; n * n];
        for (j, _) in active.iter().enumerate().filter(|(_, &a)| a) {
            for (row, col) in au_cells(j) {
                for y in row * CELL..(row + 1) * CELL {
                    px[y * n + col * CELL..y * n + (col + 1) * CELL].fill(au_color(j));
                }
            }
        }
        let mut data = Vec::with_capacity(n * n * 3);
        for p in px {
            for c in p {
                let v = c + pixel_noise.map_or(0.0, |d| d.sample(rng));
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        frames.push(RgbImage {
            width: n,
            height: n,
            data,
        });
    }
    Ok(SynthClip {
        audio: AudioSignal::new(samples, SAMPLE_RATE)?,
        frames,
        labels: AuLabelMatrix::new(total, labels)?,
    })
}

/// Writes `num_clips` clips plus `manifest.jsonl` under `out_dir` and
/// returns the manifest records (paths relative to `out_dir`).
pub fn generate_synthetic(num_clips: usize, seed: u64, out_dir: &Path, cfg: &SynthConfig) -> Result<Vec<ClipRecord>> {
    if num_clips < 6 {
        return Err(Error::rejected(
            "generate_synthetic",
            format!("{num_clips} clips, need at least 6"),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(num_clips);
    for i in 0..num_clips {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let clip = synth_clip(&mut rng, cfg)?;
        let id = format!("clip{i:03}");
        let rec = ClipRecord {
            wav: PathBuf::from(format!("{id}.wav")),
            frames_dir: PathBuf::from(format!("{id}_frames")),
            labels: PathBuf::from(format!("{id}.csv")),
            fps: cfg.fps as f64,
            id,
        };
        write_wav(&out_dir.join(&rec.wav), &clip.audio)?;
        let dir = out_dir.join(&rec.frames_dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, f) in clip.frames.iter().enumerate() {
            write_ppm(&dir.join(format!("frame_{t:06}.ppm")), f)?;
        }
        write_labels(&out_dir.join(&rec.labels), &clip.labels)?;
        records.push(rec);
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Log-Mel frame aligned with video frame `t`: frame `4t + 1` at 25 fps is
/// the first one lying wholly inside the video frame's interval.
fn mel_frame_for(t: usize, fps: f64, frames: usize) -> usize {
    (((t as f64 * 100.0 / fps).round() as usize) + 1).min(frames - 1)
}

/// Active iff AU `j`'s tone channel has positive log energy.
pub fn detect_audio(clip: &Clip) -> AuPrediction {
    detect_with(clip, |t, j| {
        clip.mel.frame(mel_frame_for(t, clip.fps, clip.mel.frames()))[au_channel(j)] > 0.0
    })
}

/// Active iff AU `j`'s cells are brighter than 0.4 on average.
pub fn detect_visual(clip: &Clip) -> AuPrediction {
    detect_with(clip, |t, j| {
        let img = &clip.frames[t];
        let n = img.size();
        let cell = n / 8;
        let mut sum = 0.0;
        for (row, col) in au_cells(j) {
            for y in row * cell..(row + 1) * cell {
                sum += img.pixels()[(y * n + col * cell) * 3..(y * n + (col + 1) * cell) * 3]
                    .iter()
                    .map(|&p| f64::from(p))
                    .sum::<f64>();
            }
        }
        sum / (2 * cell * cell * 3) as f64 > 0.4
    })
}

/// Both planted cues must agree.
pub fn detect(clip: &Clip) -> AuPrediction {
    let (a, v) = (detect_audio(clip), detect_visual(clip));
    let active: Vec<bool> = a.active.iter().zip(&v.active).map(|(&x, &y)| x && y).collect();
    AuPrediction {
        frames: a.frames,
        probabilities: active.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
        active,
    }
}

fn detect_with(clip: &Clip, f: impl Fn(usize, usize) -> bool) -> AuPrediction {
    let frames = clip.frames.len();
    let active: Vec<bool> = (0..frames)
        .flat_map(|t| (0..AU_COUNT).map(move |j| (t, j)))
        .map(|(t, j)| f(t, j))
        .collect();
    AuPrediction {
        frames,
        probabilities: active.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
        active,
    }
}
