//! Global and local views of both modalities, their tokenizers, and the
//! per-modality projection into the shared embedding space.

use avau_tensor::{Bound, ParamStore, Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{LogMelSpectrogram, POWER_FLOOR};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::visual::FaceImage;

/// Local audio crop length: one second of frames.
pub const LOCAL_AUDIO_FRAMES: usize = 100;
pub const MAX_MASK_WIDTH: usize = 15;
/// Minimum retained area fraction for the random crop.
pub const MIN_CROP_AREA: f64 = 0.8;
pub const MAX_ROTATION_DEG: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

/// Contiguous band of zeroed mel channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrequencyMask {
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioView {
    pub kind: ViewKind,
    pub matrix: LogMelSpectrogram,
    pub masks: Vec<FrequencyMask>,
    /// First source frame covered by the view.
    pub start: usize,
}

pub fn audio_global_view(x: &LogMelSpectrogram) -> AudioView {
    AudioView {
        kind: ViewKind::Global,
        matrix: x.clone(),
        masks: Vec::new(),
        start: 0,
    }
}

/// 1–2 masks, each of width uniform in `[1, 15]` at a uniform start.
pub fn sample_frequency_masks(rng: &mut impl Rng, mels: usize) -> Vec<FrequencyMask> {
    let count = rng.random_range(1..=2);
    (0..count)
        .map(|_| {
            let width = rng.random_range(1..=MAX_MASK_WIDTH.min(mels));
            FrequencyMask {
                start: rng.random_range(0..=mels - width),
                width,
            }
        })
        .collect()
}

/// 100-frame crop starting at `start` with `masks` zeroed.
pub fn audio_local_view_at(x: &LogMelSpectrogram, start: usize, masks: Vec<FrequencyMask>) -> Result<AudioView> {
    if x.frames() < LOCAL_AUDIO_FRAMES {
        return Err(Error::rejected(
            "audio_local_view",
            format!("{} frames is shorter than {LOCAL_AUDIO_FRAMES}", x.frames()),
        ));
    }
    if start + LOCAL_AUDIO_FRAMES > x.frames() {
        return Err(Error::rejected(
            "audio_local_view",
            format!("start {start} runs past the clip"),
        ));
    }
    let mels = x.mels();
    if let Some(m) = masks.iter().find(|m| m.width == 0 || m.start + m.width > mels) {
        return Err(Error::rejected(
            "audio_local_view",
            format!("mask {m:?} outside {mels} channels"),
        ));
    }
    let mut data = x.data()[start * mels..(start + LOCAL_AUDIO_FRAMES) * mels].to_vec();
    for row in data.chunks_exact_mut(mels) {
        for m in &masks {
            row[m.start..m.start + m.width].fill(0.0);
        }
    }
    Ok(AudioView {
        kind: ViewKind::Local,
        matrix: LogMelSpectrogram::from_parts(LOCAL_AUDIO_FRAMES, mels, data)?,
        masks,
        start,
    })
}

/// Seeded uniform 100-frame crop with random frequency masking.
pub fn audio_local_view(x: &LogMelSpectrogram, seed: u64) -> Result<AudioView> {
    if x.frames() < LOCAL_AUDIO_FRAMES {
        return audio_local_view_at(x, 0, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=x.frames() - LOCAL_AUDIO_FRAMES);
    let masks = sample_frequency_masks(&mut rng, x.mels());
    audio_local_view_at(x, start, masks)
}

/// Geometry shared by every frame of a local video view. Crop offsets and
/// side are fractions of the frame; the crop is square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub crop_x: f64,
    pub crop_y: f64,
    pub crop_side: f64,
    pub flip: bool,
    pub rotation_deg: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        crop_x: 0.0,
        crop_y: 0.0,
        crop_side: 1.0,
        flip: false,
        rotation_deg: 0.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        let crop_side = rng.random_range(MIN_CROP_AREA..=1.0f64).sqrt();
        Augmentation {
            crop_x: rng.random_range(0.0..=1.0 - crop_side),
            crop_y: rng.random_range(0.0..=1.0 - crop_side),
            crop_side,
            flip: rng.random_bool(0.5),
            rotation_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }

    pub fn crop_area(&self) -> f64 {
        self.crop_side * self.crop_side
    }

    fn has_warp(&self) -> bool {
        self.rotation_deg != 0.0 || self.crop_side != 1.0 || self.crop_x != 0.0 || self.crop_y != 0.0
    }

    /// Rotate about the crop center, crop, resize back (bilinear, edge
    /// clamped), then mirror horizontally if `flip`.
    pub fn apply(&self, img: &FaceImage) -> FaceImage {
        let n = img.size();
        let mut px = if self.has_warp() {
            warp(img.pixels(), n, self)
        } else {
            img.pixels().to_vec()
        };
        if self.flip {
            px = flip_horizontal(&px, n);
        }
        FaceImage::new(n, px).expect("same size")
    }
}

fn warp(src: &[f32], n: usize, a: &Augmentation) -> Vec<f32> {
    let (sin, cos) = a.rotation_deg.to_radians().sin_cos();
    let nf = n as f64;
    let mut out = Vec::with_capacity(src.len());
    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 + 0.5) / nf - 0.5;
            let v = (y as f64 + 0.5) / nf - 0.5;
            let (ru, rv) = (cos * u - sin * v, sin * u + cos * v);
            let sx = ((a.crop_x + (ru + 0.5) * a.crop_side) * nf - 0.5).clamp(0.0, nf - 1.0);
            let sy = ((a.crop_y + (rv + 0.5) * a.crop_side) * nf - 0.5).clamp(0.0, nf - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * n + xx) * 3 + c];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn flip_horizontal(px: &[f32], n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(px.len());
    for row in px.chunks_exact(n * 3) {
        for pix in row.chunks_exact(3).rev() {
            out.extend_from_slice(pix);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoView {
    pub kind: ViewKind,
    pub frames: Vec<FaceImage>,
    pub augmentation: Option<Augmentation>,
    pub start: usize,
    pub fps: f64,
}

pub fn video_global_view(frames: &[FaceImage], fps: f64) -> Result<VideoView> {
    if frames.is_empty() || fps.is_nan() || fps <= 0.0 {
        return Err(Error::rejected("video_global_view", "need frames and a positive fps"));
    }
    Ok(VideoView {
        kind: ViewKind::Global,
        frames: frames.to_vec(),
        augmentation: None,
        start: 0,
        fps,
    })
}

/// Frames in a one-second segment.
pub fn segment_frames(fps: f64) -> usize {
    (fps.round() as usize).max(1)
}

pub fn video_local_view_at(frames: &[FaceImage], fps: f64, start: usize, aug: Augmentation) -> Result<VideoView> {
    let len = segment_frames(fps);
    if fps.is_nan() || fps <= 0.0 || frames.len() < len {
        return Err(Error::rejected(
            "video_local_view",
            format!("{} frames is shorter than one second at {fps} fps", frames.len()),
        ));
    }
    if start + len > frames.len() {
        return Err(Error::rejected(
            "video_local_view",
            format!("start {start} runs past the clip"),
        ));
    }
    Ok(VideoView {
        kind: ViewKind::Local,
        frames: frames[start..start + len].iter().map(|f| aug.apply(f)).collect(),
        augmentation: Some(aug),
        start,
        fps,
    })
}

/// Seeded one-second segment with one shared random augmentation.
pub fn video_local_view(frames: &[FaceImage], fps: f64, seed: u64) -> Result<VideoView> {
    let len = segment_frames(fps);
    if frames.len() < len {
        return video_local_view_at(frames, fps, 0, Augmentation::IDENTITY);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(0..=frames.len() - len);
    let aug = Augmentation::sample(&mut rng);
    video_local_view_at(frames, fps, start, aug)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenGrid {
    /// `t_blocks × f_blocks` patches of `patch_t × patch_f`.
    Audio {
        t_blocks: usize,
        f_blocks: usize,
        patch_t: usize,
        patch_f: usize,
    },
    /// `t_blocks × side_blocks²` cuboids of `cuboid_t × cuboid_p²` pixels.
    Video {
        t_blocks: usize,
        side_blocks: usize,
        cuboid_t: usize,
        cuboid_p: usize,
    },
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        match *self {
            TokenGrid::Audio { t_blocks, f_blocks, .. } => t_blocks * f_blocks,
            TokenGrid::Video {
                t_blocks, side_blocks, ..
            } => t_blocks * side_blocks * side_blocks,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_width(&self) -> usize {
        match *self {
            TokenGrid::Audio { patch_t, patch_f, .. } => patch_t * patch_f,
            TokenGrid::Video { cuboid_t, cuboid_p, .. } => cuboid_t * cuboid_p * cuboid_p * 3,
        }
    }

    fn tokens_per_block(&self) -> usize {
        self.len() / self.t_blocks()
    }

    fn t_blocks(&self) -> usize {
        match *self {
            TokenGrid::Audio { t_blocks, .. } | TokenGrid::Video { t_blocks, .. } => t_blocks,
        }
    }

    fn frames_per_block(&self) -> usize {
        match *self {
            TokenGrid::Audio { patch_t, .. } => patch_t,
            TokenGrid::Video { cuboid_t, .. } => cuboid_t,
        }
    }
}

/// `L × width` flattened patches in time-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub grid: TokenGrid,
    pub tokens: Vec<f64>,
    /// Source frames per second, for timestamps.
    pub frame_rate: f64,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn width(&self) -> usize {
        self.grid.token_width()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.tokens[i * w..(i + 1) * w]
    }

    /// Start time in seconds of every token.
    pub fn timestamps(&self) -> Vec<f64> {
        let per = self.grid.tokens_per_block();
        let step = self.grid.frames_per_block() as f64 / self.frame_rate;
        (0..self.len()).map(|i| (i / per) as f64 * step).collect()
    }
}

/// Token index is `t_block · (mels / patch_f) + f_block`; each token is the
/// row-major `patch_t × patch_f` patch. The time axis is padded with the
/// log floor to a multiple of `patch_t`.
pub fn tokenize_audio_view(v: &AudioView, patch_t: usize, patch_f: usize) -> Result<TokenSequence> {
    let (frames, mels) = (v.matrix.frames(), v.matrix.mels());
    if patch_t == 0 || patch_f == 0 || mels % patch_f != 0 {
        return Err(Error::rejected(
            "tokenize_audio_view",
            format!("patch {patch_t}×{patch_f} does not tile {mels} channels"),
        ));
    }
    let t_blocks = frames.div_ceil(patch_t);
    let f_blocks = mels / patch_f;
    let src = v.matrix.data();
    let floor = POWER_FLOOR.ln();
    let mut tokens = Vec::with_capacity(t_blocks * patch_t * mels);
    for tb in 0..t_blocks {
        for fb in 0..f_blocks {
            for dt in 0..patch_t {
                let t = tb * patch_t + dt;
                if t < frames {
                    tokens.extend_from_slice(&src[t * mels + fb * patch_f..t * mels + (fb + 1) * patch_f]);
                } else {
                    tokens.extend(std::iter::repeat_n(floor, patch_f));
                }
            }
        }
    }
    Ok(TokenSequence {
        grid: TokenGrid::Audio {
            t_blocks,
            f_blocks,
            patch_t,
            patch_f,
        },
        tokens,
        frame_rate: v.matrix.frame_rate(),
    })
}

/// Reassembles the padded `frames × mels` matrix.
pub fn untokenize_audio(seq: &TokenSequence) -> Result<LogMelSpectrogram> {
    let TokenGrid::Audio {
        t_blocks,
        f_blocks,
        patch_t,
        patch_f,
    } = seq.grid
    else {
        return Err(Error::rejected("untokenize_audio", "not an audio token grid"));
    };
    let mels = f_blocks * patch_f;
    let mut data = vec![0.0; t_blocks * patch_t * mels];
    for tb in 0..t_blocks {
        for fb in 0..f_blocks {
            let tok = seq.token(tb * f_blocks + fb);
            for dt in 0..patch_t {
                let row = (tb * patch_t + dt) * mels + fb * patch_f;
                data[row..row + patch_f].copy_from_slice(&tok[dt * patch_f..(dt + 1) * patch_f]);
            }
        }
    }
    LogMelSpectrogram::from_parts(t_blocks * patch_t, mels, data)
}

/// Token index is `(t_block · side_blocks + by) · side_blocks + bx`; each
/// token is the `(dt, dy, dx, c)`-ordered cuboid. Frames are padded by
/// repeating the last one.
pub fn tokenize_video_view(v: &VideoView, cuboid_t: usize, cuboid_p: usize) -> Result<TokenSequence> {
    let Some(first) = v.frames.first() else {
        return Err(Error::rejected("tokenize_video_view", "empty view"));
    };
    let n = first.size();
    if cuboid_t == 0 || cuboid_p == 0 || n % cuboid_p != 0 {
        return Err(Error::rejected(
            "tokenize_video_view",
            format!("resolution {n} not divisible by cuboid side {cuboid_p}"),
        ));
    }
    if v.frames.iter().any(|f| f.size() != n) {
        return Err(Error::rejected("tokenize_video_view", "frames differ in size"));
    }
    let t_blocks = v.frames.len().div_ceil(cuboid_t);
    let side_blocks = n / cuboid_p;
    let last = v.frames.len() - 1;
    let mut tokens = Vec::with_capacity(t_blocks * cuboid_t * n * n * 3);
    for tb in 0..t_blocks {
        for by in 0..side_blocks {
            for bx in 0..side_blocks {
                for dt in 0..cuboid_t {
                    let px = v.frames[(tb * cuboid_t + dt).min(last)].pixels();
                    for dy in 0..cuboid_p {
                        let start = ((by * cuboid_p + dy) * n + bx * cuboid_p) * 3;
                        tokens.extend(px[start..start + cuboid_p * 3].iter().map(|&p| f64::from(p)));
                    }
                }
            }
        }
    }
    Ok(TokenSequence {
        grid: TokenGrid::Video {
            t_blocks,
            side_blocks,
            cuboid_t,
            cuboid_p,
        },
        tokens,
        frame_rate: v.fps,
    })
}

/// Reassembles the padded frame sequence.
pub fn untokenize_video(seq: &TokenSequence) -> Result<Vec<FaceImage>> {
    let TokenGrid::Video {
        t_blocks,
        side_blocks,
        cuboid_t,
        cuboid_p,
    } = seq.grid
    else {
        return Err(Error::rejected("untokenize_video", "not a video token grid"));
    };
    let n = side_blocks * cuboid_p;
    let mut frames = vec![vec![0f32; n * n * 3]; t_blocks * cuboid_t];
    for tb in 0..t_blocks {
        for by in 0..side_blocks {
            for bx in 0..side_blocks {
                let mut tok = seq.token((tb * side_blocks + by) * side_blocks + bx).iter();
                for dt in 0..cuboid_t {
                    let frame = &mut frames[tb * cuboid_t + dt];
                    for dy in 0..cuboid_p {
                        let start = ((by * cuboid_p + dy) * n + bx * cuboid_p) * 3;
                        for dst in &mut frame[start..start + cuboid_p * 3] {
                            *dst = *tok.next().expect("token width") as f32;
                        }
                    }
                }
            }
        }
    }
    frames.into_iter().map(|px| FaceImage::new(n, px)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

/// `L × D` vectors in the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence<T> {
    pub modality: Modality,
    pub len: usize,
    pub dim: usize,
    pub vectors: Vec<T>,
    pub timestamps: Vec<f64>,
}

/// Learned per-modality affine map into the shared embedding space.
#[derive(Clone, Debug)]
pub struct Projection {
    pub modality: Modality,
    pub linear: Linear,
}

impl Projection {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        modality: Modality,
        token_width: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Projection {
            modality,
            linear: Linear::new(store, name, token_width, dim, rng),
        }
    }

    pub fn input_width(&self) -> usize {
        self.linear.inputs
    }

    pub fn dim(&self) -> usize {
        self.linear.outputs
    }

    /// `[L, width] -> [L, D]`
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, tokens: Var) -> Result<Var> {
        let w = tape.shape(tokens).last().copied().unwrap_or(0);
        if w != self.input_width() {
            return Err(Error::rejected(
                "project_to_embedding",
                format!("token width {w}, projection expects {}", self.input_width()),
            ));
        }
        self.linear.forward(tape, bound, tokens)
    }
}

pub fn project_to_embedding<T: Scalar>(
    tokens: &TokenSequence,
    projection: &Projection,
    params: &ParamStore<T>,
) -> Result<EmbeddingSequence<T>> {
    if tokens.width() != projection.input_width() {
        return Err(Error::rejected(
            "project_to_embedding",
            format!(
                "token width {}, projection expects {}",
                tokens.width(),
                projection.input_width()
            ),
        ));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.constant(
        vec![tokens.len(), tokens.width()],
        tokens.tokens.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    )?;
    let y = projection.forward(&mut tape, &bound, x)?;
    Ok(EmbeddingSequence {
        modality: projection.modality,
        len: tokens.len(),
        dim: projection.dim(),
        vectors: tape.value(y).to_vec(),
        timestamps: tokens.timestamps(),
    })
}
