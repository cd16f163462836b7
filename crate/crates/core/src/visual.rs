//! Per-frame visual encoder: patchify stem, depthwise-conv blocks with layer
//! norm, strided downsampling between stages, global average pooling.

use std::path::Path;

use avau_tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::layers::{as_rows, LayerNorm, Linear};

pub const PIXEL_MEAN: f32 = 0.5;
pub const PIXEL_STD: f32 = 0.25;

/// 8-bit RGB image as read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    Ok(RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Writes a binary (P6) 8-bit PPM.
pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Pnm,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

/// Square face crop, `size × size × 3` values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    size: usize,
    pixels: Vec<f32>,
}

impl FaceImage {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if size == 0 || pixels.len() != size * size * 3 {
            return Err(Error::rejected(
                "face_image",
                format!("{} values for size {size}", pixels.len()),
            ));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::rejected("face_image", "non-finite pixel"));
        }
        Ok(FaceImage { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Per-channel `(p - 0.5) / 0.25`, the encoder input.
    pub fn standardized(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| (p - PIXEL_MEAN) / PIXEL_STD).collect()
    }
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f32], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return src.to_vec();
    }
    let coord = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

/// Scale to [0, 1] and bilinearly resize to `target × target`.
pub fn preprocess_frame(raw: &RgbImage, target: usize) -> Result<FaceImage> {
    if raw.width == 0 || raw.height == 0 || raw.data.len() != raw.width * raw.height * 3 {
        return Err(Error::rejected("preprocess_frame", "image must be non-empty 3-channel"));
    }
    let unit: Vec<f32> = raw.data.iter().map(|&b| f32::from(b) / 255.0).collect();
    FaceImage::new(target, bilinear_resize(&unit, raw.height, raw.width, 3, target, target))
}

pub fn load_frame(path: &Path, target: usize) -> Result<FaceImage> {
    preprocess_frame(&read_ppm(path)?, target).map_err(|e| match e {
        Error::Rejected { msg, .. } => Error::format(path, msg),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub kernel: usize,
    pub patch: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            resolution: 64,
            widths: vec![32, 64, 128],
            depths: vec![1, 1, 1],
            kernel: 7,
            patch: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.len() != self.depths.len() {
            return bad(format!("{} widths vs {} depths", self.widths.len(), self.depths.len()));
        }
        if self.widths.contains(&0) || self.depths.contains(&0) || self.patch == 0 || self.resolution == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("depthwise kernel {} must be odd", self.kernel));
        }
        let s = self.downsampling();
        if !self.resolution.is_multiple_of(s) {
            return bad(format!(
                "resolution {} not divisible by total stride {s}",
                self.resolution
            ));
        }
        Ok(())
    }

    /// Cumulative stride `patch · 2^(stages − 1)`.
    pub fn downsampling(&self) -> usize {
        self.patch << (self.widths.len() - 1)
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Parameters of one depthwise-conv block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub norm: LayerNorm,
    pub expand: Linear,
    pub project: Linear,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<(LayerNorm, Linear)>,
    blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    config: EncoderConfig,
    stem: Linear,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
}

/// Spatial feature grid `(H/s) × (W/s) × C` for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

/// Pooled per-frame feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding<T> {
    pub values: Vec<T>,
}

impl VisualEncoder {
    pub fn new<T: Scalar>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (p, k) = (config.patch, config.kernel);
        let stem = Linear::new(store, &format!("{prefix}.stem"), p * p * 3, config.widths[0], rng);
        let stem_norm = LayerNorm::new(store, &format!("{prefix}.stem_norm"), config.widths[0]);
        let mut stages = Vec::new();
        for (s, (&c, &depth)) in config.widths.iter().zip(&config.depths).enumerate() {
            let down = (s > 0).then(|| {
                let prev = config.widths[s - 1];
                (
                    LayerNorm::new(store, &format!("{prefix}.down{s}.norm"), prev),
                    Linear::new(store, &format!("{prefix}.down{s}.conv"), 4 * prev, c, rng),
                )
            });
            let blocks = (0..depth)
                .map(|b| {
                    let name = format!("{prefix}.stage{s}.block{b}");
                    BlockParams {
                        depthwise: store.add(
                            format!("{name}.dw.weight"),
                            init::fan_in_uniform(rng, &[k, k, c], k * k, init::LINEAR_GAIN),
                        ),
                        depthwise_bias: store.add(format!("{name}.dw.bias"), init::zeros(&[c])),
                        norm: LayerNorm::new(store, &format!("{name}.norm"), c),
                        expand: Linear::rectified(store, &format!("{name}.pw1"), c, 4 * c, rng),
                        project: Linear::new(store, &format!("{name}.pw2"), 4 * c, c, rng),
                    }
                })
                .collect();
            stages.push(Stage { down, blocks });
        }
        Ok(VisualEncoder {
            config,
            stem,
            stem_norm,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn block_params(&self, stage: usize, block: usize) -> &BlockParams {
        &self.stages[stage].blocks[block]
    }

    /// `[B, H, W, 3] -> [B, H/p, W/p, C0]`: non-overlapping `p×p` stride-`p`
    /// convolution followed by layer norm.
    pub fn patchify_stem<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let [b, h, w] = batch_dims(tape, x, 3, "patchify_stem")?;
        let p = self.config.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::rejected(
                "patchify_stem",
                format!("resolution {h}×{w} not divisible by {p}"),
            ));
        }
        let patches = tape.patchify(x, p)?;
        let y = self.stem.forward(tape, bound, patches)?;
        let y = self.stem_norm.forward(tape, bound, y)?;
        Ok(tape.reshape(y, vec![b, h / p, w / p, self.config.widths[0]])?)
    }

    /// Depthwise `k×k` → layer norm → ×4 pointwise expansion → GELU →
    /// pointwise projection → residual add. Shape preserving.
    pub fn convnext_block<T: Scalar>(
        &self,
        params: &BlockParams,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let y = tape.depthwise_conv2d(x, bound[params.depthwise])?;
        let y = tape.add_row(y, bound[params.depthwise_bias])?;
        let y = params.norm.forward(tape, bound, y)?;
        let y = as_rows(tape, y)?;
        let y = params.expand.forward(tape, bound, y)?;
        let y = tape.gelu(y)?;
        let y = params.project.forward(tape, bound, y)?;
        let y = tape.reshape(y, shape)?;
        Ok(tape.add(x, y)?)
    }

    /// Stem and every stage; returns the final `[B, h, w, C]` feature map.
    pub fn features<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut y = self.patchify_stem(tape, bound, x)?;
        for (s, stage) in self.stages.iter().enumerate() {
            if let Some((norm, conv)) = &stage.down {
                let [b, h, w] = batch_dims(tape, y, self.config.widths[s - 1], "downsample")?;
                let z = norm.forward(tape, bound, y)?;
                let z = tape.patchify(z, 2)?;
                let z = conv.forward(tape, bound, z)?;
                y = tape.reshape(z, vec![b, h / 2, w / 2, self.config.widths[s]])?;
            }
            for block in &stage.blocks {
                y = self.convnext_block(block, tape, bound, y)?;
            }
        }
        Ok(y)
    }

    /// `[B, H, W, 3] -> [B, C]`
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let f = self.features(tape, bound, x)?;
        global_average_pool(tape, f)
    }

    fn frame_input<T: Scalar>(&self, tape: &mut Tape<T>, img: &FaceImage) -> Result<Var> {
        let r = self.config.resolution;
        if img.size() != r {
            return Err(Error::rejected(
                "encode_frame",
                format!("expected {r}×{r} frame, got {}", img.size()),
            ));
        }
        let data = img
            .standardized()
            .into_iter()
            .map(|v| T::from_f64_lossy(f64::from(v)))
            .collect();
        Ok(tape.constant(vec![1, r, r, 3], data)?)
    }

    pub fn feature_map<T: Scalar>(&self, params: &ParamStore<T>, img: &FaceImage) -> Result<FeatureMap<T>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = self.frame_input(&mut tape, img)?;
        let f = self.features(&mut tape, &bound, x)?;
        let s = tape.shape(f).to_vec();
        Ok(FeatureMap {
            height: s[1],
            width: s[2],
            channels: s[3],
            stride: self.config.downsampling(),
            data: tape.value(f).to_vec(),
        })
    }

    pub fn encode_frame<T: Scalar>(&self, params: &ParamStore<T>, img: &FaceImage) -> Result<VisualEmbedding<T>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = self.frame_input(&mut tape, img)?;
        let f = self.forward(&mut tape, &bound, x)?;
        Ok(VisualEmbedding {
            values: tape.value(f).to_vec(),
        })
    }
}

/// Per-channel mean over all spatial positions: `[B, h, w, C] -> [B, C]`
/// (a `[h, w, C]` map pools to `[1, C]`).
pub fn global_average_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (positions, c) = match s[..] {
        [h, w, c] => (h * w, c),
        [_, h, w, c] => (h * w, c),
        _ => {
            return Err(Error::rejected(
                "global_average_pool",
                format!("expected a feature map, got {s:?}"),
            ))
        }
    };
    let rows = tape.reshape(x, vec![tape.value(x).len() / c, c])?;
    Ok(tape.pool_rows(rows, positions)?)
}

fn batch_dims<T: Scalar>(tape: &Tape<T>, x: Var, channels: usize, op: &'static str) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [b, h, w, c] if c == channels => Ok([b, h, w]),
        ref s => Err(Error::rejected(
            op,
            format!("expected [B, H, W, {channels}], got {s:?}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_frame_standardizes_to_zero() {
        let raw = RgbImage {
            width: 3,
            height: 3,
            data: vec![0; 27],
        };
        // 0.5 is not representable in 8 bits; build the [0,1] frame directly.
        let _ = preprocess_frame(&raw, 3).unwrap();
        let img = FaceImage::new(4, vec![0.5; 48]).unwrap();
        assert!(img.standardized().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_is_identity_at_target_size() {
        let raw = RgbImage {
            width: 2,
            height: 2,
            data: (0..12).map(|v| v * 20).collect(),
        };
        let img = preprocess_frame(&raw, 2).unwrap();
        let expect: Vec<f32> = raw.data.iter().map(|&b| f32::from(b) / 255.0).collect();
        assert_eq!(img.pixels(), expect.as_slice());
    }

    #[test]
    fn config_shape_algebra() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.downsampling(), 16);
        let bad = EncoderConfig {
            kernel: 6,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            resolution: 40,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_image_is_rejected() {
        let raw = RgbImage {
            width: 0,
            height: 0,
            data: Vec::new(),
        };
        assert!(preprocess_frame(&raw, 4).is_err());
    }
}
