//! Timeline alignment and multi-scale fusion with windowed self-attention.

use avau_tensor::{Band, Bound, ParamId, ParamStore, Scalar, Tape, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::layers::Linear;

/// Audio and visual sequences on the video timeline, both `[T, D]`.
#[derive(Clone, Copy, Debug)]
pub struct AlignedPair {
    pub audio: Var,
    pub visual: Var,
    pub frame_rate: f64,
    pub len: usize,
}

fn rows<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [t, d] => Ok((t, d)),
        ref s => Err(Error::rejected(op, format!("expected [T, D], got {s:?}"))),
    }
}

/// Row weights for pooling `t_in` frames at `ratio` input frames per output
/// frame: output `t` averages the input interval `[t·ratio, (t+1)·ratio)`,
/// weighting each input frame by its overlap. The trailing interval is
/// averaged over the frames it actually covers.
pub fn overlap_pooling_matrix(t_in: usize, ratio: f64) -> (usize, Vec<f64>) {
    let t_out = ((t_in as f64 / ratio) - 1e-9).ceil().max(1.0) as usize;
    let mut m = vec![0.0; t_out * t_in];
    for t in 0..t_out {
        let (lo, hi) = (t as f64 * ratio, ((t + 1) as f64 * ratio).min(t_in as f64));
        let row = &mut m[t * t_in..(t + 1) * t_in];
        for (j, w) in row.iter_mut().enumerate() {
            *w = ((j + 1) as f64).min(hi) - (j as f64).max(lo);
            *w = w.max(0.0);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= total);
    }
    (t_out, m)
}

/// Pools the audio sequence onto the video timeline and truncates both to
/// the common length. When `audio_rate / fps` is an integer `r` this is a
/// mean over consecutive groups of `r` frames.
pub fn align_modalities<T: Scalar>(
    tape: &mut Tape<T>,
    audio: Var,
    audio_rate: f64,
    visual: Var,
    fps: f64,
) -> Result<AlignedPair> {
    let (ta, da) = rows(tape, audio, "align_modalities")?;
    let (tv, dv) = rows(tape, visual, "align_modalities")?;
    if da != dv {
        return Err(Error::rejected(
            "align_modalities",
            format!("widths {da} and {dv} differ"),
        ));
    }
    if !(audio_rate > 0.0 && fps > 0.0) {
        return Err(Error::rejected("align_modalities", "rates must be positive"));
    }
    let ratio = audio_rate / fps;
    let pooled = if (ratio - ratio.round()).abs() < 1e-9 && ratio >= 1.0 {
        tape.pool_rows(audio, ratio.round() as usize)?
    } else {
        let (t_out, m) = overlap_pooling_matrix(ta, ratio);
        let m = tape.constant(vec![t_out, ta], m.into_iter().map(T::from_f64_lossy).collect())?;
        tape.matmul(m, audio)?
    };
    let tp = tape.shape(pooled)[0];
    let len = tp.min(tv);
    let audio = if tp > len {
        tape.slice_rows(pooled, 0, len)?
    } else {
        pooled
    };
    let visual = if tv > len {
        tape.slice_rows(visual, 0, len)?
    } else {
        visual
    };
    Ok(AlignedPair {
        audio,
        visual,
        frame_rate: fps,
        len,
    })
}

/// Per-scale pooled sequences `A_i`, `V_i`.
#[derive(Clone, Debug)]
pub struct ScaleSet {
    pub factors: Vec<usize>,
    pub audio: Vec<Var>,
    pub visual: Vec<Var>,
    /// Length of the base (factor 1) timeline.
    pub base_len: usize,
}

impl ScaleSet {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

pub fn validate_factors(factors: &[usize]) -> Result<()> {
    if factors.is_empty() || factors.contains(&0) {
        return Err(Error::rejected(
            "build_scale_pyramid",
            format!("bad scale factors {factors:?}"),
        ));
    }
    Ok(())
}

/// Non-overlapping mean pooling per factor; length at factor `f` is
/// `ceil(T / f)`.
pub fn build_scale_pyramid<T: Scalar>(tape: &mut Tape<T>, pair: &AlignedPair, factors: &[usize]) -> Result<ScaleSet> {
    validate_factors(factors)?;
    let max = *factors.iter().max().expect("nonempty");
    if pair.len < max {
        return Err(Error::rejected(
            "build_scale_pyramid",
            format!("length {} shorter than largest factor {max}", pair.len),
        ));
    }
    let mut audio = Vec::new();
    let mut visual = Vec::new();
    for &f in factors {
        audio.push(if f == 1 {
            pair.audio
        } else {
            tape.pool_rows(pair.audio, f)?
        });
        visual.push(if f == 1 {
            pair.visual
        } else {
            tape.pool_rows(pair.visual, f)?
        });
    }
    Ok(ScaleSet {
        factors: factors.to_vec(),
        audio,
        visual,
        base_len: pair.len,
    })
}

/// Self-attention where position `t` sees the band given by `window` and
/// `band` (causal: `[t − window + 1, t]`), with a residual around it.
#[derive(Clone, Debug)]
pub struct WindowedAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub window: usize,
    pub band: Band,
}

impl WindowedAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        band: Band,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if window == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention needs window ≥ 1 and heads dividing {dim}; got window {window}, heads {heads}"
            )));
        }
        Ok(WindowedAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            window,
            band,
        })
    }

    /// Attention weights per head, each `[T, T]`.
    pub fn weights<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Vec<Var>> {
        Ok(self.heads(tape, bound, x)?.into_iter().map(|(a, _)| a).collect())
    }

    fn heads<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Vec<(Var, Var)>> {
        let (_, d) = rows(tape, x, "windowed_self_attention")?;
        let q = self.query.forward(tape, bound, x)?;
        let k = self.key.forward(tape, bound, x)?;
        let v = self.value.forward(tape, bound, x)?;
        let dh = d / self.heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let a = tape.band_softmax(scores, self.window, self.band)?;
            let ctx = tape.matmul(a, vh)?;
            out.push((a, ctx));
        }
        Ok(out)
    }

    /// `[T, D] -> [T, D]`
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let ctx: Vec<Var> = self.heads(tape, bound, x)?.into_iter().map(|(_, c)| c).collect();
        let ctx = if ctx.len() == 1 {
            ctx[0]
        } else {
            tape.concat_cols(&ctx)?
        };
        let y = self.output.forward(tape, bound, ctx)?;
        Ok(tape.add(x, y)?)
    }
}

/// Learned scalar weights `α_i`, `β_i`, one pair per scale.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub alpha: Vec<ParamId>,
    pub beta: Vec<ParamId>,
}

impl FusionWeights {
    /// Every weight starts at `1 / (2N)`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, scales: usize) -> Self {
        let v = 1.0 / (2.0 * scales as f64);
        FusionWeights {
            alpha: (0..scales)
                .map(|i| store.add(format!("{name}.alpha{i}"), init::constant(&[1], v)))
                .collect(),
            beta: (0..scales)
                .map(|i| store.add(format!("{name}.beta{i}"), init::constant(&[1], v)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn vars(&self, bound: &Bound) -> (Vec<Var>, Vec<Var>) {
        (
            self.alpha.iter().map(|&p| bound[p]).collect(),
            self.beta.iter().map(|&p| bound[p]).collect(),
        )
    }
}

/// `F(t) = Σ_i α_i·A_i(t) + β_i·V_i(t)`, where each scale is brought back to
/// the base timeline by nearest-neighbour repetition of its factor.
pub fn fuse_multiscale<T: Scalar>(tape: &mut Tape<T>, scales: &ScaleSet, alpha: &[Var], beta: &[Var]) -> Result<Var> {
    let n = scales.len();
    if alpha.len() != n || beta.len() != n || scales.audio.len() != n || scales.visual.len() != n {
        return Err(Error::rejected(
            "fuse_multiscale",
            format!("{} scales but {} α and {} β weights", n, alpha.len(), beta.len()),
        ));
    }
    let t = scales.base_len;
    let mut acc: Option<Var> = None;
    for i in 0..n {
        let f = scales.factors[i];
        for (x, w) in [(scales.audio[i], alpha[i]), (scales.visual[i], beta[i])] {
            let up = if f == 1 { x } else { tape.repeat_rows(x, f, t)? };
            let term = tape.scale_by(up, w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    Ok(acc.expect("n ≥ 1"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub dim: usize,
    pub factors: Vec<usize>,
    /// Attention window in positions of each scale's own timeline, so scale
    /// `f` sees `window · f` base frames.
    pub window: usize,
    pub heads: usize,
    pub band: Band,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            dim: 128,
            factors: vec![1, 2, 4],
            window: 8,
            heads: 1,
            band: Band::Causal,
        }
    }
}

/// Alignment, pyramid, per-scale attention for both modalities, fusion.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub config: FusionConfig,
    pub audio_attention: Vec<WindowedAttention>,
    pub visual_attention: Vec<WindowedAttention>,
    pub weights: FusionWeights,
}

impl FusionModule {
    pub fn new<T: Scalar>(
        config: FusionConfig,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        validate_factors(&config.factors).map_err(|e| Error::Config(e.to_string()))?;
        let mut make = |m: &str, i: usize| {
            WindowedAttention::new(
                store,
                &format!("{name}.{m}_attn{i}"),
                config.dim,
                config.heads,
                config.window,
                config.band,
                rng,
            )
        };
        let n = config.factors.len();
        let audio_attention = (0..n).map(|i| make("audio", i)).collect::<Result<Vec<_>>>()?;
        let visual_attention = (0..n).map(|i| make("visual", i)).collect::<Result<Vec<_>>>()?;
        let weights = FusionWeights::new(store, name, n);
        Ok(FusionModule {
            config,
            audio_attention,
            visual_attention,
            weights,
        })
    }

    /// Applies attention to each scale in place.
    pub fn attend<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, scales: &mut ScaleSet) -> Result<()> {
        for i in 0..scales.len() {
            scales.audio[i] = self.audio_attention[i].forward(tape, bound, scales.audio[i])?;
            scales.visual[i] = self.visual_attention[i].forward(tape, bound, scales.visual[i])?;
        }
        Ok(())
    }

    /// Already-aligned pair to `[T, D]` fused features.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, pair: &AlignedPair) -> Result<Var> {
        let mut scales = build_scale_pyramid(tape, pair, &self.config.factors)?;
        self.attend(tape, bound, &mut scales)?;
        let (alpha, beta) = self.weights.vars(bound);
        fuse_multiscale(tape, &scales, &alpha, &beta)
    }
}
