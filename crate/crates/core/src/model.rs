//! The full audio-visual AU detector.

use avau_tensor::{Bound, ParamStore, Scalar, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{FRAME_RATE, NUM_MELS};
use crate::error::{Error, Result};
use crate::fusion::{align_modalities, FusionConfig, FusionModule};
use crate::layers::LayerNorm;
use crate::temporal::{AuLogits, MlpHead, Mode, Tcn, TcnConfig, DROPOUT_RATE, HIDDEN_UNITS};
use crate::views::{tokenize_audio_view, AudioView, Modality, Projection, VideoView};
use crate::visual::{EncoderConfig, VisualEncoder};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Audio tokens are `patch_t × patch_f` patches; all patches of one time
    /// block are concatenated into one vector per block.
    pub audio_patch_t: usize,
    pub audio_patch_f: usize,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub tcn: TcnConfig,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio_patch_t: 1,
            audio_patch_f: NUM_MELS,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            tcn: TcnConfig::default(),
            hidden: HIDDEN_UNITS,
            dropout: DROPOUT_RATE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.audio_patch_t == 0 || self.audio_patch_f == 0 || !NUM_MELS.is_multiple_of(self.audio_patch_f) {
            return Err(Error::Config(format!(
                "audio patch {}×{} does not tile {NUM_MELS} channels",
                self.audio_patch_t, self.audio_patch_f
            )));
        }
        if self.fusion.dim == 0 || self.hidden == 0 {
            return Err(Error::Config("embedding and hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.encoder.validate()?;
        self.tcn.validate()
    }

    /// Width of one audio time-block vector.
    pub fn audio_block_width(&self) -> usize {
        self.audio_patch_t * NUM_MELS
    }

    /// Audio embedding rate in Hz.
    pub fn audio_rate(&self) -> f64 {
        FRAME_RATE / self.audio_patch_t as f64
    }
}

#[derive(Clone, Debug)]
pub struct AuModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub audio_norm: LayerNorm,
    pub audio_projection: Projection,
    pub encoder: VisualEncoder,
    pub visual_projection: Projection,
    pub fusion: FusionModule,
    pub tcn: Tcn,
    pub head: MlpHead,
}

impl<T: Scalar> AuModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.fusion.dim;
        let audio_norm = LayerNorm::new(&mut params, "audio.norm", config.audio_block_width());
        let audio_projection = Projection::new(
            &mut params,
            "audio.proj",
            Modality::Audio,
            config.audio_block_width(),
            d,
            &mut rng,
        );
        let encoder = VisualEncoder::new(config.encoder.clone(), &mut params, "visual.encoder", &mut rng)?;
        let visual_projection = Projection::new(
            &mut params,
            "visual.proj",
            Modality::Visual,
            config.encoder.output_width(),
            d,
            &mut rng,
        );
        let fusion = FusionModule::new(config.fusion.clone(), &mut params, "fusion", &mut rng)?;
        let tcn = Tcn::new(config.tcn.clone(), d, &mut params, "tcn", &mut rng)?;
        let head = MlpHead::new(
            config.tcn.channels,
            config.hidden,
            config.dropout,
            &mut params,
            "head",
            &mut rng,
        )?;
        Ok(AuModel {
            config,
            params,
            audio_norm,
            audio_projection,
            encoder,
            visual_projection,
            fusion,
            tcn,
            head,
        })
    }

    /// `[T_a', D]` audio embeddings at [`ModelConfig::audio_rate`].
    pub fn embed_audio(&self, tape: &mut Tape<T>, bound: &Bound, view: &AudioView) -> Result<Var> {
        let tokens = tokenize_audio_view(view, self.config.audio_patch_t, self.config.audio_patch_f)?;
        let width = self.config.audio_block_width();
        let blocks = tokens.tokens.len() / width;
        let x = tape.constant(
            vec![blocks, width],
            tokens.tokens.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?;
        let x = self.audio_norm.forward(tape, bound, x)?;
        self.audio_projection.forward(tape, bound, x)
    }

    /// `[T_v, D]` visual embeddings, one per frame.
    pub fn embed_video(&self, tape: &mut Tape<T>, bound: &Bound, view: &VideoView) -> Result<Var> {
        let r = self.config.encoder.resolution;
        if view.frames.is_empty() || view.frames.iter().any(|f| f.size() != r) {
            return Err(Error::rejected(
                "embed_video",
                format!("expected nonempty {r}×{r} frames"),
            ));
        }
        let mut data = Vec::with_capacity(view.frames.len() * r * r * 3);
        for f in &view.frames {
            data.extend(f.standardized().into_iter().map(|v| T::from_f64_lossy(f64::from(v))));
        }
        let x = tape.constant(vec![view.frames.len(), r, r, 3], data)?;
        let e = self.encoder.forward(tape, bound, x)?;
        self.visual_projection.forward(tape, bound, e)
    }

    /// `[T, D]` fused features on the video timeline.
    pub fn fused(&self, tape: &mut Tape<T>, bound: &Bound, audio: &AudioView, video: &VideoView) -> Result<Var> {
        let a = self.embed_audio(tape, bound, audio)?;
        let v = self.embed_video(tape, bound, video)?;
        let pair = align_modalities(tape, a, self.config.audio_rate(), v, video.fps)?;
        self.fusion.forward(tape, bound, &pair)
    }

    /// `[T·12, 2]` logits.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        audio: &AudioView,
        video: &VideoView,
        mode: Mode,
    ) -> Result<Var> {
        let f = self.fused(tape, bound, audio, video)?;
        let h = self.tcn.forward(tape, bound, f)?;
        self.head.forward(tape, bound, h, mode)
    }

    /// Evaluation-mode logits.
    pub fn logits(&self, audio: &AudioView, video: &VideoView) -> Result<AuLogits> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, audio, video, Mode::Eval)?;
        AuLogits::from_tape(&tape, y)
    }
}
