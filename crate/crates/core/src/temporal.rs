//! Residual dilated causal TCN and the per-frame MLP classifier head.

use avau_tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::layers::Linear;

pub const AU_COUNT: usize = 12;
pub const HIDDEN_UNITS: usize = 512;
pub const DROPOUT_RATE: f64 = 0.3;
/// Decision threshold on the "active" probability; ties count as active.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TcnConfig {
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub channels: usize,
    pub residual: bool,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            kernel: 3,
            dilations: vec![1, 2, 4, 8],
            channels: 128,
            residual: true,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.channels == 0 || self.dilations.is_empty() {
            return Err(Error::Config(
                "tcn kernel, channels and dilations must be nonempty".into(),
            ));
        }
        if self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "dilations {:?} must be positive and strictly increasing",
                self.dilations
            )));
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self.kernel, &self.dilations)
    }
}

/// Every block holds two convolutions of the same dilation, so the span is
/// `1 + 2·(k − 1)·Σ d`.
pub fn receptive_field(kernel: usize, dilations: &[usize]) -> usize {
    1 + 2 * (kernel - 1) * dilations.iter().sum::<usize>()
}

#[derive(Clone, Debug)]
pub struct CausalConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl CausalConv {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CausalConv {
            weight: store.add(
                format!("{name}.weight"),
                init::fan_in_uniform(rng, &[kernel, cin, cout], kernel * cin, init::RELU_GAIN),
            ),
            bias: store.add(format!("{name}.bias"), init::zeros(&[cout])),
            dilation,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d_causal(x, bound[self.weight], self.dilation)?;
        Ok(tape.add_row(y, bound[self.bias])?)
    }
}

/// `out = skip(x) + relu(conv₂(relu(conv₁(x))))`, where `skip` is the
/// identity or a 1×1 projection when widths differ.
#[derive(Clone, Debug)]
pub struct TcnBlock {
    pub conv1: CausalConv,
    pub conv2: CausalConv,
    pub projection: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Tcn {
    pub config: TcnConfig,
    pub blocks: Vec<TcnBlock>,
}

impl Tcn {
    pub fn new<T: Scalar>(
        config: TcnConfig,
        inputs: usize,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut blocks = Vec::new();
        let mut cin = inputs;
        for (l, &d) in config.dilations.iter().enumerate() {
            let p = format!("{name}.block{l}");
            blocks.push(TcnBlock {
                conv1: CausalConv::new(store, &format!("{p}.conv1"), config.kernel, cin, c, d, rng),
                conv2: CausalConv::new(store, &format!("{p}.conv2"), config.kernel, c, c, d, rng),
                projection: (config.residual && cin != c)
                    .then(|| Linear::new(store, &format!("{p}.skip"), cin, c, rng)),
            });
            cin = c;
        }
        Ok(Tcn { config, blocks })
    }

    /// `[T, C_in] -> [T, C]`, causal.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            let y = block.conv1.forward(tape, bound, h)?;
            let y = tape.relu(y)?;
            let y = block.conv2.forward(tape, bound, y)?;
            let y = tape.relu(y)?;
            h = if !self.config.residual {
                y
            } else {
                let skip = match &block.projection {
                    Some(p) => p.forward(tape, bound, h)?,
                    None => h,
                };
                tape.add(skip, y)?
            };
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from `seed`.
    Train {
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct MlpHead {
    pub hidden: Linear,
    pub output: Linear,
    pub dropout: f64,
}

impl MlpHead {
    pub fn new<T: Scalar>(
        inputs: usize,
        hidden: usize,
        dropout: f64,
        store: &mut ParamStore<T>,
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(MlpHead {
            hidden: Linear::rectified(store, &format!("{name}.fc1"), inputs, hidden, rng),
            output: Linear::new(store, &format!("{name}.fc2"), hidden, AU_COUNT * 2, rng),
            dropout,
        })
    }

    /// `[T, C] -> [T·12, 2]`: row `t·12 + j` holds the (inactive, active)
    /// logits of AU `j` at frame `t`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, mode: Mode) -> Result<Var> {
        let t = tape.shape(x)[0];
        let h = self.hidden.forward(tape, bound, x)?;
        let mut h = tape.relu(h)?;
        if let Mode::Train { seed } = mode {
            if self.dropout > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 - self.dropout;
                let scale = T::from_f64_lossy(1.0 / keep);
                let mask = (0..tape.value(h).len())
                    .map(|_| if rng.random_bool(keep) { scale } else { T::zero() })
                    .collect();
                h = tape.mul_const(h, mask)?;
            }
        }
        let y = self.output.forward(tape, bound, h)?;
        Ok(tape.reshape(y, vec![t * AU_COUNT, 2])?)
    }
}

/// `T × 12 × 2` per-AU two-way logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AuLogits {
    pub frames: usize,
    pub scores: Vec<f64>,
}

impl AuLogits {
    pub fn new(frames: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != frames * AU_COUNT * 2 {
            return Err(Error::rejected(
                "au_logits",
                format!("{} scores for {frames} frames", scores.len()),
            ));
        }
        Ok(AuLogits { frames, scores })
    }

    pub fn from_tape<T: Scalar>(tape: &Tape<T>, logits: Var) -> Result<Self> {
        let v = tape.value(logits);
        AuLogits::new(v.len() / (AU_COUNT * 2), v.iter().map(|x| x.as_f64()).collect())
    }

    pub fn pair(&self, t: usize, j: usize) -> (f64, f64) {
        let i = (t * AU_COUNT + j) * 2;
        (self.scores[i], self.scores[i + 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuPrediction {
    pub frames: usize,
    pub probabilities: Vec<f64>,
    pub active: Vec<bool>,
}

impl AuPrediction {
    pub fn get(&self, t: usize, j: usize) -> bool {
        self.active[t * AU_COUNT + j]
    }
}

/// Probability of the second ("active") class under a two-way softmax.
pub fn active_probability(inactive: f64, active: f64) -> f64 {
    let m = inactive.max(active);
    let (e0, e1) = ((inactive - m).exp(), (active - m).exp());
    e1 / (e0 + e1)
}

pub fn predict(logits: &AuLogits) -> AuPrediction {
    let probabilities: Vec<f64> = logits
        .scores
        .chunks_exact(2)
        .map(|p| active_probability(p[0], p[1]))
        .collect();
    let active = probabilities.iter().map(|&p| p >= THRESHOLD).collect();
    AuPrediction {
        frames: logits.frames,
        probabilities,
        active,
    }
}

/// `T × 12` binary labels, one row per video frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuLabelMatrix {
    frames: usize,
    values: Vec<u8>,
}

impl AuLabelMatrix {
    pub fn new(frames: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != frames * AU_COUNT {
            return Err(Error::rejected(
                "au_labels",
                format!("{} values for {frames} frames", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::rejected("au_labels", format!("label {v} outside {{0, 1}}")));
        }
        Ok(AuLabelMatrix { frames, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.values[t * AU_COUNT..(t + 1) * AU_COUNT]
    }

    pub fn get(&self, t: usize, j: usize) -> bool {
        self.values[t * AU_COUNT + j] == 1
    }

    /// Rows `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(Error::rejected(
                "au_labels",
                format!("rows {start}..{} of {}", start + len, self.frames),
            ));
        }
        Ok(AuLabelMatrix {
            frames: len,
            values: self.values[start * AU_COUNT..(start + len) * AU_COUNT].to_vec(),
        })
    }
}

/// Mean two-way cross-entropy over frames and AUs. `labels` is the raw
/// `T × 12` matrix; entries outside {0, 1} are rejected.
pub fn au_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[1] != 2 || s[0] != labels.len() || !s[0].is_multiple_of(AU_COUNT) {
        return Err(Error::rejected(
            "au_loss",
            format!("logits {s:?} vs {} labels", labels.len()),
        ));
    }
    if let Some(v) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::rejected("au_loss", format!("label {v} outside {{0, 1}}")));
    }
    let targets: Vec<usize> = labels.iter().map(|&v| usize::from(v)).collect();
    Ok(tape.softmax_cross_entropy(logits, &targets)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_receptive_field() {
        assert_eq!(TcnConfig::default().receptive_field(), 61);
    }

    #[test]
    fn dilations_must_increase() {
        let cfg = TcnConfig {
            dilations: vec![1, 2, 2],
            ..TcnConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tie_is_active() {
        let p = predict(&AuLogits::new(1, vec![0.3; 24]).unwrap());
        assert!(p.probabilities.iter().all(|&x| x == 0.5));
        assert!(p.active.iter().all(|&a| a));
    }

    #[test]
    fn closed_form_probability() {
        assert!((active_probability(0.0, 3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn labels_reject_non_binary() {
        assert!(AuLabelMatrix::new(1, vec![2; 12]).is_err());
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(vec![12, 2], vec![0.0; 24]).unwrap();
        assert!(au_loss(&mut tape, l, &[3; 12]).is_err());
    }
}
