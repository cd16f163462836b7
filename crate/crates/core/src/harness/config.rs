//! Flat `key = value` training configuration.

use std::path::Path;
use std::str::FromStr;

use avau_tensor::Band;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub folds: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a new best validation macro F1.
    pub patience: usize,
    pub learning_rate: f64,
    /// Random local views drawn per training clip per epoch.
    pub views_per_clip: usize,
    /// Also take one step per clip on its full-length views each epoch.
    pub global_views: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            folds: 6,
            epochs: 15,
            patience: 5,
            learning_rate: 2e-3,
            views_per_clip: 3,
            global_views: false,
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "views_per_clip" => self.views_per_clip = parse(key, v)?,
            "global_views" => self.global_views = parse_bool(key, v)?,
            "audio_patch_t" => m.audio_patch_t = parse(key, v)?,
            "audio_patch_f" => m.audio_patch_f = parse(key, v)?,
            "resolution" => m.encoder.resolution = parse(key, v)?,
            "encoder_widths" => m.encoder.widths = parse_list(key, v)?,
            "encoder_depths" => m.encoder.depths = parse_list(key, v)?,
            "encoder_kernel" => m.encoder.kernel = parse(key, v)?,
            "encoder_patch" => m.encoder.patch = parse(key, v)?,
            "dim" => m.fusion.dim = parse(key, v)?,
            "scales" => m.fusion.factors = parse_list(key, v)?,
            "window" => m.fusion.window = parse(key, v)?,
            "heads" => m.fusion.heads = parse(key, v)?,
            "band" => {
                m.fusion.band = match v {
                    "causal" => Band::Causal,
                    "centered" => Band::Centered,
                    _ => return Err(Error::Config(format!("band: expected causal or centered, got {v:?}"))),
                }
            }
            "tcn_kernel" => m.tcn.kernel = parse(key, v)?,
            "dilations" => m.tcn.dilations = parse_list(key, v)?,
            "tcn_channels" => m.tcn.channels = parse(key, v)?,
            "residual" => m.tcn.residual = parse_bool(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("folds ≥ 2, epochs ≥ 1 and patience ≥ 1 required".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.views_per_clip == 0 && !self.global_views {
            return Err(Error::Config(
                "no training views: set views_per_clip or global_views".into(),
            ));
        }
        self.model.validate()
    }

    /// The config in the same `key = value` form it is read from.
    pub fn render(&self) -> String {
        let m = &self.model;
        let band = match m.fusion.band {
            Band::Causal => "causal",
            Band::Centered => "centered",
        };
        [
            ("seed", self.seed.to_string()),
            ("folds", self.folds.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("views_per_clip", self.views_per_clip.to_string()),
            ("global_views", self.global_views.to_string()),
            ("audio_patch_t", m.audio_patch_t.to_string()),
            ("audio_patch_f", m.audio_patch_f.to_string()),
            ("resolution", m.encoder.resolution.to_string()),
            ("encoder_widths", join(&m.encoder.widths)),
            ("encoder_depths", join(&m.encoder.depths)),
            ("encoder_kernel", m.encoder.kernel.to_string()),
            ("encoder_patch", m.encoder.patch.to_string()),
            ("dim", m.fusion.dim.to_string()),
            ("scales", join(&m.fusion.factors)),
            ("window", m.fusion.window.to_string()),
            ("heads", m.fusion.heads.to_string()),
            ("band", band.to_string()),
            ("tcn_kernel", m.tcn.kernel.to_string()),
            ("dilations", join(&m.tcn.dilations)),
            ("tcn_channels", m.tcn.channels.to_string()),
            ("residual", m.tcn.residual.to_string()),
            ("hidden", m.hidden.to_string()),
            ("dropout", m.dropout.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }
}
