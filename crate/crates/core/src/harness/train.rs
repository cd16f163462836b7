//! Per-fold training with best-checkpoint retention, and six-fold
//! cross-validation.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use avau_tensor::{Adam, AdamConfig, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::data::{Clip, Dataset};
use super::folds::{split_folds, FoldPlan};
use super::metrics::{f1_per_au, macro_f1};
use crate::error::{Error, Result};
use crate::model::AuModel;
use crate::temporal::{au_loss, predict, AuLabelMatrix, AuPrediction, Mode, AU_COUNT};
use crate::views::{
    audio_global_view, audio_local_view_at, sample_frequency_masks, segment_frames, video_global_view,
    video_local_view_at, AudioView, Augmentation, VideoView, LOCAL_AUDIO_FRAMES,
};

/// How clips are assigned to folds; printed with every report.
pub const SPLIT_POLICY: &str = "clip-level (no clip spans folds), unstratified seeded shuffle";

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub per_au_f1: [f64; AU_COUNT],
    pub macro_f1: f64,
    /// Epochs actually run.
    pub epochs: usize,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_macro_f1: Vec<f64>,
    /// Clip ids that contributed training steps.
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub wall_time: Duration,
}

#[allow(clippy::large_enum_variant)] // a handful per run; boxing buys nothing
#[derive(Clone, Debug, PartialEq)]
pub enum FoldOutcome {
    Completed(FoldReport),
    Failed { fold: usize, error: String },
}

impl FoldOutcome {
    pub fn report(&self) -> Option<&FoldReport> {
        match self {
            FoldOutcome::Completed(r) => Some(r),
            FoldOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvSummary {
    pub seed: u64,
    pub outcomes: Vec<FoldOutcome>,
}

impl CvSummary {
    /// `(fold, macro F1)` of the best completed fold.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.outcomes
            .iter()
            .filter_map(FoldOutcome::report)
            .map(|r| (r.fold, r.macro_f1))
            .fold(None, |best, (f, m)| match best {
                Some((_, b)) if b >= m => best,
                _ => Some((f, m)),
            })
    }

    /// Per-fold macro F1 in percent with the best fold marked. Wall time is
    /// left out so identical runs print identical tables.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "split: {SPLIT_POLICY}; seed {}", self.seed).unwrap();
        writeln!(s, "{:<8} {:>8}", "fold", "F1 (%)").unwrap();
        for o in &self.outcomes {
            match o {
                FoldOutcome::Completed(r) => writeln!(s, "fold-{:<3} {:>8.2}", r.fold + 1, 100.0 * r.macro_f1).unwrap(),
                FoldOutcome::Failed { fold, error } => {
                    writeln!(s, "fold-{:<3} {:>8}  {error}", fold + 1, "failed").unwrap()
                }
            }
        }
        match self.best() {
            Some((f, m)) => writeln!(s, "{:<8} {:>8.2}  (fold-{})", "best", 100.0 * m, f + 1).unwrap(),
            None => writeln!(s, "{:<8} {:>8}", "best", "-").unwrap(),
        }
        s
    }

    /// Per-AU F1 (%) for every completed fold.
    pub fn per_au_table(&self) -> String {
        let mut s = format!("{:<8}", "fold");
        for j in 1..=AU_COUNT {
            write!(s, " {:>6}", format!("au{j}")).unwrap();
        }
        s.push_str("  epochs best\n");
        for r in self.outcomes.iter().filter_map(FoldOutcome::report) {
            write!(s, "fold-{:<3}", r.fold + 1).unwrap();
            for f in r.per_au_f1 {
                write!(s, " {:>6.1}", 100.0 * f).unwrap();
            }
            writeln!(s, "  {:>6} {:>4}", r.epochs, r.best_epoch).unwrap();
        }
        s
    }
}

/// Independent stream for each fold, derived from the root seed.
pub fn fold_seed(root: u64, fold: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(fold as u64 + 1);
    rng.next_u64()
}

/// Paired one-second views: a random video segment, the audio second that
/// starts with it, frequency masks and one shared frame augmentation.
pub fn sample_local_views(clip: &Clip, rng: &mut ChaCha8Rng) -> Result<(AudioView, VideoView, AuLabelMatrix)> {
    let seg = segment_frames(clip.fps);
    if clip.frames.len() < seg || clip.mel.frames() < LOCAL_AUDIO_FRAMES {
        return Err(Error::rejected(
            "sample_local_views",
            format!("clip {} is shorter than 1 s", clip.id),
        ));
    }
    let start = rng.random_range(0..=clip.frames.len() - seg);
    let audio_start = ((start as f64 * clip.mel.frame_rate() / clip.fps).round() as usize)
        .min(clip.mel.frames() - LOCAL_AUDIO_FRAMES);
    let masks = sample_frequency_masks(rng, clip.mel.mels());
    let aug = Augmentation::sample(rng);
    Ok((
        audio_local_view_at(&clip.mel, audio_start, masks)?,
        video_local_view_at(&clip.frames, clip.fps, start, aug)?,
        clip.labels.slice(start, seg)?,
    ))
}

pub fn global_views(clip: &Clip) -> Result<(AudioView, VideoView)> {
    Ok((audio_global_view(&clip.mel), video_global_view(&clip.frames, clip.fps)?))
}

/// Evaluation-mode predictions for `clip`, with the labels trimmed to the
/// predicted length.
pub fn predict_clip(model: &AuModel<f32>, clip: &Clip) -> Result<(AuPrediction, AuLabelMatrix)> {
    let (a, v) = global_views(clip)?;
    let pred = predict(&model.logits(&a, &v)?);
    let truth = clip.labels.slice(0, pred.frames.min(clip.labels.frames()))?;
    Ok((pred, truth))
}

/// Per-AU F1 over the concatenated frames of `clips`.
pub fn evaluate(model: &AuModel<f32>, clips: &[&Clip]) -> Result<[f64; AU_COUNT]> {
    let mut active = Vec::new();
    let mut probabilities = Vec::new();
    let mut labels = Vec::new();
    let mut frames = 0;
    for clip in clips {
        let (p, t) = predict_clip(model, clip)?;
        active.extend(p.active);
        probabilities.extend(p.probabilities);
        labels.extend_from_slice(t.values());
        frames += t.frames();
    }
    let pred = AuPrediction {
        frames,
        probabilities,
        active,
    };
    f1_per_au(&pred, &AuLabelMatrix::new(frames, labels)?)
}

/// One optimizer step; returns the loss.
fn step(
    model: &mut AuModel<f32>,
    adam: &mut Adam<f32>,
    audio: &AudioView,
    video: &VideoView,
    labels: &AuLabelMatrix,
    dropout_seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let logits = model.forward(&mut tape, &bound, audio, video, Mode::Train { seed: dropout_seed })?;
    let t = tape.shape(logits)[0] / AU_COUNT;
    let target = labels.slice(0, t.min(labels.frames()))?;
    if target.frames() != t {
        return Err(Error::rejected(
            "train",
            format!("{t} predicted frames, {} labelled", target.frames()),
        ));
    }
    let loss = au_loss(&mut tape, logits, target.values())?;
    let value = f64::from(tape.value(loss)[0]);
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    model.params.store_grads(&grads, &bound);
    adam.step(&mut model.params)?;
    Ok(value)
}

/// Trains on every fold but `fold` and keeps the parameters with the best
/// validation macro F1 on `fold`.
pub fn train_fold(
    data: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
) -> Result<(AuModel<f32>, FoldReport)> {
    if fold >= plan.len() {
        return Err(Error::rejected("train_fold", format!("fold {fold} of {}", plan.len())));
    }
    let started = Instant::now();
    let val_ids = plan.validation(fold).to_vec();
    let train_ids = plan.training(fold);
    let val_set: HashSet<&str> = val_ids.iter().map(String::as_str).collect();
    if let Some(id) = train_ids.iter().find(|id| val_set.contains(id.as_str())) {
        return Err(Error::rejected("train_fold", format!("clip {id} is in both streams")));
    }
    let lookup = |id: &String| {
        data.get(id)
            .ok_or_else(|| Error::rejected("train_fold", format!("clip {id} missing from dataset")))
    };
    let train: Vec<&Clip> = train_ids.iter().map(lookup).collect::<Result<_>>()?;
    let val: Vec<&Clip> = val_ids.iter().map(lookup).collect::<Result<_>>()?;

    let seed = fold_seed(cfg.seed, fold);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AuModel::<f32>::new(cfg.model.clone(), rng.next_u64())?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );

    let mut best = (f64::NEG_INFINITY, 0, model.params.clone(), [0.0; AU_COUNT]);
    let mut train_loss = Vec::new();
    let mut val_macro = Vec::new();
    let mut used = HashSet::new();
    let mut stagnant = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<(usize, bool)> = (0..train.len())
            .flat_map(|i| std::iter::repeat_n((i, false), cfg.views_per_clip))
            .chain((0..train.len()).filter(|_| cfg.global_views).map(|i| (i, true)))
            .collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &(i, global) in &order {
            let clip = train[i];
            let (a, v, labels) = if global {
                let (a, v) = global_views(clip)?;
                (a, v, clip.labels.clone())
            } else {
                sample_local_views(clip, &mut rng)?
            };
            let loss = step(&mut model, &mut adam, &a, &v, &labels, rng.next_u64())?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    fold,
                    epoch,
                    msg: format!("loss {loss} on clip {}", clip.id),
                });
            }
            used.insert(clip.id.clone());
            total += loss;
        }
        train_loss.push(total / order.len() as f64);
        let per_au = evaluate(&model, &val)?;
        let m = macro_f1(&per_au);
        val_macro.push(m);
        log::info!(
            "fold {} epoch {epoch}: train loss {:.4}, validation macro F1 {:.4}",
            fold + 1,
            train_loss[epoch - 1],
            m
        );
        if m > best.0 {
            best = (m, epoch, model.params.clone(), per_au);
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= cfg.patience {
                break;
            }
        }
    }
    let (macro_f1, best_epoch, params, per_au_f1) = best;
    model.params = params;
    let mut train_ids: Vec<String> = used.into_iter().collect();
    train_ids.sort();
    let report = FoldReport {
        fold,
        per_au_f1,
        macro_f1,
        epochs: train_loss.len(),
        best_epoch,
        train_loss,
        val_macro_f1: val_macro,
        train_ids,
        val_ids,
        wall_time: started.elapsed(),
    };
    Ok((model, report))
}

/// Runs every fold (in parallel); a failing fold is recorded and the rest
/// continue. Returns the trained models alongside the summary.
pub fn cross_validate_models(data: &Dataset, cfg: &TrainConfig) -> Result<(CvSummary, Vec<Option<AuModel<f32>>>)> {
    cfg.validate()?;
    let plan = split_folds(&data.ids(), cfg.folds, cfg.seed)?;
    let results: Vec<Result<(AuModel<f32>, FoldReport)>> = (0..plan.len())
        .into_par_iter()
        .map(|k| train_fold(data, &plan, k, cfg))
        .collect();
    let mut outcomes = Vec::new();
    let mut models = Vec::new();
    for (fold, r) in results.into_iter().enumerate() {
        match r {
            Ok((m, rep)) => {
                outcomes.push(FoldOutcome::Completed(rep));
                models.push(Some(m));
            }
            Err(e) => {
                log::warn!("fold {} failed: {e}", fold + 1);
                outcomes.push(FoldOutcome::Failed {
                    fold,
                    error: e.to_string(),
                });
                models.push(None);
            }
        }
    }
    Ok((
        CvSummary {
            seed: cfg.seed,
            outcomes,
        },
        models,
    ))
}

pub fn cross_validate(data: &Dataset, cfg: &TrainConfig) -> Result<CvSummary> {
    Ok(cross_validate_models(data, cfg)?.0)
}
