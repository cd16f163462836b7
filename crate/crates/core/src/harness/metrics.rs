use crate::error::{Error, Result};
use crate::temporal::{AuLabelMatrix, AuPrediction, AU_COUNT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// `2TP / (2TP + FP + FN)`, defined as 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

pub fn confusions(pred: &AuPrediction, truth: &AuLabelMatrix) -> Result<[Confusion; AU_COUNT]> {
    if pred.frames != truth.frames() {
        return Err(Error::rejected(
            "f1_per_au",
            format!("{} predicted frames vs {} labelled", pred.frames, truth.frames()),
        ));
    }
    let mut c = [Confusion::default(); AU_COUNT];
    for t in 0..pred.frames {
        for (j, cj) in c.iter_mut().enumerate() {
            cj.record(pred.get(t, j), truth.get(t, j));
        }
    }
    Ok(c)
}

/// Per-AU F1 counted over all frames.
pub fn f1_per_au(pred: &AuPrediction, truth: &AuLabelMatrix) -> Result<[f64; AU_COUNT]> {
    Ok(confusions(pred, truth)?.map(|c| c.f1()))
}

pub fn macro_f1(per_au: &[f64]) -> f64 {
    per_au.iter().sum::<f64>() / per_au.len() as f64
}
