use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Disjoint clip-id lists covering every clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    pub fn validation(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Every clip outside `fold`, in fold order.
    pub fn training(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Seeded shuffle, then round-robin assignment at clip level.
pub fn split_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k == 0 || ids.len() < k {
        return Err(Error::rejected(
            "split_folds",
            format!("{} clips cannot fill {k} folds", ids.len()),
        ));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldPlan { folds, seed })
}
