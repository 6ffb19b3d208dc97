use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use super::{ManifestEntry, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KFoldError {
    #[error("k must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("fold index {index} out of range for k = {k}")]
    FoldIndex { index: usize, k: usize },
    #[error("k = {k} exceeds manifest size {len}")]
    TooManyFolds { k: usize, len: usize },
}

/// Fold number of every manifest entry. Within each class the entries are
/// shuffled and dealt round-robin; the dealing position carries over from one
/// class to the next so fold sizes stay within one of each other.
pub(crate) fn fold_assignment<R: Rng + ?Sized>(manifest: &[ManifestEntry], k: usize, rng: &mut R) -> Vec<usize> {
    let mut assignment = vec![0; manifest.len()];
    let mut next = 0;
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = (0..manifest.len())
            .filter(|&i| manifest[i].label.index() == class)
            .collect();
        members.shuffle(rng);
        for i in members {
            assignment[i] = next;
            next = (next + 1) % k;
        }
    }
    assignment
}

/// Class-stratified split into (training, holdout) for fold `fold_index` of `k`.
/// Both halves keep manifest order.
pub fn kfold_split<R: Rng + ?Sized>(
    manifest: &[ManifestEntry],
    k: usize,
    fold_index: usize,
    rng: &mut R,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>), KFoldError> {
    if k < 2 {
        return Err(KFoldError::TooFewFolds(k));
    }
    if fold_index >= k {
        return Err(KFoldError::FoldIndex { index: fold_index, k });
    }
    if k > manifest.len() {
        return Err(KFoldError::TooManyFolds { k, len: manifest.len() });
    }
    let assignment = fold_assignment(manifest, k, rng);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (entry, fold) in manifest.iter().zip(assignment) {
        if fold == fold_index {
            holdout.push(entry.clone());
        } else {
            train.push(entry.clone());
        }
    }
    Ok((train, holdout))
}
