use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use thiserror::Error;

use super::{ClassLabel, ManifestEntry, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplerError {
    #[error("classes with no examples: {0:?}")]
    EmptyClasses(Vec<ClassLabel>),
    #[error("batch size {0} is smaller than the number of classes")]
    BatchTooSmall(usize),
}

/// One mini-batch: manifest indices grouped by class, and the per-class counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub counts: [usize; NUM_CLASSES],
}

/// Class-balanced sampler drawing with replacement inside each class.
///
/// Every class gets `batch / 3` slots; the `batch % 3` leftover slots go to
/// distinct classes chosen uniformly at random for each batch.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    by_class: [Vec<usize>; NUM_CLASSES],
}

impl BalancedSampler {
    pub fn new(manifest: &[ManifestEntry]) -> Result<Self, SamplerError> {
        Self::from_labels(manifest.iter().map(|e| e.label))
    }

    pub fn from_labels(labels: impl IntoIterator<Item = ClassLabel>) -> Result<Self, SamplerError> {
        let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
        for (i, label) in labels.into_iter().enumerate() {
            by_class[label.index()].push(i);
        }
        let empty: Vec<ClassLabel> = ClassLabel::ALL
            .into_iter()
            .filter(|c| by_class[c.index()].is_empty())
            .collect();
        if !empty.is_empty() {
            return Err(SamplerError::EmptyClasses(empty));
        }
        Ok(Self { by_class })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch_size: usize) -> Result<BatchPlan, SamplerError> {
        if batch_size < NUM_CLASSES {
            return Err(SamplerError::BatchTooSmall(batch_size));
        }
        let mut counts = [batch_size / NUM_CLASSES; NUM_CLASSES];
        let remainder = batch_size % NUM_CLASSES;
        if remainder > 0 {
            let mut order = [0, 1, 2];
            order.shuffle(rng);
            for &c in &order[..remainder] {
                counts[c] += 1;
            }
        }
        let mut indices = Vec::with_capacity(batch_size);
        for (class, &n) in counts.iter().enumerate() {
            let pool = &self.by_class[class];
            indices.extend((0..n).map(|_| *pool.choose(rng).expect("non-empty class")));
        }
        Ok(BatchPlan { indices, counts })
    }
}

pub fn balanced_batch<R: Rng + ?Sized>(
    rng: &mut R,
    manifest: &[ManifestEntry],
    batch_size: usize,
) -> Result<BatchPlan, SamplerError> {
    BalancedSampler::new(manifest)?.sample(rng, batch_size)
}
