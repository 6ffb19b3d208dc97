//! Dataset records, batch sampling, fold splitting and synthetic lesion images.

mod kfold;
mod manifest;
mod sampler;
mod synth;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use kfold::{kfold_split, KFoldError};
pub use manifest::{load_manifest, write_manifest, ManifestEntry, ManifestError};
pub use sampler::{balanced_batch, BalancedSampler, BatchPlan, SamplerError};
pub use synth::{
    mean_abs_laplacian, mirror_asymmetry, synth_dataset, synth_generate, synth_render, LesionRender, SynthError,
    SynthSummary,
};

/// Deterministic generator used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const NUM_CLASSES: usize = 3;

/// Diagnosis label with a stable integer encoding (0, 1, 2 in declaration order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Melanoma = 0,
    SeborrheicKeratosis = 1,
    Nevus = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Melanoma, ClassLabel::SeborrheicKeratosis, ClassLabel::Nevus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Melanoma => "melanoma",
            ClassLabel::SeborrheicKeratosis => "seborrheic_keratosis",
            ClassLabel::Nevus => "nevus",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown class label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for ClassLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == folded)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}
