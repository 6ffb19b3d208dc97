//! Turning manifest images into model inputs.

use std::fs;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::{ClassLabel, ManifestEntry};
use crate::image::{
    decode_ppm, preprocess_pair, rescale_to_unit, resize_bilinear, ImageBuffer, ImageError, ScaleSizes,
};
use crate::model::{Mode, ModelConfig, ModelInput};

/// Fine-view resize relative to the coarse view.
pub const FINE_RESIZE_FACTOR: usize = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: ImageError },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// How an image becomes a [`ModelInput`]: both views for the multi-scale
/// model, or only the coarse resize for a single-scale model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputSpec {
    pub mode: Mode,
    pub sizes: ScaleSizes,
}

impl Default for InputSpec {
    fn default() -> Self {
        Self {
            mode: Mode::MultiScale,
            sizes: ScaleSizes::default(),
        }
    }
}

impl InputSpec {
    pub fn single(side: usize) -> Self {
        Self {
            mode: Mode::SingleScale,
            sizes: ScaleSizes {
                coarse: side,
                fine_resize: side,
                crop: side,
            },
        }
    }

    /// The preprocessing a saved model expects: the backbone side is the
    /// coarse size and crop, and the fine resize is twice that.
    pub fn for_model(config: &ModelConfig) -> Self {
        let side = config.backbone.side;
        match config.mode {
            Mode::SingleScale => Self::single(side),
            Mode::MultiScale => Self {
                mode: Mode::MultiScale,
                sizes: ScaleSizes {
                    coarse: side,
                    fine_resize: FINE_RESIZE_FACTOR * side,
                    crop: side,
                },
            },
        }
    }

    pub fn prepare(&self, img: &ImageBuffer) -> Result<ModelInput, ImageError> {
        match self.mode {
            Mode::MultiScale => {
                let (coarse, fine) = preprocess_pair(img, self.sizes)?;
                Ok(ModelInput::Multi {
                    coarse: coarse.into_tensor(),
                    fine: fine.into_tensor(),
                })
            }
            Mode::SingleScale => {
                let s = self.sizes.coarse;
                Ok(ModelInput::Single(
                    resize_bilinear(&rescale_to_unit(img), s, s)?.into_tensor(),
                ))
            }
        }
    }
}

pub fn read_image(entry: &ManifestEntry) -> Result<ImageBuffer, PipelineError> {
    let bytes = fs::read(&entry.path).map_err(|source| PipelineError::Io {
        path: entry.path.clone(),
        source,
    })?;
    decode_ppm(&bytes).map_err(|source| PipelineError::Decode {
        path: entry.path.clone(),
        source,
    })
}

/// Preprocessed inputs for a whole manifest, in manifest order.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub ids: Vec<String>,
    pub inputs: Vec<ModelInput>,
    pub labels: Vec<ClassLabel>,
}

impl PreparedSet {
    pub fn load(manifest: &[ManifestEntry], spec: InputSpec) -> Result<Self, PipelineError> {
        let mut set = PreparedSet {
            ids: Vec::with_capacity(manifest.len()),
            inputs: Vec::with_capacity(manifest.len()),
            labels: Vec::with_capacity(manifest.len()),
        };
        for entry in manifest {
            let img = read_image(entry)?;
            set.inputs.push(spec.prepare(&img)?);
            set.ids.push(entry.image_id.clone());
            set.labels.push(entry.label);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
