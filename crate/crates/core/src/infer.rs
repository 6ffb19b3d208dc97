//! Test-time augmentation, one-vs-rest task scores, geometric ensembling and
//! prediction files.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{ClassLabel, ManifestEntry};
use crate::dihedral::Dihedral;
use crate::image::{ImageBuffer, ImageError};
use crate::model::{ModelError, ModelInput, ModelParams};
use crate::pipeline::{read_image, InputSpec, PipelineError};
use crate::tensor::Tensor;

/// Probability floor applied before geometric averaging.
pub const ENSEMBLE_FLOOR: f64 = 1e-7;

pub const PREDICTION_HEADER: &str = "image_id,melanoma,seborrheic_keratosis,nevus,melanoma_score,sk_score";

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("no prediction sets to merge")]
    NoInputs,
    #[error("duplicate image_id {0:?} in prediction set")]
    DuplicateId(String),
    #[error("prediction set {set} differs from set 0: missing {missing:?}, unexpected {extra:?}")]
    IdMismatch {
        set: usize,
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: expected header \"{PREDICTION_HEADER}\", found {found:?}")]
    Header { path: PathBuf, found: String },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Three-class probabilities for one image and the derived binary task scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    /// Ordered melanoma, seborrheic keratosis, nevus.
    pub probs: [f64; 3],
    pub melanoma_score: f64,
    pub sk_score: f64,
}

impl PredictionRecord {
    pub fn from_probs(image_id: impl Into<String>, probs: [f64; 3]) -> Self {
        let (melanoma_score, sk_score) = to_binary_tasks(&probs);
        Self {
            image_id: image_id.into(),
            probs,
            melanoma_score,
            sk_score,
        }
    }
}

/// One-vs-rest: each task's score is its class probability.
pub fn to_binary_tasks(probs: &[f64; 3]) -> (f64, f64) {
    (
        probs[ClassLabel::Melanoma.index()],
        probs[ClassLabel::SeborrheicKeratosis.index()],
    )
}

/// Runs a model over images, counting forward passes.
#[derive(Debug)]
pub struct Predictor<'a> {
    model: &'a ModelParams,
    spec: InputSpec,
    forward_passes: Cell<usize>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a ModelParams, spec: InputSpec) -> Self {
        Self {
            model,
            spec,
            forward_passes: Cell::new(0),
        }
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes.get()
    }

    fn forward(&self, input: &ModelInput) -> Result<Tensor, InferError> {
        self.forward_passes.set(self.forward_passes.get() + 1);
        Ok(self.model.forward(input)?)
    }

    /// With `tta`, the arithmetic mean of the softmax outputs over all eight
    /// dihedral transforms (canonical order), applied to every view after
    /// preprocessing. Without it, a single forward pass.
    pub fn predict_input(&self, input: &ModelInput, tta: bool) -> Result<Tensor, InferError> {
        if !tta {
            return self.forward(input);
        }
        let mut sum = [0.0; 3];
        for g in Dihedral::ALL {
            let view = input.try_map(|t| g.apply_planar(t))?;
            let p = self.forward(&view)?;
            for (s, v) in sum.iter_mut().zip(p.data()) {
                *s += v;
            }
        }
        Ok(Tensor::from_vec(sum.iter().map(|s| s / 8.0).collect()))
    }

    pub fn tta_predict(&self, img: &ImageBuffer, tta: bool) -> Result<Tensor, InferError> {
        let input = self.spec.prepare(img)?;
        self.predict_input(&input, tta)
    }

    /// One record per manifest entry, in manifest order.
    pub fn predict_manifest(&self, manifest: &[ManifestEntry], tta: bool) -> Result<Vec<PredictionRecord>, InferError> {
        manifest
            .iter()
            .map(|entry| {
                let p = self.tta_predict(&read_image(entry)?, tta)?;
                let d = p.data();
                Ok(PredictionRecord::from_probs(entry.image_id.clone(), [d[0], d[1], d[2]]))
            })
            .collect()
    }
}

pub fn tta_predict(model: &ModelParams, spec: InputSpec, img: &ImageBuffer, tta: bool) -> Result<Tensor, InferError> {
    Predictor::new(model, spec).tta_predict(img, tta)
}

fn sorted_by_id(records: &[PredictionRecord]) -> Result<Vec<&PredictionRecord>, InferError> {
    let mut v: Vec<&PredictionRecord> = records.iter().collect();
    v.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for w in v.windows(2) {
        if w[0].image_id == w[1].image_id {
            return Err(InferError::DuplicateId(w[0].image_id.clone()));
        }
    }
    Ok(v)
}

/// Per image and class: K-th root of the product of floored probabilities,
/// then renormalized to a distribution. Output is sorted by image_id.
pub fn ensemble_geometric(sets: &[Vec<PredictionRecord>]) -> Result<Vec<PredictionRecord>, InferError> {
    let first = sets.first().ok_or(InferError::NoInputs)?;
    let aligned: Vec<Vec<&PredictionRecord>> = sets.iter().map(|s| sorted_by_id(s)).collect::<Result<_, _>>()?;
    let reference: BTreeSet<&str> = first.iter().map(|r| r.image_id.as_str()).collect();
    for (i, set) in sets.iter().enumerate().skip(1) {
        let ids: BTreeSet<&str> = set.iter().map(|r| r.image_id.as_str()).collect();
        if ids != reference {
            return Err(InferError::IdMismatch {
                set: i,
                missing: reference.difference(&ids).map(|s| s.to_string()).collect(),
                extra: ids.difference(&reference).map(|s| s.to_string()).collect(),
            });
        }
    }
    let k = sets.len() as f64;
    let merged = (0..aligned[0].len())
        .map(|row| {
            let mut probs = [0.0; 3];
            for (c, p) in probs.iter_mut().enumerate() {
                let log_sum: f64 = aligned
                    .iter()
                    .map(|s| s[row].probs[c].clamp(ENSEMBLE_FLOOR, 1.0).ln())
                    .sum();
                *p = (log_sum / k).exp();
            }
            let total: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= total;
            }
            PredictionRecord::from_probs(aligned[0][row].image_id.clone(), probs)
        })
        .collect();
    Ok(merged)
}

/// Formats `v` with nine significant digits in plain decimal notation.
fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// CSV rows sorted by image_id.
pub fn format_predictions(records: &[PredictionRecord]) -> String {
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for r in sorted {
        let fields = [r.probs[0], r.probs[1], r.probs[2], r.melanoma_score, r.sk_score].map(fmt_sig9);
        out.push_str(&r.image_id);
        for f in fields {
            out.push(',');
            out.push_str(&f);
        }
        out.push('\n');
    }
    out
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<(), InferError> {
    let path = path.as_ref();
    fs::write(path, format_predictions(records)).map_err(|source| InferError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>, InferError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim_end_matches('\r')).unwrap_or("");
    if header != PREDICTION_HEADER {
        return Err(InferError::Header {
            path: path.to_path_buf(),
            found: header.to_string(),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| InferError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, found {}", fields.len())));
        }
        let mut nums = [0.0; 5];
        for (slot, raw) in nums.iter_mut().zip(&fields[1..]) {
            *slot = raw
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("invalid number {raw:?}")))?;
        }
        records.push(PredictionRecord {
            image_id: fields[0].to_string(),
            probs: [nums[0], nums[1], nums[2]],
            melanoma_score: nums[3],
            sk_score: nums[4],
        });
    }
    Ok(records)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, InferError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| InferError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_predictions(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, p: [f64; 3]) -> PredictionRecord {
        PredictionRecord::from_probs(id, p)
    }

    #[test]
    fn binary_tasks() {
        assert_eq!(to_binary_tasks(&[0.2, 0.3, 0.5]), (0.2, 0.3));
        assert_eq!(to_binary_tasks(&[1.0, 0.0, 0.0]), (1.0, 0.0));
    }

    #[test]
    fn geometric_mean_two_models() {
        let a = vec![rec("x", [0.1, 0.3, 0.6])];
        let b = vec![rec("x", [0.4, 0.3, 0.3])];
        let m = ensemble_geometric(&[a, b]).unwrap();
        // Pre-normalization melanoma value is sqrt(0.1 * 0.4) = 0.2.
        let raw = [0.2, 0.3, (0.6f64 * 0.3).sqrt()];
        let total: f64 = raw.iter().sum();
        for (p, r) in m[0].probs.iter().zip(raw) {
            assert!((p - r / total).abs() < 1e-12);
        }
        assert!((m[0].probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_is_floored() {
        let a = vec![rec("x", [0.0, 0.5, 0.5])];
        let b = vec![rec("x", [0.4, 0.3, 0.3])];
        let m = ensemble_geometric(&[a, b]).unwrap();
        let raw = [(1e-7f64 * 0.4).sqrt(), (0.5f64 * 0.3).sqrt(), (0.5f64 * 0.3).sqrt()];
        let total: f64 = raw.iter().sum();
        assert!(m[0].probs[0] > 0.0);
        assert!((m[0].probs[0] - raw[0] / total).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_idempotent() {
        let a = vec![rec("b", [0.2, 0.3, 0.5]), rec("a", [0.7, 0.1, 0.2])];
        let m = ensemble_geometric(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(m[0].image_id, "a");
        for (x, y) in m[0].probs.iter().zip([0.7, 0.1, 0.2]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_ids_reported() {
        let a = vec![rec("a", [0.2, 0.3, 0.5]), rec("b", [0.2, 0.3, 0.5])];
        let b = vec![rec("a", [0.2, 0.3, 0.5]), rec("c", [0.2, 0.3, 0.5])];
        match ensemble_geometric(&[a, b]) {
            Err(InferError::IdMismatch { set, missing, extra }) => {
                assert_eq!(set, 1);
                assert_eq!(missing, vec!["b"]);
                assert_eq!(extra, vec!["c"]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(ensemble_geometric(&[]), Err(InferError::NoInputs)));
    }

    #[test]
    fn csv_round_trip_sorted() {
        let recs = vec![
            rec("z9", [0.123456789123, 0.2, 0.676543210877]),
            rec("a1", [1e-7, 0.5, 0.4999999]),
        ];
        let text = format_predictions(&recs);
        assert!(text.starts_with(PREDICTION_HEADER));
        let back = parse_predictions(&text, Path::new("mem")).unwrap();
        assert_eq!(back[0].image_id, "a1");
        assert_eq!(back[1].image_id, "z9");
        for (r, b) in [&recs[1], &recs[0]].iter().zip(&back) {
            for c in 0..3 {
                assert!((r.probs[c] - b.probs[c]).abs() < 1e-9);
            }
            assert!((r.melanoma_score - b.melanoma_score).abs() < 1e-9);
        }
        assert!(text.contains("0.123456789,"));
    }

    #[test]
    fn csv_errors() {
        let err = parse_predictions("id,a,b\n", Path::new("p.csv")).unwrap_err();
        assert!(err.to_string().contains(PREDICTION_HEADER));
        let bad = format!("{PREDICTION_HEADER}\nx,0.1,0.2,0.7,0.1,0.2\ny,0.1,oops,0.7,0.1,0.2\n");
        match parse_predictions(&bad, Path::new("p.csv")) {
            Err(InferError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}
