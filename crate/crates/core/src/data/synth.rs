//! Synthetic three-class lesion images.
//!
//! * nevus: round single-color blob with a soft border;
//! * melanoma: blob with independent per-quadrant radii, a noisy border and a
//!   second interior color;
//! * seborrheic keratosis: drawn exactly like a nevus, then overlaid with a
//!   2-pixel checker (period 4). A 2x bilinear downsample keeps the checker,
//!   a 4x downsample averages it away, so the cue is only visible in the
//!   fine (center crop) view.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::manifest::{write_manifest, ManifestError};
use super::{seeded_rng, ClassLabel};
use crate::image::{encode_ppm, ImageBuffer};

/// Reference resolution the geometry below is tuned for.
const REFERENCE_SIZE: f64 = 256.0;
const NOISE_SIGMA: f64 = 4.0;
const CHECKER_AMPLITUDE: f64 = 28.0;
const CHECKER_CELL: usize = 2;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("native size {0} is below the minimum of 128")]
    TooSmall(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

/// A rendered lesion together with its blob mask and the column the blob is
/// centered on (mirror axis lies between columns `center_x - 1` and `center_x`).
#[derive(Debug, Clone)]
pub struct LesionRender {
    pub image: ImageBuffer,
    pub mask: Vec<bool>,
    pub center_x: usize,
}

struct Shape {
    cx: f64,
    cy: f64,
    radius: f64,
    /// Radii at the four quadrant centres (45°, 135°, 225°, 315°).
    quadrant_radii: [f64; 4],
    /// Angular border noise: (amplitude relative to radius, frequency, phase).
    ripples: Vec<(f64, f64, f64)>,
}

impl Shape {
    fn radius_at(&self, angle: f64) -> f64 {
        // Cosine interpolation between neighbouring quadrant radii.
        let pos = (angle - PI / 4.0).rem_euclid(2.0 * PI) / (PI / 2.0);
        let i = pos.floor() as usize % 4;
        let t = pos - pos.floor();
        let s = (1.0 - (t * PI).cos()) / 2.0;
        let base = self.quadrant_radii[i] * (1.0 - s) + self.quadrant_radii[(i + 1) % 4] * s;
        let ripple: f64 = self.ripples.iter().map(|(a, f, p)| a * (f * angle + p).sin()).sum();
        base * (1.0 + ripple)
    }

    /// Soft coverage in [0,1] of pixel (x, y), sampled at the pixel centre.
    fn coverage(&self, x: usize, y: usize, edge: f64) -> f64 {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let d = (dx * dx + dy * dy).sqrt();
        let r = if self.ripples.is_empty() && self.quadrant_radii.iter().all(|&q| q == self.radius) {
            self.radius
        } else {
            // Image y grows downwards; flip it so angles are counter-clockwise.
            self.radius_at((-dy).atan2(dx))
        };
        ((r - d) / edge + 0.5).clamp(0.0, 1.0)
    }
}

fn lerp_rgb(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| c + rng.random_range(-spread..=spread))
}

/// Renders one lesion of the given class at `native_size`².
pub fn synth_render<R: Rng + ?Sized>(
    class: ClassLabel,
    rng: &mut R,
    native_size: usize,
) -> Result<LesionRender, SynthError> {
    if native_size < 128 {
        return Err(SynthError::TooSmall(native_size));
    }
    let n = native_size;
    let unit = n as f64 / REFERENCE_SIZE;

    let skin = jitter(rng, [222.0, 178.0, 150.0], 18.0);
    let max_jitter = (8.0 * unit).round() as i64;
    let center_x = (n as i64 / 2 + rng.random_range(-max_jitter..=max_jitter)) as usize;
    let center_y = (n as i64 / 2 + rng.random_range(-max_jitter..=max_jitter)) as usize;
    let radius = rng.random_range(0.18..0.30) * n as f64;

    // Shared draws keep nevus and keratosis renders from the same seed aligned.
    let lesion_color = jitter(rng, [130.0, 85.0, 60.0], 22.0);

    let mut shape = Shape {
        cx: center_x as f64,
        cy: center_y as f64,
        radius,
        quadrant_radii: [radius; 4],
        ripples: Vec::new(),
    };
    let mut second_color = None;
    match class {
        ClassLabel::Nevus | ClassLabel::SeborrheicKeratosis => {}
        ClassLabel::Melanoma => {
            // Quadrant order: upper-right, upper-left, lower-left, lower-right.
            loop {
                let q: [f64; 4] = std::array::from_fn(|_| radius * rng.random_range(0.55..1.35));
                let lr_mismatch = (q[0] - q[1]).abs() + (q[3] - q[2]).abs();
                if lr_mismatch >= 0.45 * radius {
                    shape.quadrant_radii = q;
                    break;
                }
            }
            shape.ripples = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.03..0.07),
                        f64::from(rng.random_range(6u32..15)),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let angle = rng.random_range(0.0..2.0 * PI);
            let offset = radius * rng.random_range(0.2..0.45);
            second_color = Some((
                shape.cx + offset * angle.cos(),
                shape.cy - offset * angle.sin(),
                radius * rng.random_range(0.35..0.55),
                jitter(rng, [70.0, 75.0, 110.0], 12.0),
            ));
        }
    }
    let body = if class == ClassLabel::Melanoma {
        jitter(rng, [75.0, 45.0, 35.0], 12.0)
    } else {
        lesion_color
    };
    let edge = if class == ClassLabel::Melanoma { 1.0 } else { 2.5 * unit };

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let cov = shape.coverage(x, y, edge);
            mask.push(cov >= 0.5);
            let mut lesion = body;
            if let Some((sx, sy, sr, color)) = second_color {
                let d = ((x as f64 + 0.5 - sx).powi(2) + (y as f64 + 0.5 - sy).powi(2)).sqrt();
                let t = ((sr - d) / 3.0 + 0.5).clamp(0.0, 1.0);
                lesion = lerp_rgb(lesion, color, t);
            }
            if class == ClassLabel::SeborrheicKeratosis {
                let s = if ((x / CHECKER_CELL) + (y / CHECKER_CELL)).is_multiple_of(2) {
                    1.0
                } else {
                    -1.0
                };
                lesion = lesion.map(|c| c + s * CHECKER_AMPLITUDE);
            }
            let rgb = lerp_rgb(skin, lesion, cov);
            for c in rgb {
                let v = c + noise.sample(rng);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(LesionRender {
        image: ImageBuffer::new(n, n, pixels).expect("render dims"),
        mask,
        center_x,
    })
}

pub fn synth_generate<R: Rng + ?Sized>(
    class: ClassLabel,
    rng: &mut R,
    native_size: usize,
) -> Result<ImageBuffer, SynthError> {
    synth_render(class, rng, native_size).map(|r| r.image)
}

/// Fraction of blob pixels whose mirror image (about the blob's centre
/// column) is not a blob pixel.
pub fn mirror_asymmetry(mask: &[bool], size: usize, center_x: usize) -> f64 {
    let mut blob = 0usize;
    let mut mismatched = 0usize;
    for y in 0..size {
        for x in 0..size {
            if !mask[y * size + x] {
                continue;
            }
            blob += 1;
            let mirrored = (2 * center_x).checked_sub(x + 1).filter(|&mx| mx < size);
            if !mirrored.is_some_and(|mx| mask[y * size + mx]) {
                mismatched += 1;
            }
        }
    }
    if blob == 0 {
        0.0
    } else {
        mismatched as f64 / blob as f64
    }
}

/// Mean absolute 4-neighbour Laplacian of the green channel over mask pixels
/// whose whole neighbourhood is inside the mask.
pub fn mean_abs_laplacian(img: &ImageBuffer, mask: &[bool]) -> f64 {
    let (w, h) = (img.width(), img.height());
    let g = |x: usize, y: usize| f64::from(img.pixel(x, y)[1]);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let inside = [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                .iter()
                .all(|&(px, py)| mask[py * w + px]);
            if !inside {
                continue;
            }
            total += (g(x - 1, y) + g(x + 1, y) + g(x, y - 1) + g(x, y + 1) - 4.0 * g(x, y)).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub train_images: usize,
    pub test_images: usize,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

/// Writes `<out>/train/*.ppm`, `<out>/test/*.ppm`, `<out>/train.csv` and
/// `<out>/test.csv`. Classes are interleaved; every image has its own seed
/// drawn from the master generator, so output is a pure function of `seed`.
pub fn synth_dataset(
    out_dir: impl AsRef<Path>,
    n_train_per_class: usize,
    n_test_per_class: usize,
    seed: u64,
) -> Result<SynthSummary, SynthError> {
    let out_dir = out_dir.as_ref();
    let mut master = seeded_rng(seed);
    let mut summary = SynthSummary {
        train_images: 0,
        test_images: 0,
        train_manifest: out_dir.join("train.csv"),
        test_manifest: out_dir.join("test.csv"),
    };
    for (split, per_class) in [("train", n_train_per_class), ("test", n_test_per_class)] {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir).map_err(|source| SynthError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut rows: Vec<(String, String, ClassLabel)> = Vec::with_capacity(per_class * 3);
        for _ in 0..per_class {
            for class in ClassLabel::ALL {
                let id = format!("{split}_{:05}", rows.len());
                let mut rng = seeded_rng(master.random());
                let img = synth_generate(class, &mut rng, REFERENCE_SIZE as usize)?;
                let rel = format!("{split}/{id}.ppm");
                let path = out_dir.join(&rel);
                fs::write(&path, encode_ppm(&img)).map_err(|source| SynthError::Io { path, source })?;
                rows.push((id, rel, class));
            }
        }
        let manifest = out_dir.join(format!("{split}.csv"));
        write_manifest(&manifest, rows.iter().map(|(id, p, l)| (id.as_str(), p.as_str(), *l)))?;
        if split == "train" {
            summary.train_images = rows.len();
        } else {
            summary.test_images = rows.len();
        }
    }
    Ok(summary)
}
