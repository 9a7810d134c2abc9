//! Seeded synthetic multi-view cohorts.
//!
//! Each view carries one latent bit, rendered as a bright square in the
//! top-left (bit 0) or bottom-right (bit 1) corner of a textured disc. The
//! class rule XORs bits across eyes, so no single view carries any class
//! information while the four views together determine the label exactly.
//! That makes the multi-view-versus-single-view comparison a provable
//! property of the data.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ClassLabel, DatasetManifest, Source, SubjectRecord, ViewKey,
};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{derive_rng, purpose};

/// Marker square side as a fraction of the image side; large enough to
/// survive resizing and mild augmentation.
const MARKER_FRAC: f64 = 0.12;
const MARKER_MARGIN_FRAC: f64 = 0.06;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Subjects per class, keyed by class name.
    pub subjects_per_class: BTreeMap<ClassLabel, usize>,
    #[serde(default = "default_image_side")]
    pub image_side: usize,
    #[serde(default)]
    pub missing_view_rate: f64,
    #[serde(default = "default_marker_contrast")]
    pub marker_contrast: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    pub seed: u64,
}

fn default_image_side() -> usize {
    224
}

fn default_marker_contrast() -> f64 {
    0.8
}

fn default_noise_sigma() -> f64 {
    0.05
}

impl SynthSpec {
    pub fn new(control: usize, stroke: usize, tia: usize, seed: u64) -> Self {
        let mut subjects_per_class = BTreeMap::new();
        subjects_per_class.insert(ClassLabel::Control, control);
        subjects_per_class.insert(ClassLabel::Stroke, stroke);
        subjects_per_class.insert(ClassLabel::Tia, tia);
        SynthSpec {
            subjects_per_class,
            image_side: default_image_side(),
            missing_view_rate: 0.0,
            marker_contrast: default_marker_contrast(),
            noise_sigma: default_noise_sigma(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.missing_view_rate) {
            return Err(Error::Config(format!(
                "missing_view_rate must be in [0, 1), got {}",
                self.missing_view_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.marker_contrast) || self.marker_contrast == 0.0 {
            return Err(Error::Config(format!(
                "marker_contrast must be in (0, 1], got {}",
                self.marker_contrast
            )));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.image_side < 32 {
            return Err(Error::Config(format!(
                "image_side must be >= 32, got {}",
                self.image_side
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SynthSpec> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec =
            serde_json::from_str(&text).map_err(|e| Error::schema("synth spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Latent bits in canonical view order (R_v1, R_v2, L_v1, L_v2).
pub type ViewBits = [bool; 4];

/// The class rule: positive-vs-control is `b(R,v1) XOR b(L,v1)`; among
/// positives, stroke-vs-TIA is `b(R,v2) XOR b(L,v2)` (XOR = 1 means stroke).
pub fn oracle_label(bits: ViewBits) -> ClassLabel {
    let positive = bits[0] ^ bits[2];
    if !positive {
        ClassLabel::Control
    } else if bits[1] ^ bits[3] {
        ClassLabel::Stroke
    } else {
        ClassLabel::Tia
    }
}

/// Sidecar written next to the manifest for oracle tests; training never
/// reads it.
#[derive(Debug, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub seed: u64,
    /// subject id -> per-view bits (0/1), keyed by view name.
    pub subjects: BTreeMap<String, BTreeMap<String, u8>>,
}

impl TruthSidecar {
    pub fn load(path: &Path) -> Result<TruthSidecar> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn bits_of(&self, subject_id: &str) -> Option<ViewBits> {
        let entry = self.subjects.get(subject_id)?;
        let mut bits = [false; 4];
        for key in ViewKey::ALL {
            bits[key.index()] = *entry.get(key.key_str())? != 0;
        }
        Some(bits)
    }
}

/// Generate a cohort under `out_dir`: images, `manifest.json`, and the
/// `truth.json` sidecar. Per-subject randomness comes from a stream keyed by
/// `(seed, subject index)`, so generation order cannot change the output.
pub fn generate_cohort(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut subjects = Vec::new();
    let mut truth = TruthSidecar {
        seed: spec.seed,
        subjects: BTreeMap::new(),
    };

    let mut subject_index = 0u64;
    for label in ClassLabel::ALL {
        let count = spec.subjects_per_class.get(&label).copied().unwrap_or(0);
        let admissible: Vec<ViewBits> = all_patterns()
            .into_iter()
            .filter(|b| oracle_label(*b) == label)
            .collect();
        for _ in 0..count {
            let id = format!("synth-{subject_index:04}");
            let mut rng = derive_rng(spec.seed, purpose::SUBJECT, subject_index);

            let bits = admissible[rng.random_range(0..admissible.len())];

            // At most one view goes missing per subject, so completion is
            // exercised while the both-eyes exclusion case never arises
            // from generation itself.
            let mut missing = [false; 4];
            let mut dropped = false;
            for slot in &mut missing {
                let draw = rng.random::<f64>() < spec.missing_view_rate;
                if draw && !dropped {
                    *slot = true;
                    dropped = true;
                }
            }

            let mut views: [Option<std::path::PathBuf>; 4] = Default::default();
            let mut bit_entry = BTreeMap::new();
            for key in ViewKey::ALL {
                let i = key.index();
                bit_entry.insert(key.key_str().to_string(), bits[i] as u8);
                if missing[i] {
                    continue;
                }
                let img = render_view(spec, bits[i], &mut rng);
                let file = format!("{id}_{}.png", key.key_str());
                img.save_png(&images_dir.join(&file))?;
                views[i] = Some(std::path::PathBuf::from(format!("images/{file}")));
            }

            truth.subjects.insert(id.clone(), bit_entry);
            subjects.push(SubjectRecord {
                id,
                label,
                views,
                source: Source::Synthetic,
            });
            subject_index += 1;
        }
    }

    let manifest = DatasetManifest::new(subjects)?;
    crate::dataset::save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    let truth_path = out_dir.join("truth.json");
    let text = serde_json::to_string_pretty(&truth).map_err(|e| Error::json(&truth_path, e))?;
    std::fs::write(&truth_path, text).map_err(|e| Error::io(&truth_path, e))?;
    Ok(manifest)
}

pub fn all_patterns() -> [ViewBits; 16] {
    std::array::from_fn(|i| std::array::from_fn(|b| i & (1 << b) != 0))
}

/// Render one view: dark fundus-like disc with a radial gradient and coarse
/// texture, plus the bit marker square. Purely cosmetic apart from the
/// marker.
fn render_view(spec: &SynthSpec, bit: bool, rng: &mut rand_chacha::ChaCha8Rng) -> ImageTensor {
    let n = spec.image_side;
    let center = (n as f64 - 1.0) / 2.0;
    let radius = 0.48 * n as f64;

    // Coarse value-noise grid, bilinearly upsampled over the disc.
    const GRID: usize = 9;
    let mut grid = [[0f64; GRID]; GRID];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            *cell = rng.random::<f64>() * 2.0 - 1.0;
        }
    }
    let texture = |y: usize, x: usize| -> f64 {
        let gy = y as f64 / (n - 1) as f64 * (GRID - 1) as f64;
        let gx = x as f64 / (n - 1) as f64 * (GRID - 1) as f64;
        let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
        let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
        grid[y0][x0] * (1.0 - fy) * (1.0 - fx)
            + grid[y0][x1] * (1.0 - fy) * fx
            + grid[y1][x0] * fy * (1.0 - fx)
            + grid[y1][x1] * fy * fx
    };

    let marker = (MARKER_FRAC * n as f64).round() as usize;
    let margin = (MARKER_MARGIN_FRAC * n as f64).round() as usize;
    let (my0, mx0) = if bit {
        (n - margin - marker, n - margin - marker)
    } else {
        (margin, margin)
    };

    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut pixels = ndarray::Array3::<f32>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 - center;
            let dx = x as f64 - center;
            let d = (dy * dy + dx * dx).sqrt() / radius;
            let mut level = if d <= 1.0 {
                0.32 - 0.15 * d * d + 0.04 * texture(y, x)
            } else {
                0.02
            };
            level = level.clamp(0.0, 1.0);
            // Fundus-like reddish tint.
            let mut rgb = [level, level * 0.55, level * 0.35];
            let in_marker = y >= my0 && y < my0 + marker && x >= mx0 && x < mx0 + marker;
            if in_marker {
                rgb[0] += spec.marker_contrast;
                rgb[1] += spec.marker_contrast * 0.95;
                rgb[2] += spec.marker_contrast * 0.8;
            }
            for (c, v) in rgb.into_iter().enumerate() {
                let noisy = match &noise {
                    Some(dist) => v + dist.sample(rng),
                    None => v,
                };
                pixels[[y, x, c]] = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::from_clamped(pixels)
}
