//! Set-level augmentation: composed affine transforms (shift, shear,
//! rotation, zoom, optional flip) with reflection padding, applied until each
//! class reaches a target count.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, ImageSet};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Horizontal/vertical shift range as a fraction of width/height.
    pub shift_frac: f64,
    /// Shear range in degrees.
    pub shear_deg: f64,
    /// Rotation magnitude range in degrees; the direction is a coin flip.
    pub rotation_deg_range: [f64; 2],
    /// Zoom range: scale factors drawn from `1 ± zoom_frac`.
    pub zoom_frac: f64,
    pub allow_flip: bool,
    /// Sample a fresh transform per view rather than one per set.
    pub per_view_independent: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            shift_frac: 0.10,
            shear_deg: 10.0,
            rotation_deg_range: [0.0, 180.0],
            zoom_frac: 0.10,
            allow_flip: true,
            per_view_independent: true,
        }
    }
}

impl AugmentationPolicy {
    /// No-op policy, useful for tests and ablations.
    pub fn identity() -> Self {
        AugmentationPolicy {
            shift_frac: 0.0,
            shear_deg: 0.0,
            rotation_deg_range: [0.0, 0.0],
            zoom_frac: 0.0,
            allow_flip: false,
            per_view_independent: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.rotation_deg_range;
        if !(0.0..=180.0).contains(&lo) || !(0.0..=180.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!(
                "rotation range must satisfy 0 <= lo <= hi <= 180, got [{lo}, {hi}]"
            )));
        }
        for (name, v) in [
            ("shift_frac", self.shift_frac),
            ("zoom_frac", self.zoom_frac),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(0.0..=45.0).contains(&self.shear_deg) {
            return Err(Error::Config(format!(
                "shear_deg must be in [0, 45], got {}",
                self.shear_deg
            )));
        }
        Ok(())
    }
}

/// A sampled transform; fields are the drawn parameters, applied about the
/// image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub shift_x_frac: f64,
    pub shift_y_frac: f64,
    pub shear_deg: f64,
    pub rotation_deg: f64,
    pub zoom: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        shift_x_frac: 0.0,
        shift_y_frac: 0.0,
        shear_deg: 0.0,
        rotation_deg: 0.0,
        zoom: 1.0,
        flip: false,
    };
}

/// Draw transform parameters uniformly from the policy ranges. The draw
/// order is fixed (shift x, shift y, shear, rotation magnitude, rotation
/// sign, zoom, flip) so a replayed stream reproduces the tuple.
pub fn sample_transform(policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> AffineParams {
    let sym = |rng: &mut ChaCha8Rng, range: f64| {
        if range == 0.0 {
            0.0
        } else {
            rng.random_range(-range..=range)
        }
    };
    let shift_x_frac = sym(rng, policy.shift_frac);
    let shift_y_frac = sym(rng, policy.shift_frac);
    let shear_deg = sym(rng, policy.shear_deg);
    let [lo, hi] = policy.rotation_deg_range;
    let magnitude = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let zoom = if policy.zoom_frac == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - policy.zoom_frac..=1.0 + policy.zoom_frac)
    };
    let flip = policy.allow_flip && rng.random::<bool>();
    AffineParams {
        shift_x_frac,
        shift_y_frac,
        shear_deg,
        rotation_deg: magnitude * sign,
        zoom,
        flip,
    }
}

/// Reflect a continuous coordinate into `[0, n - 1]`.
fn reflect(coord: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let mut v = coord.rem_euclid(period);
    if v > (n - 1) as f64 {
        v = period - v;
    }
    v
}

/// Apply the composed affine transform by inverse mapping with bilinear
/// sampling and reflection padding. Dimensions are preserved.
pub fn apply_transform(img: &ImageTensor, params: &AffineParams) -> ImageTensor {
    let (h, w, _) = img.pixels().dim();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    // Forward map about the center: rotate . shear . zoom . flip, plus the
    // pixel shift. Sampling inverts it.
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    let shear = params.shear_deg.to_radians().tan();
    let z = params.zoom;
    let fx = if params.flip { -1.0 } else { 1.0 };
    // A = R * Sh * S * F
    let a00 = cos * z * fx;
    let a10 = sin * z * fx;
    let a01 = cos * shear * z - sin * z;
    let a11 = sin * shear * z + cos * z;
    let det = a00 * a11 - a01 * a10;
    let inv = [a11 / det, -a01 / det, -a10 / det, a00 / det];
    let (tx, ty) = (params.shift_x_frac * w as f64, params.shift_y_frac * h as f64);

    let mut out = ndarray::Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let px = j as f64 - cx - tx;
            let py = i as f64 - cy - ty;
            let sx = reflect(inv[0] * px + inv[1] * py + cx, w);
            let sy = reflect(inv[2] * px + inv[3] * py + cy, h);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (dx, dy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let p00 = img.pixels()[[y0, x0, c]];
                let p01 = img.pixels()[[y0, x1, c]];
                let p10 = img.pixels()[[y1, x0, c]];
                let p11 = img.pixels()[[y1, x1, c]];
                let top = p00 + (p01 - p00) * dx;
                let bot = p10 + (p11 - p10) * dx;
                out[[i, j, c]] = top + (bot - top) * dy;
            }
        }
    }
    ImageTensor::from_clamped(out)
}

/// Augment a set: independently sampled transforms per view by default, or
/// one locked transform across the four views.
pub fn augment_set(set: &ImageSet, policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> ImageSet {
    let locked = if policy.per_view_independent {
        None
    } else {
        Some(sample_transform(policy, rng))
    };
    let images = std::array::from_fn(|i| {
        let params = locked.unwrap_or_else(|| sample_transform(policy, rng));
        Arc::new(apply_transform(&set.images[i], &params))
    });
    ImageSet {
        images,
        provenance: set.provenance,
        label: set.label,
    }
}

/// Grouped augmentation core: per class, all originals plus augmented copies
/// of sources drawn with replacement until the target. Classes already at or
/// above the target keep their originals unchanged ("up to" semantics).
///
/// Output order is class-major (canonical class order), originals first.
fn augment_grouped<T: Clone>(
    items: &[T],
    label_of: impl Fn(&T) -> ClassLabel,
    target_per_class: usize,
    required_classes: &[ClassLabel],
    mut augment_one: impl FnMut(&T, &mut ChaCha8Rng) -> T,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<T>> {
    let mut by_class: [Vec<&T>; 3] = Default::default();
    for item in items {
        by_class[label_of(item).index()].push(item);
    }
    for class in required_classes {
        if by_class[class.index()].is_empty() {
            return Err(Error::EmptyClass(class.name().to_string()));
        }
    }
    let mut out = Vec::new();
    for class in ClassLabel::ALL {
        let originals = &by_class[class.index()];
        if originals.is_empty() {
            continue;
        }
        out.extend(originals.iter().map(|s| (*s).clone()));
        let mut have = originals.len();
        while have < target_per_class {
            let src = originals[rng.random_range(0..originals.len())];
            out.push(augment_one(src, rng));
            have += 1;
        }
    }
    Ok(out)
}

/// Bring each class up to `target_per_class` image sets.
pub fn augment_sets_to_target(
    sets: &[ImageSet],
    policy: &AugmentationPolicy,
    target_per_class: usize,
    required_classes: &[ClassLabel],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ImageSet>> {
    policy.validate()?;
    augment_grouped(
        sets,
        |s| s.label,
        target_per_class,
        required_classes,
        |s, rng| augment_set(s, policy, rng),
        rng,
    )
}

/// Image-level variant used by the single-view pipeline: each unit is one
/// labelled image.
pub fn augment_images_to_target(
    images: &[(Arc<ImageTensor>, ClassLabel)],
    policy: &AugmentationPolicy,
    target_per_class: usize,
    required_classes: &[ClassLabel],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Arc<ImageTensor>, ClassLabel)>> {
    policy.validate()?;
    augment_grouped(
        images,
        |(_, label)| *label,
        target_per_class,
        required_classes,
        |(img, label), rng| {
            let params = sample_transform(policy, rng);
            (Arc::new(apply_transform(img, &params)), *label)
        },
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::rng::{derive_rng, purpose};
    use ndarray::Array3;

    fn image_from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> ImageTensor {
        let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, _)| f(y, x).clamp(0.0, 1.0));
        ImageTensor::new(pixels).unwrap()
    }

    fn small_set(label: ClassLabel, salt: usize) -> ImageSet {
        ImageSet {
            images: std::array::from_fn(|i| {
                Arc::new(image_from_fn(8, 8, |y, x| {
                    ((y * 5 + x * 3 + i * 7 + salt) % 10) as f32 / 10.0
                }))
            }),
            provenance: [Provenance::Original; 4],
            label,
        }
    }

    #[test]
    fn identity_policy_samples_identity_transform() {
        let mut rng = derive_rng(0, purpose::AUGMENT, 0);
        let params = sample_transform(&AugmentationPolicy::identity(), &mut rng);
        assert_eq!(params.shift_x_frac, 0.0);
        assert_eq!(params.shear_deg, 0.0);
        assert_eq!(params.rotation_deg.abs(), 0.0);
        assert_eq!(params.zoom, 1.0);
        assert!(!params.flip);
    }

    #[test]
    fn identity_transform_is_pixel_exact() {
        let img = image_from_fn(9, 7, |y, x| (y * 7 + x) as f32 / 80.0);
        let out = apply_transform(&img, &AffineParams::IDENTITY);
        assert_eq!(out, img);
    }

    #[test]
    fn replayed_stream_reproduces_parameters() {
        let policy = AugmentationPolicy::default();
        let mut a = derive_rng(9, purpose::AUGMENT, 2);
        let mut b = derive_rng(9, purpose::AUGMENT, 2);
        for _ in 0..20 {
            assert_eq!(sample_transform(&policy, &mut a), sample_transform(&policy, &mut b));
        }
    }

    #[test]
    fn rotation_180_fixes_point_symmetric_image() {
        // Point-symmetric about the center: p(y, x) = p(h-1-y, w-1-x).
        let img = image_from_fn(8, 8, |y, x| {
            let (yy, xx) = (y.min(7 - y), x.min(7 - x));
            ((yy * 3 + xx * 5) % 9) as f32 / 9.0
        });
        let params = AffineParams {
            rotation_deg: 180.0,
            ..AffineParams::IDENTITY
        };
        let out = apply_transform(&img, &params);
        assert!(out.max_abs_diff(&img) < 1e-5);
    }

    #[test]
    fn transform_preserves_dimensions() {
        let img = image_from_fn(224, 224, |y, x| ((y + x) % 13) as f32 / 13.0);
        let mut rng = derive_rng(1, purpose::AUGMENT, 1);
        let params = sample_transform(&AugmentationPolicy::default(), &mut rng);
        let out = apply_transform(&img, &params);
        assert_eq!(out.height(), 224);
        assert_eq!(out.width(), 224);
    }

    #[test]
    fn flip_only_transform_mirrors() {
        let img = image_from_fn(6, 6, |y, x| (y as f32 * 0.1 + x as f32 * 0.05).min(1.0));
        let params = AffineParams {
            flip: true,
            ..AffineParams::IDENTITY
        };
        let out = apply_transform(&img, &params);
        let mirrored = crate::image::mirror_horizontal(&img);
        assert!(out.max_abs_diff(&mirrored) < 1e-6);
    }

    #[test]
    fn targets_hit_exactly_per_class() {
        let mut sets = Vec::new();
        for i in 0..4 {
            sets.push(small_set(ClassLabel::Control, i));
        }
        for i in 0..2 {
            sets.push(small_set(ClassLabel::Stroke, 10 + i));
        }
        sets.push(small_set(ClassLabel::Tia, 99));
        let mut rng = derive_rng(4, purpose::AUGMENT, 0);
        let out = augment_sets_to_target(
            &sets,
            &AugmentationPolicy::identity(),
            6,
            &ClassLabel::ALL,
            &mut rng,
        )
        .unwrap();
        let mut counts = [0usize; 3];
        for s in &out {
            counts[s.label.index()] += 1;
        }
        assert_eq!(counts, [6, 6, 6]);
    }

    #[test]
    fn class_at_target_returns_originals_unchanged() {
        let sets: Vec<ImageSet> = (0..3).map(|i| small_set(ClassLabel::Control, i)).collect();
        let mut rng = derive_rng(4, purpose::AUGMENT, 1);
        let out = augment_sets_to_target(
            &sets,
            &AugmentationPolicy::default(),
            3,
            &[ClassLabel::Control],
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        for (a, b) in out.iter().zip(&sets) {
            for v in 0..4 {
                assert!(Arc::ptr_eq(&a.images[v], &b.images[v]));
            }
        }
    }

    #[test]
    fn identity_policy_copies_are_pixel_identical() {
        let sets = vec![small_set(ClassLabel::Stroke, 0)];
        let mut rng = derive_rng(4, purpose::AUGMENT, 2);
        let out = augment_sets_to_target(
            &sets,
            &AugmentationPolicy::identity(),
            4,
            &[ClassLabel::Stroke],
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 4);
        for aug in &out[1..] {
            for v in 0..4 {
                assert_eq!(aug.images[v].as_ref(), sets[0].images[v].as_ref());
            }
        }
    }

    #[test]
    fn missing_required_class_errors() {
        let sets = vec![small_set(ClassLabel::Control, 0)];
        let mut rng = derive_rng(4, purpose::AUGMENT, 3);
        match augment_sets_to_target(
            &sets,
            &AugmentationPolicy::identity(),
            2,
            &ClassLabel::ALL,
            &mut rng,
        ) {
            Err(Error::EmptyClass(name)) => assert_eq!(name, "stroke"),
            other => panic!("expected EmptyClass, got {other:?}"),
        }
    }

    #[test]
    fn twelve_thousand_image_target() {
        // Three classes augmented to 1000 sets each: 3000 sets, 12000 images.
        let mut sets = Vec::new();
        for (c, label) in ClassLabel::ALL.into_iter().enumerate() {
            for i in 0..5 {
                sets.push(small_set(label, c * 10 + i));
            }
        }
        let mut rng = derive_rng(8, purpose::AUGMENT, 0);
        let out = augment_sets_to_target(
            &sets,
            &AugmentationPolicy::identity(),
            1000,
            &ClassLabel::ALL,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 3000);
        let images: usize = out.iter().map(|s| s.images.len()).sum();
        assert_eq!(images, 12_000);
    }

    #[test]
    fn policy_validation() {
        let mut p = AugmentationPolicy::default();
        p.rotation_deg_range = [10.0, 5.0];
        assert!(p.validate().is_err());
        let mut p = AugmentationPolicy::default();
        p.shift_frac = 1.0;
        assert!(p.validate().is_err());
        assert!(AugmentationPolicy::default().validate().is_ok());
    }

    #[test]
    fn locked_mode_applies_one_transform_per_set() {
        let mut policy = AugmentationPolicy::default();
        policy.per_view_independent = false;
        policy.allow_flip = false;
        // A set whose four views are identical images: under a locked
        // transform the outputs stay identical across views.
        let base = image_from_fn(16, 16, |y, x| ((y * x) % 17) as f32 / 17.0);
        let set = ImageSet {
            images: std::array::from_fn(|_| Arc::new(base.clone())),
            provenance: [Provenance::Original; 4],
            label: ClassLabel::Control,
        };
        let mut rng = derive_rng(6, purpose::AUGMENT, 0);
        let aug = augment_set(&set, &policy, &mut rng);
        for v in 1..4 {
            assert_eq!(aug.images[v].as_ref(), aug.images[0].as_ref());
        }
    }
}
