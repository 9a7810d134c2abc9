//! The multi-view network: per-view backbone branches pooled to fixed-length
//! features, concatenated, and classified by a dense head.
//!
//! All four branches share one backbone body by default — the per-backbone
//! totals in the parameter accounting equal a single body plus the head. The
//! head hidden width follows the concatenated feature dimension:
//! `floor(V * d_view / 6)`.
//!
//! Only the `tinyconv` backbone is executable here; the standard ImageNet
//! backbones are registered for exact parameter accounting behind the same
//! interface.

pub mod layers;
mod tinyconv;

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dataset::ImageSet;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use tinyconv::{TinyConvArch, TinyConvCache};

pub use tinyconv::body_parameter_count as tinyconv_body_parameter_count;

pub(crate) type ParamRange = Range<usize>;

pub const DEFAULT_DROPOUT: f64 = 0.4;

// ---------------------------------------------------------------------------
// Backbone registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyKind {
    /// Executable desk-scale backbone; parameters counted from its layout.
    TinyConv,
    /// Accounting-only body: total parameters and the share that is
    /// normalization running statistics.
    Fixed { total: u64, norm_stats: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneInfo {
    pub name: &'static str,
    pub d_view: usize,
    pub body: BodyKind,
    /// Whether the body fine-tunes by default; frozen bodies contribute only
    /// non-trainable parameters.
    pub default_trainable: bool,
}

/// Registered backbones. Fixed-body parameter totals are the standard
/// featureless ImageNet bodies.
pub const REGISTRY: &[BackboneInfo] = &[
    BackboneInfo {
        name: "tinyconv",
        d_view: 48,
        body: BodyKind::TinyConv,
        default_trainable: true,
    },
    BackboneInfo {
        name: "bit",
        d_view: 2048,
        body: BodyKind::Fixed {
            total: 23_500_352,
            norm_stats: 0,
        },
        default_trainable: false,
    },
    BackboneInfo {
        name: "densenet121",
        d_view: 1024,
        body: BodyKind::Fixed {
            total: 7_037_504,
            norm_stats: 83_648,
        },
        default_trainable: true,
    },
    BackboneInfo {
        name: "inceptionv3",
        d_view: 2048,
        body: BodyKind::Fixed {
            total: 21_802_784,
            norm_stats: 34_432,
        },
        default_trainable: true,
    },
    BackboneInfo {
        name: "resnet50",
        d_view: 2048,
        body: BodyKind::Fixed {
            total: 23_587_712,
            norm_stats: 53_120,
        },
        default_trainable: true,
    },
    BackboneInfo {
        name: "vgg19",
        d_view: 512,
        body: BodyKind::Fixed {
            total: 20_024_384,
            norm_stats: 0,
        },
        default_trainable: true,
    },
    BackboneInfo {
        name: "xception",
        d_view: 2048,
        body: BodyKind::Fixed {
            total: 20_861_480,
            norm_stats: 54_528,
        },
        default_trainable: true,
    },
];

pub fn lookup_backbone(name: &str) -> Option<&'static BackboneInfo> {
    let normalized: String = name
        .chars()
        .filter(|c| *c != '-' && *c != '_')
        .collect::<String>()
        .to_ascii_lowercase();
    REGISTRY.iter().find(|info| info.name == normalized)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightInit {
    #[default]
    Random,
    PretrainedImagenet,
}

/// A backbone selection: registry name plus optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    /// Per-view feature length; defaults to the registry value. Only
    /// `tinyconv` accepts an override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_view: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
    #[serde(default)]
    pub weight_init: WeightInit,
}

impl BackboneSpec {
    pub fn tinyconv(d_view: usize) -> Self {
        BackboneSpec {
            name: "tinyconv".into(),
            d_view: Some(d_view),
            trainable: None,
            weight_init: WeightInit::Random,
        }
    }

    pub fn named(name: &str) -> Self {
        BackboneSpec {
            name: name.into(),
            d_view: None,
            trainable: None,
            weight_init: WeightInit::Random,
        }
    }

    pub fn resolve(&self) -> Result<ResolvedBackbone> {
        let info =
            lookup_backbone(&self.name).ok_or_else(|| Error::UnknownBackbone(self.name.clone()))?;
        let d_view = match self.d_view {
            None => info.d_view,
            Some(d) => {
                if d == 0 {
                    return Err(Error::Config("d_view must be >= 1".into()));
                }
                if d != info.d_view && info.body != BodyKind::TinyConv {
                    return Err(Error::Config(format!(
                        "backbone `{}` has a fixed feature dimension of {}",
                        info.name, info.d_view
                    )));
                }
                d
            }
        };
        Ok(ResolvedBackbone {
            info,
            d_view,
            trainable: self.trainable.unwrap_or(info.default_trainable),
            weight_init: self.weight_init,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResolvedBackbone {
    pub info: &'static BackboneInfo,
    pub d_view: usize,
    pub trainable: bool,
    pub weight_init: WeightInit,
}

impl ResolvedBackbone {
    pub fn body_parameter_total(&self) -> u64 {
        match self.info.body {
            BodyKind::TinyConv => tinyconv_body_parameter_count(self.d_view),
            BodyKind::Fixed { total, .. } => total,
        }
    }

    pub fn body_norm_stats(&self) -> u64 {
        match self.info.body {
            BodyKind::TinyConv => 0,
            BodyKind::Fixed { norm_stats, .. } => norm_stats,
        }
    }
}

// ---------------------------------------------------------------------------
// Head configuration and closed-form parameter arithmetic
// ---------------------------------------------------------------------------

/// Head hidden width: `floor(V * d_view / 6)`.
pub fn hidden_width(num_views: usize, d_view: usize) -> usize {
    num_views * d_view / 6
}

/// Dense head parameters: hidden weights and biases plus the output layer,
/// `n * (V * d_view + 1 + C) + C` with `n = floor(V * d_view / 6)`.
pub fn head_parameter_count(d_view: usize, num_views: usize, num_classes: usize) -> u64 {
    let d = (num_views * d_view) as u64;
    let n = hidden_width(num_views, d_view) as u64;
    let c = num_classes as u64;
    n * (d + 1 + c) + c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_views: usize,
    pub num_classes: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
}

impl HeadConfig {
    pub fn new(num_views: usize, d_view: usize, num_classes: usize) -> Result<Self> {
        if !(num_classes == 2 || num_classes == 3) {
            return Err(Error::Config(format!(
                "num_classes must be 2 or 3, got {num_classes}"
            )));
        }
        if num_views == 0 {
            return Err(Error::Config("num_views must be >= 1".into()));
        }
        let width = hidden_width(num_views, d_view);
        if width == 0 {
            return Err(Error::Config(format!(
                "hidden width floor({num_views} * {d_view} / 6) is zero"
            )));
        }
        Ok(HeadConfig {
            num_views,
            num_classes,
            hidden_width: width,
            dropout_rate: DEFAULT_DROPOUT,
        })
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        self.dropout_rate = rate;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub trainable: u64,
    pub non_trainable: u64,
}

impl ParameterCount {
    pub fn total(&self) -> u64 {
        self.trainable + self.non_trainable
    }
}

/// Closed-form whole-model count for any registered backbone.
pub fn model_parameter_count(
    spec: &BackboneSpec,
    num_views: usize,
    num_classes: usize,
    shared_backbone: bool,
) -> Result<ParameterCount> {
    let resolved = spec.resolve()?;
    let bodies = if shared_backbone { 1 } else { num_views as u64 };
    let body_total = resolved.body_parameter_total() * bodies;
    let norm = resolved.body_norm_stats() * bodies;
    let head = head_parameter_count(resolved.d_view, num_views, num_classes);
    let (trainable, non_trainable) = if resolved.trainable {
        (body_total - norm + head, norm)
    } else {
        (head, body_total)
    };
    Ok(ParameterCount {
        trainable,
        non_trainable,
    })
}

// ---------------------------------------------------------------------------
// Head layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct HeadArch {
    in_dim: usize,
    hidden: usize,
    classes: usize,
    dropout: f64,
    w1: ParamRange,
    b1: ParamRange,
    w2: ParamRange,
    b2: ParamRange,
}

struct HeadCache<F> {
    features: Array2<F>,
    /// Post-ReLU hidden activation (the mask).
    hidden: Array2<F>,
    /// Hidden activation after dropout, the input to the output layer.
    hidden_dropped: Array2<F>,
    dropout_mask: Option<Array2<F>>,
}

impl HeadArch {
    fn define(
        alloc: &mut dyn FnMut(&str, usize) -> ParamRange,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
    ) -> Self {
        HeadArch {
            in_dim,
            hidden,
            classes,
            dropout,
            w1: alloc("head.hidden.weight", in_dim * hidden),
            b1: alloc("head.hidden.bias", hidden),
            w2: alloc("head.output.weight", hidden * classes),
            b2: alloc("head.output.bias", classes),
        }
    }

    fn init<F: NdFloat>(&self, params: &mut [F], rng: &mut ChaCha8Rng) {
        use rand_distr::Distribution;
        let he = rand_distr::Normal::new(0.0, (2.0 / self.in_dim as f64).sqrt()).unwrap();
        for slot in &mut params[self.w1.clone()] {
            *slot = F::from(he.sample(rng)).unwrap();
        }
        for slot in &mut params[self.b1.clone()] {
            *slot = F::zero();
        }
        let out = rand_distr::Normal::new(0.0, (1.0 / self.hidden as f64).sqrt()).unwrap();
        for slot in &mut params[self.w2.clone()] {
            *slot = F::from(out.sample(rng)).unwrap();
        }
        for slot in &mut params[self.b2.clone()] {
            *slot = F::zero();
        }
    }

    fn w<'a, F: NdFloat>(&self, params: &'a [F], range: &ParamRange, rows: usize, cols: usize) -> ndarray::ArrayView2<'a, F> {
        ndarray::ArrayView2::from_shape((rows, cols), &params[range.clone()])
            .expect("range matches shape")
    }

    fn forward<F: NdFloat>(
        &self,
        params: &[F],
        features: Array2<F>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<F>, HeadCache<F>) {
        use rand::Rng;
        let w1 = self.w(params, &self.w1, self.in_dim, self.hidden);
        let b1 = ndarray::ArrayView1::from_shape(self.hidden, &params[self.b1.clone()]).unwrap();
        let w2 = self.w(params, &self.w2, self.hidden, self.classes);
        let b2 = ndarray::ArrayView1::from_shape(self.classes, &params[self.b2.clone()]).unwrap();

        let mut hidden = features.dot(&w1);
        hidden += &b1;
        hidden.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });

        let (hidden_dropped, dropout_mask) = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let scale = F::from(1.0 / keep).unwrap();
                let mask = Array2::from_shape_fn(hidden.dim(), |_| {
                    if rng.random::<f64>() < keep {
                        scale
                    } else {
                        F::zero()
                    }
                });
                (&hidden * &mask, Some(mask))
            }
            _ => (hidden.clone(), None),
        };

        let mut logits = hidden_dropped.dot(&w2);
        logits += &b2;
        layers::softmax_rows(&mut logits);
        (
            logits,
            HeadCache {
                features,
                hidden,
                hidden_dropped,
                dropout_mask,
            },
        )
    }

    /// Returns the feature gradient and accumulates parameter gradients.
    fn backward<F: NdFloat>(
        &self,
        params: &[F],
        cache: &HeadCache<F>,
        dlogits: &Array2<F>,
        grads: &mut [F],
    ) -> Array2<F> {
        use ndarray::Axis;
        let w1 = self.w(params, &self.w1, self.in_dim, self.hidden);
        let w2 = self.w(params, &self.w2, self.hidden, self.classes);

        let dw2 = cache.hidden_dropped.t().dot(dlogits);
        let db2 = dlogits.sum_axis(Axis(0));
        add_into(&mut grads[self.w2.clone()], dw2.as_slice().unwrap());
        add_into(&mut grads[self.b2.clone()], db2.as_slice().unwrap());

        let mut dhidden = dlogits.dot(&w2.t());
        if let Some(mask) = &cache.dropout_mask {
            dhidden *= mask;
        }
        ndarray::Zip::from(&mut dhidden)
            .and(&cache.hidden)
            .for_each(|g, h| {
                if *h <= F::zero() {
                    *g = F::zero();
                }
            });

        let dw1 = cache.features.t().dot(&dhidden);
        let db1 = dhidden.sum_axis(Axis(0));
        add_into(&mut grads[self.w1.clone()], dw1.as_slice().unwrap());
        add_into(&mut grads[self.b1.clone()], db1.as_slice().unwrap());

        dhidden.dot(&w1.t())
    }
}

fn add_into<F: NdFloat>(into: &mut [F], from: &[F]) {
    for (slot, v) in into.iter_mut().zip(from) {
        *slot = *slot + *v;
    }
}

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

pub enum ForwardMode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub loss: f64,
    pub correct: usize,
}

/// A built multi-view (or single-view) model over a flat parameter vector.
pub struct MvsModel<F: NdFloat> {
    backbone_name: String,
    d_view: usize,
    backbone_trainable: bool,
    shared_backbone: bool,
    head_cfg: HeadConfig,
    branches: Vec<TinyConvArch>,
    head: HeadArch,
    param_names: Vec<(String, ParamRange)>,
    params: Vec<F>,
    backbone_len: usize,
    init_seed: u64,
}

impl<F: NdFloat> MvsModel<F> {
    /// Build the four-view model. Branch order is the canonical view order;
    /// branches share one backbone body.
    pub fn build(backbone: &BackboneSpec, head: &HeadConfig, init_seed: u64) -> Result<Self> {
        if head.num_views != 4 {
            return Err(Error::Config(format!(
                "multi-view model requires num_views = 4, got {}",
                head.num_views
            )));
        }
        Self::build_with(backbone, head, init_seed, true)
    }

    /// Single-view ablation: one input branch, identical head construction
    /// with `n = floor(d_view / 6)`.
    pub fn build_single_view(
        backbone: &BackboneSpec,
        num_classes: usize,
        init_seed: u64,
    ) -> Result<Self> {
        let resolved = backbone.resolve()?;
        let head = HeadConfig::new(1, resolved.d_view, num_classes)?;
        Self::build_with(backbone, &head, init_seed, true)
    }

    /// Ablation switch: give every branch its own backbone weights.
    pub fn build_unshared(backbone: &BackboneSpec, head: &HeadConfig, init_seed: u64) -> Result<Self> {
        Self::build_with(backbone, head, init_seed, false)
    }

    /// Build with an explicit head of any view count; the pipeline uses this
    /// to apply dropout overrides uniformly across variants.
    pub fn build_configured(
        backbone: &BackboneSpec,
        head: &HeadConfig,
        init_seed: u64,
    ) -> Result<Self> {
        Self::build_with(backbone, head, init_seed, true)
    }

    fn build_with(
        backbone: &BackboneSpec,
        head: &HeadConfig,
        init_seed: u64,
        shared_backbone: bool,
    ) -> Result<Self> {
        let resolved = backbone.resolve()?;
        match resolved.weight_init {
            WeightInit::PretrainedImagenet => {
                return Err(Error::PretrainedWeightsUnavailable {
                    name: resolved.info.name.into(),
                    message: "no pretrained weights ship with this build".into(),
                });
            }
            WeightInit::Random => {}
        }
        if resolved.info.body != BodyKind::TinyConv {
            return Err(Error::PretrainedWeightsUnavailable {
                name: resolved.info.name.into(),
                message: "backbone body is registered for parameter accounting only".into(),
            });
        }
        if head.hidden_width != hidden_width(head.num_views, resolved.d_view) {
            return Err(Error::Config(format!(
                "head hidden width {} violates floor(V * d_view / 6) = {}",
                head.hidden_width,
                hidden_width(head.num_views, resolved.d_view)
            )));
        }

        #[derive(Default)]
        struct Allocator {
            cursor: usize,
            names: Vec<(String, ParamRange)>,
        }
        impl Allocator {
            fn add(&mut self, name: &str, len: usize) -> ParamRange {
                let r = self.cursor..self.cursor + len;
                self.cursor += len;
                self.names.push((name.to_string(), r.clone()));
                r
            }
        }
        let mut alloc = Allocator::default();

        let branch_count = if shared_backbone { 1 } else { head.num_views };
        let branches: Vec<TinyConvArch> = (0..branch_count)
            .map(|b| {
                let prefix = if shared_backbone {
                    "backbone".to_string()
                } else {
                    format!("backbone{b}")
                };
                let mut branch_alloc =
                    |name: &str, len: usize| alloc.add(&format!("{prefix}.{name}"), len);
                TinyConvArch::define(&mut branch_alloc, resolved.d_view)
            })
            .collect();
        let backbone_len = alloc.cursor;

        let head_arch = HeadArch::define(
            &mut |name, len| alloc.add(name, len),
            head.num_views * resolved.d_view,
            head.hidden_width,
            head.num_classes,
            head.dropout_rate,
        );
        let total = alloc.cursor;
        let names = alloc.names;

        let mut params = vec![F::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        for branch in &branches {
            branch.init(&mut params, &mut rng);
        }
        head_arch.init(&mut params, &mut rng);

        Ok(MvsModel {
            backbone_name: resolved.info.name.to_string(),
            d_view: resolved.d_view,
            backbone_trainable: resolved.trainable,
            shared_backbone,
            head_cfg: *head,
            branches,
            head: head_arch,
            param_names: names,
            params,
            backbone_len,
            init_seed,
        })
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_cfg
    }

    pub fn num_views(&self) -> usize {
        self.head_cfg.num_views
    }

    pub fn num_classes(&self) -> usize {
        self.head_cfg.num_classes
    }

    pub fn d_view(&self) -> usize {
        self.d_view
    }

    pub fn backbone_name(&self) -> &str {
        &self.backbone_name
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: Vec<F>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params = values;
        Ok(())
    }

    /// Slice of the parameter vector holding the head.
    pub fn head_param_range(&self) -> ParamRange {
        self.backbone_len..self.params.len()
    }

    /// Parameters updated during training: the head, plus the backbone when
    /// it is not frozen.
    pub fn trainable_range(&self) -> ParamRange {
        if self.backbone_trainable {
            0..self.params.len()
        } else {
            self.head_param_range()
        }
    }

    pub fn parameter_names(&self) -> &[(String, ParamRange)] {
        &self.param_names
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let total = self.params.len() as u64;
        let trainable = (self.trainable_range().len()) as u64;
        ParameterCount {
            trainable,
            non_trainable: total - trainable,
        }
    }

    fn branch_for_flat_index(&self, flat: usize) -> &TinyConvArch {
        if self.shared_backbone {
            &self.branches[0]
        } else {
            &self.branches[flat % self.head_cfg.num_views]
        }
    }

    fn check_images(&self, images: &[&ImageTensor], batch: usize) -> Result<()> {
        let v = self.head_cfg.num_views;
        if images.len() != batch * v {
            return Err(Error::ShapeMismatch(format!(
                "expected {} images for a batch of {batch} with {v} views, got {}",
                batch * v,
                images.len()
            )));
        }
        for img in images {
            if !img.is_standard_size() {
                return Err(Error::ShapeMismatch(format!(
                    "model input must be {0}x{0}, got {1}x{2}",
                    crate::image::STANDARD_SIDE,
                    img.height(),
                    img.width()
                )));
            }
        }
        Ok(())
    }

    /// Concatenated per-view features, one row per sample.
    pub fn backbone_features(&self, images: &[&ImageTensor], batch: usize) -> Result<Array2<F>> {
        self.check_images(images, batch)?;
        let v = self.head_cfg.num_views;
        let d = self.d_view;
        let mut features = Array2::zeros((batch, v * d));
        for (flat, img) in images.iter().enumerate() {
            let feat = self.branch_for_flat_index(flat).features(&self.params, img);
            let (row, view) = (flat / v, flat % v);
            features
                .slice_mut(ndarray::s![row, view * d..(view + 1) * d])
                .assign(&feat);
        }
        Ok(features)
    }

    /// Class probabilities for a batch of four-view sets.
    pub fn forward(&self, sets: &[&ImageSet], mode: ForwardMode<'_>) -> Result<Array2<F>> {
        if self.head_cfg.num_views != 4 {
            return Err(Error::Config(
                "forward on sets requires a four-view model".into(),
            ));
        }
        let images: Vec<&ImageTensor> = sets
            .iter()
            .flat_map(|s| s.images.iter().map(|a| a.as_ref()))
            .collect();
        self.forward_images(&images, sets.len(), mode)
    }

    /// Class probabilities for flat image batches (single-view models take
    /// one image per sample).
    pub fn forward_images(
        &self,
        images: &[&ImageTensor],
        batch: usize,
        mode: ForwardMode<'_>,
    ) -> Result<Array2<F>> {
        let features = self.backbone_features(images, batch)?;
        let dropout_rng = match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train { dropout_rng } => Some(dropout_rng),
        };
        let (probs, _) = self.head.forward(&self.params, features, dropout_rng);
        Ok(probs)
    }

    /// Head probabilities from precomputed features, without dropout.
    pub fn head_probs(&self, features: Array2<F>) -> Array2<F> {
        let (probs, _) = self.head.forward(&self.params, features, None);
        probs
    }

    /// Cross-entropy loss of the head on precomputed features; the pure
    /// function finite differences probe.
    pub fn head_loss(&self, features: &Array2<F>, labels: &[usize]) -> f64 {
        let (probs, _) = self.head.forward(&self.params, features.clone(), None);
        let (loss, _) = layers::cross_entropy(&probs, labels);
        loss
    }

    /// One training forward/backward pass. Gradients are written into
    /// `grads` (resized and zeroed here); returns the mean loss and the
    /// number of argmax-correct samples.
    pub fn train_batch_grads(
        &self,
        images: &[&ImageTensor],
        labels: &[usize],
        dropout_rng: &mut ChaCha8Rng,
        grads: &mut Vec<F>,
    ) -> Result<BatchStats> {
        let batch = labels.len();
        self.check_images(images, batch)?;
        grads.clear();
        grads.resize(self.params.len(), F::zero());

        let v = self.head_cfg.num_views;
        let d = self.d_view;
        let mut features = Array2::zeros((batch, v * d));
        let mut caches: Vec<Option<TinyConvCache<F>>> = Vec::with_capacity(images.len());
        for (flat, img) in images.iter().enumerate() {
            let branch = self.branch_for_flat_index(flat);
            let feat = if self.backbone_trainable {
                let (feat, cache) = branch.forward_cached(&self.params, img);
                caches.push(Some(cache));
                feat
            } else {
                caches.push(None);
                branch.features(&self.params, img)
            };
            let (row, view) = (flat / v, flat % v);
            features
                .slice_mut(ndarray::s![row, view * d..(view + 1) * d])
                .assign(&feat);
        }

        let (probs, head_cache) = self.head.forward(&self.params, features, Some(dropout_rng));
        let (loss, dlogits) = layers::cross_entropy(&probs, labels);
        let correct = probs
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &label)| {
                let mut best = 0;
                for (i, val) in row.iter().enumerate() {
                    if *val > row[best] {
                        best = i;
                    }
                }
                best == label
            })
            .count();

        let dfeatures = self.head.backward(&self.params, &head_cache, &dlogits, grads);
        if self.backbone_trainable {
            for (flat, cache) in caches.iter().enumerate() {
                let cache = cache.as_ref().expect("cached when trainable");
                let (row, view) = (flat / v, flat % v);
                let dfeat = dfeatures.slice(ndarray::s![row, view * d..(view + 1) * d]);
                self.branch_for_flat_index(flat)
                    .backward(&self.params, cache, dfeat, grads);
            }
        }
        Ok(BatchStats { loss, correct })
    }

    // --- checkpointing ------------------------------------------------------

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()>
    where
        F: Serialize,
    {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.to_string(),
            backbone: self.backbone_name.clone(),
            d_view: self.d_view,
            num_views: self.head_cfg.num_views,
            num_classes: self.head_cfg.num_classes,
            hidden_width: self.head_cfg.hidden_width,
            dropout_rate: self.head_cfg.dropout_rate,
            trainable_backbone: self.backbone_trainable,
            shared_backbone: self.shared_backbone,
            init_seed: self.init_seed,
            parameter_count: self.count_parameters(),
        };
        let meta_path = dir.join("checkpoint.meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

        let weights_path = dir.join("checkpoint.json");
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            values: &self.params,
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::json(&weights_path, e))?;
        std::fs::write(&weights_path, text).map_err(|e| Error::io(&weights_path, e))
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self>
    where
        F: DeserializeOwned,
    {
        let meta_path = dir.join("checkpoint.meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingFile(meta_path));
        }
        let meta: CheckpointMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )
        .map_err(|e| Error::json(&meta_path, e))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::schema(
                "checkpoint.meta.json",
                format!("unknown format `{}`", meta.format),
            ));
        }
        let spec = BackboneSpec {
            name: meta.backbone.clone(),
            d_view: Some(meta.d_view),
            trainable: Some(meta.trainable_backbone),
            weight_init: WeightInit::Random,
        };
        let head = HeadConfig::new(meta.num_views, meta.d_view, meta.num_classes)?
            .with_dropout(meta.dropout_rate)?;
        let mut model = Self::build_with(&spec, &head, meta.init_seed, meta.shared_backbone)?;

        let weights_path = dir.join("checkpoint.json");
        if !weights_path.exists() {
            return Err(Error::MissingFile(weights_path));
        }
        let file: CheckpointFileOwned<F> = serde_json::from_str(
            &std::fs::read_to_string(&weights_path).map_err(|e| Error::io(&weights_path, e))?,
        )
        .map_err(|e| Error::json(&weights_path, e))?;
        model.set_params(file.values)?;
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "mvsnet-checkpoint/1";

/// Sidecar describing the architecture; enough to rebuild the model shape
/// without the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub backbone: String,
    pub d_view: usize,
    pub num_views: usize,
    pub num_classes: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    pub trainable_backbone: bool,
    pub shared_backbone: bool,
    pub init_seed: u64,
    pub parameter_count: ParameterCount,
}

#[derive(Serialize)]
struct CheckpointFile<'a, F> {
    format: String,
    values: &'a [F],
}

#[derive(Deserialize)]
struct CheckpointFileOwned<F> {
    #[allow(dead_code)]
    format: String,
    values: Vec<F>,
}

/// Table of head/total counts for registered backbones, used by reporting.
pub fn parameter_table(num_views: usize, num_classes: usize) -> BTreeMap<String, ParameterCount> {
    let mut table = BTreeMap::new();
    for info in REGISTRY {
        let spec = BackboneSpec::named(info.name);
        if let Ok(count) = model_parameter_count(&spec, num_views, num_classes, true) {
            table.insert(info.name.to_string(), count);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClassLabel, Provenance};
    use crate::image::{ImageTensor, STANDARD_SIDE};
    use ndarray::Array3;
    use std::sync::Arc;

    fn test_image(seed: usize) -> Arc<ImageTensor> {
        let pixels = Array3::from_shape_fn((STANDARD_SIDE, STANDARD_SIDE, 3), |(y, x, c)| {
            (((y * 3 + x * 7 + c * 11 + seed * 13) % 37) as f32 / 37.0).clamp(0.0, 1.0)
        });
        Arc::new(ImageTensor::new(pixels).unwrap())
    }

    fn test_set(seed: usize) -> ImageSet {
        ImageSet {
            images: std::array::from_fn(|i| test_image(seed * 4 + i)),
            provenance: [Provenance::Original; 4],
            label: ClassLabel::Control,
        }
    }

    fn tinyconv_model(classes: usize) -> MvsModel<f64> {
        let backbone = BackboneSpec::tinyconv(48);
        let head = HeadConfig::new(4, 48, classes).unwrap();
        MvsModel::build(&backbone, &head, 7).unwrap()
    }

    #[test]
    fn hidden_width_formula() {
        assert_eq!(hidden_width(4, 48), 32);
        assert_eq!(hidden_width(4, 2048), 1365);
        assert_eq!(hidden_width(4, 512), 341);
        assert_eq!(hidden_width(1, 48), 8);
        assert_eq!(hidden_width(1, 2048), 341);
    }

    #[test]
    fn head_parameter_count_reproduces_published_rows() {
        assert_eq!(head_parameter_count(2048, 4, 2), 11_186_177);
        assert_eq!(head_parameter_count(1024, 4, 2), 2_795_520);
        assert_eq!(head_parameter_count(512, 4, 2), 699_393);
        // Single view at d_view 2048: 2048*341 + 341 + 341*2 + 2.
        assert_eq!(head_parameter_count(2048, 1, 2), 699_393);
    }

    #[test]
    fn model_totals_match_published_table() {
        let expect = [
            ("bit", 11_186_177u64, 23_500_352u64, 34_686_529u64),
            ("densenet121", 9_749_376, 83_648, 9_833_024),
            ("inceptionv3", 32_954_529, 34_432, 32_988_961),
            ("resnet50", 34_720_769, 53_120, 34_773_889),
            ("vgg19", 20_723_777, 0, 20_723_777),
            ("xception", 31_993_129, 54_528, 32_047_657),
        ];
        for (name, trainable, non_trainable, total) in expect {
            let count =
                model_parameter_count(&BackboneSpec::named(name), 4, 2, true).unwrap();
            assert_eq!(count.trainable, trainable, "{name} trainable");
            assert_eq!(count.non_trainable, non_trainable, "{name} non-trainable");
            assert_eq!(count.total(), total, "{name} total");
        }
    }

    #[test]
    fn unknown_backbone_is_reported() {
        assert!(matches!(
            BackboneSpec::named("mysterynet").resolve(),
            Err(Error::UnknownBackbone(name)) if name == "mysterynet"
        ));
    }

    #[test]
    fn backbone_aliases_resolve() {
        assert!(lookup_backbone("DenseNet-121").is_some());
        assert!(lookup_backbone("Inception-v3").is_some());
        assert!(lookup_backbone("BiT").is_some());
    }

    #[test]
    fn standard_backbones_do_not_build() {
        let head = HeadConfig::new(4, 2048, 2).unwrap();
        match MvsModel::<f64>::build(&BackboneSpec::named("resnet50"), &head, 0) {
            Err(Error::PretrainedWeightsUnavailable { .. }) => {}
            Err(other) => panic!("unexpected error: {other:?}"),
            Ok(_) => panic!("expected build to fail"),
        }
    }

    #[test]
    fn pretrained_init_is_unavailable() {
        let mut spec = BackboneSpec::tinyconv(48);
        spec.weight_init = WeightInit::PretrainedImagenet;
        let head = HeadConfig::new(4, 48, 2).unwrap();
        assert!(matches!(
            MvsModel::<f64>::build(&spec, &head, 0),
            Err(Error::PretrainedWeightsUnavailable { .. })
        ));
    }

    #[test]
    fn tinyconv_counts_match_hand_arithmetic() {
        // conv1 5->8, conv2 8->16, conv3 16->48, all 3x3, plus the head for
        // V = 4, d = 192, n = 32 and C = 3.
        let model = tinyconv_model(3);
        let body = (9 * 5 * 8 + 8) + (9 * 8 * 16 + 16) + (9 * 16 * 48 + 48);
        assert_eq!(body, 8496);
        let head = 32 * 192 + 32 + 32 * 3 + 3;
        let count = model.count_parameters();
        assert_eq!(count.total(), (body + head) as u64);
        assert_eq!(count.non_trainable, 0);
        // Closed form agrees with the built layout.
        let closed =
            model_parameter_count(&BackboneSpec::tinyconv(48), 4, 3, true).unwrap();
        assert_eq!(closed, count);
        assert_eq!(
            count.total() - tinyconv_body_parameter_count(48),
            head_parameter_count(48, 4, 3)
        );
    }

    #[test]
    fn frozen_backbone_trains_head_only() {
        let mut spec = BackboneSpec::tinyconv(48);
        spec.trainable = Some(false);
        let head = HeadConfig::new(4, 48, 2).unwrap();
        let model = MvsModel::<f64>::build(&spec, &head, 3).unwrap();
        let count = model.count_parameters();
        assert_eq!(count.trainable, head_parameter_count(48, 4, 2));
        assert_eq!(count.non_trainable, tinyconv_body_parameter_count(48));
        assert_eq!(model.trainable_range(), model.head_param_range());
    }

    #[test]
    fn unshared_model_has_four_bodies() {
        let head = HeadConfig::new(4, 48, 2).unwrap();
        let model = MvsModel::<f64>::build_unshared(&BackboneSpec::tinyconv(48), &head, 3).unwrap();
        assert_eq!(
            model.count_parameters().total(),
            4 * tinyconv_body_parameter_count(48) + head_parameter_count(48, 4, 2)
        );
    }

    #[test]
    fn eval_forward_is_deterministic_and_row_stochastic() {
        let model = tinyconv_model(3);
        let sets = [test_set(0), test_set(1)];
        let refs: Vec<&ImageSet> = sets.iter().collect();
        let a = model.forward(&refs, ForwardMode::Eval).unwrap();
        let b = model.forward(&refs, ForwardMode::Eval).unwrap();
        assert_eq!(a, b);
        for row in a.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn zero_head_weights_give_uniform_probabilities() {
        let mut model = tinyconv_model(3);
        let head_range = model.head_param_range();
        for slot in &mut model.params_mut()[head_range] {
            *slot = 0.0;
        }
        let sets = [test_set(5)];
        let refs: Vec<&ImageSet> = sets.iter().collect();
        let probs = model.forward(&refs, ForwardMode::Eval).unwrap();
        for p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let model = tinyconv_model(2);
        let sets = [test_set(0), test_set(1), test_set(2)];
        let refs: Vec<&ImageSet> = sets.iter().collect();
        let probs = model.forward(&refs, ForwardMode::Eval).unwrap();
        let permuted = [&sets[2], &sets[0], &sets[1]];
        let probs_p = model.forward(&permuted, ForwardMode::Eval).unwrap();
        for (orig, perm) in [(2usize, 0usize), (0, 1), (1, 2)] {
            for c in 0..2 {
                assert!((probs[[orig, c]] - probs_p[[perm, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_nonstandard_images() {
        let model = tinyconv_model(2);
        let small = Arc::new(ImageTensor::constant(64, 64, 0.5));
        let set = ImageSet {
            images: [small.clone(), small.clone(), small.clone(), small],
            provenance: [Provenance::Original; 4],
            label: ClassLabel::Control,
        };
        assert!(matches!(
            model.forward(&[&set], ForwardMode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn single_view_model_shapes() {
        let model =
            MvsModel::<f64>::build_single_view(&BackboneSpec::tinyconv(48), 2, 9).unwrap();
        assert_eq!(model.head_config().hidden_width, 8);
        let img = test_image(3);
        let imgs = [img.as_ref(), img.as_ref()];
        let probs = model.forward_images(&imgs, 2, ForwardMode::Eval).unwrap();
        assert_eq!(probs.dim(), (2, 2));
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn train_batch_gradients_flow_everywhere() {
        let model = tinyconv_model(2);
        let sets = [test_set(0), test_set(1)];
        let images: Vec<&ImageTensor> = sets
            .iter()
            .flat_map(|s| s.images.iter().map(|a| a.as_ref()))
            .collect();
        let labels = [0usize, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut grads = Vec::new();
        let stats = model
            .train_batch_grads(&images, &labels, &mut rng, &mut grads)
            .unwrap();
        assert!(stats.loss.is_finite());
        assert!(stats.correct <= 2);
        let nonzero = grads.iter().filter(|g| **g != 0.0).count();
        // ReLU and dropout zero some entries; most gradients should be live.
        assert!(nonzero > grads.len() / 2, "only {nonzero} live gradients");
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let model = tinyconv_model(2);
        let dir = tempfile::tempdir().unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let loaded = MvsModel::<f64>::load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.params(), model.params());
        let sets = [test_set(9)];
        let refs: Vec<&ImageSet> = sets.iter().collect();
        let a = model.forward(&refs, ForwardMode::Eval).unwrap();
        let b = loaded.forward(&refs, ForwardMode::Eval).unwrap();
        assert_eq!(a, b);
        // The sidecar alone describes the architecture.
        let meta: CheckpointMeta = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("checkpoint.meta.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(meta.backbone, "tinyconv");
        assert_eq!(meta.hidden_width, 32);
        assert_eq!(meta.parameter_count, model.count_parameters());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        // Dropout is disabled so the train path is deterministic.
        let backbone = BackboneSpec::tinyconv(12);
        let head = HeadConfig::new(4, 12, 2).unwrap().with_dropout(0.0).unwrap();
        let mut model = MvsModel::<f64>::build(&backbone, &head, 11).unwrap();
        let sets = [test_set(0), test_set(1)];
        let images: Vec<&ImageTensor> = sets
            .iter()
            .flat_map(|s| s.images.iter().map(|a| a.as_ref()))
            .collect();
        let labels = [0usize, 1];
        let features = model.backbone_features(&images, 2).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut grads = Vec::new();
        model
            .train_batch_grads(&images, &labels, &mut rng, &mut grads)
            .unwrap();

        let head_range = model.head_param_range();
        let h = 1e-5;
        let step = (head_range.len() / 40).max(1);
        for i in head_range.clone().step_by(step) {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let up = model.head_loss(&features, &labels);
            model.params_mut()[i] = orig - h;
            let down = model.head_loss(&features, &labels);
            model.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-8);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-3,
                "head param {i}: fd {fd} vs analytic {}",
                grads[i]
            );
        }
    }
}
