//! Extending a trained model to new classes from a few labelled samples.
//!
//! A class proxy is the masked average of a head's input features over the
//! pixels of that class, averaged per image and then across images, and
//! scaled to unit length. New classes take their proxies as head rows; old
//! classes can be pulled toward fresh proxies with an update rate `alpha`.

use thiserror::Error;

use crate::data::Sample;
use crate::model::{FeatureStack, ModelError, SegModel};
use crate::numerics::l2_normalize;
use crate::tensor::Tensor;
use crate::Mask;

/// Proxies at or below this norm are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ImprintError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("class `{class}` has no foreground pixels at head level {level} in any support image")]
    NoSupportAtResolution { class: String, level: usize },
    #[error("proxy for class `{class}` at head level {level} has norm {norm:e}")]
    DegenerateProxy { class: String, level: usize, norm: f64 },
    #[error("{height}x{width} mask cannot be downscaled by 2^{level}")]
    Indivisible { height: usize, width: usize, level: usize },
    #[error("feature map is {features:?} but mask is {mask:?}")]
    DimMismatch { features: (usize, usize), mask: (usize, usize) },
    #[error("invalid imprint config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImprintConfig {
    /// Update rate for old classes: 0 keeps the stored rows, 1 replaces them.
    pub alpha: f64,
    pub renormalize_after_blend: bool,
    pub weight_prenormalization: bool,
    /// Also pull the background row toward the support's background proxy.
    /// The proxy is scaled to the row's norm first and, with
    /// `renormalize_after_blend`, the result is put back on that norm.
    pub blend_background: bool,
}

impl Default for ImprintConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            renormalize_after_blend: true,
            weight_prenormalization: true,
            blend_background: true,
        }
    }
}

impl ImprintConfig {
    pub fn validate(&self) -> Result<(), ImprintError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ImprintError::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One-vs-rest mask at some feature resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Marks a coarse pixel as `class` iff any of its `2^level x 2^level` fine
/// pixels is `class`.
pub fn downscale_mask(mask: &Mask, class: u8, level: usize) -> Result<BinaryMask, ImprintError> {
    let (h, w) = mask.dims();
    let f = 1usize.checked_shl(level as u32).unwrap_or(0);
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(ImprintError::Indivisible {
            height: h,
            width: w,
            level,
        });
    }
    let (ch, cw) = (h / f, w / f);
    let mut data = vec![false; ch * cw];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == class {
                data[(y / f) * cw + x / f] = true;
            }
        }
    }
    Ok(BinaryMask {
        height: ch,
        width: cw,
        data,
    })
}

/// Masked average pooling for one head, before normalization.
///
/// Each image contributes the mean of its foreground feature vectors; images
/// without foreground are skipped. Returns `None` if every image is empty.
pub fn masked_average(features: &[&Tensor], masks: &[BinaryMask]) -> Result<Option<Vec<f64>>, ImprintError> {
    assert_eq!(features.len(), masks.len(), "one mask per feature map");
    let mut total: Option<Vec<f64>> = None;
    let mut used = 0usize;
    for (f, m) in features.iter().zip(masks) {
        let (c, h, w) = f.chw().map_err(ModelError::from)?;
        if (h, w) != (m.height, m.width) {
            return Err(ImprintError::DimMismatch {
                features: (h, w),
                mask: (m.height, m.width),
            });
        }
        let n = m.count();
        if n == 0 {
            continue;
        }
        let acc = total.get_or_insert_with(|| vec![0.0; c]);
        if acc.len() != c {
            return Err(ModelError::Config(format!("support feature maps have {} and {c} channels", acc.len())).into());
        }
        let data = f.data();
        for (ch, a) in acc.iter_mut().enumerate() {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            let s: f64 = plane
                .iter()
                .zip(&m.data)
                .filter(|(_, &on)| on)
                .map(|(&v, _)| v as f64)
                .sum();
            *a += s / n as f64;
        }
        used += 1;
    }
    Ok(total.map(|mut acc| {
        for a in &mut acc {
            *a /= used as f64;
        }
        acc
    }))
}

/// Normalized masked average pooling for one head.
pub fn nmap(features: &[&Tensor], masks: &[BinaryMask], class: &str, level: usize) -> Result<Vec<f32>, ImprintError> {
    let avg = masked_average(features, masks)?.ok_or_else(|| ImprintError::NoSupportAtResolution {
        class: class.to_string(),
        level,
    })?;
    let norm = avg.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > DEGENERATE_NORM) {
        return Err(ImprintError::DegenerateProxy {
            class: class.to_string(),
            level,
            norm,
        });
    }
    Ok(avg.iter().map(|v| (v / norm) as f32).collect())
}

/// Per-head unit vectors standing in for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Proxy {
    pub class_name: String,
    /// `(head level, vector)` in head order.
    pub vectors: Vec<(usize, Vec<f32>)>,
}

/// Support images with their features already extracted by a model.
pub struct SupportSet {
    pub samples: Vec<Sample>,
    pub target_classes: Vec<String>,
    features: Vec<FeatureStack>,
}

impl SupportSet {
    pub fn new(model: &SegModel, samples: Vec<Sample>, target_classes: Vec<String>) -> Result<Self, ImprintError> {
        if samples.is_empty() {
            return Err(ImprintError::EmptySupport);
        }
        let features = samples
            .iter()
            .map(|s| model.extract_features(&s.image))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            samples,
            target_classes,
            features,
        })
    }

    pub fn k(&self) -> usize {
        self.samples.len()
    }

    /// Whether any support pixel carries `class`.
    pub fn contains_class(&self, class: u8) -> bool {
        self.samples.iter().any(|s| s.mask.count_class(class) > 0)
    }

    /// Proxy for the class at mask value `class` across every head.
    pub fn proxy(&self, model: &SegModel, class: u8, name: &str) -> Result<Proxy, ImprintError> {
        let mut vectors = Vec::with_capacity(model.heads.len());
        for (h, head) in model.heads.iter().enumerate() {
            let level = head.spec.level;
            let masks = self
                .samples
                .iter()
                .map(|s| downscale_mask(&s.mask, class, level))
                .collect::<Result<Vec<_>, _>>()?;
            let feats: Vec<&Tensor> = self.features.iter().map(|f| &f.features[h]).collect();
            vectors.push((level, nmap(&feats, &masks, name, level)?));
        }
        Ok(Proxy {
            class_name: name.to_string(),
            vectors,
        })
    }
}

/// Adds `class_name` to the model with its proxy as head rows. `mask_value`
/// is the label of that class in the support masks. Existing rows are not
/// touched. Returns the new class index.
pub fn imprint_new_class(
    model: &mut SegModel,
    support: &SupportSet,
    class_name: &str,
    mask_value: u8,
) -> Result<usize, ImprintError> {
    if model.class_index(class_name).is_some() {
        return Err(ModelError::DuplicateClass(class_name.to_string()).into());
    }
    let proxy = support.proxy(model, mask_value, class_name)?;
    let idx = model.add_class_slot(class_name)?;
    for (head, (_, v)) in model.heads.iter_mut().zip(&proxy.vectors) {
        head.row_mut(idx).copy_from_slice(v);
    }
    Ok(idx)
}

/// Scales every non-background row of every head to unit norm. Zero rows
/// stay zero.
fn prenormalize(model: &mut SegModel) {
    for head in &mut model.heads {
        for c in 1..head.num_classes() {
            let row = head.row_mut(c);
            if let Ok(unit) = l2_normalize(row, DEGENERATE_NORM) {
                row.copy_from_slice(&unit);
            }
        }
    }
}

fn norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

/// `alpha * proxy + (1 - alpha) * row`, evaluated in f64.
pub fn blend(row: &[f32], proxy: &[f32], alpha: f64) -> Vec<f32> {
    row.iter()
        .zip(proxy)
        .map(|(&w, &p)| (alpha * p as f64 + (1.0 - alpha) * w as f64) as f32)
        .collect()
}

/// Pulls each old class present in the support set toward its proxy.
/// Classes absent from the support are left alone. Returns the indices of
/// the updated classes.
///
/// The first call with `weight_prenormalization` scales all existing defect
/// rows to unit norm so that trained rows and unit proxies compete on the
/// same scale. The background row keeps its trained scale; see
/// [`ImprintConfig::blend_background`].
pub fn update_old_classes(
    model: &mut SegModel,
    support: &SupportSet,
    config: &ImprintConfig,
) -> Result<Vec<usize>, ImprintError> {
    config.validate()?;
    let mut proxies = Vec::new();
    if config.blend_background && support.contains_class(0) {
        proxies.push((0, support.proxy(model, 0, &model.class_names[0])?));
    }
    for name in &support.target_classes {
        let Some(idx) = model.class_index(name) else { continue };
        if idx == 0 || !support.contains_class(idx as u8) {
            continue;
        }
        proxies.push((idx, support.proxy(model, idx as u8, name)?));
    }
    if config.weight_prenormalization && !model.rows_prenormalized {
        prenormalize(model);
        model.rows_prenormalized = true;
    }
    for (idx, proxy) in &proxies {
        for (head, (_, p)) in model.heads.iter_mut().zip(&proxy.vectors) {
            let scale = if *idx == 0 { norm(head.row(0)) } else { 1.0 };
            let p: Vec<f32> = p.iter().map(|&v| (v as f64 * scale) as f32).collect();
            let mut row = blend(head.row(*idx), &p, config.alpha);
            if config.renormalize_after_blend {
                if let Ok(unit) = l2_normalize(&row, DEGENERATE_NORM) {
                    row = unit.iter().map(|&v| (v as f64 * scale) as f32).collect();
                }
            }
            head.row_mut(*idx).copy_from_slice(&row);
        }
    }
    Ok(proxies.into_iter().map(|(i, _)| i).collect())
}

/// What one imprint event did.
#[derive(Clone, Debug, PartialEq)]
pub struct EventOutcome {
    pub new_class: usize,
    pub updated: Vec<usize>,
}

/// One imprint event: blend co-occurring old classes when `alpha > 0`, then
/// imprint the new class.
pub fn imprint_event(
    model: &mut SegModel,
    samples: Vec<Sample>,
    new_class: &str,
    mask_value: u8,
    config: &ImprintConfig,
) -> Result<EventOutcome, ImprintError> {
    config.validate()?;
    let targets = model.class_names[1..].to_vec();
    let support = SupportSet::new(model, samples, targets)?;
    // Validate the new class before any row changes.
    if model.class_index(new_class).is_some() {
        return Err(ModelError::DuplicateClass(new_class.to_string()).into());
    }
    support.proxy(model, mask_value, new_class)?;
    let updated = if config.alpha > 0.0 {
        update_old_classes(model, &support, config)?
    } else {
        Vec::new()
    };
    let new_class = imprint_new_class(model, &support, new_class, mask_value)?;
    Ok(EventOutcome { new_class, updated })
}
