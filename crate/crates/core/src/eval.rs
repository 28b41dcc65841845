//! Image-level verdicts, per-class instance detection, reports and overlays.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::pnm::{self, Raster};
use crate::data::{Sample, CLASS_NAMES};
use crate::model::{ModelError, SegModel};
use crate::Mask;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {truths} ground truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("model classes {model:?} are not a prefix of the dataset catalog {catalog:?}")]
    CatalogMismatch { model: Vec<String>, catalog: Vec<String> },
    #[error("prediction is {pred:?} but truth is {truth:?}")]
    DimMismatch { pred: (usize, usize), truth: (usize, usize) },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Pnm {
        path: String,
        #[source]
        source: pnm::PnmError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Defective,
    DefectFree,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Defective => "defective",
            Verdict::DefectFree => "defect_free",
        }
    }
}

/// Default number of defect pixels an image may contain and still pass.
pub const DEFAULT_THRESHOLD: usize = 20;

/// Defective iff strictly more than `threshold` pixels are non-background.
pub fn image_level_label(pred: &Mask, threshold: usize) -> Verdict {
    if pred.count_foreground() > threshold {
        Verdict::Defective
    } else {
        Verdict::DefectFree
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `None` when nothing was predicted defective.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

/// Defective images are the positive class.
pub fn confusion(preds: &[Verdict], truths: &[Verdict]) -> Result<ConfusionCounts, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truths) {
        match (p, t) {
            (Verdict::Defective, Verdict::Defective) => c.tp += 1,
            (Verdict::Defective, Verdict::DefectFree) => c.fp += 1,
            (Verdict::DefectFree, Verdict::DefectFree) => c.tn += 1,
            (Verdict::DefectFree, Verdict::Defective) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Percentage with one decimal, or `undefined`.
pub fn fmt_rate(r: Option<f64>) -> String {
    match r {
        Some(v) => format!("{:.1}", 100.0 * v),
        None => "undefined".to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

/// Connected components of `class` in `mask`, each as sorted flat indices.
/// Components are ordered by their first pixel in row-major order.
pub fn components(mask: &Mask, class: u8, connectivity: Connectivity) -> Vec<Vec<usize>> {
    let (h, w) = mask.dims();
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
    };
    for start in 0..h * w {
        if seen[start] || data[start] != class {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !seen[q] && data[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// One ground-truth instance and whether the prediction found it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceRecord {
    pub class: u8,
    pub size: usize,
    /// Some pixel predicted as any defect class.
    pub detected: bool,
    /// Some pixel predicted as the instance's own class.
    pub detected_strict: bool,
}

pub fn instance_detection(
    pred: &Mask,
    truth: &Mask,
    connectivity: Connectivity,
) -> Result<Vec<InstanceRecord>, EvalError> {
    if pred.dims() != truth.dims() {
        return Err(EvalError::DimMismatch {
            pred: pred.dims(),
            truth: truth.dims(),
        });
    }
    let mut out = Vec::new();
    for class in 1..=truth.max_class() {
        for comp in components(truth, class, connectivity) {
            let p = pred.data();
            out.push(InstanceRecord {
                class,
                size: comp.len(),
                detected: comp.iter().any(|&i| p[i] != 0),
                detected_strict: comp.iter().any(|&i| p[i] == class),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDetection {
    pub class_name: String,
    /// Whether the evaluated model has a slot for this class. Classes
    /// without a slot report zero detections.
    pub in_model: bool,
    pub total: usize,
    pub detected: usize,
    pub detected_strict: usize,
}

impl ClassDetection {
    pub fn rate(&self) -> Option<f64> {
        ratio(self.detected, self.total)
    }

    pub fn strict_rate(&self) -> Option<f64> {
        ratio(self.detected_strict, self.total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: usize,
    pub connectivity: Connectivity,
    pub overlays: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            connectivity: Connectivity::Four,
            overlays: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub truth: Verdict,
    pub verdict: Verdict,
    /// Predicted pixels per catalog class.
    pub pixel_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub model_classes: Vec<String>,
    pub threshold: usize,
    pub counts: ConfusionCounts,
    /// Defect classes in catalog order.
    pub classes: Vec<ClassDetection>,
    pub images: Vec<ImageRecord>,
}

impl EvaluationReport {
    pub fn class(&self, name: &str) -> Option<&ClassDetection> {
        self.classes.iter().find(|c| c.class_name == name)
    }

    /// Cross-class detection rate of a class, 0 when it has no instances.
    pub fn detection_rate(&self, name: &str) -> f64 {
        self.class(name).and_then(ClassDetection::rate).unwrap_or(0.0)
    }
}

fn check_catalog(model_classes: &[String]) -> Result<(), EvalError> {
    let n = model_classes.len();
    if n > CLASS_NAMES.len() || model_classes.iter().zip(CLASS_NAMES).any(|(a, b)| a != b) {
        return Err(EvalError::CatalogMismatch {
            model: model_classes.to_vec(),
            catalog: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

/// Scores precomputed predictions for a model with `model_classes` slots.
pub fn score_predictions(
    model_classes: &[String],
    samples: &[Sample],
    preds: &[Mask],
    config: &EvalConfig,
) -> Result<EvaluationReport, EvalError> {
    check_catalog(model_classes)?;
    if samples.len() != preds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: samples.len(),
        });
    }
    let in_model = model_classes.len();
    let mut classes: Vec<ClassDetection> = CLASS_NAMES[1..]
        .iter()
        .enumerate()
        .map(|(i, n)| ClassDetection {
            class_name: n.to_string(),
            in_model: i + 1 < in_model,
            total: 0,
            detected: 0,
            detected_strict: 0,
        })
        .collect();
    let mut images = Vec::with_capacity(samples.len());
    for (s, pred) in samples.iter().zip(preds) {
        for inst in instance_detection(pred, &s.mask, config.connectivity)? {
            let Some(c) = classes.get_mut(inst.class as usize - 1) else { continue };
            c.total += 1;
            if c.in_model {
                c.detected += inst.detected as usize;
                c.detected_strict += inst.detected_strict as usize;
            }
        }
        let mut pixel_counts = vec![0usize; CLASS_NAMES.len()];
        for &v in pred.data() {
            if let Some(c) = pixel_counts.get_mut(v as usize) {
                *c += 1;
            }
        }
        images.push(ImageRecord {
            id: s.id.clone(),
            truth: if s.is_defective() { Verdict::Defective } else { Verdict::DefectFree },
            verdict: image_level_label(pred, config.threshold),
            pixel_counts,
        });
    }
    let counts = confusion(
        &images.iter().map(|r| r.verdict).collect::<Vec<_>>(),
        &images.iter().map(|r| r.truth).collect::<Vec<_>>(),
    )?;
    Ok(EvaluationReport {
        model_classes: model_classes.to_vec(),
        threshold: config.threshold,
        counts,
        classes,
        images,
    })
}

/// Evaluates `model` on every sample, also returning its predictions.
pub fn evaluate_with_predictions(
    model: &SegModel,
    samples: &[Sample],
    config: &EvalConfig,
) -> Result<(EvaluationReport, Vec<Mask>), EvalError> {
    check_catalog(&model.class_names)?;
    let preds = samples
        .iter()
        .map(|s| model.predict(&s.image))
        .collect::<Result<Vec<_>, _>>()?;
    let report = score_predictions(&model.class_names, samples, &preds, config)?;
    Ok((report, preds))
}

pub fn evaluate_suite(model: &SegModel, samples: &[Sample], config: &EvalConfig) -> Result<EvaluationReport, EvalError> {
    Ok(evaluate_with_predictions(model, samples, config)?.0)
}

pub fn report_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("id,truth,verdict");
    for n in CLASS_NAMES {
        write!(s, ",{n}_px").unwrap();
    }
    s.push('\n');
    for r in &report.images {
        write!(s, "{},{},{}", r.id, r.truth.name(), r.verdict.name()).unwrap();
        for c in &r.pixel_counts {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn instances_csv(report: &EvaluationReport) -> String {
    let mut s = String::from("class,in_model,total,detected,rate,detected_strict,rate_strict\n");
    let r = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    for c in &report.classes {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.class_name,
            c.in_model,
            c.total,
            c.detected,
            r(c.rate()),
            c.detected_strict,
            r(c.strict_rate())
        )
        .unwrap();
    }
    s
}

pub fn summary_text(report: &EvaluationReport) -> String {
    let c = &report.counts;
    let mut s = String::new();
    writeln!(s, "model classes: {}", report.model_classes.join(", ")).unwrap();
    writeln!(s, "images: {} (defect threshold > {} px)", c.total(), report.threshold).unwrap();
    writeln!(s, "TP {}  FP {}  TN {}  FN {}", c.tp, c.fp, c.tn, c.fn_).unwrap();
    writeln!(s, "precision   {:>9} %", fmt_rate(c.precision())).unwrap();
    writeln!(s, "recall      {:>9} %", fmt_rate(c.recall())).unwrap();
    writeln!(s, "specificity {:>9} %", fmt_rate(c.specificity())).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "{:<20} {:>9} {:>9} {:>10} {:>10}", "class", "instances", "detected", "rate %", "strict %").unwrap();
    for d in &report.classes {
        let rate = if d.in_model { fmt_rate(d.rate()) } else { "0.0".to_string() };
        let strict = if d.in_model { fmt_rate(d.strict_rate()) } else { "0.0".to_string() };
        writeln!(
            s,
            "{:<20} {:>9} {:>9} {:>10} {:>10}{}",
            d.class_name,
            d.total,
            d.detected,
            rate,
            strict,
            if d.in_model { "" } else { "  (no slot)" }
        )
        .unwrap();
    }
    s
}

/// Overlay colors by class index; background has none.
pub const CLASS_COLORS: [[u8; 3]; 6] = [
    [0, 0, 0],
    [0, 0, 255],
    [144, 238, 144],
    [255, 0, 0],
    [139, 69, 19],
    [0, 100, 0],
];

/// Grayscale image with predicted classes blended at 50% and ground-truth
/// instance borders in white.
pub fn render_overlay(image: &crate::Tensor, pred: &Mask, truth: &Mask) -> Result<Raster, EvalError> {
    if pred.dims() != truth.dims() {
        return Err(EvalError::DimMismatch {
            pred: pred.dims(),
            truth: truth.dims(),
        });
    }
    let (h, w) = pred.dims();
    let gray = image.data();
    let t = truth.data();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = (gray[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            let tc = t[i];
            let border = tc != 0
                && (y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || t[i - w] != tc
                    || t[i + w] != tc
                    || t[i - 1] != tc
                    || t[i + 1] != tc);
            let rgb = if border {
                [255; 3]
            } else {
                match pred.data()[i] {
                    0 => [g; 3],
                    c => {
                        let col = CLASS_COLORS[(c as usize).min(CLASS_COLORS.len() - 1)];
                        col.map(|v| ((v as u16 + g as u16 + 1) / 2) as u8)
                    }
                }
            };
            pixels.extend_from_slice(&rgb);
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        pixels,
    })
}

/// Writes `report.csv`, `instances.csv`, `summary.txt` and, if requested,
/// `overlays/<id>.ppm`.
pub fn write_outputs(
    dir: &Path,
    report: &EvaluationReport,
    samples: &[Sample],
    preds: Option<&[Mask]>,
) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), report_csv(report))?;
    std::fs::write(dir.join("instances.csv"), instances_csv(report))?;
    std::fs::write(dir.join("summary.txt"), summary_text(report))?;
    if let Some(preds) = preds {
        let od = dir.join("overlays");
        std::fs::create_dir_all(&od)?;
        for (s, p) in samples.iter().zip(preds) {
            let path = od.join(format!("{}.ppm", s.id));
            let raster = render_overlay(&s.image, p, &s.mask)?;
            pnm::write(&path, &raster).map_err(|source| EvalError::Pnm {
                path: path.display().to_string(),
                source,
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(h: usize, w: usize, px: &[(usize, usize, u8)]) -> Mask {
        let mut m = Mask::background(h, w);
        for &(y, x, c) in px {
            m.set(y, x, c);
        }
        m
    }

    #[test]
    fn threshold_is_strict() {
        let mut m = Mask::background(8, 8);
        for i in 0..20 {
            m.data_mut()[i] = 1;
        }
        assert_eq!(image_level_label(&m, 20), Verdict::DefectFree);
        m.data_mut()[20] = 3;
        assert_eq!(image_level_label(&m, 20), Verdict::Defective);
        assert_eq!(image_level_label(&Mask::background(4, 4), 20), Verdict::DefectFree);
    }

    #[test]
    fn metric_formulas() {
        let c = ConfusionCounts {
            tp: 88,
            fn_: 12,
            fp: 14,
            tn: 86,
        };
        assert!((c.recall().unwrap() - 0.88).abs() < 1e-12);
        assert!((c.precision().unwrap() - 88.0 / 102.0).abs() < 1e-12);
        assert!((c.specificity().unwrap() - 0.86).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_are_undefined() {
        let preds = [Verdict::DefectFree; 3];
        let truths = [Verdict::Defective, Verdict::Defective, Verdict::DefectFree];
        let c = confusion(&preds, &truths).unwrap();
        assert_eq!(c.recall(), Some(0.0));
        assert_eq!(c.precision(), None);
        assert_eq!(fmt_rate(c.precision()), "undefined");
        assert!(confusion(&preds[..1], &truths).is_err());
    }

    #[test]
    fn cross_class_credit() {
        let truth = mask_with(4, 4, &[(0, 0, 2), (0, 1, 2), (3, 3, 2)]);
        let pred = mask_with(4, 4, &[(0, 1, 4)]);
        let recs = instance_detection(&pred, &truth, Connectivity::Four).unwrap();
        assert_eq!(recs.len(), 2);
        assert!(recs[0].detected && !recs[0].detected_strict);
        assert!(!recs[1].detected);
    }

    #[test]
    fn diagonal_pixels_split_under_four_connectivity() {
        let m = mask_with(3, 3, &[(0, 0, 1), (1, 1, 1)]);
        assert_eq!(components(&m, 1, Connectivity::Four).len(), 2);
        assert_eq!(components(&m, 1, Connectivity::Eight).len(), 1);
    }

    #[test]
    fn overlay_colors() {
        let img = crate::Tensor::full(&[1, 3, 3], 0.5);
        let empty = Mask::background(3, 3);
        let r = render_overlay(&img, &empty, &empty).unwrap();
        assert!(r.pixels.chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
        let pred = mask_with(3, 3, &[(1, 1, 1)]);
        let r = render_overlay(&img, &pred, &empty).unwrap();
        let centre = &r.pixels[12..15];
        assert!(centre[2] > centre[0]);
        let encoded = pnm::encode(&r);
        assert!(encoded.starts_with(b"P6"));
        assert_eq!(pnm::decode(&encoded).unwrap(), r);
    }
}
