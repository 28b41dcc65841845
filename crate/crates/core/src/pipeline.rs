//! The full experiment: generate data, train each backbone, imprint the two
//! new classes one after the other, and evaluate after every stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, base_class_names, DataError, Dataset, DatasetConfig, DefectKind, CATALOG_VERSION};
use crate::eval::{self, fmt_rate, Connectivity, EvalConfig, EvalError, EvaluationReport};
use crate::imprint::{self, EventOutcome, ImprintConfig, ImprintError};
use crate::model::{self, BackboneKind, ModelConfig, ModelError, ModelFormatError, SegModel};
use crate::train::{self, ClassWeightMode, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Order(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    ModelFormat(#[from] ModelFormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Imprint(#[from] ImprintError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl PipelineError {
    /// Process exit code: 2 usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use PipelineError as P;
        match self {
            P::Usage(_) | P::Order(_) => EXIT_USAGE,
            P::Data(DataError::Config(_)) => EXIT_USAGE,
            P::Data(DataError::Numerics(_)) => EXIT_NUMERIC,
            P::Train(TrainError::Config(_)) | P::Imprint(ImprintError::Config(_)) => EXIT_USAGE,
            P::Train(TrainError::NonFinite { .. } | TrainError::Numerics(_)) => EXIT_NUMERIC,
            P::Train(TrainError::Model(ModelError::Numerics(_))) | P::Model(ModelError::Numerics(_)) => EXIT_NUMERIC,
            P::Imprint(ImprintError::DegenerateProxy { .. }) => EXIT_NUMERIC,
            P::Model(ModelError::Config(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Every tunable of the pipeline, as one flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives data generation, weight initialization and shuffling.
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_samples: usize,
    pub train_black_spot_fraction: f64,
    pub train_max_extra_defects: usize,
    pub support_black_spot: usize,
    pub support_bad_soldering: usize,
    pub test_defective: usize,
    pub test_defect_free: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub decay: f32,
    pub epsilon: f32,
    pub class_weights: ClassWeightMode,
    pub alpha: f64,
    pub renormalize_after_blend: bool,
    pub weight_prenormalization: bool,
    pub blend_background: bool,
    pub threshold: usize,
    pub connectivity: Connectivity,
    pub overlays: bool,
    /// Backbones trained by `reproduce`, in report order.
    pub backbones: Vec<BackboneKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let i = ImprintConfig::default();
        let e = EvalConfig::default();
        Self {
            seed: 0,
            height: d.height,
            width: d.width,
            train_samples: d.train_samples,
            train_black_spot_fraction: d.train_black_spot_fraction,
            train_max_extra_defects: d.train_max_extra_defects,
            support_black_spot: d.support_black_spot,
            support_bad_soldering: d.support_bad_soldering,
            test_defective: d.test_defective,
            test_defect_free: d.test_defect_free,
            base_channels: m.base_channels,
            levels: m.levels,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            decay: t.decay,
            epsilon: t.epsilon,
            class_weights: t.class_weights,
            alpha: i.alpha,
            renormalize_after_blend: i.renormalize_after_blend,
            weight_prenormalization: i.weight_prenormalization,
            blend_background: i.blend_background,
            threshold: e.threshold,
            connectivity: e.connectivity,
            overlays: e.overlays,
            backbones: vec![BackboneKind::UnetLike, BackboneKind::FcnLike],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Usage(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies a `key=value` override. The value is read as JSON, falling
    /// back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<(), PipelineError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| PipelineError::Usage(format!("override `{assignment}` is not key=value")))?;
        let mut map = match serde_json::to_value(&*self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config is an object"),
        };
        if !map.contains_key(key) {
            return Err(PipelineError::Usage(format!("unknown config key `{key}`")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| PipelineError::Usage(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            height: self.height,
            width: self.width,
            train_samples: self.train_samples,
            train_black_spot_fraction: self.train_black_spot_fraction,
            train_max_extra_defects: self.train_max_extra_defects,
            support_black_spot: self.support_black_spot,
            support_bad_soldering: self.support_bad_soldering,
            test_defective: self.test_defective,
            test_defect_free: self.test_defect_free,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_height: self.height,
            input_width: self.width,
            image_channels: 1,
            base_channels: self.base_channels,
            levels: self.levels,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay: self.decay,
            epsilon: self.epsilon,
            seed: self.seed,
            class_weights: self.class_weights.clone(),
        }
    }

    pub fn imprint(&self) -> ImprintConfig {
        ImprintConfig {
            alpha: self.alpha,
            renormalize_after_blend: self.renormalize_after_blend,
            weight_prenormalization: self.weight_prenormalization,
            blend_background: self.blend_background,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            threshold: self.threshold,
            connectivity: self.connectivity,
            overlays: self.overlays,
        }
    }

    /// Checks every section before any stage runs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model().validate().map_err(|e| PipelineError::Usage(e.to_string()))?;
        self.train().validate()?;
        self.imprint().validate()?;
        if self.backbones.is_empty() {
            return Err(PipelineError::Usage("backbones must not be empty".into()));
        }
        Ok(())
    }
}

/// Text stamped into every output directory.
pub fn version_stamp() -> String {
    format!(
        "{} {}\nmodel format {}\nclass catalog {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        model::FORMAT_VERSION,
        CATALOG_VERSION
    )
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Generates a dataset into `out`. A non-empty `out` is refused unless
/// `force`, in which case the previous dataset files are replaced.
pub fn gen_data(out: &Path, config: &DatasetConfig, seed: u64, force: bool) -> Result<Dataset, PipelineError> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if non_empty && !force {
            return Err(PipelineError::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        for sub in ["images", "masks"] {
            let p = out.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    let dataset = data::gen_dataset(config, seed)?;
    data::write_dataset(out, &dataset)?;
    Ok(dataset)
}

pub fn split_counts_table(dataset: &Dataset) -> String {
    let mut s = format!("{:<10} {:>7}  {}\n", "split", "samples", "visible classes");
    let m = &dataset.manifest;
    writeln!(s, "{:<10} {:>7}  {}", "train", m.train.ids.len(), m.train.visible_classes.join(",")).unwrap();
    for e in &m.support {
        writeln!(
            s,
            "{:<10} {:>7}  {}",
            format!("support{}", e.event),
            e.ids.len(),
            e.visible_classes.join(",")
        )
        .unwrap();
    }
    writeln!(s, "{:<10} {:>7}  {}", "test", m.test.ids.len(), m.test.visible_classes.join(",")).unwrap();
    s
}

/// Builds a base model (background plus base classes) and trains it on the
/// training split.
pub fn train_base(
    dataset: &Dataset,
    kind: BackboneKind,
    config: &RunConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(SegModel, TrainReport), PipelineError> {
    let (h, w) = dataset.train[0].mask.dims();
    if (h, w) != (config.height, config.width) {
        return Err(PipelineError::Usage(format!(
            "dataset cells are {h}x{w} but the config asks for {}x{}",
            config.height, config.width
        )));
    }
    let mut model = SegModel::build(kind, config.model(), base_class_names())?;
    let report = train::train_with(&mut model, &dataset.train, &config.train(), on_epoch)?;
    Ok((model, report))
}

/// Class imprinted by each event.
pub fn event_class(event: u32) -> Option<DefectKind> {
    match event {
        1 => Some(DefectKind::BlackSpot),
        2 => Some(DefectKind::BadSoldering),
        _ => None,
    }
}

/// Runs imprint event 1 or 2. Event `n` expects a model holding exactly the
/// catalog classes before that event's class.
pub fn imprint_stage(
    model: &mut SegModel,
    dataset: &Dataset,
    event: u32,
    config: &ImprintConfig,
) -> Result<EventOutcome, PipelineError> {
    let kind = event_class(event).ok_or_else(|| PipelineError::Usage(format!("unknown imprint event {event}")))?;
    let expected = &data::CLASS_NAMES[..kind.index() as usize];
    if model.class_names != expected {
        let hint = if model.class_index(kind.name()).is_some() {
            format!("model already contains `{}`", kind.name())
        } else if event == 2 {
            "event 2 needs the output of event 1".to_string()
        } else {
            "event 1 needs a base model".to_string()
        };
        return Err(PipelineError::Order(format!(
            "cannot run imprint event {event} on a model with classes {:?}: {hint}",
            model.class_names
        )));
    }
    let (_, samples) = dataset
        .support_event(event)
        .ok_or_else(|| DataError::Manifest(format!("dataset has no support set for event {event}")))?;
    Ok(imprint::imprint_event(model, samples.to_vec(), kind.name(), kind.index(), config)?)
}

/// Evaluates on the test split, writing reports (and overlays) to `out`.
pub fn evaluate(
    model: &SegModel,
    dataset: &Dataset,
    config: &EvalConfig,
    out: Option<&Path>,
) -> Result<EvaluationReport, PipelineError> {
    let (report, preds) = eval::evaluate_with_predictions(model, &dataset.test, config)?;
    if let Some(dir) = out {
        let overlays = config.overlays.then_some(preds.as_slice());
        eval::write_outputs(dir, &report, &dataset.test, overlays)?;
    }
    Ok(report)
}

pub const STAGES: [&str; 3] = ["base", "imprint1", "imprint2"];

#[derive(Clone, Debug)]
pub struct BackboneResult {
    pub kind: BackboneKind,
    pub loss_history: Vec<f64>,
    pub class_weights: Vec<f32>,
    /// Evaluations after base training and after each imprint event.
    pub stages: Vec<EvaluationReport>,
    pub events: Vec<EventOutcome>,
}

#[derive(Clone, Debug)]
pub struct ReproduceSummary {
    pub out: PathBuf,
    pub backbones: Vec<BackboneResult>,
}

impl ReproduceSummary {
    pub fn backbone(&self, kind: BackboneKind) -> Option<&BackboneResult> {
        self.backbones.iter().find(|b| b.kind == kind)
    }
}

fn backbone_run(
    dataset: &Dataset,
    kind: BackboneKind,
    config: &RunConfig,
    dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<BackboneResult, PipelineError> {
    create_dir(dir)?;
    let name = kind.name();
    let (mut model, report) = train_base(dataset, kind, config, |e, l| {
        log(&format!("[{name}] epoch {e:>3} mean loss {l:.5}"));
    })?;
    model::save(&model, dir.join("model_base.imsg"))?;
    let loss_path = dir.join("loss.csv");
    train::write_loss_csv(&loss_path, &report.loss_history).map_err(io_err(&loss_path))?;
    let ecfg = config.eval();
    let icfg = config.imprint();
    let mut stages = vec![evaluate(&model, dataset, &ecfg, Some(&dir.join("eval_base")))?];
    let mut events = Vec::new();
    for event in [1u32, 2] {
        let outcome = imprint_stage(&mut model, dataset, event, &icfg)?;
        log(&format!(
            "[{name}] imprint event {event}: class {} -> slot {}, updated {:?}",
            model.class_names[outcome.new_class], outcome.new_class, outcome.updated
        ));
        events.push(outcome);
        model::save(&model, dir.join(format!("model_imprint{event}.imsg")))?;
        stages.push(evaluate(&model, dataset, &ecfg, Some(&dir.join(format!("eval_imprint{event}"))))?);
    }
    Ok(BackboneResult {
        kind,
        loss_history: report.loss_history,
        class_weights: report.class_weights,
        stages,
        events,
    })
}

/// Image-level and per-class tables for every backbone and stage.
pub fn comparison_tables(results: &[BackboneResult]) -> String {
    let mut s = String::from("Image-level results (%)\n");
    writeln!(s, "{:<8} {:<9} {:>9} {:>9} {:>11}", "backbone", "stage", "recall", "precision", "specificity").unwrap();
    for b in results {
        for (stage, r) in STAGES.iter().zip(&b.stages) {
            writeln!(
                s,
                "{:<8} {:<9} {:>9} {:>9} {:>11}",
                b.kind.name(),
                stage,
                fmt_rate(r.counts.recall()),
                fmt_rate(r.counts.precision()),
                fmt_rate(r.counts.specificity())
            )
            .unwrap();
        }
    }
    for (title, strict) in [("any defect class", false), ("same class only", true)] {
        writeln!(s, "\nInstance detection per class (%), credit for {title}").unwrap();
        write!(s, "{:<20}", "class").unwrap();
        for b in results {
            for stage in STAGES {
                write!(s, " {:>14}", format!("{}:{stage}", b.kind.name())).unwrap();
            }
        }
        s.push('\n');
        for kind in DefectKind::ALL {
            write!(s, "{:<20}", kind.name()).unwrap();
            for b in results {
                for r in &b.stages {
                    let c = r.class(kind.name()).expect("catalog class");
                    let rate = if !c.in_model {
                        Some(0.0)
                    } else if strict {
                        c.strict_rate()
                    } else {
                        c.rate()
                    };
                    write!(s, " {:>14}", fmt_rate(rate)).unwrap();
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn comparison_csv(results: &[BackboneResult]) -> String {
    let mut s = String::from("backbone,stage,recall,precision,specificity");
    for k in DefectKind::ALL {
        write!(s, ",{0},{0}_strict", k.name()).unwrap();
    }
    s.push('\n');
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    for b in results {
        for (stage, r) in STAGES.iter().zip(&b.stages) {
            write!(
                s,
                "{},{stage},{},{},{}",
                b.kind.name(),
                f(r.counts.recall()),
                f(r.counts.precision()),
                f(r.counts.specificity())
            )
            .unwrap();
            for k in DefectKind::ALL {
                let c = r.class(k.name()).expect("catalog class");
                let (a, b) = if c.in_model { (c.rate(), c.strict_rate()) } else { (Some(0.0), Some(0.0)) };
                write!(s, ",{},{}", f(a), f(b)).unwrap();
            }
            s.push('\n');
        }
    }
    s
}

/// Runs the whole experiment under `out`:
///
/// ```text
/// config.json  version.txt  comparison.txt  comparison.csv
/// data/                                  generated dataset
/// <backbone>/model_{base,imprint1,imprint2}.imsg  loss.csv
/// <backbone>/eval_{base,imprint1,imprint2}/      reports and overlays
/// ```
pub fn reproduce(config: &RunConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<ReproduceSummary, PipelineError> {
    config.validate()?;
    create_dir(out)?;
    write(&out.join("config.json"), config.to_json())?;
    write(&out.join("version.txt"), version_stamp())?;
    let dataset = gen_data(&out.join("data"), &config.dataset(), config.seed, true)?;
    log(&split_counts_table(&dataset));
    let mut results = Vec::new();
    for &kind in &config.backbones {
        results.push(backbone_run(&dataset, kind, config, &out.join(kind.name()), log)?);
    }
    let tables = comparison_tables(&results);
    write(&out.join("comparison.txt"), &tables)?;
    write(&out.join("comparison.csv"), comparison_csv(&results))?;
    log(&tables);
    Ok(ReproduceSummary {
        out: out.to_path_buf(),
        backbones: results,
    })
}
