//! Adds black spot and then bad soldering to a trained model from a few
//! support samples, without any gradient step.
//!
//! ```text
//! cargo run --release --example imprint [base.imsg]
//! ```
//!
//! Without a model path a UNet is trained for a few epochs first.

use segimprint::data::{base_class_names, gen_dataset, DatasetConfig, DefectKind};
use segimprint::eval::{evaluate_suite, fmt_rate, EvalConfig};
use segimprint::imprint::{imprint_event, ImprintConfig};
use segimprint::model::{self, BackboneKind, ModelConfig, SegModel};
use segimprint::train::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dataset = gen_dataset(&DatasetConfig::default(), 0)?;
    let mut m = match std::env::args().nth(1) {
        Some(path) => model::load(path)?,
        None => {
            let mut m = SegModel::build(BackboneKind::UnetLike, ModelConfig::default(), base_class_names())?;
            train(&mut m, &dataset.train, &TrainConfig { epochs: 5, ..TrainConfig::default() })?;
            m
        }
    };
    let show = |m: &SegModel| -> Result<(), Box<dyn std::error::Error>> {
        let r = evaluate_suite(m, &dataset.test, &EvalConfig::default())?;
        let rates: Vec<String> = r
            .classes
            .iter()
            .map(|c| format!("{} {:.0}%", c.class_name, 100.0 * r.detection_rate(&c.class_name)))
            .collect();
        println!("  specificity {}%  {}", fmt_rate(r.counts.specificity()), rates.join(", "));
        Ok(())
    };
    println!("base model {:?}", m.class_names);
    show(&m)?;
    for (i, kind) in DefectKind::NEW.into_iter().enumerate() {
        let support = dataset.support[i].clone();
        let k = support.len();
        let outcome = imprint_event(&mut m, support, kind.name(), kind.index(), &ImprintConfig::default())?;
        let updated: Vec<&str> = outcome.updated.iter().map(|&c| m.class_names[c].as_str()).collect();
        println!("imprinted {} from {k} samples; blended old classes {updated:?}", kind.name());
        show(&m)?;
    }
    Ok(())
}
