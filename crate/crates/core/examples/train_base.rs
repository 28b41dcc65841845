//! Trains a base model on crack, microcrack and finger interruption.
//!
//! ```text
//! cargo run --release --example train_base [fcn|unet] [epochs] [out.imsg]
//! ```

use segimprint::data::{base_class_names, gen_dataset, DatasetConfig};
use segimprint::eval::{evaluate_suite, summary_text, EvalConfig};
use segimprint::model::{self, BackboneKind, ModelConfig, SegModel};
use segimprint::train::{train_with, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let kind: BackboneKind = args.next().unwrap_or_else(|| "fcn".into()).parse()?;
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5);
    let out = args.next().unwrap_or_else(|| format!("target/{}_base.imsg", kind.name()));

    let dataset = gen_dataset(&DatasetConfig::default(), 0)?;
    let mut m = SegModel::build(kind, ModelConfig::default(), base_class_names())?;
    let config = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let report = train_with(&mut m, &dataset.train, &config, |e, l| println!("epoch {e:>2}  loss {l:.5}"))?;
    println!("class weights {:?}", report.class_weights);
    model::save(&m, &out)?;
    println!("saved {out}\n");
    print!("{}", summary_text(&evaluate_suite(&m, &dataset.test, &EvalConfig::default())?));
    Ok(())
}
