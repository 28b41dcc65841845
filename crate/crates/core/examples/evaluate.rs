//! Evaluates a saved model on the synthetic test split and writes
//! reports and overlays.
//!
//! ```text
//! cargo run --release --example evaluate <model.imsg> [out_dir]
//! ```

use std::path::PathBuf;

use segimprint::data::{gen_dataset, DatasetConfig};
use segimprint::eval::{evaluate_with_predictions, summary_text, write_outputs, EvalConfig};
use segimprint::model;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let Some(path) = args.next() else {
        eprintln!("usage: evaluate <model.imsg> [out_dir]");
        std::process::exit(2);
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example-eval".into()));
    let m = model::load(&path)?;
    let dataset = gen_dataset(&DatasetConfig::default(), 0)?;
    let (report, preds) = evaluate_with_predictions(&m, &dataset.test, &EvalConfig::default())?;
    write_outputs(&out, &report, &dataset.test, Some(&preds))?;
    print!("{}", summary_text(&report));

    let missed: Vec<&str> = report
        .images
        .iter()
        .filter(|r| r.truth != r.verdict)
        .map(|r| r.id.as_str())
        .collect();
    println!("\nmisclassified images: {missed:?}");
    println!("reports and overlays in {}", out.display());
    Ok(())
}
