//! Runs the whole experiment: data, both backbones, two imprint events,
//! evaluation after every stage.
//!
//! ```text
//! cargo run --release --example reproduce [out_dir] [--quick]
//! ```
//!
//! `--quick` trains for 3 epochs on 60 cells and finishes in well under a
//! minute; the default config takes several minutes.

use std::path::PathBuf;

use segimprint::pipeline::{reproduce, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| "target/example-reproduce".into());
    let mut config = RunConfig::default();
    if quick {
        config.epochs = 3;
        config.train_samples = 60;
    }
    let summary = reproduce(&config, &out, &mut |line| {
        if !line.contains("epoch") {
            eprintln!("{line}");
        }
    })?;
    for b in &summary.backbones {
        let last = b.loss_history.last().copied().unwrap_or(f64::NAN);
        println!("{}: final training loss {last:.5}", b.kind.name());
    }
    println!("outputs in {}", out.display());
    Ok(())
}
