//! Generates the synthetic dataset and writes it to disk.
//!
//! ```text
//! cargo run --release --example gen_data [out_dir] [seed]
//! ```

use std::path::PathBuf;

use segimprint::data::{self, DatasetConfig};
use segimprint::pipeline::split_counts_table;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/example-data".into()));
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let dataset = data::gen_dataset(&DatasetConfig::default(), seed)?;
    data::write_dataset(&out, &dataset)?;
    print!("{}", split_counts_table(&dataset));

    let areas: Vec<usize> = dataset.test.iter().map(|s| s.mask.count_foreground()).collect();
    let defective = areas.iter().filter(|&&a| a > 0).count();
    println!(
        "test: {defective} defective (smallest {} px), {} defect-free",
        areas.iter().filter(|&&a| a > 0).min().unwrap_or(&0),
        areas.len() - defective
    );
    println!("written to {}", out.display());
    Ok(())
}
