//! Command-line front end over [`crate::pipeline`].

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data;
use crate::eval::summary_text;
use crate::model::{self, BackboneKind};
use crate::pipeline::{self, PipelineError, RunConfig};
use crate::train;

#[derive(Debug, Parser)]
#[command(name = "segimprint", version, about = "Few-shot class extension of segmentation models by weight imprinting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run config; keys not given keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            c.set(o)?;
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a base model on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: BackboneKind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Add the class of imprint event 1 (black_spot) or 2 (bad_soldering).
    Imprint {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        event: u32,
        /// Update rate for co-occurring old classes; 0 leaves them untouched.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a model on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full experiment for every configured backbone.
    Reproduce {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn read_dataset(dir: &Path) -> Result<data::Dataset, PipelineError> {
    if !dir.join(data::MANIFEST_FILE).is_file() {
        return Err(data::DataError::Manifest(format!("no dataset at {}", dir.display())).into());
    }
    Ok(data::read_dataset(dir)?)
}

fn loss_csv_path(model: &Path) -> PathBuf {
    model.with_extension("loss.csv")
}

pub fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::GenData { out, force, config } => {
            let c = config.resolve()?;
            let dataset = pipeline::gen_data(&out, &c.dataset(), c.seed, force)?;
            print!("{}", pipeline::split_counts_table(&dataset));
        }
        Command::Train {
            data,
            backbone,
            out,
            config,
        } => {
            let c = config.resolve()?;
            let dataset = read_dataset(&data)?;
            let (m, report) = pipeline::train_base(&dataset, backbone, &c, |e, l| {
                eprintln!("epoch {e:>3} mean loss {l:.5}");
            })?;
            model::save(&m, &out)?;
            let csv = loss_csv_path(&out);
            train::write_loss_csv(&csv, &report.loss_history).map_err(|source| PipelineError::Io {
                path: csv.display().to_string(),
                source,
            })?;
            println!("saved {} model with classes {:?} to {}", backbone.name(), m.class_names, out.display());
        }
        Command::Imprint {
            model: input,
            data,
            event,
            alpha,
            out,
            config,
        } => {
            let mut c = config.resolve()?;
            if let Some(a) = alpha {
                c.alpha = a;
            }
            let icfg = c.imprint();
            icfg.validate()?;
            let dataset = read_dataset(&data)?;
            let mut m = model::load(&input)?;
            let outcome = pipeline::imprint_stage(&mut m, &dataset, event, &icfg)?;
            model::save(&m, &out)?;
            let updated: Vec<&str> = outcome.updated.iter().map(|&i| m.class_names[i].as_str()).collect();
            println!(
                "imprinted `{}` (event {event}); updated old classes {:?}; model now has {} classes",
                m.class_names[outcome.new_class],
                updated,
                m.num_classes()
            );
        }
        Command::Eval {
            model: input,
            data,
            out,
            config,
        } => {
            let c = config.resolve()?;
            let dataset = read_dataset(&data)?;
            let m = model::load(&input)?;
            let report = pipeline::evaluate(&m, &dataset, &c.eval(), Some(&out))?;
            print!("{}", summary_text(&report));
        }
        Command::Reproduce { out, config } => {
            let c = config.resolve()?;
            pipeline::reproduce(&c, &out, &mut |line| eprintln!("{line}"))?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
