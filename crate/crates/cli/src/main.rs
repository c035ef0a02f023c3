use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use reramlab::pipeline::{with_worker_pool, MapFormat, MapQuantity, Pipeline, RunManifest};
use reramlab::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "reramlab",
    version,
    about = "Digit-recognition experiments on simulated resistive crossbar arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory that receives all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's worker-pool size.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the digit classifier (retrying seeds under the accuracy gate).
    Train(Common),
    /// Map the trained classifier onto conductance-pair arrays.
    Map(Common),
    /// Apply the configured defects, writing defective stacks and masks.
    Inject {
        #[command(flatten)]
        common: Common,
        /// Apply only this entry of the config's defect list.
        #[arg(long)]
        defect: Option<usize>,
    },
    /// Run test-split inference on the clean and defective circuits.
    Infer(Common),
    /// Sweep defect size across pattern families and fault modes.
    Sweep(Common),
    /// Train correctors on the faulty circuit's output voltages.
    Correct(Common),
    /// Render one array quantity as CSV and/or PGM.
    ExportMap {
        #[command(flatten)]
        common: Common,
        /// Array index within the stack.
        #[arg(long)]
        array: usize,
        /// gap | g_plus | g_minus | defect_mask
        #[arg(long)]
        quantity: MapQuantity,
        /// csv | pgm | both
        #[arg(long, default_value = "both")]
        format: MapFormat,
        /// Render the stack with this defect entry applied.
        #[arg(long)]
        defect: Option<usize>,
    },
    /// Emit a flat resistor netlist of the (possibly defective) stack.
    ExportNetlist {
        #[command(flatten)]
        common: Common,
        /// Export the stack with this defect entry applied.
        #[arg(long)]
        defect: Option<usize>,
    },
    /// Full pipeline: every stage the config requests.
    Run(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c)
            | Command::Map(c)
            | Command::Infer(c)
            | Command::Sweep(c)
            | Command::Correct(c)
            | Command::Run(c) => c,
            Command::Inject { common, .. }
            | Command::ExportMap { common, .. }
            | Command::ExportNetlist { common, .. } => common,
        }
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let common = cli.command.common();
    let config_path = common.config.clone();
    let out = common.out.clone();
    let seed_flag = common.seed;
    let jobs_flag = common.jobs;
    let mut config = ExperimentConfig::load(&config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    if let Some(seed) = seed_flag {
        config.master_seed = seed;
    }
    if let Some(jobs) = jobs_flag {
        config.jobs = Some(jobs);
    }
    let command = cli.command;
    let jobs = config.jobs;
    let work_out = out.clone();
    let manifest = with_worker_pool(jobs, move || -> anyhow::Result<RunManifest> {
        let mut pipeline = Pipeline::new(config, &work_out)?;
        match &command {
            Command::Train(_) => pipeline.ensure_model()?,
            Command::Map(_) => pipeline.ensure_stack()?,
            Command::Inject { defect, .. } => match defect {
                Some(i) => {
                    pipeline.ensure_defective_stack(*i)?;
                }
                None => {
                    for i in 0..pipeline.config().defects.len() {
                        pipeline.ensure_defective_stack(i)?;
                    }
                }
            },
            Command::Infer(_) => pipeline.infer()?,
            Command::Sweep(_) => pipeline.sweep()?,
            Command::Correct(_) => pipeline.correct()?,
            Command::ExportMap {
                array,
                quantity,
                format,
                defect,
                ..
            } => {
                let written = pipeline.export_map(*array, *quantity, *format, *defect)?;
                for path in written {
                    println!("wrote {}", path.display());
                }
            }
            Command::ExportNetlist { defect, .. } => {
                let path = pipeline.export_netlist_file(*defect)?;
                println!("wrote {}", path.display());
            }
            Command::Run(_) => pipeline.run()?,
        }
        Ok(pipeline.finish()?)
    })??;
    println!("config hash {}", manifest.config_hash);
    for attempt in &manifest.train_attempts {
        println!(
            "train attempt seed {}: test accuracy {:.4}{}",
            attempt.init_seed,
            attempt.test_accuracy,
            if attempt.accepted { " (accepted)" } else { "" }
        );
    }
    if !manifest.cache_hits.is_empty() {
        println!("cached stages: {}", manifest.cache_hits.join(", "));
    }
    println!("{} artifacts under {}", manifest.artifacts.len(), out.display());
    Ok(())
}
