use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dad::checkpoint::Checkpoint;
use dad::config::{Profile, RunConfig};
use dad::{ablation, dataset, run};

#[derive(Parser)]
#[command(name = "dad", version, about = "Difference-aware decoder for binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Profile::Paper)]
        profile: Profile,
        /// Override one key, e.g. `--set optim.epochs=3`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a directory with images/ and masks/.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where metrics.csv and summary.txt go (default: the data directory's eval/ subfolder).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the predicted map and a heatmap overlay for one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also write the guide map and intermediate refined maps.
        #[arg(long)]
        all_stages: bool,
    },
    /// Train and evaluate every variant of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Print the analytical receptive fields of the context modules.
    RfAnalyze {
        #[arg(long, default_value_t = 32)]
        branch_channels: usize,
    },
    /// Write synthetic image/mask pairs to disk.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            profile,
            overrides,
            resume,
        } => {
            let cfg = RunConfig::load(&config, profile, &overrides)?;
            let out = run::train(&cfg, &run::TrainOptions { resume, no_artifacts: false })?;
            if let Some(p) = out.final_checkpoint {
                println!("checkpoint: {}", p.display());
            }
            if let Some(p) = out.loss_curve {
                println!("loss curve: {}", p.display());
            }
        }
        Command::Eval { ckpt, data, out } => {
            let c = Checkpoint::load(&ckpt)?;
            let net = c.restore_network().with_context(|| format!("loading {}", ckpt.display()))?;
            let report = run::evaluate_dir(&net, &data, c.config.data.image_size)?;
            let out = out.unwrap_or_else(|| data.join("eval"));
            let (csv, summary) = run::write_report(&report, &out)?;
            print!("{}", report.summary());
            println!("metrics: {}\nsummary: {}", csv.display(), summary.display());
        }
        Command::Predict {
            ckpt,
            image,
            out,
            all_stages,
        } => {
            let c = Checkpoint::load(&ckpt)?;
            let net = c.restore_network().with_context(|| format!("loading {}", ckpt.display()))?;
            for p in run::predict(&net, c.config.data.image_size, &image, &out, all_stages)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { grid } => {
            let g = ablation::GridFile::load(&grid)?;
            let (rows, path) = ablation::run_grid(&g)?;
            let failed = rows.iter().filter(|r| r.status != ablation::Status::Ok).count();
            println!("{} variants, {failed} failed: {}", rows.len(), path.display());
        }
        Command::RfAnalyze { branch_channels } => print!("{}", dad::rf_report(branch_channels)),
        Command::GenSynthetic { out, count, size, seed } => {
            dataset::write_synthetic(&out, count, size, seed)?;
            println!("{count} pairs in {}", out.display());
        }
    }
    Ok(())
}
