use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dcd_core::experiments::{export_grid, run_eval, run_train, run_verify, ExperimentConfig};
use dcd_core::model::{Checkpoint, EnergyModel};

#[derive(Parser)]
#[command(name = "dcd", version, about = "Energy-based model training by diffusion contrastive divergence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out_dir`
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.run.out_dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, summary.json and model.ckpt
    Train(Common),
    /// Score-matching loss (and denoising RMSE for image data) of a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Denoising RMSE sweep of a checkpoint on the configured image data
    Denoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated noise levels
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Normalized exp(f) on a square grid as CSV and PGM
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid covers [-h, h]²
        #[arg(long, default_value_t = 4.0)]
        half_width: f64,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        /// Time slice for time-conditioned checkpoints
        #[arg(long)]
        time: Option<f64>,
    },
    /// Numerical checks of the divergence identities; one line per property
    Verify(Common),
}

fn write_json(dir: Option<&Path>, name: &str, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        let p = dir.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let out = run_train(&cfg)?;
            let r = &out.record;
            println!("{}", serde_json::to_string_pretty(r)?);
            if r.diverged {
                eprintln!("run diverged: {}", r.divergence.as_deref().unwrap_or("unknown"));
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let model = Checkpoint::load(&checkpoint)?;
            let m = run_eval(&model, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            write_json(cfg.run.out_dir.as_deref(), "eval.json", &m)?;
        }
        Command::Denoise {
            common,
            checkpoint,
            sigmas,
        } => {
            let mut cfg = common.load()?;
            if cfg.dataset.name != "idx" {
                bail!("denoising needs image data: set dataset.name = \"idx\" and dataset.path");
            }
            if let Some(s) = sigmas {
                cfg.eval.denoise_sigmas = s;
            }
            let model = Checkpoint::load(&checkpoint)?;
            let m = run_eval(&model, &cfg)?;
            for p in &m.denoise {
                println!("sigma={} rmse={:.6}", p.sigma, p.rmse);
            }
            write_json(cfg.run.out_dir.as_deref(), "denoise.json", &m.denoise)?;
        }
        Command::Grid {
            common,
            checkpoint,
            half_width,
            resolution,
            time,
        } => {
            let cfg = common.load()?;
            let dir = cfg.run.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&dir)?;
            let model = Checkpoint::load(&checkpoint)?;
            let range = (-half_width, half_width);
            let grid = match &model {
                Checkpoint::Mlp(m) => export_grid(m, range, range, resolution)?,
                Checkpoint::Time(t) => {
                    let at = t.at(time.unwrap_or(0.0));
                    if at.input_dim() != 2 {
                        bail!("grid export needs a 2-D model");
                    }
                    export_grid(&at, range, range, resolution)?
                }
            };
            let (csv, pgm) = (dir.join("grid.csv"), dir.join("grid.pgm"));
            grid.write(Some(&csv), Some(&pgm))?;
            println!("wrote {} and {}", csv.display(), pgm.display());
        }
        Command::Verify(common) => {
            let cfg = common.load()?;
            let lines = run_verify(cfg.run.seed)?;
            for l in &lines {
                println!("{l}");
            }
            write_json(cfg.run.out_dir.as_deref(), "verify.json", &lines)?;
            return Ok(lines.iter().all(|l| l.pass));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
