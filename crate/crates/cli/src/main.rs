mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trajocc::config::{ExperimentConfig, Preset};
use trajocc::error::Error;

#[derive(Parser, Debug)]
#[command(
    name = "trajocc",
    version,
    about = "Trajectory-conditioned sparse occupancy forecasting"
)]
#[command(after_long_help = commands::config_help())]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Starting configuration.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: Preset,
    /// Seed for data generation, initialization and evaluation noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Forecast horizons, comma separated (for example 1,2,3).
    #[arg(long, global = true, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Waypoint source: gt, zero or noisy:<sigma_xy>:<sigma_theta>.
    #[arg(long, global = true)]
    pub traj_source: Option<String>,
    /// Restrict targets and metrics to camera-visible voxels.
    #[arg(long, global = true, overrides_with = "no_mask")]
    pub mask: bool,
    /// Score every voxel.
    #[arg(long, global = true, overrides_with = "mask")]
    pub no_mask: bool,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
    /// Extra overrides, `section.field=value` in TOML syntax.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset on disk.
    MakeSynthetic {
        /// Training sequences (overrides data.train_sequences).
        #[arg(long)]
        train: Option<usize>,
        /// Validation sequences (overrides data.val_sequences).
        #[arg(long)]
        val: Option<usize>,
    },
    /// Train a model; checkpoints go to <out>/last and <out>/best.
    Train {
        /// Dataset directory; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override train.max_steps.
        #[arg(long)]
        max_steps: Option<usize>,
        /// Continue from <out>/last.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and write report.json and report.txt.
    Eval {
        /// Checkpoint directory.
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to score: train or val.
        #[arg(long, default_value = "val")]
        split: String,
        /// Feed ground truth back as the prediction.
        #[arg(long)]
        oracle: bool,
        /// Also write per-sample prediction dumps under <out>/dump.
        #[arg(long)]
        dump: bool,
        /// Also score these voxelization thresholds (sweep.json, sweep.txt).
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Forecast one sequence and write its prediction dump.
    Forecast {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory containing manifest.json.
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Run an ablation study and write ablation.json and ablation.txt.
    Ablate {
        /// trajectory or ensemble.
        #[arg(long)]
        study: trajocc::ablation::Study,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Horizon of the fixed-policy variant in the ensemble study.
        #[arg(long, default_value_t = 3)]
        fixed_horizon: usize,
        /// Override model.t_max (and the generated future frames).
        #[arg(long)]
        t_max: Option<usize>,
        /// Dataset directory; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render prediction dumps as PNG panels or reports as SVG curves.
    Plot {
        /// A dump directory, a report.json, or several reports.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Pixels per voxel.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
}

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Incompatible(_)
        | Error::Horizon { .. }
        | Error::TrajectoryLength { .. } => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Shape(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}

impl Global {
    /// Preset, then config file, then `--set`, then dedicated flags.
    pub fn resolve(&self) -> Result<ExperimentConfig, Error> {
        if self.device != "cpu" {
            return Err(Error::config(
                "device",
                format!(
                    "`{}` is not available; this build runs on cpu only",
                    self.device
                ),
            ));
        }
        let mut table: toml::Table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?;
                toml::from_str(&text)
                    .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for s in &self.set {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::config("set", format!("expected KEY=VALUE, got `{s}`")))?;
            // Bare words are taken as strings so `--set eval.traj_source=zero` works.
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let leaf = parts.pop().expect("split yields one part");
            let mut slot = &mut table;
            for part in parts {
                let entry = slot
                    .entry(part)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                slot = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
            }
            slot.insert(leaf.to_string(), value);
        }
        let text = toml::to_string(&table).expect("table serializes");
        let origin = self
            .config
            .clone()
            .unwrap_or_else(|| PathBuf::from("--set"));
        let mut cfg = ExperimentConfig::from_toml(self.preset, &text, &origin)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.data.seed = seed;
        }
        if let Some(h) = &self.horizons {
            cfg.eval.horizons.clone_from(h);
        }
        if let Some(t) = &self.traj_source {
            cfg.eval.traj_source = t.parse()?;
        }
        if self.mask {
            cfg.eval.use_mask = true;
            cfg.train.loss.use_mask = true;
        }
        if self.no_mask {
            cfg.eval.use_mask = false;
            cfg.train.loss.use_mask = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
