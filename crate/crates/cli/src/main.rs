use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use deep_edmd::harness::{self, ExperimentConfig, ModelKind, Preset};

#[derive(Parser)]
#[command(name = "deep-edmd", version, about = "Koopman vehicle models and DE-MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Edmd,
    ElmEdmd,
    DeepEdmd,
    Mlp,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the data, initialization and batch-order seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base preset; a `preset` key in the config file wins when this is absent.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Args)]
struct DataArg {
    /// Corpus directory written by `simulate`; simulated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the episode corpus and write CSVs plus a manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its checkpoint and loss history.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Overrides model.kind.
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Multi-step RMSE and rollout error curves on the test episodes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// One or more checkpoints; each gets its own metric rows.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Window length; horizons above it are dropped.
        #[arg(long, default_value_t = 41)]
        p_eval: usize,
    },
    /// Random-layer robustness study for Deep EDMD and the MLP.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Prediction passes (defaults to robustness.repeats).
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Closed-loop DE-MPC on the vehicle plant.
    Mpc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode CSV whose states form the reference.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Overrides mpc.np.
        #[arg(long)]
        np: Option<usize>,
        /// Overrides mpc.nc.
        #[arg(long)]
        nc: Option<usize>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let preset = match (common.preset, &common.config) {
        (Some(PresetArg::Desk), _) => Preset::Desk,
        (Some(PresetArg::Paper), _) => Preset::Paper,
        (None, Some(path)) => ExperimentConfig::preset_in_file(path)?.unwrap_or(Preset::Desk),
        (None, None) => Preset::Desk,
    };
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), preset)
        .with_context(|| "loading the experiment configuration")?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn report<T: serde::Serialize>(out: &Path, summary: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(summary)?);
    log::info!("outputs written to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Simulate { common } => {
            let (cfg, out) = load(&common)?;
            report(&out, &harness::cmd_simulate(&cfg, &out)?)
        }
        Command::Train { common, data, model } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(m) = model {
                cfg.model.kind = match m {
                    ModelArg::Edmd => ModelKind::Edmd,
                    ModelArg::ElmEdmd => ModelKind::ElmEdmd,
                    ModelArg::DeepEdmd => ModelKind::DeepEdmd,
                    ModelArg::Mlp => ModelKind::Mlp,
                };
            }
            report(&out, &harness::cmd_train(&cfg, data.data.as_deref(), &out)?)
        }
        Command::Evaluate { common, data, checkpoint, p_eval } => {
            let (cfg, out) = load(&common)?;
            if p_eval == 0 {
                bail!("--p-eval must be positive");
            }
            report(&out, &harness::cmd_evaluate(&cfg, &checkpoint, data.data.as_deref(), p_eval, &out)?)
        }
        Command::Robustness { common, data, repeats } => {
            let (cfg, out) = load(&common)?;
            let repeats = repeats.unwrap_or(cfg.robustness.repeats);
            report(&out, &harness::cmd_robustness(&cfg, data.data.as_deref(), repeats, &out)?)
        }
        Command::Mpc { common, data, checkpoint, reference, np, nc } => {
            let (mut cfg, out) = load(&common)?;
            cfg.mpc.np = np.unwrap_or(cfg.mpc.np);
            cfg.mpc.nc = nc.unwrap_or(cfg.mpc.nc);
            cfg.mpc.validate()?;
            let s = harness::cmd_mpc(&cfg, &checkpoint, data.data.as_deref(), reference.as_deref(), &out)?;
            report(&out, &s)
        }
    }
}
