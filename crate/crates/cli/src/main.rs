mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use countnet::data::Split;
use countnet::train_eval::GradModule;
use countnet::viz::Colormap;

/// Exemplar-free object counting: data synthesis, training and inference.
#[derive(Parser)]
#[command(name = "countnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (PNGs plus manifest.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Training scenes.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        val_count: usize,
        #[arg(long, default_value_t = 0)]
        test_count: usize,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes checkpoints, curves and the resolved config.
    Train {
        #[arg(long, env = "COUNTNET_DATA")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Build the variant of an ablation row (B0..B4).
        #[arg(long)]
        ablation: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, env = "COUNTNET_DATA")]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Run directory (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Count objects in one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write the similarity map, upsampled to the network input size.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heat")]
        colormap: ColormapArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// all, linear, backbone, exemplar_sim, dass or counter.
        #[arg(long, default_value = "all")]
        module: GradModule,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value = "runs/gradcheck")]
        out: PathBuf,
    },
    /// Train every requested ablation row under the same budget.
    Ablation {
        #[arg(long, env = "COUNTNET_DATA")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "B0,B1,B2,B3,B4")]
        rows: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ColormapArg {
    Gray,
    Heat,
}

impl From<ColormapArg> for Colormap {
    fn from(c: ColormapArg) -> Self {
        match c {
            ColormapArg::Gray => Colormap::Gray,
            ColormapArg::Heat => Colormap::Heat,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            out,
            count,
            val_count,
            test_count,
            seed,
            cfg,
        } => commands::synth(&out, [count, val_count, test_count], seed, &cfg),
        Command::Train {
            data,
            out,
            ablation,
            cfg,
        } => commands::train(&data, &out, ablation.as_deref(), &cfg),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
            cfg,
        } => commands::eval(&checkpoint, &data, split, out.as_deref(), &cfg),
        Command::Predict {
            checkpoint,
            image,
            heatmap,
            colormap,
            out,
            cfg,
        } => commands::predict(&checkpoint, &image, heatmap.as_deref(), colormap.into(), out.as_deref(), &cfg),
        Command::Gradcheck {
            module,
            threshold,
            batch,
            out,
        } => commands::gradcheck(module, threshold, batch, &out),
        Command::Ablation { data, out, rows, cfg } => commands::ablation(&data, &out, &rows, &cfg),
    };
    match result {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::GateFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
