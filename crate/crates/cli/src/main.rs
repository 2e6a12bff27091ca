use std::path::PathBuf;
use std::process::ExitCode;

use branchy_gnn::harness::{
    cmd_dataset_build, cmd_dataset_inspect, cmd_latency, cmd_robustness, cmd_train, parse_grid, resolve_config, Overrides,
};
use branchy_gnn::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Early-exit point-cloud classification for device-edge co-inference.
#[derive(Parser)]
#[command(name = "branchy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data seed; the channel seed becomes SEED + 1.
    #[arg(long)]
    seed: Option<u64>,
    /// 40 classes, 1024 points and the larger model.
    #[arg(long)]
    paper_scale: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { out: self.out.clone(), seed: self.seed, paper_scale: self.paper_scale }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the three training stages.
    Train(Common),
    /// Accuracy of every exit across an SNR grid.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Comma-separated SNRs in dB.
        #[arg(long, allow_hyphen_values = true)]
        snr_grid: Option<String>,
    },
    /// Latency of every strategy across a bandwidth grid.
    Latency {
        #[command(flatten)]
        common: Common,
        /// Comma-separated bandwidths in Hz.
        #[arg(long)]
        bandwidth_grid: Option<String>,
        /// Skip the checkpoint and treat every exit as accurate.
        #[arg(long)]
        untrained: bool,
    },
    /// Build or inspect dataset caches.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build(Common),
    Inspect {
        /// A cache file written by `dataset build`.
        path: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let summary = cmd_train(&cfg)?;
            if let Some(last) = summary.log.last() {
                println!("final main accuracy {:.4}", last.main_accuracy);
                for (b, acc) in last.branch_accuracy.iter().enumerate() {
                    if let Some(acc) = acc {
                        println!("final branch{} accuracy {acc:.4}", b + 1);
                    }
                }
            }
            println!("wrote {}", summary.log_path.display());
        }
        Command::Robustness { common, snr_grid } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let grid = snr_grid.map(|g| parse_grid(&g, "--snr-grid")).transpose()?;
            for row in cmd_robustness(&cfg, grid.as_deref())? {
                let snr = row.snr_db.map_or_else(|| "noiseless".to_string(), |s| format!("{s} dB"));
                println!("{:<8} {snr:>10} {:.4}", row.exit, row.accuracy);
            }
        }
        Command::Latency { common, bandwidth_grid, untrained } => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let grid = bandwidth_grid.map(|g| parse_grid(&g, "--bandwidth-grid")).transpose()?;
            for point in cmd_latency(&cfg, grid.as_deref(), untrained)? {
                let best = point.reports.iter().find(|r| r.strategy == point.chosen).map_or(f64::NAN, |r| r.total_s);
                println!("{:>12.1} Hz  {:<14} {best:.6e} s", point.channel.bandwidth_hz, point.chosen.to_string());
            }
        }
        Command::Dataset(DatasetCommand::Build(common)) => {
            let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
            let data = cmd_dataset_build(&cfg)?;
            println!("{} train, {} test clouds in {}", data.train.len(), data.test.len(), cfg.output_dir.display());
        }
        Command::Dataset(DatasetCommand::Inspect { path }) => {
            let s = cmd_dataset_inspect(&path)?;
            println!("clouds {}", s.clouds);
            println!("points per cloud {}", s.points_per_cloud);
            println!("max radius {:.6}", s.max_radius);
            for (label, count) in s.per_label.iter().enumerate() {
                println!("label {label}: {count}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
