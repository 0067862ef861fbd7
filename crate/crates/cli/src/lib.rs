//! Command-line front end: simulate, kernel, gw, train, evaluate, cluster,
//! embed and pipeline. Every command writes a run manifest next to its output.

pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use tppgw::{GwConfig, SubsetMode, TrainConfig};

use crate::commands::{
    cmd_cluster, cmd_embed, cmd_evaluate, cmd_gw, cmd_kernel, cmd_simulate, cmd_train, flag_header, parse_sigma, resolve_plan,
    Context, KernelArgs, Preset,
};
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "tppgw", version, about = "Temporal point processes with a Gromov-Wasserstein regularizer")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). `--threads 1` is bitwise reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct HeaderFlags {
    /// Number of event types, when the dataset has no header file.
    #[arg(long)]
    pub num_types: Option<usize>,
    /// Observation horizon, when the dataset has no header file.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset (JSONL plus header file).
    Simulate {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 100)]
        per_cluster: usize,
    },
    /// Nonparametric sequence kernel as CSV.
    Kernel {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        header: HeaderFlags,
        #[arg(long, default_value = "singleton")]
        mode: String,
        /// `auto` (median distance) or a positive bandwidth.
        #[arg(long, default_value = "auto")]
        sigma: String,
        /// Square the distance inside the exponent.
        #[arg(long)]
        squared: bool,
    },
    /// Transport plan between two kernel CSVs.
    Gw {
        #[arg(long)]
        k1: PathBuf,
        #[arg(long)]
        k2: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the model; writes checkpoint, report and per-epoch metrics.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        header: HeaderFlags,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Log-likelihood per event and next-type accuracy.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        header: HeaderFlags,
    },
    /// Spectral clustering of a kernel CSV, optionally scored against labels.
    Cluster {
        #[arg(long)]
        kernel: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        header: HeaderFlags,
    },
    /// Export sequence embeddings as CSV.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        header: HeaderFlags,
    },
    /// simulate -> train -> evaluate -> cluster, ending in summary.json.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| CliError::Config("--out is required".into()))
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let ctx = Context {
        seed: cli.seed,
        threads: cli.threads,
        argv,
    };
    match cli.threads {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli, &ctx))
        }
        None => dispatch(cli, &ctx),
    }
}

fn dispatch(cli: &Cli, ctx: &Context) -> Result<()> {
    let out = require_out(&cli.out)?;
    match &cli.command {
        Command::Simulate {
            plan,
            preset,
            per_cluster,
        } => {
            let resolved = resolve_plan(plan.as_deref(), *preset, *per_cluster, ctx.seed)?;
            let inputs: Vec<PathBuf> = plan.iter().cloned().collect();
            let data = cmd_simulate(ctx, &resolved, &inputs, out)?;
            println!("wrote {} sequences ({} events) to {}", data.len(), data.total_events(), out.display());
        }
        Command::Kernel {
            data,
            header,
            mode,
            sigma,
            squared,
        } => {
            let args = KernelArgs {
                mode: mode.parse::<SubsetMode>()?,
                sigma: parse_sigma(sigma)?,
                power: if *squared {
                    tppgw::DistancePower::Squared
                } else {
                    tppgw::DistancePower::Unsquared
                },
            };
            let sigma = cmd_kernel(ctx, data, flag_header(header.num_types, header.horizon)?, &args, out)?;
            println!("sigma = {}", io::fmt_f64(sigma));
        }
        Command::Gw { k1, k2, config } => {
            let cfg: GwConfig = match config {
                Some(p) => io::read_config(p)?,
                None => GwConfig::default(),
            };
            let v = cmd_gw(ctx, k1, k2, &cfg, out)?;
            println!("gw_squared = {}", io::fmt_f64(v));
        }
        Command::Train { data, header, config } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => io::read_config(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = ctx.seed {
                cfg.seed = s;
            }
            let report = cmd_train(ctx, data, flag_header(header.num_types, header.horizon)?, &cfg, out)?;
            if let Some(n) = report.mean_nll.last() {
                println!("final mean NLL = {}", io::fmt_f64(*n));
            }
        }
        Command::Evaluate { model, data, header } => {
            let e = cmd_evaluate(ctx, model, data, flag_header(header.num_types, header.horizon)?, out)?;
            println!("ELL = {}  ACC = {}", io::fmt_f64(e.ell), io::fmt_f64(e.acc));
        }
        Command::Cluster {
            kernel,
            k,
            labels,
            header,
        } => {
            let h = flag_header(header.num_types, header.horizon)?;
            let r = cmd_cluster(ctx, kernel, *k, labels.as_deref().map(|p| (p, h)), out)?;
            if let (Some(n), Some(ri)) = (r.nmi, r.rand_index) {
                println!("NMI = {}  RI = {}", io::fmt_f64(n), io::fmt_f64(ri));
            }
        }
        Command::Embed { model, data, header } => {
            let n = cmd_embed(ctx, model, data, flag_header(header.num_types, header.horizon)?, out)?;
            println!("wrote {n} embeddings to {}", out.display());
        }
        Command::Pipeline { config } => {
            let s = pipeline::cmd_pipeline(ctx, config, out)?;
            println!("baseline NMI = {}", io::fmt_f64(s.baseline.nmi));
            for t in &s.by_tau {
                println!(
                    "tau = {}: ELL = {} ACC = {} NMI = {} RI = {}",
                    t.tau,
                    io::fmt_f64(t.ell),
                    io::fmt_f64(t.acc),
                    io::fmt_f64(t.nmi),
                    io::fmt_f64(t.rand_index)
                );
            }
        }
    }
    Ok(())
}
