//! Command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use aird::experiment::ExperimentConfig;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::{load_config, parse_seed_range};
use crate::runner::run_seeds;

#[derive(Debug, Parser)]
#[command(name = "aird", version, about = "Active inverse reward design experiments and sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run simulated-designer experiments over a range of seeds.
    Run(RunArgs),
    /// Serve interactive sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML file with experiment settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds to run, e.g. `0..19` (inclusive) or `4`.
    #[arg(long, default_value = "0", value_parser = parse_seed_range)]
    pub seeds: std::ops::RangeInclusive<u64>,
    /// Output directory for metric files.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML file with the settings new sessions start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "AIRD_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flags that override individual configuration keys.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, value_parser = ["chilly", "flight"])]
    pub domain: Option<String>,
    #[arg(long, value_parser = ["discrete", "feature"])]
    pub query_type: Option<String>,
    #[arg(long, value_parser = ["greedy", "random", "random_search", "full_ird"])]
    pub selection: Option<String>,
    #[arg(long, value_parser = ["zeros", "optimized"])]
    pub fixed_weights: Option<String>,
    /// Candidates per discrete query, or free features per feature query.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub query_size: Option<u64>,
    #[arg(long)]
    pub n_queries: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_test_envs: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub true_space_size: Option<u64>,
    #[arg(long, value_parser = ["linear", "quadratic"])]
    pub true_space_kind: Option<String>,
    #[arg(long, value_parser = ["linear", "quadratic"])]
    pub inference_space_kind: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub pool_size: Option<u64>,
    #[arg(long)]
    pub pool_is_true_space: bool,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub grid_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_features: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n_flights: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub mi_samples: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub random_search_trials: Option<u64>,
}

fn enum_value<T: DeserializeOwned>(s: &str) -> T {
    serde_json::from_value(serde_json::Value::String(s.to_string())).expect("flag values are restricted by clap")
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.domain {
            cfg.domain = enum_value(v);
        }
        if let Some(v) = &self.query_type {
            cfg.query_type = enum_value(v);
        }
        if let Some(v) = &self.selection {
            cfg.selection = enum_value(v);
        }
        if let Some(v) = &self.fixed_weights {
            cfg.fixed_weights = enum_value(v);
        }
        if let Some(v) = &self.true_space_kind {
            cfg.true_space_kind = enum_value(v);
        }
        if let Some(v) = &self.inference_space_kind {
            cfg.inference_space_kind = Some(enum_value(v));
        }
        let counts = [
            (self.query_size, &mut cfg.query_size),
            (self.n_test_envs, &mut cfg.n_test_envs),
            (self.true_space_size, &mut cfg.true_space_size),
            (self.pool_size, &mut cfg.pool_size),
            (self.grid_size, &mut cfg.grid_size),
            (self.n_features, &mut cfg.n_features),
            (self.n_flights, &mut cfg.n_flights),
            (self.mi_samples, &mut cfg.mi_samples),
            (self.random_search_trials, &mut cfg.random_search_trials),
        ];
        for (flag, slot) in counts {
            if let Some(v) = flag {
                *slot = v as usize;
            }
        }
        if let Some(v) = self.n_queries {
            cfg.n_queries = v;
        }
        if self.pool_is_true_space {
            cfg.pool_is_true_space = true;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
            cfg.designer_beta = v;
        }
    }
}

/// File settings (or defaults) with flag overrides applied.
pub fn resolve_config(path: Option<&std::path::Path>, overrides: &Overrides) -> Result<ExperimentConfig, String> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate().map_err(|e| format!("invalid configuration: {e}"))?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), String> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let n = args.seeds.clone().count();
    run_seeds(&cfg, args.seeds, &args.out, |seed, m| {
        let last = m.final_step().expect("prior step is always recorded");
        eprintln!(
            "seed {seed}: final regret {:.4}, entropy {:.4}, cumulative regret {:.4}",
            last.regret,
            last.entropy,
            m.cumulative_regret()
        );
    })?;
    eprintln!("wrote {n} runs to {}", args.out.display());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<(), String> {
    let cfg = resolve_config(args.config.as_deref(), &args.overrides)?;
    let addr = format!("{}:{}", args.host, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| format!("cannot bind {addr}: {e}"))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, crate::service::router(cfg))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| e.to_string())
    })
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
