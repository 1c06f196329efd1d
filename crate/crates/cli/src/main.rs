//! `fedsilo`: generate site data, simulate, serve, join and sweep.

mod report;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use fedsilo::data::{
    generate_benchmark_site, load_skeleton_file, write_skeleton_file, DataError,
};
use fedsilo::netproto::{self, JoinOptions, NetError};
use fedsilo::orchestrator::{run_experiment, ConfigError, ExperimentConfig, MetricsLog, OrchestratorError};

#[derive(Parser)]
#[command(name = "fedsilo", version, about = "Cross-silo federated learning for skeleton behavior recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one skeleton file per site plus a manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment in-process.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "metrics.csv")]
        out_csv: PathBuf,
        #[arg(long, default_value = "summary.json")]
        out_json: PathBuf,
    },
    /// Coordinate a networked experiment.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, default_value = "metrics.csv")]
        out_csv: PathBuf,
        #[arg(long, default_value = "summary.json")]
        out_json: PathBuf,
    },
    /// Take part in a networked experiment as one site.
    Join {
        #[arg(long)]
        server: String,
        #[arg(long)]
        client_id: u32,
        /// Skeleton file holding this site's samples.
        #[arg(long)]
        data: PathBuf,
        /// Local copy of the experiment config; the server's must match it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a grid of experiments over parameter values and seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `dotted.key=v1,v2,...`; repeat for a cross product.
        #[arg(long = "param")]
        params: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{context}: {source}")]
    Output {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Run(#[from] OrchestratorError),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 4,
            CliError::Net(e) => match e {
                NetError::Config(_) | NetError::Run(OrchestratorError::Config(_)) => 2,
                NetError::Data(_) | NetError::Shape(_) | NetError::Run(OrchestratorError::Data(_)) => 4,
                _ => 3,
            },
            CliError::Run(OrchestratorError::Config(_)) => 2,
            CliError::Run(OrchestratorError::Data(_)) => 4,
            CliError::Output { .. } | CliError::Run(_) => 1,
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Output {
            context: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Output {
        context: path.display().to_string(),
        source,
    })
}

/// Reads and validates a config; `FEDSILO_SEED` overrides the seed.
fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Ok(s) = std::env::var("FEDSILO_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("FEDSILO_SEED is not an integer: `{s}`")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The resolved config written next to an output file.
fn resolved_path(out: &Path) -> PathBuf {
    out.with_extension("resolved.toml")
}

fn write_metrics(
    cfg: &ExperimentConfig,
    log: &MetricsLog,
    csv: &Path,
    json: &Path,
) -> Result<(), CliError> {
    write(csv, &log.to_csv())?;
    write(json, &log.summary_json())?;
    write(&resolved_path(csv), &cfg.to_toml())?;
    print!("{}", report::table(cfg, &[(cfg.strategy.kind.name().to_string(), log.summary())]));
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out).map_err(|e| {
        CliError::Data(format!("{}: {e}", out.display()))
    })?;
    let d = &cfg.data;
    let mut sites = Vec::new();
    for (site, classes) in d.site_classes().into_iter().enumerate() {
        let samples = generate_benchmark_site(d, site, cfg.seed);
        let file = format!("site_{site}.skel");
        write_skeleton_file(&out.join(&file), d.frames, d.joints, d.num_classes(), &samples)?;
        sites.push(serde_json::json!({
            "client_id": site,
            "file": file,
            "samples": samples.len(),
            "classes": classes,
        }));
    }
    let manifest = serde_json::json!({
        "seed": cfg.seed,
        "frames": d.frames,
        "joints": d.joints,
        "classes": d.num_classes(),
        "total_samples": d.site_samples.iter().sum::<usize>(),
        "sites": sites,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(out.join("manifest.json"), text)
        .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml())
        .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    println!("wrote {} sites to {}", cfg.data.num_sites(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Simulate {
            config,
            out_csv,
            out_json,
        } => {
            let cfg = load_config(config.as_deref())?;
            let log = run_experiment(&cfg)?;
            write_metrics(&cfg, &log, &out_csv, &out_json)
        }
        Command::Serve {
            config,
            bind,
            out_csv,
            out_json,
        } => {
            let cfg = load_config(config.as_deref())?;
            let log = netproto::serve(&cfg, &bind)?;
            write_metrics(&cfg, &log, &out_csv, &out_json)
        }
        Command::Join {
            server,
            client_id,
            data,
            config,
        } => {
            let opts = match config {
                Some(p) => JoinOptions::from_config(&load_config(Some(&p))?),
                None => JoinOptions::default(),
            };
            let site = load_skeleton_file(&data)?;
            let outcome = netproto::join(&server, client_id, site, &opts)?;
            log::info!("client {client_id}: {} rounds, {} bytes sent", outcome.rounds, outcome.bytes_sent);
            Ok(())
        }
        Command::Sweep {
            config,
            params,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let grid = sweep::parse_grid(&params).map_err(CliError::Config)?;
            let result = sweep::run_sweep(&cfg, &grid, seeds)?;
            write(&out.join("combined.csv"), &result.combined_csv)?;
            write(&out.join("summary.csv"), &result.summary_csv)?;
            write(&out.join("summary.txt"), &result.summary_table)?;
            write(&out.join("config.resolved.toml"), &cfg.to_toml())?;
            print!("{}", result.summary_table);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
