//! Command-line front end. Every command is a request to the service,
//! either at `--server` or in an embedded instance on a loopback port.

use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use forla_client::api::{
    CommRequest, CompareRequest, ErrorKind, EvaluateRequest, ExportRequest, GenDataRequest, TrainRequest,
};
use forla_client::{Client, ClientError};
use forla_core::adapters::AdapterKind;
use forla_core::harness::{output_dir, ExperimentConfig, Mode, Overrides};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "forla", version, about = "Federated object-centric learning on synthetic feature scenes")]
pub struct Cli {
    /// Base URL of a running service; an embedded one is started otherwise.
    #[arg(long, global = true, env = "FORLA_SERVER")]
    pub server: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and cache the synthetic train and held-out scenes.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one configuration and evaluate it.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rounds between checkpoints (0: final only).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: u64,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out scenes.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired comparison of several configurations over seeds.
    Compare {
        /// One file per mode; the first is the reference.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a client's adapted held-out features to a cache file.
    ExportFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value_t = 0)]
        client: u64,
    },
    /// Per-round traffic and parameter ratios.
    CommReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: std::net::SocketAddr,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment file; defaults apply to anything it leaves out.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub adapter: Option<AdapterKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// Output directory; beats `FORLA_OUT_DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            mode: self.mode,
            adapter: self.adapter,
            seed: self.seed,
            data_seed: self.data_seed,
            max_iters: self.max_iters,
        });
        Ok(cfg)
    }

    /// `--out`, then `FORLA_OUT_DIR`, then `fallback`.
    pub fn out_dir(&self, fallback: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| output_dir(fallback))
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Client(e) => match e.kind() {
                Some(ErrorKind::Config | ErrorKind::BadRequest) => EXIT_CONFIG,
                Some(ErrorKind::Numerical) => EXIT_NUMERICAL,
                _ => EXIT_FAILURE,
            },
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

async fn connect(server: Option<String>) -> anyhow::Result<Client> {
    match server {
        Some(url) => Ok(Client::new(url)),
        None => {
            let addr = forla_service::spawn_local().await.context("starting embedded server")?;
            Ok(Client::new(format!("http://{addr}")))
        }
    }
}

pub async fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Serve { addr } = cli.command {
        let listener = tokio::net::TcpListener::bind(addr).await.context("binding")?;
        println!("listening on {}", listener.local_addr().context("binding")?);
        forla_service::serve_on(listener).await.context("serving")?;
        return Ok(());
    }
    let client = connect(cli.server).await?;
    match cli.command {
        Command::Serve { .. } => unreachable!(),
        Command::GenData { cfg } => {
            let config = cfg.load()?;
            let out_dir = absolute(&cfg.out_dir(Path::new("data")))?;
            let r = client.gen_data(&GenDataRequest { config, out_dir }).await?;
            println!(
                "{} train and {} held-out scenes over {} domains, channels {:?}",
                r.train_scenes, r.test_scenes, r.domains, r.channels
            );
            println!("{}\n{}", r.train_path.display(), r.test_path.display());
        }
        Command::Train {
            cfg,
            checkpoint,
            checkpoint_every,
            resume,
        } => {
            let config = cfg.load()?;
            let fallback = PathBuf::from("runs").join(format!("{}-seed{}", config.mode, config.seed));
            let out = absolute(&cfg.out_dir(&fallback))?;
            let req = TrainRequest {
                config,
                out_dir: Some(out.clone()),
                checkpoint: checkpoint.as_deref().map(absolute).transpose()?,
                checkpoint_every,
                resume: resume.as_deref().map(absolute).transpose()?,
            };
            let r = client.train(&req).await?;
            print!("{}", r.report.to_table());
            print!("{}", r.comm.to_text());
            println!("iterations per client: {:?}", r.iterations);
            println!("outputs in {}", out.display());
        }
        Command::Evaluate { cfg, checkpoint } => {
            let config = cfg.load()?;
            let checkpoint = absolute(&checkpoint)?;
            let r = client.evaluate(&EvaluateRequest { config, checkpoint }).await?;
            print!("{}", r.report.to_table());
            if let Some(out) = &cfg.out {
                write(out, "metrics.csv", &r.report.to_csv().map_err(anyhow::Error::from)?)?;
                write(out, "metrics.txt", &r.report.to_table())?;
            }
        }
        Command::Compare { configs, seeds, out } => {
            let configs = configs.iter().map(|p| read_config(p)).collect::<Result<Vec<_>, _>>()?;
            let r = client.compare(&CompareRequest { configs, seeds }).await?;
            print!("{}", r.to_table());
            let dir = out.unwrap_or_else(|| output_dir(Path::new("runs/compare")));
            write(&dir, "compare.csv", &r.to_csv().map_err(anyhow::Error::from)?)?;
            write(&dir, "compare.txt", &r.to_table())?;
            println!("outputs in {}", dir.display());
        }
        Command::ExportFeatures {
            cfg,
            checkpoint,
            path,
            client: id,
        } => {
            let req = ExportRequest {
                config: cfg.load()?,
                checkpoint: absolute(&checkpoint)?,
                path: absolute(&path)?,
                client: id,
            };
            let r = client.export_features(&req).await?;
            println!(
                "client {} (domain {}): {} scenes of {}x{}x{} written to {}",
                r.client,
                r.domain,
                r.scenes,
                r.height,
                r.width,
                r.channels,
                r.path.display()
            );
        }
        Command::CommReport { cfg, checkpoint } => {
            let req = CommRequest {
                config: cfg.load()?,
                checkpoint: checkpoint.as_deref().map(absolute).transpose()?,
            };
            let r = client.comm_report(&req).await?;
            print!("{}", r.to_text());
            if let Some(out) = &cfg.out {
                write(out, "comm.txt", &r.to_text())?;
            }
        }
    }
    Ok(())
}
