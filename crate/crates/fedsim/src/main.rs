//! `fedsim` command line: experiment runner, dataset export, results
//! pretty-printer, and standalone socket server/client roles for
//! multi-process federations.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use fedsim::client::ClientEngine;
use fedsim::datagen;
use fedsim::error::{FedSimError, Result};
use fedsim::experiments::{
    self, initial_params, trace_csv, ExecOptions, ExperimentConfig, RunMode,
};
use fedsim::transport::{
    self, config_digest, CarrierKind, ClientSession, RoundTrace,
};

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Federated-learning simulator: FedAvg, FedProx, DTP and DWA on a synthetic multi-task segmentation benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CarrierArg {
    Loopback,
    Socket,
}

impl From<CarrierArg> for CarrierKind {
    fn from(c: CarrierArg) -> Self {
        match c {
            CarrierArg::Loopback => CarrierKind::Loopback,
            CarrierArg::Socket => CarrierKind::Socket,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute every run in a config file and write results.csv, trace.csv
    /// and run.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Force one carrier for all federated runs.
        #[arg(long)]
        carrier: Option<CarrierArg>,
        /// Override the benchmark seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Load a pinned dataset file instead of generating the benchmark.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Bind address for socket-carrier runs (default: ephemeral localhost).
        #[arg(long)]
        listen: Option<SocketAddr>,
        /// Execute independent runs on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Generate the default benchmark and export it as a flat binary file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Pretty-print results.csv from a run output directory.
    Table {
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Serve one federated run over TCP and wait for remote clients.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Name of the federated run to serve.
        #[arg(long)]
        run: String,
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write trace.csv (optional).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
    /// Join a served run as one client over TCP.
    Client {
        #[arg(long)]
        config: PathBuf,
        /// Name of the federated run to join.
        #[arg(long)]
        run: String,
        #[arg(long = "client-id")]
        client_id: u32,
        #[arg(long)]
        connect: SocketAddr,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
}

fn main() {
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn find_federated_run<'a>(
    config: &'a ExperimentConfig,
    name: &str,
) -> Result<&'a experiments::RunConfig> {
    config
        .runs
        .iter()
        .find(|r| r.name == name && r.mode == RunMode::Federated)
        .ok_or_else(|| {
            FedSimError::Config(format!(
                "no federated run named {name:?}; available: {:?}",
                config
                    .runs
                    .iter()
                    .filter(|r| r.mode == RunMode::Federated)
                    .map(|r| r.name.as_str())
                    .collect::<Vec<_>>()
            ))
        })
}

fn write_trace_only(out: &Path, trace: &[RoundTrace], run_name: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    let traces = vec![(run_name.to_string(), trace.to_vec())];
    std::fs::write(out.join("trace.csv"), trace_csv(&traces, &timestamp))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            carrier,
            seed,
            data,
            listen,
            parallel,
        } => {
            let config = load_config(&config, seed)?;
            let datasets = match data {
                Some(path) => Some(datagen::import_datasets(&path)?),
                None => None,
            };
            let options = ExecOptions {
                carrier_override: carrier.map(Into::into),
                listen,
                parallel,
            };
            let output = experiments::execute(&config, &options, datasets)?;
            experiments::write_outputs(&out, &config, &output)?;
            let csv = std::fs::read_to_string(out.join("results.csv"))?;
            print!("{}", experiments::format_table(&csv)?);
            println!("\nwrote {}", out.display());
            Ok(())
        }
        Command::GenData { out, seed } => {
            let datasets = datagen::default_benchmark(seed)
                .iter()
                .map(datagen::generate)
                .collect::<Result<Vec<_>>>()?;
            datagen::export_datasets(&datasets, &out)?;
            let sizes: Vec<usize> = datasets.iter().map(|d| d.n_train()).collect();
            println!(
                "wrote {} (3 clients, train sizes {:?}, seed {seed})",
                out.display(),
                sizes
            );
            Ok(())
        }
        Command::Table { out_dir } => {
            let csv = std::fs::read_to_string(out_dir.join("results.csv"))?;
            print!("{}", experiments::format_table(&csv)?);
            Ok(())
        }
        Command::Serve {
            config,
            run,
            listen,
            seed,
            out,
            timeout_secs,
        } => {
            let config = load_config(&config, seed)?;
            let run_cfg = find_federated_run(&config, &run)?;
            let agg = config.aggregation_config(run_cfg);
            let init = initial_params(config.seed, &config.model);
            let digest = config_digest(&agg, &config.model);
            let listener = std::net::TcpListener::bind(listen)
                .map_err(|e| FedSimError::Startup(format!("bind {listen}: {e}")))?;
            println!("serving run {run:?} on {listen} ({} rounds)", agg.rounds);
            let (server, trace) = transport::serve_on_listener(
                listener,
                agg,
                init,
                3,
                digest,
                Duration::from_secs(timeout_secs),
                None,
            )?;
            match server.select_best() {
                Ok(best) => println!(
                    "done: best round {} with mean validation dice {:.4}",
                    best.round, best.score
                ),
                Err(_) => println!("done: no completed rounds"),
            }
            if let Some(out) = out {
                write_trace_only(&out, &trace, &run)?;
                println!("wrote {}", out.join("trace.csv").display());
            }
            Ok(())
        }
        Command::Client {
            config,
            run,
            client_id,
            connect,
            seed,
            timeout_secs,
        } => {
            let config = load_config(&config, seed)?;
            let run_cfg = find_federated_run(&config, &run)?;
            let spec = config
                .benchmark_specs()
                .into_iter()
                .find(|s| s.client_id == client_id)
                .ok_or_else(|| {
                    FedSimError::Config(format!("no benchmark client {client_id}"))
                })?;
            let dataset = datagen::generate(&spec)?;
            let agg = config.aggregation_config(run_cfg);
            let digest = config_digest(&agg, &config.model);
            let engine = ClientEngine::new(
                config.client_config(run_cfg, client_id),
                config.model.clone(),
                dataset,
            );
            let mut session = ClientSession::new(engine, digest);
            println!("client {client_id} joining {connect} for run {run:?}");
            transport::join_socket(connect, &mut session, Duration::from_secs(timeout_secs))?;
            println!("client {client_id} finished");
            Ok(())
        }
    }
}
