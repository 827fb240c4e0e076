//! Experiment front-end: parses run configs, executes local-only baselines
//! and federated runs across strategies, and emits the comparison table and
//! per-round weight/loss traces as CSV.
//!
//! The results table has a fixed layout bound to the three-client benchmark:
//! organ Dice on clients A and C, organ and tumor Dice on client B, and
//! their unweighted mean.

use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;

use crate::client::{ClientConfig, ClientEngine, ClientMode, Optimizer};
use crate::datagen::{self, ClientDataset, CLASS_ORGAN, CLASS_TUMOR};
use crate::error::{FedSimError, Result};
use crate::model::{self, ModelSpec};
use crate::param_math::ParamVector;
use crate::server::{AggregationConfig, Strategy};
use crate::transport::{
    run_federation, Carrier, CarrierKind, FederationResult, FederationSetup, FrameSink, RoundTrace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    LocalOnly,
    Federated,
}

/// One fully-resolved run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub mode: RunMode,
    /// Which client trains standalone (local-only runs).
    pub client: Option<u32>,
    pub client_mode: ClientMode,
    pub strategy: Strategy,
    pub mu: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub kpi_exponent: f64,
    pub temperature: f64,
    pub xi: u32,
    pub normalize_xi: bool,
    pub rounds: u32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub share_fraction: f64,
    pub carrier: CarrierKind,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub runs: Vec<RunConfig>,
}

// Raw TOML shapes; everything optional falls back to defaults at resolve time.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    benchmark: RawBenchmark,
    model: Option<RawModel>,
    #[serde(default, rename = "run")]
    runs: Vec<RawRun>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBenchmark {
    seed: u64,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    patch_radius: Option<usize>,
    hidden_units: Option<usize>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    name: String,
    mode: String,
    client: Option<u32>,
    client_mode: Option<String>,
    strategy: Option<String>,
    mu: Option<f64>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    kpi_exponent: Option<f64>,
    #[serde(rename = "T")]
    temperature: Option<f64>,
    xi: Option<u32>,
    normalize_xi: Option<bool>,
    rounds: Option<u32>,
    local_epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    share_fraction: Option<f64>,
    carrier: Option<String>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| FedSimError::Config(e.to_string()))?;
        let mut model = ModelSpec::default();
        if let Some(m) = raw.model {
            if let Some(r) = m.patch_radius {
                model.patch_radius = r;
            }
            if let Some(h) = m.hidden_units {
                model.hidden_units = h;
            }
        }
        model.validate()?;
        let mut runs = Vec::with_capacity(raw.runs.len());
        for r in raw.runs {
            runs.push(resolve_run(r)?);
        }
        let cfg = ExperimentConfig {
            seed: raw.benchmark.seed,
            model,
            runs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.runs.len() {
            return Err(FedSimError::Config("run names must be unique".into()));
        }
        for run in &self.runs {
            match run.mode {
                RunMode::LocalOnly => {
                    if run.client.is_none() {
                        return Err(FedSimError::Config(format!(
                            "run {}: local-only runs need a client index",
                            run.name
                        )));
                    }
                }
                RunMode::Federated => {
                    self.client_config(run, 0).validate().map_err(|e| {
                        FedSimError::Config(format!("run {}: {e}", run.name))
                    })?;
                    self.aggregation_config(run).validate().map_err(|e| {
                        FedSimError::Config(format!("run {}: {e}", run.name))
                    })?;
                }
            }
        }
        Ok(())
    }

    pub fn client_config(&self, run: &RunConfig, client_id: u32) -> ClientConfig {
        ClientConfig {
            client_id,
            mode: run.client_mode,
            mu: run.mu,
            gamma: run.gamma,
            alpha: run.alpha,
            kpi_exponent: run.kpi_exponent,
            local_epochs: run.local_epochs,
            batch_size: run.batch_size,
            lr: run.lr,
            optimizer: Optimizer::default(),
            share_fraction: run.share_fraction,
            seed: self.seed,
        }
    }

    pub fn aggregation_config(&self, run: &RunConfig) -> AggregationConfig {
        AggregationConfig {
            strategy: run.strategy,
            temperature: run.temperature,
            xi: run.xi,
            normalize_xi: run.normalize_xi,
            min_clients: 3,
            rounds: run.rounds,
        }
    }
}

fn resolve_run(raw: RawRun) -> Result<RunConfig> {
    let mode = match raw.mode.as_str() {
        "local-only" => RunMode::LocalOnly,
        "federated" => RunMode::Federated,
        other => {
            return Err(FedSimError::Config(format!(
                "run {}: unknown mode {other:?}",
                raw.name
            )))
        }
    };
    let client_mode = match raw.client_mode.as_deref() {
        None | Some("plain") => ClientMode::Plain,
        Some("fedprox") => ClientMode::FedProx,
        Some("dtp") => ClientMode::Dtp,
        Some(other) => {
            return Err(FedSimError::Config(format!(
                "run {}: unknown client_mode {other:?}",
                raw.name
            )))
        }
    };
    let strategy = match raw.strategy.as_deref() {
        None | Some("fedavg") => Strategy::FedAvg,
        Some("dwa") => Strategy::Dwa,
        Some(other) => {
            return Err(FedSimError::Config(format!(
                "run {}: unknown strategy {other:?}",
                raw.name
            )))
        }
    };
    let carrier = match raw.carrier.as_deref() {
        None | Some("loopback") => CarrierKind::Loopback,
        Some("socket") => CarrierKind::Socket,
        Some(other) => {
            return Err(FedSimError::Config(format!(
                "run {}: unknown carrier {other:?}",
                raw.name
            )))
        }
    };
    // client-side defaults come from one place
    let d = ClientConfig::new(0, ClientMode::Plain, 0);
    Ok(RunConfig {
        name: raw.name,
        mode,
        client: raw.client,
        client_mode,
        strategy,
        mu: raw.mu.unwrap_or(0.01),
        gamma: raw.gamma.unwrap_or(d.gamma),
        alpha: raw.alpha.unwrap_or(d.alpha),
        kpi_exponent: raw.kpi_exponent.unwrap_or(d.kpi_exponent),
        temperature: raw.temperature.unwrap_or(2.0),
        xi: raw.xi.unwrap_or(1),
        normalize_xi: raw.normalize_xi.unwrap_or(false),
        rounds: raw.rounds.unwrap_or(60),
        local_epochs: raw.local_epochs.unwrap_or(d.local_epochs),
        batch_size: raw.batch_size.unwrap_or(d.batch_size),
        lr: raw.lr.unwrap_or(d.lr),
        share_fraction: raw.share_fraction.unwrap_or(d.share_fraction),
        carrier,
    })
}

/// The four benchmark score columns.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RowScores {
    pub client_a_organ: f64,
    pub client_b_organ: f64,
    pub client_b_tumor: f64,
    pub client_c_organ: f64,
}

impl RowScores {
    pub fn all_avg(&self) -> f64 {
        (self.client_a_organ + self.client_b_organ + self.client_b_tumor + self.client_c_organ)
            / 4.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultsTable {
    pub rows: Vec<(String, RowScores)>,
}

/// The shared evaluation path: hard Dice of one model on every client's test
/// split. Both local-only and federated runs report through this function.
pub fn evaluate_model(
    params: &ParamVector,
    model_spec: &ModelSpec,
    datasets: &[ClientDataset],
) -> Result<RowScores> {
    check_benchmark_shape(datasets)?;
    let mut organ = [0.0f64; 3];
    let mut tumor_b = 0.0;
    for (i, ds) in datasets.iter().enumerate() {
        let images: Vec<&[f64]> = ds.test.iter().map(|s| &s.image[..]).collect();
        let pred = model::predict_labels(params, model_spec, &images, ds.height, ds.width)?;
        let pred_flat: Vec<u8> = pred.into_iter().flatten().collect();
        let true_flat: Vec<u8> = ds
            .test
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect();
        organ[i] = model::dice_score(&pred_flat, &true_flat, CLASS_ORGAN)?;
        if i == 1 {
            tumor_b = model::dice_score(&pred_flat, &true_flat, CLASS_TUMOR)?;
        }
    }
    Ok(RowScores {
        client_a_organ: organ[0],
        client_b_organ: organ[1],
        client_b_tumor: tumor_b,
        client_c_organ: organ[2],
    })
}

fn check_benchmark_shape(datasets: &[ClientDataset]) -> Result<()> {
    if datasets.len() != 3 {
        return Err(FedSimError::Usage(format!(
            "benchmark needs exactly 3 client datasets, got {}",
            datasets.len()
        )));
    }
    if !datasets[1].label_space.contains(&CLASS_TUMOR) {
        return Err(FedSimError::Usage(
            "client B must carry tumor labels".into(),
        ));
    }
    Ok(())
}

/// Shared initial parameters for every run of an experiment, drawn small and
/// uniform from the benchmark seed.
pub fn initial_params(seed: u64, model_spec: &ModelSpec) -> ParamVector {
    let mut rng = datagen::derive_rng(seed, 0, datagen::RNG_TAG_INIT);
    ParamVector::new(
        (0..model_spec.param_count())
            .map(|_| rng.random_range(-0.3..0.3))
            .collect(),
    )
    .expect("finite init")
}

/// Trains one client standalone for `rounds * local_epochs` epochs (fresh
/// optimizer and schedule every `local_epochs`, exactly like one federated
/// round) and evaluates the final model on all clients' test splits.
pub fn run_local_baseline(
    config: &ExperimentConfig,
    run: &RunConfig,
    client_index: usize,
    datasets: &[ClientDataset],
    init: &ParamVector,
) -> Result<(ParamVector, RowScores)> {
    check_benchmark_shape(datasets)?;
    let dataset = datasets
        .get(client_index)
        .ok_or_else(|| FedSimError::Config(format!("run {}: no client {client_index}", run.name)))?
        .clone();
    let mut cfg = config.client_config(run, dataset.client_id);
    cfg.share_fraction = 1.0; // dense self-updates; nothing is transmitted
    let mut engine = ClientEngine::new(cfg, config.model.clone(), dataset);
    let dim = config.model.param_count();
    let mut params = init.clone();
    for round in 1..=run.rounds {
        let report = engine
            .local_train(&params, round)
            .map_err(|e| FedSimError::Config(format!("run {}: {e}", run.name)))?;
        params.add_assign(&report.update.densify(dim)?)?;
    }
    let scores = evaluate_model(&params, &config.model, datasets)?;
    Ok((params, scores))
}

/// Executes a federated run and evaluates the best global model on all
/// clients' test splits.
pub fn run_federated(
    config: &ExperimentConfig,
    run: &RunConfig,
    datasets: &[ClientDataset],
    init: &ParamVector,
    carrier: Carrier,
    frame_sink: Option<FrameSink>,
) -> Result<(FederationResult, RowScores)> {
    check_benchmark_shape(datasets)?;
    let clients = datasets
        .iter()
        .map(|ds| (config.client_config(run, ds.client_id), ds.clone()))
        .collect();
    let result = run_federation(FederationSetup {
        server_cfg: config.aggregation_config(run),
        model_spec: config.model.clone(),
        clients,
        initial_params: init.clone(),
        carrier,
        frame_sink,
    })?;
    let scores = evaluate_model(&result.best_params, &config.model, datasets)?;
    Ok((result, scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub results: ResultsTable,
    pub traces: Vec<(String, Vec<RoundTrace>)>,
}

/// Execution switches coming from the command line.
#[derive(Debug, Clone, Default)]
pub struct ExecOptions {
    /// Force one carrier for every federated run.
    pub carrier_override: Option<CarrierKind>,
    /// Bind address for socket-carrier runs (ephemeral localhost otherwise).
    pub listen: Option<std::net::SocketAddr>,
    /// Run independent runs on separate threads. Results are unchanged; runs
    /// are internally deterministic.
    pub parallel: bool,
}

fn carrier_for(run: &RunConfig, options: &ExecOptions) -> Carrier {
    let kind = options.carrier_override.unwrap_or(run.carrier);
    match kind {
        CarrierKind::Loopback => Carrier::Loopback,
        CarrierKind::Socket => Carrier::Socket {
            listen: options.listen,
            handshake_timeout: crate::transport::DEFAULT_HANDSHAKE_TIMEOUT,
        },
    }
}

enum RunArtifacts {
    Local(RowScores),
    Federated(RowScores, Vec<RoundTrace>),
}

fn execute_one(
    config: &ExperimentConfig,
    run: &RunConfig,
    options: &ExecOptions,
    datasets: &[ClientDataset],
    init: &ParamVector,
) -> Result<RunArtifacts> {
    match run.mode {
        RunMode::LocalOnly => {
            let client = run.client.expect("validated") as usize;
            let (_, scores) = run_local_baseline(config, run, client, datasets, init)?;
            Ok(RunArtifacts::Local(scores))
        }
        RunMode::Federated => {
            let carrier = carrier_for(run, options);
            let (federation, scores) =
                run_federated(config, run, datasets, init, carrier, None)?;
            Ok(RunArtifacts::Federated(scores, federation.trace))
        }
    }
}

/// Runs every configured run against the shared benchmark datasets.
/// `datasets` substitutes an imported benchmark for the generated one.
pub fn execute(
    config: &ExperimentConfig,
    options: &ExecOptions,
    datasets: Option<Vec<ClientDataset>>,
) -> Result<ExperimentOutput> {
    let datasets = match datasets {
        Some(d) => d,
        None => config
            .benchmark_specs()
            .iter()
            .map(datagen::generate)
            .collect::<Result<Vec<_>>>()?,
    };
    check_benchmark_shape(&datasets)?;
    if options.parallel && options.listen.is_some() {
        return Err(FedSimError::Config(
            "--parallel cannot share one fixed --listen address".into(),
        ));
    }
    let init = initial_params(config.seed, &config.model);

    let artifacts: Vec<Result<RunArtifacts>> = if options.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = config
                .runs
                .iter()
                .map(|run| scope.spawn(|| execute_one(config, run, options, &datasets, &init)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(FedSimError::Config("run panicked".into())))
                })
                .collect()
        })
    } else {
        config
            .runs
            .iter()
            .map(|run| execute_one(config, run, options, &datasets, &init))
            .collect()
    };

    let mut results = ResultsTable::default();
    let mut traces = Vec::new();
    for (run, artifact) in config.runs.iter().zip(artifacts) {
        match artifact? {
            RunArtifacts::Local(scores) => results.rows.push((run.name.clone(), scores)),
            RunArtifacts::Federated(scores, trace) => {
                results.rows.push((run.name.clone(), scores));
                traces.push((run.name.clone(), trace));
            }
        }
    }
    Ok(ExperimentOutput { results, traces })
}

impl ExperimentConfig {
    pub fn benchmark_specs(&self) -> Vec<datagen::ClientDatasetSpec> {
        datagen::default_benchmark(self.seed)
    }
}

// ---------------------------------------------------------------------------
// Output files: results.csv, trace.csv, run.json. The CSVs start with a
// timestamp comment line; everything after it is deterministic for a given
// config and seed. Floats are printed with 4 decimals.
// ---------------------------------------------------------------------------

pub fn results_csv(results: &ResultsTable, timestamp: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# generated {timestamp}");
    let _ = writeln!(
        out,
        "run,client_a_organ,client_b_organ,client_b_tumor,client_c_organ,all_avg"
    );
    for (name, s) in &results.rows {
        let _ = writeln!(
            out,
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4}",
            s.client_a_organ,
            s.client_b_organ,
            s.client_b_tumor,
            s.client_c_organ,
            s.all_avg()
        );
    }
    out
}

pub fn trace_csv(traces: &[(String, Vec<RoundTrace>)], timestamp: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# generated {timestamp}");
    let _ = writeln!(out, "run,round,client,weight,avg_loss,val_dice,loss_scale");
    for (run, rounds) in traces {
        for row in rounds {
            for c in &row.clients {
                let _ = writeln!(
                    out,
                    "{run},{},{},{:.4},{:.4},{:.4},{:.4}",
                    row.round, c.client_id, c.weight, c.avg_loss, c.val_dice, c.loss_scale
                );
            }
        }
    }
    out
}

/// Writes results.csv, trace.csv and run.json into `out_dir`.
pub fn write_outputs(
    out_dir: &Path,
    config: &ExperimentConfig,
    output: &ExperimentOutput,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let timestamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    std::fs::write(
        out_dir.join("results.csv"),
        results_csv(&output.results, &timestamp),
    )?;
    std::fs::write(
        out_dir.join("trace.csv"),
        trace_csv(&output.traces, &timestamp),
    )?;
    let run_json = serde_json::json!({
        "seed": config.seed,
        "model": config.model,
        "benchmark": config.benchmark_specs(),
        "runs": config.runs,
    });
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&run_json).expect("serializable config") + "\n",
    )?;
    Ok(())
}

/// Renders results.csv content as an aligned text table.
pub fn format_table(csv: &str) -> Result<String> {
    let mut rows: Vec<Vec<String>> = Vec::new();
    for line in csv.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|s| s.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(FedSimError::Usage("empty results table".into()));
    }
    let cols = rows[0].len();
    let mut widths = vec![0usize; cols];
    for row in &rows {
        if row.len() != cols {
            return Err(FedSimError::Usage("ragged results table".into()));
        }
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<width$}", width = widths[0]);
            } else {
                let _ = write!(out, "  {cell:>width$}", width = widths[c]);
            }
        }
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    Ok(out)
}
