//! Python bindings for the simulator's main types and operations: parameter
//! algebra, aggregation weights, DTP weighting, the Dice metric, benchmark
//! generation, and an end-to-end federation driver.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fedsim::client::{kpi as kpi_rs, kpi_ema as kpi_ema_rs, ClientConfig, ClientMode, DtpState};
use fedsim::datagen::{self, ClientDatasetSpec};
use fedsim::experiments;
use fedsim::model::{self, ModelSpec};
use fedsim::param_math::{self, ParamVector, SparseUpdate};
use fedsim::server::{self, AggregationConfig, GlobalState, Strategy};
use fedsim::transport::{run_federation, Carrier, FederationSetup};

fn err(e: fedsim::FedSimError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Squared Euclidean distance between two equal-length parameter vectors.
#[pyfunction]
fn sq_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    let a = ParamVector::new(a).map_err(err)?;
    let b = ParamVector::new(b).map_err(err)?;
    param_math::sq_distance(&a, &b).map_err(err)
}

/// Keep the ceil(fraction * len) largest-magnitude coordinates of a delta,
/// ties broken toward the lower index. Returns (index, value) pairs with
/// strictly increasing indices.
#[pyfunction]
fn top_fraction_mask(delta: Vec<f64>, fraction: f64) -> PyResult<Vec<(u32, f64)>> {
    let delta = ParamVector::new(delta).map_err(err)?;
    Ok(param_math::top_fraction_mask(&delta, fraction, 1)
        .map_err(err)?
        .entries)
}

/// Dense weighted sum of sparse updates given as (index, value) lists.
#[pyfunction]
fn weighted_sum(
    updates: Vec<Vec<(u32, f64)>>,
    weights: Vec<f64>,
    dim: usize,
) -> PyResult<Vec<f64>> {
    let updates: Vec<SparseUpdate> = updates
        .into_iter()
        .map(|entries| SparseUpdate { entries, round: 1 })
        .collect();
    Ok(param_math::weighted_sum(&updates, &weights, dim)
        .map_err(err)?
        .into_vec())
}

/// FedAvg weights proportional to local training-set sizes.
#[pyfunction]
fn fedavg_weights(n: Vec<u64>) -> PyResult<Vec<f64>> {
    server::fedavg_weights(&n).map_err(err)
}

/// DWA weights from each client's last two round-averaged losses.
#[pyfunction]
#[pyo3(signature = (loss_prev, loss_prev2, temperature=2.0, xi=1, normalize_xi=false))]
fn dwa_weights(
    loss_prev: Vec<f64>,
    loss_prev2: Vec<f64>,
    temperature: f64,
    xi: u32,
    normalize_xi: bool,
) -> PyResult<Vec<f64>> {
    if loss_prev.len() != loss_prev2.len() {
        return Err(PyValueError::new_err("loss history lengths differ"));
    }
    let ids: Vec<u32> = (0..loss_prev.len() as u32).collect();
    let mut state = GlobalState::new(ParamVector::zeros(1), &ids);
    for (i, (l1, l2)) in loss_prev.iter().zip(&loss_prev2).enumerate() {
        state.loss_history.insert(i as u32, (*l1, *l2));
    }
    server::dwa_weights(&state, temperature, xi, normalize_xi).map_err(err)
}

/// DTP key performance index: batch_dice^exponent clamped into [1e-6, 1].
#[pyfunction]
fn kpi(batch_dice: f64, exponent: f64) -> PyResult<f64> {
    if !(0.0..=1.0).contains(&batch_dice) || exponent.is_nan() || exponent <= 0.0 {
        return Err(PyValueError::new_err(
            "need 0 <= batch_dice <= 1 and exponent > 0",
        ));
    }
    Ok(kpi_rs(batch_dice, exponent))
}

/// One exponential-average step of the KPI; `prev` of None initializes.
#[pyfunction]
#[pyo3(signature = (kappa, alpha, prev=None))]
fn kpi_ema(kappa: f64, alpha: f64, prev: Option<f64>) -> f64 {
    let state = match prev {
        Some(kappa_bar) => DtpState {
            kappa_bar,
            initialized: true,
        },
        None => DtpState::default(),
    };
    kpi_ema_rs(state, kappa, alpha).kappa_bar
}

/// DTP focal weight `-(1 - kbar)^gamma * log(kbar)`.
#[pyfunction]
fn dtp_weight(kappa_bar: f64, gamma: f64) -> f64 {
    fedsim::client::dtp_weight(kappa_bar, gamma)
}

/// Hard Dice overlap for one class over flat label arrays.
#[pyfunction]
fn dice_score(pred_labels: Vec<u8>, true_labels: Vec<u8>, class_id: u8) -> PyResult<f64> {
    model::dice_score(&pred_labels, &true_labels, class_id).map_err(err)
}

/// Per-client summary of one generated dataset.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct ClientSummary {
    #[pyo3(get)]
    client_id: u32,
    #[pyo3(get)]
    n_train: usize,
    #[pyo3(get)]
    n_val: usize,
    #[pyo3(get)]
    n_test: usize,
    #[pyo3(get)]
    label_space: Vec<u32>,
    #[pyo3(get)]
    has_tumor_labels: bool,
}

/// Generate the default three-client benchmark and summarize it.
#[pyfunction]
fn generate_benchmark(seed: u64) -> PyResult<Vec<ClientSummary>> {
    datagen::default_benchmark(seed)
        .iter()
        .map(|spec| {
            let ds = datagen::generate(spec).map_err(err)?;
            Ok(ClientSummary {
                client_id: ds.client_id,
                n_train: ds.train.len(),
                n_val: ds.val.len(),
                n_test: ds.test.len(),
                label_space: ds.label_space.iter().map(|&c| c as u32).collect(),
                has_tumor_labels: spec.has_tumor_labels,
            })
        })
        .collect()
}

/// Outcome of a federated run: best checkpoint info, the per-column test
/// Dice of the best model, and the flattened per-round trace.
#[pyclass]
struct FederationSummary {
    #[pyo3(get)]
    best_round: u32,
    #[pyo3(get)]
    best_score: f64,
    #[pyo3(get)]
    rounds: u32,
    /// (client_a_organ, client_b_organ, client_b_tumor, client_c_organ)
    #[pyo3(get)]
    test_dice: (f64, f64, f64, f64),
    #[pyo3(get)]
    all_avg: f64,
    /// (round, client, weight, avg_loss, val_dice, loss_scale)
    #[pyo3(get)]
    trace: Vec<(u32, u32, f64, f64, f64, f64)>,
}

/// Run a federation on the default benchmark (or a miniature version of it
/// when `quick` is set) and evaluate the best global model.
#[pyfunction]
#[pyo3(signature = (seed=1, strategy="fedavg", client_mode="plain", rounds=5, local_epochs=1,
                    lr=5e-4, mu=0.01, temperature=2.0, xi=2, share_fraction=0.25, quick=true))]
#[allow(clippy::too_many_arguments)]
fn run_federated(
    seed: u64,
    strategy: &str,
    client_mode: &str,
    rounds: u32,
    local_epochs: usize,
    lr: f64,
    mu: f64,
    temperature: f64,
    xi: u32,
    share_fraction: f64,
    quick: bool,
) -> PyResult<FederationSummary> {
    let strategy = match strategy {
        "fedavg" => Strategy::FedAvg,
        "dwa" => Strategy::Dwa,
        other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
    };
    let client_mode = match client_mode {
        "plain" => ClientMode::Plain,
        "fedprox" => ClientMode::FedProx,
        "dtp" => ClientMode::Dtp,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown client_mode {other:?}"
            )))
        }
    };

    let mut specs = datagen::default_benchmark(seed);
    if quick {
        for spec in specs.iter_mut() {
            *spec = ClientDatasetSpec {
                n_total: 10,
                image_size: 16,
                organ_radius_range: (3, 5),
                tumor_radius_range: (1, 2),
                ..spec.clone()
            };
        }
    }
    let datasets: Vec<_> = specs
        .iter()
        .map(|s| datagen::generate(s).map_err(err))
        .collect::<PyResult<_>>()?;
    let model_spec = ModelSpec::default();
    let init = experiments::initial_params(seed, &model_spec);

    let clients = datasets
        .iter()
        .map(|ds: &datagen::ClientDataset| {
            let mut cfg = ClientConfig::new(ds.client_id, client_mode, seed);
            cfg.mu = mu;
            cfg.lr = lr;
            cfg.local_epochs = local_epochs;
            cfg.share_fraction = share_fraction;
            (cfg, ds.clone())
        })
        .collect();
    let server_cfg = AggregationConfig {
        strategy,
        temperature,
        xi,
        normalize_xi: false,
        min_clients: 3,
        rounds,
    };
    let result = run_federation(FederationSetup {
        server_cfg,
        model_spec: model_spec.clone(),
        clients,
        initial_params: init,
        carrier: Carrier::Loopback,
        frame_sink: None,
    })
    .map_err(err)?;

    let scores = experiments::evaluate_model(&result.best_params, &model_spec, &datasets)
        .map_err(err)?;
    let trace = result
        .trace
        .iter()
        .flat_map(|row| {
            row.clients.iter().map(move |c| {
                (
                    row.round,
                    c.client_id,
                    c.weight,
                    c.avg_loss,
                    c.val_dice,
                    c.loss_scale,
                )
            })
        })
        .collect();
    Ok(FederationSummary {
        best_round: result.best_round,
        best_score: result.best_score,
        rounds,
        test_dice: (
            scores.client_a_organ,
            scores.client_b_organ,
            scores.client_b_tumor,
            scores.client_c_organ,
        ),
        all_avg: scores.all_avg(),
        trace,
    })
}

#[pymodule]
fn fedsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sq_distance, m)?)?;
    m.add_function(wrap_pyfunction!(top_fraction_mask, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_sum, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(dwa_weights, m)?)?;
    m.add_function(wrap_pyfunction!(kpi, m)?)?;
    m.add_function(wrap_pyfunction!(kpi_ema, m)?)?;
    m.add_function(wrap_pyfunction!(dtp_weight, m)?)?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(generate_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(run_federated, m)?)?;
    m.add_class::<ClientSummary>()?;
    m.add_class::<FederationSummary>()?;
    Ok(())
}
