//! Global-model owner: computes aggregation weights (FedAvg or DWA), applies
//! weighted sparse updates, tracks per-client loss history and the best
//! global checkpoint by mean client validation Dice.
//!
//! DWA weights follow the softmax-of-loss-ratio rule
//! `lambda_k = xi * exp(rho_k / T) / sum_i exp(rho_i / T)` with
//! `rho_k = L_{k,r-1} / L_{k,r-2}`; in the literal form the weights sum to
//! `xi`, which scales the aggregate update magnitude. `normalize_xi` restores
//! a sum of 1 for ablations.

use std::collections::BTreeMap;

use crate::client::RoundReport;
use crate::error::{FedSimError, Result};
use crate::param_math::{weighted_sum, ParamVector};

/// Losses below this are clamped before entering a DWA ratio.
const LOSS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    Dwa,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregationConfig {
    pub strategy: Strategy,
    /// DWA temperature T.
    pub temperature: f64,
    /// DWA impact factor xi.
    pub xi: u32,
    /// Divide DWA weights by xi so they sum to 1.
    pub normalize_xi: bool,
    pub min_clients: usize,
    pub rounds: u32,
}

impl AggregationConfig {
    pub fn fedavg(rounds: u32) -> Self {
        Self {
            strategy: Strategy::FedAvg,
            temperature: 2.0,
            xi: 1,
            normalize_xi: false,
            min_clients: 3,
            rounds,
        }
    }

    pub fn dwa(rounds: u32, temperature: f64, xi: u32) -> Self {
        Self {
            strategy: Strategy::Dwa,
            temperature,
            xi,
            normalize_xi: false,
            min_clients: 3,
            rounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_clients < 1 {
            return Err(FedSimError::Config("min_clients must be >= 1".into()));
        }
        if self.strategy == Strategy::Dwa
            && (self.temperature.is_nan() || self.temperature <= 0.0 || self.xi < 1)
        {
            return Err(FedSimError::Config(
                "dwa strategy requires temperature > 0 and xi >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Best checkpoint seen so far: the broadcast parameters whose mean client
/// validation Dice was highest.
#[derive(Debug, Clone, PartialEq)]
pub struct BestModel {
    pub round: u32,
    pub params: ParamVector,
    pub score: f64,
}

/// Server-side round state.
#[derive(Debug, Clone)]
pub struct GlobalState {
    /// The round currently in progress, 1-based.
    pub round: u32,
    pub global_params: ParamVector,
    /// Per client: (L_{k,r-1}, L_{k,r-2}), both initialized to 1 so the
    /// first-round ratio is 1.
    pub loss_history: BTreeMap<u32, (f64, f64)>,
    pub best: Option<BestModel>,
    /// Per round, per client (ascending id): the aggregation weight used.
    pub weight_trace: Vec<Vec<(u32, f64)>>,
}

impl GlobalState {
    pub fn new(initial: ParamVector, client_ids: &[u32]) -> Self {
        Self {
            round: 1,
            global_params: initial,
            loss_history: client_ids.iter().map(|&c| (c, (1.0, 1.0))).collect(),
            best: None,
            weight_trace: Vec::new(),
        }
    }
}

/// Static FedAvg weights proportional to local training-set sizes.
pub fn fedavg_weights(n: &[u64]) -> Result<Vec<f64>> {
    if n.is_empty() {
        return Err(FedSimError::Usage("fedavg_weights: no clients".into()));
    }
    if let Some(&bad) = n.iter().find(|&&nk| nk == 0) {
        return Err(FedSimError::Usage(format!(
            "fedavg_weights: sample count {bad} must be > 0"
        )));
    }
    let total = n.iter().sum::<u64>() as f64;
    Ok(n.iter().map(|&nk| nk as f64 / total).collect())
}

/// DWA weights for the current round, in ascending client-id order.
pub fn dwa_weights(
    state: &GlobalState,
    temperature: f64,
    xi: u32,
    normalize_xi: bool,
) -> Result<Vec<f64>> {
    let mut scaled = Vec::with_capacity(state.loss_history.len());
    for (&client, &(l_prev, l_prev2)) in &state.loss_history {
        let rho = l_prev.max(LOSS_FLOOR) / l_prev2.max(LOSS_FLOOR);
        if !rho.is_finite() {
            return Err(FedSimError::Protocol(format!(
                "non-finite loss ratio for client {client}"
            )));
        }
        scaled.push(rho / temperature);
    }
    // Shift by the maximum before exponentiating; the softmax is invariant
    // and the all-equal case then yields exactly xi / K.
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let xi_f = xi as f64;
    Ok(exps
        .iter()
        .map(|e| {
            let lambda = xi_f * e / denom;
            if normalize_xi {
                lambda / xi_f
            } else {
                lambda
            }
        })
        .collect())
}

/// One logical server. Aggregation is applied atomically in ascending
/// client-id order once enough reports for the current round are present.
#[derive(Debug)]
pub struct ServerEngine {
    pub cfg: AggregationConfig,
    pub state: GlobalState,
}

impl ServerEngine {
    pub fn new(cfg: AggregationConfig, initial: ParamVector, client_ids: &[u32]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            state: GlobalState::new(initial, client_ids),
            cfg,
        })
    }

    /// Aggregation weights for the given reports (must be sorted by client
    /// id), following the configured strategy.
    pub fn weights_for(&self, reports: &[RoundReport]) -> Result<Vec<f64>> {
        match self.cfg.strategy {
            Strategy::FedAvg => {
                let n: Vec<u64> = reports.iter().map(|r| r.n_samples as u64).collect();
                fedavg_weights(&n)
            }
            Strategy::Dwa => dwa_weights(
                &self.state,
                self.cfg.temperature,
                self.cfg.xi,
                self.cfg.normalize_xi,
            ),
        }
    }

    /// Applies one round of client updates: weighted-sums the sparse deltas
    /// into the global model, shifts the loss history, records the weight
    /// trace, and updates the best checkpoint from the reported validation
    /// scores (which grade the parameters broadcast this round).
    pub fn aggregate(&mut self, reports: &[RoundReport], weights: &[f64]) -> Result<()> {
        if reports.len() < self.cfg.min_clients {
            return Err(FedSimError::Usage(format!(
                "aggregate called with {} reports, need at least {}; callers must keep waiting",
                reports.len(),
                self.cfg.min_clients
            )));
        }
        if reports.len() != weights.len() {
            return Err(FedSimError::Usage(
                "aggregate: reports/weights length mismatch".into(),
            ));
        }
        let round = self.state.round;
        for r in reports {
            if r.round != round {
                return Err(FedSimError::Protocol(format!(
                    "client {} reported round {}, server is at round {round}",
                    r.client_id, r.round
                )));
            }
            if r.update.round != r.round {
                return Err(FedSimError::Protocol(format!(
                    "client {} update round {} does not match report round {}",
                    r.client_id, r.update.round, r.round
                )));
            }
        }
        let mut order: Vec<usize> = (0..reports.len()).collect();
        order.sort_by_key(|&i| reports[i].client_id);
        for pair in order.windows(2) {
            if reports[pair[0]].client_id == reports[pair[1]].client_id {
                return Err(FedSimError::Protocol(format!(
                    "duplicate report from client {}",
                    reports[pair[0]].client_id
                )));
            }
        }
        let sorted_reports: Vec<&RoundReport> = order.iter().map(|&i| &reports[i]).collect();
        let sorted_weights: Vec<f64> = order.iter().map(|&i| weights[i]).collect();

        let dim = self.state.global_params.len();
        let updates: Vec<_> = sorted_reports.iter().map(|r| r.update.clone()).collect();
        let delta = weighted_sum(&updates, &sorted_weights, dim)?;

        // The reported validation scores grade the parameters that were
        // broadcast for this round, i.e. the current global model.
        let score = sorted_reports
            .iter()
            .map(|r| r.mean_val_dice())
            .sum::<f64>()
            / sorted_reports.len() as f64;
        if self.state.best.as_ref().is_none_or(|b| score > b.score) {
            self.state.best = Some(BestModel {
                round,
                params: self.state.global_params.clone(),
                score,
            });
        }

        self.state.global_params.add_assign(&delta)?;
        for r in &sorted_reports {
            let entry = self
                .state
                .loss_history
                .entry(r.client_id)
                .or_insert((1.0, 1.0));
            entry.1 = entry.0;
            entry.0 = r.avg_loss.max(LOSS_FLOOR);
        }
        self.state.weight_trace.push(
            sorted_reports
                .iter()
                .zip(&sorted_weights)
                .map(|(r, &w)| (r.client_id, w))
                .collect(),
        );
        self.state.round += 1;
        Ok(())
    }

    /// The stored best checkpoint; ties were broken toward the earlier round
    /// at insertion time.
    pub fn select_best(&self) -> Result<&BestModel> {
        self.state
            .best
            .as_ref()
            .ok_or_else(|| FedSimError::Usage("select_best: no completed rounds".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param_math::{top_fraction_mask, SparseUpdate};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn report(
        client_id: u32,
        round: u32,
        update: SparseUpdate,
        avg_loss: f64,
        n_samples: u32,
        val: f64,
    ) -> RoundReport {
        RoundReport {
            client_id,
            round,
            update,
            avg_loss,
            n_samples,
            val_dice_per_class: vec![(1, val)],
            iterations: 1,
            mean_loss_scale: 1.0,
        }
    }

    fn empty_update(round: u32) -> SparseUpdate {
        SparseUpdate {
            entries: vec![(0, 0.0)],
            round,
        }
    }

    #[test]
    fn test_fedavg_weights_table_sizes() {
        let w = fedavg_weights(&[48, 165, 18]).unwrap();
        assert!((w[0] - 0.2078).abs() < 1e-4);
        assert!((w[1] - 0.7143).abs() < 1e-4);
        assert!((w[2] - 0.0779).abs() < 1e-4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(fedavg_weights(&[10, 10, 10]).unwrap(), vec![1.0 / 3.0; 3]);
        assert_eq!(fedavg_weights(&[1]).unwrap(), vec![1.0]);
        assert!(fedavg_weights(&[3, 0]).is_err());
        assert!(fedavg_weights(&[]).is_err());
    }

    #[test]
    fn test_fedavg_weights_scale_invariant() {
        let a = fedavg_weights(&[48, 165, 18]).unwrap();
        let b = fedavg_weights(&[480, 1650, 180]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn test_dwa_round_one_is_xi_over_k_exactly() {
        let state = GlobalState::new(ParamVector::zeros(4), &[0, 1, 2]);
        let w = dwa_weights(&state, 2.0, 2, false).unwrap();
        assert_eq!(w, vec![2.0 / 3.0; 3]);
        let wn = dwa_weights(&state, 2.0, 2, true).unwrap();
        assert_eq!(wn, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn test_dwa_high_temperature_is_uniform() {
        let mut state = GlobalState::new(ParamVector::zeros(4), &[0, 1, 2]);
        state.loss_history.insert(0, (3.0, 0.5));
        state.loss_history.insert(1, (0.2, 4.0));
        state.loss_history.insert(2, (1.0, 1.0));
        let w = dwa_weights(&state, 1e6, 2, false).unwrap();
        for lambda in w {
            assert!((lambda - 2.0 / 3.0).abs() < 1e-4);
        }
    }

    #[test]
    fn test_dwa_softmax_hand_example() {
        let mut state = GlobalState::new(ParamVector::zeros(4), &[0, 1]);
        state.loss_history.insert(0, (2.0, 1.0)); // rho = 2
        state.loss_history.insert(1, (1.0, 1.0)); // rho = 1
        let w = dwa_weights(&state, 2.0, 1, false).unwrap();
        assert!((w[0] - 0.6225).abs() < 1e-4, "{w:?}");
        assert!((w[1] - 0.3775).abs() < 1e-4);
    }

    #[test]
    fn test_dwa_sums_to_xi_and_sorts_like_rho() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for xi in [1u32, 2, 3] {
            let mut state = GlobalState::new(ParamVector::zeros(4), &[0, 1, 2, 3]);
            for c in 0..4u32 {
                state
                    .loss_history
                    .insert(c, (rng.random_range(0.01..2.0), rng.random_range(0.01..2.0)));
            }
            let w = dwa_weights(&state, 2.0, xi, false).unwrap();
            assert!((w.iter().sum::<f64>() - xi as f64).abs() < 1e-9);

            let rho: Vec<f64> = state
                .loss_history
                .values()
                .map(|&(l1, l2)| l1 / l2)
                .collect();
            let mut by_rho: Vec<usize> = (0..4).collect();
            by_rho.sort_by(|&a, &b| rho[a].partial_cmp(&rho[b]).unwrap());
            let mut by_w: Vec<usize> = (0..4).collect();
            by_w.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap());
            assert_eq!(by_rho, by_w);
        }
    }

    #[test]
    fn test_dwa_common_loss_scale_cancels() {
        let mut state = GlobalState::new(ParamVector::zeros(4), &[0, 1, 2]);
        state.loss_history.insert(0, (0.9, 1.3));
        state.loss_history.insert(1, (0.4, 0.7));
        state.loss_history.insert(2, (1.7, 0.2));
        let w = dwa_weights(&state, 2.0, 2, false).unwrap();
        // exact for power-of-two scales
        let mut scaled = state.clone();
        for (l1, l2) in scaled.loss_history.values_mut() {
            *l1 *= 4.0;
            *l2 *= 4.0;
        }
        let w4 = dwa_weights(&scaled, 2.0, 2, false).unwrap();
        for (a, b) in w.iter().zip(&w4) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // near-exact for arbitrary scales
        let mut scaled2 = state.clone();
        for (l1, l2) in scaled2.loss_history.values_mut() {
            *l1 *= 1.37;
            *l2 *= 1.37;
        }
        let w137 = dwa_weights(&scaled2, 2.0, 2, false).unwrap();
        for (a, b) in w.iter().zip(&w137) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn test_aggregate_identity_single_client() {
        // quantized values make delta arithmetic exact
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let quant = |r: &mut ChaCha8Rng| (r.random_range(-1024i32..1024) as f64) / 1024.0;
        let global =
            ParamVector::new((0..12).map(|_| quant(&mut rng)).collect()).unwrap();
        let final_params =
            ParamVector::new((0..12).map(|_| quant(&mut rng)).collect()).unwrap();
        let delta = final_params.sub(&global).unwrap();
        let update = top_fraction_mask(&delta, 1.0, 1).unwrap();

        let mut cfg = AggregationConfig::fedavg(5);
        cfg.min_clients = 1;
        let mut server = ServerEngine::new(cfg, global, &[0]).unwrap();
        let r = report(0, 1, update, 0.5, 7, 0.2);
        let w = server.weights_for(std::slice::from_ref(&r)).unwrap();
        assert_eq!(w, vec![1.0]);
        server.aggregate(&[r], &w).unwrap();
        assert_eq!(server.state.global_params, final_params);
        assert_eq!(server.state.round, 2);
    }

    #[test]
    fn test_aggregate_zero_updates_leave_params() {
        let global = ParamVector::new(vec![0.25, -0.5, 0.75, 1.0]).unwrap();
        let mut cfg = AggregationConfig::fedavg(5);
        cfg.min_clients = 2;
        let mut server = ServerEngine::new(cfg, global.clone(), &[0, 1]).unwrap();
        let reports = vec![
            report(0, 1, empty_update(1), 0.5, 3, 0.1),
            report(1, 1, empty_update(1), 0.25, 5, 0.3),
        ];
        let w = server.weights_for(&reports).unwrap();
        server.aggregate(&reports, &w).unwrap();
        assert_eq!(server.state.global_params, global);
        assert_eq!(server.state.round, 2);
        // loss history shifted
        assert_eq!(server.state.loss_history[&0], (0.5, 1.0));
        assert_eq!(server.state.loss_history[&1], (0.25, 1.0));
    }

    #[test]
    fn test_aggregate_matches_dense_oracle() {
        let p = 20usize;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let global = ParamVector::zeros(p);
        let mut cfg = AggregationConfig::fedavg(5);
        cfg.min_clients = 3;
        let mut server = ServerEngine::new(cfg, global, &[0, 1, 2]).unwrap();

        let mut reports = Vec::new();
        for c in 0..3u32 {
            let dense: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let update =
                top_fraction_mask(&ParamVector::new(dense).unwrap(), 0.25, 1).unwrap();
            reports.push(report(c, 1, update, 0.5, [48, 165, 18][c as usize], 0.1));
        }
        let weights = server.weights_for(&reports).unwrap();

        // brute-force dense accumulation
        let mut want = vec![0.0; p];
        for (r, &w) in reports.iter().zip(&weights) {
            for &(idx, v) in &r.update.entries {
                want[idx as usize] += w * v;
            }
        }
        server.aggregate(&reports, &weights).unwrap();
        for (i, w) in want.iter().enumerate() {
            assert_eq!(server.state.global_params[i].to_bits(), w.to_bits());
        }
    }

    #[test]
    fn test_aggregate_round_mismatch_is_protocol_error() {
        let mut cfg = AggregationConfig::fedavg(5);
        cfg.min_clients = 1;
        let mut server = ServerEngine::new(cfg, ParamVector::zeros(4), &[0]).unwrap();
        let r = report(0, 3, empty_update(3), 0.5, 3, 0.1);
        let err = server.aggregate(&[r], &[1.0]).unwrap_err();
        assert!(matches!(err, FedSimError::Protocol(_)));
    }

    #[test]
    fn test_aggregate_requires_min_clients() {
        let cfg = AggregationConfig::fedavg(5);
        let mut server = ServerEngine::new(cfg, ParamVector::zeros(4), &[0, 1, 2]).unwrap();
        let r = report(0, 1, empty_update(1), 0.5, 3, 0.1);
        assert!(server.aggregate(&[r], &[1.0]).is_err());
    }

    #[test]
    fn test_select_best_argmax_and_tie_break() {
        let mut cfg = AggregationConfig::fedavg(5);
        cfg.min_clients = 1;
        let mut server = ServerEngine::new(cfg, ParamVector::zeros(4), &[0]).unwrap();
        assert!(server.select_best().is_err());
        for (round, score) in [(1u32, 0.3), (2, 0.5), (3, 0.4)] {
            let r = report(0, round, empty_update(round), 0.5, 3, score);
            server.aggregate(&[r], &[1.0]).unwrap();
        }
        assert_eq!(server.select_best().unwrap().round, 2);

        // tie keeps the earlier round
        let mut cfg2 = AggregationConfig::fedavg(5);
        cfg2.min_clients = 1;
        let mut server2 = ServerEngine::new(cfg2, ParamVector::zeros(4), &[0]).unwrap();
        for round in [1u32, 2] {
            let r = report(0, round, empty_update(round), 0.5, 3, 0.5);
            server2.aggregate(&[r], &[1.0]).unwrap();
        }
        assert_eq!(server2.select_best().unwrap().round, 1);

        // monotone-increasing scores pick the last round
        let mut cfg3 = AggregationConfig::fedavg(12);
        cfg3.min_clients = 1;
        let mut server3 = ServerEngine::new(cfg3, ParamVector::zeros(4), &[0]).unwrap();
        for round in 1u32..=10 {
            let r = report(0, round, empty_update(round), 0.5, 3, round as f64 / 10.0);
            server3.aggregate(&[r], &[1.0]).unwrap();
        }
        assert_eq!(server3.select_best().unwrap().round, 10);
    }
}
