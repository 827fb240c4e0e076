//! Local training engine: runs the per-round optimization loop in one of
//! three modes (plain, FedProx, DTP), tracks the round-averaged base loss for
//! DWA, and produces the sparse round report.
//!
//! The per-iteration flow implements the method stack: FedProx adds a
//! quadratic pull toward the received global model; DTP rescales the loss by
//! `-(1 - kbar)^gamma * log(kbar)` where `kbar` is an exponential average of
//! the batch soft-Dice KPI `d^r`.

use rand::seq::SliceRandom;

use crate::datagen::{derive_rng, ClientDataset, RNG_TAG_SHUFFLE};
use crate::error::{FedSimError, Result};
use crate::model::{self, ModelSpec};
use crate::param_math::{top_fraction_mask, ParamVector, SparseUpdate};

pub const KPI_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Plain,
    FedProx,
    Dtp,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-client training configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClientConfig {
    pub client_id: u32,
    pub mode: ClientMode,
    /// FedProx proximal strength.
    pub mu: f64,
    /// DTP focusing exponent.
    pub gamma: f64,
    /// DTP EMA coefficient.
    pub alpha: f64,
    /// DTP KPI exponent r.
    pub kpi_exponent: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub share_fraction: f64,
    pub seed: u64,
}

impl ClientConfig {
    pub fn new(client_id: u32, mode: ClientMode, seed: u64) -> Self {
        Self {
            client_id,
            mode,
            mu: 0.0,
            gamma: 1.0,
            alpha: 0.9,
            kpi_exponent: 1.0,
            local_epochs: 10,
            batch_size: 2,
            lr: 5e-4,
            optimizer: Optimizer::default(),
            share_fraction: 0.25,
            seed,
        }
    }

    /// Strict validation applied to user-supplied configurations. The engine
    /// itself tolerates mu == 0 in FedProx mode (it reduces to plain), which
    /// the equivalence tests rely on.
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs < 1 || self.batch_size < 1 {
            return Err(FedSimError::Config(
                "local_epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.share_fraction.is_nan() || self.share_fraction <= 0.0 || self.share_fraction > 1.0 {
            return Err(FedSimError::Config(format!(
                "share_fraction {} outside (0, 1]",
                self.share_fraction
            )));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(FedSimError::Config(format!("bad learning rate {}", self.lr)));
        }
        match self.mode {
            ClientMode::FedProx if self.mu.is_nan() || self.mu <= 0.0 => Err(FedSimError::Config(
                "fedprox mode requires mu > 0".into(),
            )),
            ClientMode::Dtp
                if self.gamma.is_nan()
                    || self.gamma <= 0.0
                    || !(0.0..1.0).contains(&self.alpha)
                    || self.kpi_exponent.is_nan()
                    || self.kpi_exponent <= 0.0 =>
            {
                Err(FedSimError::Config(
                    "dtp mode requires gamma > 0, alpha in [0,1), kpi_exponent > 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// EMA state of the DTP key performance index.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DtpState {
    pub kappa_bar: f64,
    pub initialized: bool,
}

/// KPI of one training batch: `d^r`, clamped into [1e-6, 1] so the DTP weight
/// stays finite.
pub fn kpi(batch_dice: f64, exponent: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&batch_dice));
    debug_assert!(exponent > 0.0);
    batch_dice.powf(exponent).clamp(KPI_FLOOR, 1.0)
}

/// Exponential average of the KPI; the first observation initializes the
/// state directly.
pub fn kpi_ema(prev: DtpState, kappa: f64, alpha: f64) -> DtpState {
    let kappa_bar = if prev.initialized {
        (1.0 - alpha) * kappa + alpha * prev.kappa_bar
    } else {
        kappa
    };
    DtpState {
        kappa_bar,
        initialized: true,
    }
}

/// Focal-style task weight `-(1 - kbar)^gamma * log(kbar)`; zero at a perfect
/// KPI, growing as the KPI decays.
pub fn dtp_weight(kappa_bar: f64, gamma: f64) -> f64 {
    -(1.0 - kappa_bar).powf(gamma) * kappa_bar.ln()
}

/// A client's per-round payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub client_id: u32,
    pub round: u32,
    pub update: SparseUpdate,
    /// Mean of the per-iteration base (Dice+CE) losses, before DTP scaling
    /// and excluding the proximal term.
    pub avg_loss: f64,
    pub n_samples: u32,
    /// Hard Dice of the received global model on the validation split, per
    /// supervised foreground class.
    pub val_dice_per_class: Vec<(u8, f64)>,
    pub iterations: u32,
    /// Mean loss scale applied over the round: the DTP weight trace signal,
    /// 1.0 outside DTP mode.
    pub mean_loss_scale: f64,
}

impl RoundReport {
    pub fn mean_val_dice(&self) -> f64 {
        if self.val_dice_per_class.is_empty() {
            return 0.0;
        }
        self.val_dice_per_class.iter().map(|(_, d)| d).sum::<f64>()
            / self.val_dice_per_class.len() as f64
    }
}

/// Report plus per-iteration diagnostics used by tests.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub report: RoundReport,
    pub iter_losses: Vec<f64>,
    pub final_params: ParamVector,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut ParamVector,
        grad: &ParamVector,
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Cosine-annealed learning rate over the round's iterations, from `lr` down
/// to `0.01 * lr`.
fn cosine_lr(lr: f64, iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let lr_end = 0.01 * lr;
    let t = iteration as f64 / (total - 1) as f64;
    lr_end + 0.5 * (lr - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One client's training state across rounds.
pub struct ClientEngine {
    pub cfg: ClientConfig,
    pub model_spec: ModelSpec,
    pub dataset: ClientDataset,
    dtp: DtpState,
}

impl ClientEngine {
    pub fn new(cfg: ClientConfig, model_spec: ModelSpec, dataset: ClientDataset) -> Self {
        Self {
            cfg,
            model_spec,
            dataset,
            dtp: DtpState::default(),
        }
    }

    pub fn dtp_state(&self) -> DtpState {
        self.dtp
    }

    /// Runs one round of local training from the received global parameters
    /// and reports the sparsified delta.
    pub fn local_train(&mut self, global_params: &ParamVector, round: u32) -> Result<RoundReport> {
        Ok(self.run_round(global_params, round)?.report)
    }

    pub fn run_round(&mut self, global_params: &ParamVector, round: u32) -> Result<RoundOutcome> {
        if global_params.len() != self.model_spec.param_count() {
            return Err(FedSimError::Usage(format!(
                "global parameter length {} != model parameter count {}",
                global_params.len(),
                self.model_spec.param_count()
            )));
        }
        if self.dataset.train.is_empty() {
            return Err(FedSimError::Usage("empty training split".into()));
        }

        // Epoch shuffles for this round, seeded by (seed, round).
        let mut shuffle_rng = derive_rng(
            self.cfg.seed,
            round as u64,
            RNG_TAG_SHUFFLE + ((self.cfg.client_id as u64) << 32),
        );
        let n = self.dataset.train.len();
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for _ in 0..self.cfg.local_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(self.cfg.batch_size) {
                batches.push(chunk.to_vec());
            }
        }
        let total_iters = batches.len();

        let mut params = global_params.clone();
        let mut adam = AdamState::new(params.len());
        let mut iter_losses = Vec::with_capacity(total_iters);
        let mut scale_sum = 0.0;

        for (i, batch_idx) in batches.iter().enumerate() {
            let batch = self.dataset.train_batch(batch_idx)?;
            let base = model::base_loss_grad(&params, &self.model_spec, &batch).map_err(|_| {
                FedSimError::Divergence {
                    iteration: i,
                    detail: "non-finite loss".into(),
                }
            })?;

            let (loss_scale, prox_mu, anchor) = match self.cfg.mode {
                ClientMode::Plain => (1.0, 0.0, None),
                ClientMode::FedProx => {
                    if self.cfg.mu > 0.0 {
                        (1.0, self.cfg.mu, Some(global_params))
                    } else {
                        (1.0, 0.0, None)
                    }
                }
                ClientMode::Dtp => {
                    let kappa = kpi(base.soft_dice, self.cfg.kpi_exponent);
                    self.dtp = kpi_ema(self.dtp, kappa, self.cfg.alpha);
                    (dtp_weight(self.dtp.kappa_bar, self.cfg.gamma), 0.0, None)
                }
            };
            let base_loss = base.loss;
            let (loss, grad) = model::apply_scale_and_prox(
                base.loss, base.grad, loss_scale, prox_mu, anchor, &params,
            )?;
            if !loss.is_finite() {
                return Err(FedSimError::Divergence {
                    iteration: i,
                    detail: format!("loss {loss}"),
                });
            }
            iter_losses.push(base_loss);
            scale_sum += loss_scale;

            let lr = cosine_lr(self.cfg.lr, i, total_iters);
            match self.cfg.optimizer {
                Optimizer::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => adam.step(&mut params, &grad, lr, beta1, beta2, epsilon),
                Optimizer::Sgd => {
                    for p in 0..params.len() {
                        params[p] -= lr * grad[p];
                    }
                }
            }
        }

        let avg_loss = iter_losses.iter().sum::<f64>() / total_iters as f64;
        let delta = params.sub(global_params)?;
        let update = top_fraction_mask(&delta, self.cfg.share_fraction, round)?;
        let val_dice_per_class = self.validation_dice(global_params)?;

        Ok(RoundOutcome {
            report: RoundReport {
                client_id: self.cfg.client_id,
                round,
                update,
                avg_loss,
                n_samples: n as u32,
                val_dice_per_class,
                iterations: total_iters as u32,
                mean_loss_scale: scale_sum / total_iters as f64,
            },
            iter_losses,
            final_params: params,
        })
    }

    /// Hard Dice of the given parameters on the validation split, per
    /// supervised foreground class.
    fn validation_dice(&self, params: &ParamVector) -> Result<Vec<(u8, f64)>> {
        let images: Vec<&[f64]> = self.dataset.val.iter().map(|s| &s.image[..]).collect();
        let predicted = model::predict_labels(
            params,
            &self.model_spec,
            &images,
            self.dataset.height,
            self.dataset.width,
        )?;
        let pred_flat: Vec<u8> = predicted.into_iter().flatten().collect();
        let true_flat: Vec<u8> = self
            .dataset
            .val
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect();
        self.dataset
            .label_space
            .iter()
            .filter(|&&c| c != 0)
            .map(|&c| Ok((c, model::dice_score(&pred_flat, &true_flat, c)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, ClientDatasetSpec};
    use crate::model::loss_and_grad;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_dataset(seed: u64) -> ClientDataset {
        generate(&ClientDatasetSpec {
            client_id: 0,
            n_total: 10,
            image_size: 16,
            has_tumor_labels: true,
            intensity_shift: 0.0,
            noise_sigma: 0.2,
            organ_radius_range: (4, 6),
            tumor_radius_range: (1, 2),
            seed,
        })
        .unwrap()
    }

    fn random_global(seed: u64, spec: &ModelSpec) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParamVector::new(
            (0..spec.param_count())
                .map(|_| rng.random_range(-0.3..0.3))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn test_kpi_cases() {
        assert_eq!(kpi(1.0, 3.0), 1.0);
        assert!((kpi(0.5, 2.0) - 0.25).abs() < 1e-15);
        assert_eq!(kpi(0.0, 1.0), KPI_FLOOR);
    }

    #[test]
    fn test_kpi_ema_cases() {
        let s = kpi_ema(DtpState::default(), 0.7, 0.9);
        assert_eq!(s.kappa_bar, 0.7);
        assert!(s.initialized);
        // 0.1 * 0.4 + 0.9 * 0.8
        let prev = DtpState {
            kappa_bar: 0.8,
            initialized: true,
        };
        let s2 = kpi_ema(prev, 0.4, 0.9);
        assert!((s2.kappa_bar - 0.76).abs() < 1e-12);
        let s3 = kpi_ema(prev, 0.4, 0.0);
        assert_eq!(s3.kappa_bar, 0.4);
    }

    #[test]
    fn test_dtp_weight_cases() {
        assert_eq!(dtp_weight(1.0, 2.0), 0.0);
        assert!((dtp_weight(0.5, 1.0) - 0.34657359027997264).abs() < 1e-12);
        assert!(dtp_weight(0.3, 1.0) > dtp_weight(0.6, 1.0));
        assert!(dtp_weight(0.6, 1.0) > dtp_weight(0.9, 1.0));
    }

    #[test]
    fn test_dtp_weight_strictly_decreasing() {
        for gamma in [0.5, 1.0, 2.0, 4.0] {
            let mut prev = f64::INFINITY;
            let mut k = KPI_FLOOR;
            while k <= 1.0 {
                let w = dtp_weight(k, gamma);
                assert!(w < prev, "not decreasing at kbar={k}, gamma={gamma}");
                assert!(w >= 0.0);
                prev = w;
                k += 1e-3;
            }
        }
    }

    #[test]
    fn test_fedprox_mu_zero_is_plain_bit_exact() {
        let spec = ModelSpec::default();
        let global = random_global(11, &spec);
        let dataset = tiny_dataset(5);

        let mut plain_cfg = ClientConfig::new(0, ClientMode::Plain, 9);
        plain_cfg.local_epochs = 2;
        plain_cfg.batch_size = 4;
        let mut prox_cfg = plain_cfg.clone();
        prox_cfg.mode = ClientMode::FedProx;
        prox_cfg.mu = 0.0;

        let a = ClientEngine::new(plain_cfg, spec.clone(), dataset.clone())
            .run_round(&global, 1)
            .unwrap();
        let b = ClientEngine::new(prox_cfg, spec, dataset)
            .run_round(&global, 1)
            .unwrap();
        assert_eq!(a.report, b.report);
        for (x, y) in a
            .final_params
            .as_slice()
            .iter()
            .zip(b.final_params.as_slice())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn test_fedprox_config_validation() {
        let mut cfg = ClientConfig::new(0, ClientMode::FedProx, 1);
        cfg.mu = 0.0;
        assert!(cfg.validate().is_err());
        cfg.mu = 0.1;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn test_lr_zero_yields_zero_update_at_lowest_indices() {
        let spec = ModelSpec::default();
        let global = random_global(3, &spec);
        let mut cfg = ClientConfig::new(0, ClientMode::Plain, 7);
        cfg.lr = 0.0;
        cfg.local_epochs = 1;
        let report = ClientEngine::new(cfg, spec.clone(), tiny_dataset(2))
            .local_train(&global, 1)
            .unwrap();
        let keep = (0.25f64 * spec.param_count() as f64).ceil() as usize;
        assert_eq!(report.update.entries.len(), keep);
        for (i, &(idx, v)) in report.update.entries.iter().enumerate() {
            assert_eq!(idx as usize, i);
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn test_single_iteration_sgd_is_one_gradient_step() {
        let spec = ModelSpec::default();
        let global = random_global(21, &spec);
        let dataset = tiny_dataset(13);
        let mut cfg = ClientConfig::new(0, ClientMode::Plain, 17);
        cfg.local_epochs = 1;
        cfg.batch_size = dataset.train.len(); // one batch -> J = 1
        cfg.optimizer = Optimizer::Sgd;
        cfg.lr = 0.05;
        cfg.share_fraction = 1.0;

        let outcome = ClientEngine::new(cfg.clone(), spec.clone(), dataset.clone())
            .run_round(&global, 4)
            .unwrap();

        // Reproduce the engine's shuffled batch order for the expected step.
        let mut rng = derive_rng(cfg.seed, 4, RNG_TAG_SHUFFLE + ((cfg.client_id as u64) << 32));
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng);
        let batch = dataset.train_batch(&order).unwrap();
        let (_, grad) = loss_and_grad(&global, &spec, &batch, 1.0, 0.0, None).unwrap();
        for i in 0..global.len() {
            let want = global[i] - cfg.lr * grad[i];
            assert_eq!(outcome.final_params[i].to_bits(), want.to_bits());
        }
        assert_eq!(outcome.report.iterations, 1);
    }

    #[test]
    fn test_round_is_deterministic() {
        let spec = ModelSpec::default();
        let global = random_global(31, &spec);
        let dataset = tiny_dataset(19);
        let mut cfg = ClientConfig::new(0, ClientMode::Dtp, 23);
        cfg.local_epochs = 2;
        cfg.batch_size = 4;
        let a = ClientEngine::new(cfg.clone(), spec.clone(), dataset.clone())
            .run_round(&global, 2)
            .unwrap();
        let b = ClientEngine::new(cfg, spec, dataset)
            .run_round(&global, 2)
            .unwrap();
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn test_avg_loss_is_mean_of_iteration_losses() {
        let spec = ModelSpec::default();
        let global = random_global(41, &spec);
        let mut cfg = ClientConfig::new(0, ClientMode::Plain, 29);
        cfg.local_epochs = 3;
        cfg.batch_size = 4;
        let outcome = ClientEngine::new(cfg, spec, tiny_dataset(23))
            .run_round(&global, 1)
            .unwrap();
        let mean = outcome.iter_losses.iter().sum::<f64>() / outcome.iter_losses.len() as f64;
        assert_eq!(outcome.report.avg_loss.to_bits(), mean.to_bits());
        assert_eq!(
            outcome.report.iterations as usize,
            outcome.iter_losses.len()
        );
        assert!(outcome.report.avg_loss >= 0.0);
    }

    #[test]
    fn test_proximal_pull_non_increasing_in_mu() {
        let spec = ModelSpec::default();
        let global = random_global(51, &spec);
        let dataset = tiny_dataset(29);
        let mut dist = Vec::new();
        for mu in [0.0, 0.1, 1.0, 10.0] {
            let mut cfg = ClientConfig::new(0, ClientMode::FedProx, 37);
            cfg.mu = mu;
            cfg.local_epochs = 1;
            cfg.batch_size = dataset.train.len();
            cfg.share_fraction = 1.0;
            cfg.lr = 0.01;
            let outcome = ClientEngine::new(cfg, spec.clone(), dataset.clone())
                .run_round(&global, 1)
                .unwrap();
            dist.push(crate::param_math::sq_distance(&outcome.final_params, &global).unwrap());
        }
        for pair in dist.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-15,
                "distance increased with mu: {dist:?}"
            );
        }
    }

    #[test]
    fn test_divergence_reports_iteration() {
        let spec = ModelSpec::default();
        let global = random_global(71, &spec);
        let mut cfg = ClientConfig::new(0, ClientMode::Plain, 47);
        cfg.local_epochs = 2;
        cfg.batch_size = 2;
        cfg.lr = 1e12; // explodes the parameters within a step or two
        let err = ClientEngine::new(cfg, spec, tiny_dataset(37))
            .run_round(&global, 1)
            .unwrap_err();
        match err {
            crate::error::FedSimError::Divergence { iteration, .. } => assert!(iteration >= 1),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn test_dtp_state_persists_across_rounds() {
        let spec = ModelSpec::default();
        let global = random_global(61, &spec);
        let mut cfg = ClientConfig::new(0, ClientMode::Dtp, 43);
        cfg.local_epochs = 1;
        cfg.batch_size = 4;
        let mut engine = ClientEngine::new(cfg, spec, tiny_dataset(31));
        assert!(!engine.dtp_state().initialized);
        engine.run_round(&global, 1).unwrap();
        let after_round1 = engine.dtp_state();
        assert!(after_round1.initialized);
        engine.run_round(&global, 2).unwrap();
        assert!(engine.dtp_state().initialized);
        assert!(engine.dtp_state().kappa_bar > 0.0 && engine.dtp_state().kappa_bar <= 1.0);
    }
}
