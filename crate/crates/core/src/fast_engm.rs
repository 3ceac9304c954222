//! Fast ENGM: approximate per-example gradient norms from input-gradient
//! norms and reweight the loss instead of clipping gradients.
//!
//! Parameter-gradient norms are modelled as `gamma1 * ||d L_i / d x_i|| + gamma0`.
//! In approximated mode (`naive == false`) the coefficients are refitted by
//! least squares on the current mini-batch every `tau` steps and smoothed
//! with an exponential moving average. In naive mode they stay at
//! `gamma0 = 0, gamma1 = 1` and the slope is absorbed into `alpha`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{self, AdError, GradRequest, Graph, ParamMode, ParamVector};
use crate::attacks::{pgd_batch, AttackConfig, AttackError};
use crate::optim::{add_weight_decay, clip_weight, msgd_step, OptimError, OptimState};
use crate::tensor::{l2_norm, Tensor};

/// Lower bound on the estimated gradient norm used as a weight denominator.
pub const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FastEngmError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least 2 points for a linear fit, got {0}")]
    TooFewPoints(usize),
    #[error("invalid fast-ENGM setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Norm-regression coefficients and their refresh policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaState {
    pub gamma0: f64,
    pub gamma1: f64,
    pub beta_gamma: f64,
    pub tau: usize,
    pub naive: bool,
}

impl GammaState {
    pub fn new(beta_gamma: f64, tau: usize, naive: bool) -> Result<Self, FastEngmError> {
        if !(0.0..1.0).contains(&beta_gamma) {
            return Err(FastEngmError::Invalid(format!("beta_gamma {beta_gamma} outside [0, 1)")));
        }
        if tau == 0 {
            return Err(FastEngmError::Invalid("tau must be at least 1".into()));
        }
        Ok(Self { gamma0: 0.0, gamma1: 1.0, beta_gamma, tau, naive })
    }

    /// Whether the regression is refreshed at iteration `step`.
    pub fn refreshes_at(&self, step: u64) -> bool {
        !self.naive && step.is_multiple_of(self.tau as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// All `xs` were identical; slope forced to 0 and intercept to `mean(ys)`.
    pub degenerate: bool,
}

/// Ordinary least squares `ys ~ slope * xs + intercept`.
pub fn linreg(xs: &[f64], ys: &[f64]) -> Result<LinearFit, FastEngmError> {
    if xs.len() != ys.len() {
        return Err(FastEngmError::Length(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(FastEngmError::TooFewPoints(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Ok(LinearFit { slope: 0.0, intercept: my, degenerate: true });
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(LinearFit { slope, intercept: my - slope * mx, degenerate: false })
}

/// Moves both coefficients toward a fresh fit by exponential averaging.
pub fn gamma_update(state: &GammaState, slope: f64, intercept: f64) -> GammaState {
    let b = state.beta_gamma;
    GammaState {
        gamma0: b * state.gamma0 + (1.0 - b) * intercept,
        gamma1: b * state.gamma1 + (1.0 - b) * slope,
        ..*state
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEstimate {
    pub weights: Vec<f64>,
    /// Some estimated norm fell below [`MIN_DENOMINATOR`] and was clamped.
    pub clamped: bool,
}

/// `w_i = min(alpha / (gamma1 * ||grad_x L_i|| + gamma0), 1)`.
pub fn estimate_weights(input_grad_norms: &[f64], state: &GammaState, alpha: f64) -> Result<WeightEstimate, FastEngmError> {
    if !(alpha > 0.0) {
        return Err(FastEngmError::Invalid(format!("alpha {alpha} must be positive")));
    }
    let mut clamped = false;
    let weights = input_grad_norms
        .iter()
        .map(|&n| {
            let est = state.gamma1 * n + state.gamma0;
            let denom = if est < MIN_DENOMINATOR {
                clamped = true;
                MIN_DENOMINATOR
            } else {
                est
            };
            (alpha / denom).min(1.0)
        })
        .collect();
    Ok(WeightEstimate { weights, clamped })
}

/// Mean absolute difference between exact and estimated weights, in percent.
pub fn weight_error(exact: &[f64], estimated: &[f64]) -> Result<f64, FastEngmError> {
    if exact.len() != estimated.len() {
        return Err(FastEngmError::Length(exact.len(), estimated.len()));
    }
    if exact.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = exact.iter().zip(estimated).map(|(a, b)| (a - b).abs()).sum();
    Ok(100.0 * sum / exact.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastStepDiagnostics {
    pub step: u64,
    pub refreshed: bool,
    pub gamma0: f64,
    pub gamma1: f64,
    /// Exact-vs-estimated weight error (%), only on refresh steps.
    pub weight_err_pct: Option<f64>,
    /// Backpropagations outside the attack, counting a per-example pass as `B`.
    pub backward_passes: usize,
    pub degenerate_fit: bool,
    pub clamped: bool,
    pub mean_weight: f64,
}

/// The fast ENGM update on an already perturbed batch: norm regression (on
/// refresh steps), loss reweighting and the momentum step.
///
/// `norm_override` replaces the measured input-gradient norms (used to
/// inject oracle norms in tests).
#[allow(clippy::too_many_arguments)]
pub fn fast_engm_update(
    graph: &Graph,
    params: &mut ParamVector,
    optim: &mut OptimState,
    gamma: &mut GammaState,
    x_adv: &Tensor,
    labels: &[usize],
    alpha: f64,
    weight_decay: f64,
    norm_override: Option<&[f64]>,
) -> Result<FastStepDiagnostics, FastEngmError> {
    let b = labels.len();
    let step = optim.step;
    let refresh = gamma.refreshes_at(step);
    let req = GradRequest { params: if refresh { ParamMode::PerExample } else { ParamMode::None }, input: true };
    let ev = ad::evaluate(graph, params, x_adv, labels, &vec![1.0; b], req)?;
    let grad_x = ev.input_grad.expect("input gradient requested");
    let measured: Vec<f64> = (0..b).map(|i| l2_norm(grad_x.row(i))).collect();
    let input_norms = match norm_override {
        Some(n) if n.len() != b => return Err(FastEngmError::Length(n.len(), b)),
        Some(n) => n.to_vec(),
        None => measured,
    };
    let mut backward_passes = 1;

    let mut exact_norms = None;
    let mut degenerate_fit = false;
    if refresh {
        let mut peg = ev.per_example.expect("per-example gradients requested");
        crate::optim::add_weight_decay_rows(&mut peg, params, weight_decay);
        let ys = peg.norms();
        let fit = linreg(&input_norms, &ys)?;
        degenerate_fit = fit.degenerate;
        *gamma = gamma_update(gamma, fit.slope, fit.intercept);
        exact_norms = Some(ys);
        backward_passes += b;
    }

    let est = estimate_weights(&input_norms, gamma, alpha)?;
    let weight_err_pct = match &exact_norms {
        Some(ys) => {
            let exact: Vec<f64> = ys.iter().map(|&n| clip_weight(n, alpha)).collect();
            Some(weight_error(&exact, &est.weights)?)
        }
        None => None,
    };

    let scaled: Vec<f64> = est.weights.iter().map(|w| w / b as f64).collect();
    let mut grad = ad::backward_weighted(graph, params, x_adv, labels, &scaled)?;
    backward_passes += 1;
    let mean_weight = est.weights.iter().sum::<f64>() / b as f64;
    add_weight_decay(&mut grad, params, weight_decay, mean_weight);
    msgd_step(optim, &grad, params)?;

    Ok(FastStepDiagnostics {
        step,
        refreshed: refresh,
        gamma0: gamma.gamma0,
        gamma1: gamma.gamma1,
        weight_err_pct,
        backward_passes,
        degenerate_fit,
        clamped: est.clamped,
        mean_weight,
    })
}

/// One full fast ENGM iteration: inner attack, then [`fast_engm_update`].
#[allow(clippy::too_many_arguments)]
pub fn fast_engm_train_step<R: Rng + ?Sized>(
    graph: &Graph,
    params: &mut ParamVector,
    optim: &mut OptimState,
    gamma: &mut GammaState,
    batch: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    alpha: f64,
    weight_decay: f64,
    rng: &mut R,
) -> Result<FastStepDiagnostics, FastEngmError> {
    if labels.is_empty() {
        return Err(AdError::EmptyBatch.into());
    }
    let x_adv = if attack.is_natural() {
        batch.clone()
    } else {
        pgd_batch(graph, params, batch, labels, attack, rng)?.adversarial
    };
    fast_engm_update(graph, params, optim, gamma, &x_adv, labels, alpha, weight_decay, None)
}
