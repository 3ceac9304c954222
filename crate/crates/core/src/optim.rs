//! Outer optimizers: momentum SGD and its norm-controlled variants.
//!
//! All variants share the heavy-ball recursion `v <- beta v + d; theta <- theta - lr v`
//! and differ only in the increment `d`:
//!
//! | kind  | increment `d`                                          |
//! |-------|--------------------------------------------------------|
//! | msgd  | mean mini-batch gradient                               |
//! | mgnc  | mean gradient clipped to norm `alpha`                  |
//! | sngm  | summed gradient scaled to unit norm                    |
//! | engm  | mean of per-example gradients, each clipped to `alpha` |
//! | fengm | mean of per-example gradients, each scaled to `alpha`  |
//!
//! The fast ENGM variants (`a-engm`, `n-engm`) reweight the loss before
//! differentiation and then take a plain `msgd` step.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{ParamVector, PerExampleGrads};
use crate::tensor::l2_norm;

/// Default clipping threshold for gradient-norm clipping on the averaged gradient.
pub const MGNC_ALPHA: f64 = 25.0;
pub const MOMENTUM: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite per-example gradient in row {row}")]
    NonFiniteRow { row: usize },
    #[error("gradient has {got} entries, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("per-example gradient matrix has no rows")]
    NoRows,
    #[error("invalid optimizer setting: {0}")]
    Invalid(String),
    #[error("{kind} cannot consume this gradient form")]
    WrongInput { kind: OptimKind },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimKind {
    #[serde(rename = "msgd")]
    Msgd,
    #[serde(rename = "mgnc")]
    Mgnc,
    #[serde(rename = "sngm")]
    Sngm,
    #[serde(rename = "engm")]
    Engm,
    #[serde(rename = "fengm")]
    Fengm,
    #[serde(rename = "a-engm")]
    AEngm,
    #[serde(rename = "n-engm")]
    NEngm,
}

impl OptimKind {
    pub const ALL: [OptimKind; 7] = [
        OptimKind::Msgd,
        OptimKind::Mgnc,
        OptimKind::Sngm,
        OptimKind::Engm,
        OptimKind::Fengm,
        OptimKind::AEngm,
        OptimKind::NEngm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Msgd => "msgd",
            Self::Mgnc => "mgnc",
            Self::Sngm => "sngm",
            Self::Engm => "engm",
            Self::Fengm => "fengm",
            Self::AEngm => "a-engm",
            Self::NEngm => "n-engm",
        }
    }

    pub fn is_fast(self) -> bool {
        matches!(self, Self::AEngm | Self::NEngm)
    }

    pub fn needs_per_example(self) -> bool {
        matches!(self, Self::Engm | Self::Fengm)
    }

    pub fn uses_alpha(self) -> bool {
        !matches!(self, Self::Msgd | Self::Sngm)
    }
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| OptimError::Invalid(format!("unknown optimizer {s:?}")))
    }
}

/// Optimizer identity plus the mutable heavy-ball state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub kind: OptimKind,
    pub v: Vec<f64>,
    pub beta: f64,
    pub lr: f64,
    pub alpha: f64,
    pub step: u64,
}

impl OptimState {
    pub fn new(kind: OptimKind, num_params: usize, beta: f64, lr: f64, alpha: f64) -> Result<Self, OptimError> {
        if !(0.0..1.0).contains(&beta) {
            return Err(OptimError::Invalid(format!("momentum {beta} outside [0, 1)")));
        }
        if !(lr >= 0.0) {
            return Err(OptimError::Invalid(format!("learning rate {lr}")));
        }
        if kind.uses_alpha() && !(alpha > 0.0) {
            return Err(OptimError::Invalid(format!("alpha {alpha} must be positive for {kind}")));
        }
        Ok(Self { kind, v: vec![0.0; num_params], beta, lr, alpha, step: 0 })
    }

    fn apply(&mut self, increment: &[f64], params: &mut ParamVector) {
        for ((v, d), theta) in self.v.iter_mut().zip(increment).zip(params.data.iter_mut()) {
            *v = self.beta * *v + d;
            *theta -= self.lr * *v;
        }
        self.step += 1;
    }

    fn check_len(&self, got: usize, params: &ParamVector) -> Result<(), OptimError> {
        if got != self.v.len() || params.len() != self.v.len() {
            return Err(OptimError::Length { expected: self.v.len(), got: if got != self.v.len() { got } else { params.len() } });
        }
        Ok(())
    }
}

fn check_finite(g: &[f64]) -> Result<(), OptimError> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(OptimError::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

fn check_rows(peg: &PerExampleGrads) -> Result<(), OptimError> {
    if peg.rows == 0 {
        return Err(OptimError::NoRows);
    }
    match peg.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
        Some(row) => Err(OptimError::NonFiniteRow { row }),
        None => Ok(()),
    }
}

/// Clipping coefficient `min(alpha / norm, 1)`, with `1` for a zero vector.
pub fn clip_weight(norm: f64, alpha: f64) -> f64 {
    if norm > 0.0 {
        (alpha / norm).min(1.0)
    } else {
        1.0
    }
}

/// `T(a) = min(alpha / ||a||, 1) a`: caps the norm at `alpha`, keeps direction.
pub fn clip_transform(a: &[f64], alpha: f64) -> Vec<f64> {
    let w = clip_weight(l2_norm(a), alpha);
    a.iter().map(|v| w * v).collect()
}

/// Momentum SGD on the mean mini-batch gradient.
pub fn msgd_step(state: &mut OptimState, batch_grad: &[f64], params: &mut ParamVector) -> Result<(), OptimError> {
    state.check_len(batch_grad.len(), params)?;
    check_finite(batch_grad)?;
    state.apply(batch_grad, params);
    Ok(())
}

/// Momentum SGD on the mean gradient clipped to norm `alpha`.
pub fn mgnc_step(state: &mut OptimState, batch_grad: &[f64], params: &mut ParamVector) -> Result<(), OptimError> {
    state.check_len(batch_grad.len(), params)?;
    check_finite(batch_grad)?;
    let clipped = clip_transform(batch_grad, state.alpha);
    state.apply(&clipped, params);
    Ok(())
}

/// Normalized momentum SGD: the increment is the summed gradient divided by its norm.
/// A zero sum contributes a zero increment.
pub fn sngm_step(state: &mut OptimState, summed_grad: &[f64], params: &mut ParamVector) -> Result<(), OptimError> {
    state.check_len(summed_grad.len(), params)?;
    check_finite(summed_grad)?;
    let n = l2_norm(summed_grad);
    let inc: Vec<f64> = if n > 0.0 {
        summed_grad.iter().map(|v| v / n).collect()
    } else {
        warn!("sngm step {}: zero summed gradient, momentum-only update", state.step);
        vec![0.0; summed_grad.len()]
    };
    state.apply(&inc, params);
    Ok(())
}

/// `(1/B) sum_i min(alpha / ||g_i||, 1) g_i`.
pub fn engm_increment(peg: &PerExampleGrads, alpha: f64) -> Vec<f64> {
    let mut inc = vec![0.0; peg.cols];
    for row in peg.iter_rows() {
        let w = clip_weight(l2_norm(row), alpha);
        inc.iter_mut().zip(row).for_each(|(a, g)| *a += w * g);
    }
    let inv = 1.0 / peg.rows as f64;
    inc.iter_mut().for_each(|a| *a *= inv);
    inc
}

/// Example-normalized momentum SGD: per-example gradients are clipped to
/// norm `alpha` before averaging.
pub fn engm_step(state: &mut OptimState, peg: &PerExampleGrads, params: &mut ParamVector) -> Result<(), OptimError> {
    check_rows(peg)?;
    state.check_len(peg.cols, params)?;
    let inc = engm_increment(peg, state.alpha);
    state.apply(&inc, params);
    Ok(())
}

/// Fixed-norm variant: every nonzero per-example gradient is rescaled to
/// norm exactly `alpha`; zero rows contribute zero but still count in the mean.
pub fn fengm_step(state: &mut OptimState, peg: &PerExampleGrads, params: &mut ParamVector) -> Result<(), OptimError> {
    check_rows(peg)?;
    state.check_len(peg.cols, params)?;
    let mut inc = vec![0.0; peg.cols];
    let mut zero_rows = 0;
    for row in peg.iter_rows() {
        let n = l2_norm(row);
        if n == 0.0 {
            zero_rows += 1;
            continue;
        }
        let w = state.alpha / n;
        inc.iter_mut().zip(row).for_each(|(a, g)| *a += w * g);
    }
    if zero_rows == peg.rows {
        warn!("fengm step {}: all {} per-example gradients are zero", state.step, peg.rows);
    }
    let inv = 1.0 / peg.rows as f64;
    inc.iter_mut().for_each(|a| *a *= inv);
    state.apply(&inc, params);
    Ok(())
}

/// Gradient in the form the optimizer consumes.
pub enum GradInput<'a> {
    /// Mean over the mini-batch.
    Mean(&'a [f64]),
    /// Sum over the mini-batch.
    Summed(&'a [f64]),
    PerExample(&'a PerExampleGrads),
}

/// Dispatches to the step rule of `state.kind`.
pub fn step(state: &mut OptimState, grad: GradInput<'_>, params: &mut ParamVector) -> Result<(), OptimError> {
    match (state.kind, grad) {
        (OptimKind::Msgd | OptimKind::AEngm | OptimKind::NEngm, GradInput::Mean(g)) => msgd_step(state, g, params),
        (OptimKind::Mgnc, GradInput::Mean(g)) => mgnc_step(state, g, params),
        (OptimKind::Sngm, GradInput::Summed(g)) => sngm_step(state, g, params),
        (OptimKind::Engm, GradInput::PerExample(p)) => engm_step(state, p, params),
        (OptimKind::Fengm, GradInput::PerExample(p)) => fengm_step(state, p, params),
        (kind, _) => Err(OptimError::WrongInput { kind }),
    }
}

/// Adds the l2 regularization gradient `scale * wd * theta` to `grad`.
pub fn add_weight_decay(grad: &mut [f64], params: &ParamVector, weight_decay: f64, scale: f64) {
    if weight_decay == 0.0 {
        return;
    }
    let c = weight_decay * scale;
    grad.iter_mut().zip(&params.data).for_each(|(g, t)| *g += c * t);
}

/// Adds `wd * theta` to every per-example row, so per-example caps apply to
/// the regularized gradient.
pub fn add_weight_decay_rows(peg: &mut PerExampleGrads, params: &ParamVector, weight_decay: f64) {
    if weight_decay == 0.0 {
        return;
    }
    for i in 0..peg.rows {
        add_weight_decay(peg.row_mut(i), params, weight_decay, 1.0);
    }
}

/// Step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(initial: f64, milestones: Vec<usize>, factor: f64) -> Result<Self, OptimError> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(OptimError::Invalid(format!("decay factor {factor} outside (0, 1]")));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OptimError::Invalid(format!("milestones {milestones:?} not strictly increasing")));
        }
        if !(initial >= 0.0) {
            return Err(OptimError::Invalid(format!("initial learning rate {initial}")));
        }
        Ok(Self { initial, milestones, factor })
    }

    pub fn constant(lr: f64) -> Self {
        Self { initial: lr, milestones: vec![], factor: 1.0 }
    }
}

/// `initial * factor^(number of milestones <= epoch)`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let passed = schedule.milestones.iter().filter(|&&m| m <= epoch).count();
    schedule.initial * schedule.factor.powi(passed as i32)
}
