use super::AttackError;
use crate::ad::{self, Graph, LossHead, ParamVector};
use crate::data::Dataset;
use crate::models::argmax;
use crate::tensor::{l2_norm, Tensor};

pub const DEFAULT_OVERSHOOT: f64 = 0.02;
pub const DEFAULT_MAX_ITER: usize = 50;

/// Added to each linearized step so a point that lands exactly on the
/// boundary still crosses it.
const BOUNDARY_NUDGE: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct DeepFoolResult {
    pub adversarial: Tensor,
    /// l2 distance between the input and `adversarial`.
    pub distance: f64,
    pub converged: bool,
    pub iterations: usize,
    pub original_class: usize,
}

/// Logits and the `C x D` Jacobian of the logits with respect to the input.
fn logit_jacobian(picker: &Graph, params: &ParamVector, x: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>), AttackError> {
    let classes = picker.classes();
    let copies: Vec<&Tensor> = std::iter::repeat_n(x, classes).collect();
    let batch = Tensor::stack(&copies)?;
    let labels: Vec<usize> = (0..classes).collect();
    let req = ad::GradRequest { params: ad::ParamMode::None, input: true };
    let ev = ad::evaluate(picker, params, &batch, &labels, &vec![1.0; classes], req)?;
    let grad = ev.input_grad.expect("input gradient requested");
    let logits = ev.logits.row(0).to_vec();
    Ok((logits, (0..classes).map(|k| grad.row(k).to_vec()).collect()))
}

/// Multi-class DeepFool on a single example `x` (no batch axis).
///
/// When `label` is given and the model already misclassifies `x`, the
/// result is `x` itself at distance 0. Results that fail to change the
/// predicted class within `max_iter` linearization steps are flagged with
/// `converged == false`.
pub fn deepfool(
    graph: &Graph,
    params: &ParamVector,
    x: &Tensor,
    label: Option<usize>,
    max_iter: usize,
    overshoot: f64,
) -> Result<DeepFoolResult, AttackError> {
    if max_iter == 0 {
        return Err(AttackError::InvalidConfig("max_iter must be at least 1".into()));
    }
    let picker = graph.with_head(LossHead::PickLogit);
    let (logits, mut jac) = logit_jacobian(&picker, params, x)?;
    let k0 = argmax(&logits);
    if label.is_some_and(|y| y != k0) {
        return Ok(DeepFoolResult { adversarial: x.clone(), distance: 0.0, converged: true, iterations: 0, original_class: k0 });
    }
    let mut logits = logits;
    let mut total = vec![0.0; x.len()];
    let mut current = x.clone();
    let mut iterations = 0;
    while argmax(&logits) == k0 && iterations < max_iter {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in (0..logits.len()).filter(|&k| k != k0) {
            let w: Vec<f64> = jac[k].iter().zip(&jac[k0]).map(|(a, b)| a - b).collect();
            let wn = l2_norm(&w);
            if wn == 0.0 {
                continue;
            }
            let pert = (logits[k] - logits[k0]).abs() / wn;
            if best.as_ref().is_none_or(|(p, _)| pert < *p) {
                best = Some((pert, w.iter().map(|v| v / wn).collect()));
            }
        }
        let Some((pert, dir)) = best else { break };
        total.iter_mut().zip(&dir).for_each(|(t, d)| *t += (pert + BOUNDARY_NUDGE) * d);
        for ((c, &x0), &t) in current.data_mut().iter_mut().zip(x.data()).zip(&total) {
            *c = x0 + (1.0 + overshoot) * t;
        }
        iterations += 1;
        (logits, jac) = logit_jacobian(&picker, params, &current)?;
    }
    let converged = argmax(&logits) != k0;
    let distance = current.data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(DeepFoolResult { adversarial: current, distance, converged, iterations, original_class: k0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoReport {
    /// Mean l2 distance to the DeepFool adversary over converged examples.
    pub rho: f64,
    pub converged: usize,
    pub total: usize,
}

impl RhoReport {
    pub fn converged_fraction(&self) -> f64 {
        self.converged as f64 / self.total as f64
    }
}

/// Expected distance to the closest decision boundary, estimated with DeepFool.
pub fn rho_metric(
    graph: &Graph,
    params: &ParamVector,
    dataset: &Dataset,
    max_iter: usize,
    overshoot: f64,
) -> Result<RhoReport, AttackError> {
    if dataset.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    let mut sum = 0.0;
    let mut converged = 0;
    for i in 0..dataset.len() {
        let r = deepfool(graph, params, &dataset.images.example(i), Some(dataset.labels[i]), max_iter, overshoot)?;
        if r.converged {
            sum += r.distance;
            converged += 1;
        }
    }
    if converged == 0 {
        return Err(AttackError::NoneConverged { total: dataset.len() });
    }
    Ok(RhoReport { rho: sum / converged as f64, converged, total: dataset.len() })
}
