use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::ad::{self, GradRequest, Graph, ParamMode, ParamVector};
use crate::models::LossKind;
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl std::str::FromStr for Norm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linf" => Ok(Self::Linf),
            "l2" => Ok(Self::L2),
            other => Err(format!("unknown norm {other:?} (expected linf or l2)")),
        }
    }
}

/// Threat model and optimizer settings for projected gradient ascent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub loss: LossKind,
    pub random_start: bool,
}

impl AttackConfig {
    /// PGD-10 in the l-inf ball of radius 8/255 with step 2/255 and a random start.
    pub fn training() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 2.0 / 255.0,
            loss: LossKind::CrossEntropy,
            random_start: true,
        }
    }

    /// PGD-20 on the margin loss, radius 8/255, step 8/2550, started from the clean input.
    pub fn evaluation() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            steps: 20,
            step_size: 8.0 / 2550.0,
            loss: LossKind::Margin,
            random_start: false,
        }
    }

    /// No perturbation: natural training / clean evaluation.
    pub fn natural() -> Self {
        Self { epsilon: 0.0, ..Self::training() }
    }

    pub fn is_natural(&self) -> bool {
        self.epsilon == 0.0
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(AttackError::InvalidConfig(format!("epsilon {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) {
            return Err(AttackError::InvalidConfig(format!("step size {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(AttackError::InvalidConfig("steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adversarial batch together with the clean and returned losses (under the attack loss).
#[derive(Clone, Debug)]
pub struct PgdOutput {
    pub adversarial: Tensor,
    pub clean_loss: Vec<f64>,
    pub loss: Vec<f64>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `point` onto the l2 ball of radius `eps` around `center`, then onto `[0, 1]`.
pub fn project_l2(center: &[f64], point: &mut [f64], eps: f64) {
    let dist = point.iter().zip(center).map(|(p, c)| (p - c) * (p - c)).sum::<f64>().sqrt();
    if dist > eps {
        let scale = eps / dist;
        for (p, c) in point.iter_mut().zip(center) {
            *p = c + (*p - c) * scale;
        }
    }
    for p in point.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
}

/// Projects `point` onto the l-inf ball of radius `eps` around `center`, then onto `[0, 1]`.
pub fn project_linf(center: &[f64], point: &mut [f64], eps: f64) {
    for (p, &c) in point.iter_mut().zip(center) {
        *p = (c + (*p - c).clamp(-eps, eps)).clamp(0.0, 1.0);
    }
}

fn random_start<R: Rng + ?Sized>(cfg: &AttackConfig, x: &Tensor, rng: &mut R) -> Tensor {
    let mut start = x.clone();
    let d = x.row_len();
    for i in 0..x.batch() {
        let center = x.row(i).to_vec();
        let row = start.row_mut(i);
        match cfg.norm {
            Norm::Linf => {
                for v in row.iter_mut() {
                    *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
                }
                project_linf(&center, row, cfg.epsilon);
            }
            Norm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let n = l2_norm(&dir);
                let radius = cfg.epsilon * rng.gen::<f64>().powf(1.0 / d as f64);
                if n > 0.0 {
                    row.iter_mut().zip(&dir).for_each(|(v, g)| *v += radius * g / n);
                }
                project_l2(&center, row, cfg.epsilon);
            }
        }
    }
    start
}

/// Batched PGD. Each example is attacked independently; the iterate with the
/// highest attack loss (the clean input included) is returned per example.
pub fn pgd_batch<R: Rng + ?Sized>(
    graph: &Graph,
    params: &ParamVector,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<PgdOutput, AttackError> {
    cfg.validate()?;
    let g = graph.with_head(cfg.loss.head());
    let b = x.batch();
    if cfg.is_natural() {
        let (losses, _) = ad::forward(&g, params, x, labels)?;
        return Ok(PgdOutput { adversarial: x.clone(), clean_loss: losses.clone(), loss: losses });
    }
    let ones = vec![1.0; b];
    let req = GradRequest { params: ParamMode::None, input: true };

    let mut cur = if cfg.random_start { random_start(cfg, x, rng) } else { x.clone() };
    let (mut best, mut best_loss, clean_loss) = if cfg.random_start {
        let (clean, _) = ad::forward(&g, params, x, labels)?;
        (x.clone(), clean.clone(), Some(clean))
    } else {
        (x.clone(), vec![f64::NEG_INFINITY; b], None)
    };
    let mut clean_loss = clean_loss;

    let track = |cur: &Tensor, losses: &[f64], best: &mut Tensor, best_loss: &mut [f64]| {
        for i in 0..b {
            if losses[i] > best_loss[i] {
                best_loss[i] = losses[i];
                best.row_mut(i).copy_from_slice(cur.row(i));
            }
        }
    };

    for step in 0..cfg.steps {
        let ev = ad::evaluate(&g, params, &cur, labels, &ones, req)?;
        if step == 0 && clean_loss.is_none() {
            clean_loss = Some(ev.losses.clone());
        }
        track(&cur, &ev.losses, &mut best, &mut best_loss);
        let grad = ev.input_grad.expect("input gradient requested");
        for i in 0..b {
            let center = x.row(i);
            let gi = grad.row(i);
            let row = cur.row_mut(i);
            match cfg.norm {
                Norm::Linf => {
                    row.iter_mut().zip(gi).for_each(|(v, gv)| *v += cfg.step_size * sign(*gv));
                    project_linf(center, row, cfg.epsilon);
                }
                Norm::L2 => {
                    let n = l2_norm(gi);
                    if n > 0.0 {
                        row.iter_mut().zip(gi).for_each(|(v, gv)| *v += cfg.step_size * gv / n);
                    }
                    project_l2(center, row, cfg.epsilon);
                }
            }
        }
    }
    let (last, _) = ad::forward(&g, params, &cur, labels)?;
    track(&cur, &last, &mut best, &mut best_loss);
    Ok(PgdOutput { adversarial: best, clean_loss: clean_loss.expect("at least one step"), loss: best_loss })
}

/// PGD on a single example `x` (no batch axis).
pub fn pgd<R: Rng + ?Sized>(
    graph: &Graph,
    params: &ParamVector,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor, AttackError> {
    let batch = Tensor::stack(&[x])?;
    let out = pgd_batch(graph, params, &batch, &[label], cfg, rng)?;
    Ok(out.adversarial.example(0))
}

/// PGD-20 margin-loss evaluation attack on a batch.
pub fn pgd_eval_attack(graph: &Graph, params: &ParamVector, x: &Tensor, labels: &[usize]) -> Result<Tensor, AttackError> {
    let cfg = AttackConfig::evaluation();
    // The evaluation attack starts from the clean input, so no randomness is drawn.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    Ok(pgd_batch(graph, params, x, labels, &cfg, &mut rng)?.adversarial)
}
