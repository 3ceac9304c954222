//! Reverse-mode differentiation over small feed-forward graphs.
//!
//! Every graph evaluates a batch and produces one loss per example. The
//! reverse sweep is seeded with per-example loss weights, so the same pass
//! yields the batch-mean gradient, arbitrarily reweighted gradients, the
//! per-example gradient matrix, or the per-example input gradients.
//!
//! Per-example parameter gradients use the batched formulation: an affine
//! layer's row for example `i` is the outer product of its output gradient
//! and its input for that example; convolutions are unfolded per example.

mod eval;
pub mod graph;
pub(crate) mod kernels;

use thiserror::Error;

pub use eval::ParamMode;
pub use graph::{ConvGeom, Graph, GraphBuilder, LossHead, Node, NodeId, Op, ParamVector, Segment};

use crate::tensor::{l2_norm, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} at example {index} out of range for {classes} classes ({node})")]
    Label { node: String, index: usize, label: usize, classes: usize },
    #[error("non-finite loss at example {index}")]
    NonFiniteLoss { index: usize },
    #[error("parameter vector has {got} entries, graph expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

/// Row-major `B x P` matrix whose row `i` is the parameter gradient of `L_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerExampleGrads {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PerExampleGrads {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "per-example gradient matrix size");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn norms(&self) -> Vec<f64> {
        self.iter_rows().map(l2_norm).collect()
    }

    pub fn mean_row(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for row in self.iter_rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        let inv = 1.0 / self.rows as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

/// Which gradients an [`evaluate`] call should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub params: ParamMode,
    pub input: bool,
}

/// Losses, logits and requested gradients from one forward and one reverse pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub losses: Vec<f64>,
    pub logits: Tensor,
    /// `sum_i w_i grad L_i` when [`ParamMode::Summed`] was requested.
    pub param_grad: Option<Vec<f64>>,
    pub per_example: Option<PerExampleGrads>,
    /// Row `i` holds `w_i * d L_i / d x_i`.
    pub input_grad: Option<Tensor>,
}

fn logits_tensor(graph: &Graph, values: &[Vec<f64>], b: usize) -> Tensor {
    let mut shape = vec![b];
    shape.extend_from_slice(&graph.nodes()[graph.logits()].shape);
    Tensor::new(shape, values[graph.logits()].clone()).expect("logit buffer matches node shape")
}

/// Runs the graph on a batch, returning per-example losses and the `B x C` logits.
pub fn forward(graph: &Graph, params: &ParamVector, batch: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor), AdError> {
    let tape = eval::run_forward(graph, params, batch, labels)?;
    Ok((tape.losses(graph), logits_tensor(graph, &tape.values, tape.batch)))
}

/// One forward pass plus one reverse pass seeded with `weights` (one per example).
pub fn evaluate(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
    weights: &[f64],
    request: GradRequest,
) -> Result<Evaluation, AdError> {
    let tape = eval::run_forward(graph, params, batch, labels)?;
    let b = tape.batch;
    let grads = if request.params == ParamMode::None && !request.input {
        eval::Grads { params: None, input: None }
    } else {
        eval::run_backward(graph, params, &tape, labels, weights, request.params, request.input)?
    };
    let (param_grad, per_example) = match request.params {
        ParamMode::None => (None, None),
        ParamMode::Summed => (grads.params, None),
        ParamMode::PerExample => {
            (None, grads.params.map(|d| PerExampleGrads::new(b, graph.num_params(), d)))
        }
    };
    let input_grad = grads.input.map(|d| {
        let mut shape = vec![b];
        shape.extend_from_slice(&batch.shape()[1..]);
        Tensor::new(shape, d).expect("input gradient matches batch shape")
    });
    Ok(Evaluation {
        losses: tape.losses(graph),
        logits: logits_tensor(graph, &tape.values, b),
        param_grad,
        per_example,
        input_grad,
    })
}

/// Gradient of `sum_i weights[i] * L_i` with respect to the parameters.
pub fn backward_weighted(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<Vec<f64>, AdError> {
    let req = GradRequest { params: ParamMode::Summed, input: false };
    Ok(evaluate(graph, params, batch, labels, weights, req)?.param_grad.expect("summed gradient requested"))
}

/// Gradient of the mean loss over the batch.
pub fn backward_batch(graph: &Graph, params: &ParamVector, batch: &Tensor, labels: &[usize]) -> Result<Vec<f64>, AdError> {
    let b = batch.shape().first().copied().unwrap_or(0).max(1);
    backward_weighted(graph, params, batch, labels, &vec![1.0 / b as f64; b])
}

/// Per-example parameter gradients via the batched outer-product formulation.
pub fn per_example_grads(graph: &Graph, params: &ParamVector, batch: &Tensor, labels: &[usize]) -> Result<PerExampleGrads, AdError> {
    let b = batch.shape().first().copied().unwrap_or(0).max(1);
    let req = GradRequest { params: ParamMode::PerExample, input: false };
    Ok(evaluate(graph, params, batch, labels, &vec![1.0; b], req)?.per_example.expect("per-example requested"))
}

/// Per-example parameter gradients from `B` independent singleton backward passes.
pub fn per_example_grads_looped(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
) -> Result<PerExampleGrads, AdError> {
    eval::check_inputs(graph, params, batch, labels)?;
    let mut rows = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        rows.push(backward_batch(graph, params, &batch.gather(&[i]), &[y])?);
    }
    Ok(PerExampleGrads::from_rows(&rows))
}

/// `d L_i / d x_i` for every example in a single reverse pass.
pub fn input_grads(graph: &Graph, params: &ParamVector, batch: &Tensor, labels: &[usize]) -> Result<Tensor, AdError> {
    let b = batch.shape().first().copied().unwrap_or(0).max(1);
    let req = GradRequest { params: ParamMode::None, input: true };
    Ok(evaluate(graph, params, batch, labels, &vec![1.0; b], req)?.input_grad.expect("input gradient requested"))
}

/// Central-difference estimate of [`backward_batch`]. Test oracle only.
pub fn finite_diff_gradient(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<Vec<f64>, AdError> {
    if !(h > 0.0) {
        return Err(AdError::BadStep(h));
    }
    let mean_loss = |p: &ParamVector| -> Result<f64, AdError> {
        let (losses, _) = forward(graph, p, batch, labels)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    };
    let mut probe = params.clone();
    let mut grad = vec![0.0; params.len()];
    for (k, g) in grad.iter_mut().enumerate() {
        let orig = probe.data[k];
        probe.data[k] = orig + h;
        let up = mean_loss(&probe)?;
        probe.data[k] = orig - h;
        let down = mean_loss(&probe)?;
        probe.data[k] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
