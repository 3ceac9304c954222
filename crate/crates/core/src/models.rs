//! Small classifiers used as the network under training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{self, AdError, Graph, GraphBuilder, LossHead, Op, ParamVector};
use crate::data::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unsupported architecture {0:?} (expected mlp or cnn-small)")]
    UnsupportedArchitecture(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "cnn-small")]
    CnnSmall,
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "cnn-small" => Ok(Self::CnnSmall),
            other => Err(ModelError::UnsupportedArchitecture(other.to_string())),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::CnnSmall => "cnn-small",
        })
    }
}

/// Architecture description.
///
/// For `mlp`, `hidden` lists the hidden-layer widths and the input is
/// flattened. For `cnn-small`, `hidden` lists the two convolution channel
/// counts and `input_shape` must be `[channels, height, width]` with height
/// and width divisible by 4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// MLP from a full width list `[input, hidden.., classes]`.
    pub fn mlp(widths: &[usize], seed: u64) -> Self {
        let n = widths.len();
        Self {
            architecture: Architecture::Mlp,
            input_shape: widths.first().map(|&d| vec![d]).unwrap_or_default(),
            hidden: if n >= 2 { widths[1..n - 1].to_vec() } else { vec![] },
            classes: widths.last().copied().unwrap_or(0),
            seed,
        }
    }

    /// Reference MLP `[D, 128, 64, C]`.
    pub fn reference_mlp(input_shape: Vec<usize>, classes: usize, seed: u64) -> Self {
        Self { architecture: Architecture::Mlp, input_shape, hidden: vec![128, 64], classes, seed }
    }

    /// Reference CNN: conv(8) -> relu -> pool -> conv(16) -> relu -> pool -> affine(C).
    pub fn reference_cnn(input_shape: Vec<usize>, classes: usize, seed: u64) -> Self {
        Self { architecture: Architecture::CnnSmall, input_shape, hidden: vec![8, 16], classes, seed }
    }

    pub fn input_size(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes < 2 {
            return Err(ModelError::InvalidSpec(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("input shape {:?}", self.input_shape)));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::InvalidSpec(format!("zero width in {:?}", self.hidden)));
        }
        if self.architecture == Architecture::CnnSmall {
            match self.input_shape[..] {
                [_, h, w] if h % 4 == 0 && w % 4 == 0 => {}
                _ => {
                    return Err(ModelError::InvalidSpec(format!(
                        "cnn-small needs [c, h, w] input with h, w divisible by 4, got {:?}",
                        self.input_shape
                    )))
                }
            }
            if self.hidden.len() != 2 {
                return Err(ModelError::InvalidSpec(format!("cnn-small needs 2 channel counts, got {:?}", self.hidden)));
            }
        }
        Ok(())
    }
}

/// Loss used by an attack or an evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `z_y - max_{j != y} z_j`; attacks maximize its negation.
    Margin,
}

impl LossKind {
    pub fn head(self) -> LossHead {
        match self {
            Self::CrossEntropy => LossHead::CrossEntropy,
            Self::Margin => LossHead::NegMargin,
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross_entropy" | "ce" => Ok(Self::CrossEntropy),
            "margin" => Ok(Self::Margin),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

/// Builds the graph (cross-entropy head) and its initialized parameters.
///
/// Weights are drawn uniformly from `[-sqrt(6/fan_in), sqrt(6/fan_in)]`; biases start at zero.
pub fn build_model(spec: &ModelSpec) -> Result<(Graph, ParamVector), ModelError> {
    spec.validate()?;
    let graph = match spec.architecture {
        Architecture::Mlp => {
            let mut b = GraphBuilder::new(vec![spec.input_size()]);
            let mut x = b.input();
            for &w in &spec.hidden {
                let h = b.affine(x, w, true)?;
                x = b.relu(h)?;
            }
            let z = b.affine(x, spec.classes, true)?;
            let l = b.head(z, LossHead::CrossEntropy)?;
            b.finish(z, l)?
        }
        Architecture::CnnSmall => {
            let mut b = GraphBuilder::new(spec.input_shape.clone());
            let mut x = b.input();
            for &ch in &spec.hidden {
                let c = b.conv2d(x, ch, 3, true)?;
                let r = b.relu(c)?;
                x = b.max_pool2(r)?;
            }
            let f = b.flatten(x)?;
            let z = b.affine(f, spec.classes, true)?;
            let l = b.head(z, LossHead::CrossEntropy)?;
            b.finish(z, l)?
        }
    };
    let params = init_params(&graph, spec.seed);
    Ok((graph, params))
}

fn init_params(graph: &Graph, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(graph.layout().to_vec());
    for node in graph.nodes() {
        let (weight, fan_in) = match node.op {
            Op::Affine { weight, in_dim, .. } => (weight, in_dim),
            Op::Conv2d { weight, geom, .. } => (weight, geom.patch_len()),
            _ => continue,
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        let range = graph.layout()[weight].range();
        for v in &mut params.data[range] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    params
}

/// `z_y - max_{j != y} z_j`. Negative iff the example is misclassified
/// (zero on a tie).
pub fn margin_loss(logits: &[f64], label: usize) -> Result<f64, ModelError> {
    if logits.len() < 2 {
        return Err(ModelError::InvalidSpec(format!("margin needs at least 2 logits, got {}", logits.len())));
    }
    if label >= logits.len() {
        return Err(ModelError::LabelOutOfRange { label, classes: logits.len() });
    }
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[label] - other)
}

/// Index of the largest logit; ties go to the smallest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = j;
        }
    }
    best
}

/// Predicted class for every row of `batch`, evaluated in chunks.
pub fn predict(graph: &Graph, params: &ParamVector, batch: &crate::tensor::Tensor) -> Result<Vec<usize>, ModelError> {
    const CHUNK: usize = 256;
    let n = batch.batch();
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let chunk = batch.gather(&idx);
        // Labels are irrelevant for logits; zero is valid for any class count.
        let (_, logits) = ad::forward(graph, params, &chunk, &vec![0; idx.len()])?;
        preds.extend((0..idx.len()).map(|i| argmax(logits.row(i))));
        start += CHUNK;
    }
    Ok(preds)
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(graph: &Graph, params: &ParamVector, dataset: &Dataset) -> Result<f64, ModelError> {
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let preds = predict(graph, params, &dataset.images)?;
    let correct = preds.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Scales a norm threshold tuned for a model with `reference_params`
/// parameters to one with `params` parameters: `alpha * sqrt(params / reference_params)`.
pub fn scale_alpha(alpha: f64, reference_params: f64, params: f64) -> f64 {
    alpha * (params / reference_params).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mlp_parameter_count() {
        let (g, p) = build_model(&ModelSpec::mlp(&[784, 128, 10], 7)).unwrap();
        assert_eq!(g.num_params(), 101_770);
        assert_eq!(p.len(), 101_770);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = ModelSpec::mlp(&[784, 128, 10], 7);
        assert_eq!(build_model(&spec).unwrap().1, build_model(&spec).unwrap().1);
        let other = ModelSpec { seed: 8, ..spec.clone() };
        assert_ne!(build_model(&spec).unwrap().1, build_model(&other).unwrap().1);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(build_model(&ModelSpec::mlp(&[4, 0, 2], 1)).is_err());
        assert!(build_model(&ModelSpec::mlp(&[4, 3, 1], 1)).is_err());
    }

    #[test]
    fn unsupported_architecture_string() {
        assert_eq!(
            "resnet".parse::<Architecture>(),
            Err(ModelError::UnsupportedArchitecture("resnet".into()))
        );
        assert_eq!("cnn-small".parse::<Architecture>(), Ok(Architecture::CnnSmall));
    }

    #[test]
    fn init_respects_fan_in_bound_and_zero_bias() {
        let (g, p) = build_model(&ModelSpec::mlp(&[6, 5, 3], 3)).unwrap();
        let w = &p.data[g.layout()[0].range()];
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(p.data[g.layout()[1].range()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_small_builds_and_runs() {
        let spec = ModelSpec::reference_cnn(vec![1, 8, 8], 3, 1);
        let (g, p) = build_model(&spec).unwrap();
        // conv 1->8 (72+8), conv 8->16 (1152+16), affine 16*2*2 -> 3 (192+3)
        assert_eq!(g.num_params(), 80 + 1168 + 195);
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|v| v as f64 / 128.0).collect()).unwrap();
        let (losses, logits) = ad::forward(&g, &p, &x, &[0, 2]).unwrap();
        assert_eq!(losses.len(), 2);
        assert_eq!(logits.shape(), &[2, 3]);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_loss(&[3.0, 1.0], 0).unwrap(), 2.0);
        assert_eq!(margin_loss(&[1.0, 1.0], 0).unwrap(), 0.0);
        assert!((margin_loss(&[0.2, 0.9, 0.4], 2).unwrap() + 0.5).abs() < 1e-15);
        assert!(margin_loss(&[0.2, 0.9], 2).is_err());
    }

    #[test]
    fn argmax_ties_to_smallest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn accuracy_examples() {
        // Zero-weight model: constant logits, always predicts class 0.
        let (g, mut p) = build_model(&ModelSpec::mlp(&[2, 2], 0)).unwrap();
        p.data.iter_mut().for_each(|v| *v = 0.0);
        let images = Tensor::new(vec![4, 2], vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5, 0.2, 0.1]).unwrap();
        let balanced = Dataset::new(images.clone(), vec![1, 0, 0, 1], 2).unwrap();
        assert_eq!(accuracy(&g, &p, &balanced).unwrap(), 0.5);
        let all0 = Dataset::new(images.clone(), vec![0; 4], 2).unwrap();
        assert_eq!(accuracy(&g, &p, &all0).unwrap(), 1.0);
        let one_wrong = Dataset::new(images.gather(&[0]), vec![1], 2).unwrap();
        assert_eq!(accuracy(&g, &p, &one_wrong).unwrap(), 0.0);
        let empty = Dataset::empty(vec![2], 2);
        assert_eq!(accuracy(&g, &p, &empty), Err(ModelError::EmptyDataset));
    }

    #[test]
    fn alpha_scaling_rule() {
        // ResNet-18 (11.1M) alpha 5 scaled to WRN-34-10 (48.2M).
        let a = scale_alpha(5.0, 11.1e6, 48.2e6);
        assert!((a - 10.4).abs() < 0.05, "{a}");
    }
}
