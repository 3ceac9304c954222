use serde::{Deserialize, Serialize};

use super::AdError;

pub type NodeId = usize;

/// Geometry of a stride-1, zero-padded ("same") 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Rows of the unfolded input matrix: `in_ch * kernel * kernel`.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Primitive operations. Every value carries a leading batch axis; the
/// per-example shape of each node is recorded on the [`Node`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    /// `y = W x + b` with `W` stored `[out, in]` row-major.
    Affine { input: NodeId, in_dim: usize, out_dim: usize, weight: usize, bias: Option<usize> },
    Conv2d { input: NodeId, geom: ConvGeom, weight: usize, bias: Option<usize> },
    /// 2x2 max pooling with stride 2 over `[channels, height, width]`.
    MaxPool2 { input: NodeId, channels: usize, height: usize, width: usize },
    Relu { input: NodeId },
    Flatten { input: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    /// Sum over all per-example features, yielding one scalar per example.
    Sum { input: NodeId },
    Mean { input: NodeId },
    /// Softmax cross-entropy against the example label.
    SoftmaxCrossEntropy { input: NodeId },
    /// `max_{j != y} z_j - z_y`: the negated margin, which attacks maximize.
    NegMargin { input: NodeId },
    /// `z_y`: the logit selected by the label.
    PickLogit { input: NodeId },
}

impl Op {
    pub fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Input => vec![],
            Affine { input, .. }
            | Conv2d { input, .. }
            | MaxPool2 { input, .. }
            | Relu { input }
            | Flatten { input }
            | Sum { input }
            | Mean { input }
            | SoftmaxCrossEntropy { input }
            | NegMargin { input }
            | PickLogit { input } => vec![input],
            Add { lhs, rhs } | Mul { lhs, rhs } => vec![lhs, rhs],
        }
    }

    pub fn kind(&self) -> &'static str {
        use Op::*;
        match self {
            Input => "input",
            Affine { .. } => "affine",
            Conv2d { .. } => "conv2d",
            MaxPool2 { .. } => "maxpool2",
            Relu { .. } => "relu",
            Flatten { .. } => "flatten",
            Add { .. } => "add",
            Mul { .. } => "mul",
            Sum { .. } => "sum",
            Mean { .. } => "mean",
            SoftmaxCrossEntropy { .. } => "softmax_xent",
            NegMargin { .. } => "neg_margin",
            PickLogit { .. } => "pick_logit",
        }
    }

    pub(crate) fn uses_labels(&self) -> bool {
        matches!(self, Op::SoftmaxCrossEntropy { .. } | Op::NegMargin { .. } | Op::PickLogit { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    /// Per-example output shape (batch axis excluded). Scalar outputs use `[]`.
    pub shape: Vec<usize>,
}

impl Node {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A named, contiguous slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector together with its segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        Self { data: vec![0.0; n], layout }
    }

    pub fn new(data: Vec<f64>, layout: Vec<Segment>) -> Result<Self, AdError> {
        check_layout(&layout, data.len())?;
        Ok(Self { data, layout })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.iter().find(|s| s.name == name).map(|s| &self.data[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[range])
    }
}

/// Segments must tile `[0, total)` in order without gaps or overlap.
pub fn check_layout(layout: &[Segment], total: usize) -> Result<(), AdError> {
    let mut cursor = 0;
    for s in layout {
        if s.offset != cursor {
            return Err(AdError::InvalidGraph(format!(
                "segment {} starts at {} but previous segment ends at {cursor}",
                s.name, s.offset
            )));
        }
        cursor += s.len();
    }
    if cursor != total {
        return Err(AdError::InvalidGraph(format!("layout covers {cursor} of {total} parameters")));
    }
    Ok(())
}

/// Loss heads that can be attached to a graph's logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossHead {
    CrossEntropy,
    NegMargin,
    PickLogit,
}

/// Topologically ordered computation graph with a single per-example loss output.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    layout: Vec<Segment>,
    logits: NodeId,
    loss: NodeId,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn logits(&self) -> NodeId {
        self.logits
    }

    pub fn loss(&self) -> NodeId {
        self.loss
    }

    pub fn num_params(&self) -> usize {
        self.layout.last().map(|s| s.offset + s.len()).unwrap_or(0)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.nodes[0].shape
    }

    pub fn input_size(&self) -> usize {
        self.nodes[0].size()
    }

    pub fn classes(&self) -> usize {
        self.nodes[self.logits].size()
    }

    pub(crate) fn node_name(&self, id: NodeId) -> String {
        format!("{}#{id}", self.nodes[id].op.kind())
    }

    /// Copy of this graph whose loss node is replaced by `head` applied to the logits.
    ///
    /// Nodes after the logits node are dropped.
    pub fn with_head(&self, head: LossHead) -> Graph {
        let mut nodes = self.nodes[..=self.logits].to_vec();
        let input = self.logits;
        let op = match head {
            LossHead::CrossEntropy => Op::SoftmaxCrossEntropy { input },
            LossHead::NegMargin => Op::NegMargin { input },
            LossHead::PickLogit => Op::PickLogit { input },
        };
        nodes.push(Node { op, shape: vec![] });
        let loss = nodes.len() - 1;
        Graph { nodes, layout: self.layout.clone(), logits: self.logits, loss }
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<(), AdError> {
        if params.len() != self.num_params() {
            return Err(AdError::ParamLength { expected: self.num_params(), got: params.len() });
        }
        Ok(())
    }
}

/// Incremental graph construction with automatic parameter allocation.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    layout: Vec<Segment>,
    next_offset: usize,
}

impl GraphBuilder {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self { nodes: vec![Node { op: Op::Input, shape: input_shape }], layout: vec![], next_offset: 0 }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    fn alloc(&mut self, name: String, shape: Vec<usize>) -> usize {
        let seg = Segment { name, offset: self.next_offset, shape };
        self.next_offset += seg.len();
        self.layout.push(seg);
        self.layout.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<(), AdError> {
        if id >= self.nodes.len() {
            return Err(AdError::InvalidGraph(format!("node {id} does not exist yet")));
        }
        Ok(())
    }

    pub fn affine(&mut self, input: NodeId, out_dim: usize, bias: bool) -> Result<NodeId, AdError> {
        self.check(input)?;
        let in_dim = self.nodes[input].size();
        if in_dim == 0 || out_dim == 0 {
            return Err(AdError::InvalidGraph(format!("affine {in_dim} -> {out_dim}")));
        }
        let idx = self.nodes.len();
        let weight = self.alloc(format!("affine{idx}.weight"), vec![out_dim, in_dim]);
        let bias = bias.then(|| self.alloc(format!("affine{idx}.bias"), vec![out_dim]));
        Ok(self.push(Op::Affine { input, in_dim, out_dim, weight, bias }, vec![out_dim]))
    }

    pub fn conv2d(&mut self, input: NodeId, out_ch: usize, kernel: usize, bias: bool) -> Result<NodeId, AdError> {
        self.check(input)?;
        let shape = self.nodes[input].shape.clone();
        let [in_ch, height, width] = shape[..] else {
            return Err(AdError::InvalidGraph(format!("conv2d needs [c, h, w] input, got {shape:?}")));
        };
        if kernel.is_multiple_of(2) || out_ch == 0 || in_ch == 0 {
            return Err(AdError::InvalidGraph(format!("conv2d out_ch={out_ch} kernel={kernel}")));
        }
        let geom = ConvGeom { in_ch, out_ch, kernel, height, width };
        let idx = self.nodes.len();
        let weight = self.alloc(format!("conv{idx}.weight"), vec![out_ch, in_ch, kernel, kernel]);
        let bias = bias.then(|| self.alloc(format!("conv{idx}.bias"), vec![out_ch]));
        Ok(self.push(Op::Conv2d { input, geom, weight, bias }, vec![out_ch, height, width]))
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, AdError> {
        self.check(input)?;
        let shape = self.nodes[input].shape.clone();
        let [channels, height, width] = shape[..] else {
            return Err(AdError::InvalidGraph(format!("maxpool2 needs [c, h, w] input, got {shape:?}")));
        };
        if height % 2 != 0 || width % 2 != 0 {
            return Err(AdError::InvalidGraph(format!("maxpool2 needs even spatial dims, got {shape:?}")));
        }
        Ok(self.push(Op::MaxPool2 { input, channels, height, width }, vec![channels, height / 2, width / 2]))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, AdError> {
        self.check(input)?;
        let shape = self.nodes[input].shape.clone();
        Ok(self.push(Op::Relu { input }, shape))
    }

    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId, AdError> {
        self.check(input)?;
        let n = self.nodes[input].size();
        Ok(self.push(Op::Flatten { input }, vec![n]))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, AdError> {
        self.binary(lhs, rhs, |lhs, rhs| Op::Add { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, AdError> {
        self.binary(lhs, rhs, |lhs, rhs| Op::Mul { lhs, rhs })
    }

    fn binary(&mut self, lhs: NodeId, rhs: NodeId, op: impl Fn(NodeId, NodeId) -> Op) -> Result<NodeId, AdError> {
        self.check(lhs)?;
        self.check(rhs)?;
        if self.nodes[lhs].shape != self.nodes[rhs].shape {
            return Err(AdError::Shape {
                node: format!("{}#{}", op(lhs, rhs).kind(), self.nodes.len()),
                detail: format!("{:?} vs {:?}", self.nodes[lhs].shape, self.nodes[rhs].shape),
            });
        }
        let shape = self.nodes[lhs].shape.clone();
        Ok(self.push(op(lhs, rhs), shape))
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, AdError> {
        self.check(input)?;
        Ok(self.push(Op::Sum { input }, vec![]))
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, AdError> {
        self.check(input)?;
        Ok(self.push(Op::Mean { input }, vec![]))
    }

    pub fn head(&mut self, input: NodeId, head: LossHead) -> Result<NodeId, AdError> {
        self.check(input)?;
        if self.nodes[input].size() < 2 {
            return Err(AdError::InvalidGraph("loss head needs at least two logits".into()));
        }
        let op = match head {
            LossHead::CrossEntropy => Op::SoftmaxCrossEntropy { input },
            LossHead::NegMargin => Op::NegMargin { input },
            LossHead::PickLogit => Op::PickLogit { input },
        };
        Ok(self.push(op, vec![]))
    }

    /// Finalizes the graph. `loss` must be a scalar-per-example node that
    /// comes after `logits`, and must be the last node.
    pub fn finish(self, logits: NodeId, loss: NodeId) -> Result<Graph, AdError> {
        if loss != self.nodes.len() - 1 {
            return Err(AdError::InvalidGraph("loss must be the final node".into()));
        }
        if logits >= loss {
            return Err(AdError::InvalidGraph("logits must precede the loss".into()));
        }
        if !self.nodes[loss].shape.is_empty() {
            return Err(AdError::InvalidGraph(format!(
                "loss node must be scalar per example, has shape {:?}",
                self.nodes[loss].shape
            )));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op.inputs().iter().any(|&i| i >= id) {
                return Err(AdError::InvalidGraph(format!("node {id} is not topologically ordered")));
            }
        }
        let total = self.next_offset;
        check_layout(&self.layout, total)?;
        Ok(Graph { nodes: self.nodes, layout: self.layout, logits, loss })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_tiles_parameter_range() {
        let mut b = GraphBuilder::new(vec![4]);
        let h = b.affine(0, 3, true).unwrap();
        let r = b.relu(h).unwrap();
        let z = b.affine(r, 2, true).unwrap();
        let l = b.head(z, LossHead::CrossEntropy).unwrap();
        let g = b.finish(z, l).unwrap();
        assert_eq!(g.num_params(), 4 * 3 + 3 + 3 * 2 + 2);
        check_layout(g.layout(), g.num_params()).unwrap();
    }

    #[test]
    fn with_head_swaps_loss() {
        let mut b = GraphBuilder::new(vec![2]);
        let z = b.affine(0, 2, false).unwrap();
        let l = b.head(z, LossHead::CrossEntropy).unwrap();
        let g = b.finish(z, l).unwrap();
        let m = g.with_head(LossHead::NegMargin);
        assert_eq!(m.nodes().len(), g.nodes().len());
        assert!(matches!(m.nodes()[m.loss()].op, Op::NegMargin { .. }));
    }

    #[test]
    fn rejects_gapped_layout() {
        let layout = vec![
            Segment { name: "a".into(), offset: 0, shape: vec![2] },
            Segment { name: "b".into(), offset: 3, shape: vec![2] },
        ];
        assert!(check_layout(&layout, 5).is_err());
    }
}
