//! Forward evaluation and reverse sweep over a [`Graph`].

use super::graph::{ConvGeom, Graph, Op};
use super::kernels::{col2im, gemm, im2col};
use super::{AdError, ParamVector};
use crate::tensor::Tensor;

/// How parameter gradients are reduced over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    None,
    /// `sum_i seed_i * grad L_i`, one vector of length P.
    Summed,
    /// `seed_i * grad L_i` for each example, a row-major `B x P` matrix.
    PerExample,
}

pub(crate) struct Tape {
    pub batch: usize,
    pub values: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<u32>>,
}

impl Tape {
    pub fn losses(&self, graph: &Graph) -> Vec<f64> {
        self.values[graph.loss()].clone()
    }
}

pub(crate) struct Grads {
    pub params: Option<Vec<f64>>,
    pub input: Option<Vec<f64>>,
}

pub(crate) fn check_inputs(graph: &Graph, params: &ParamVector, batch: &Tensor, labels: &[usize]) -> Result<(), AdError> {
    graph.check_params(params)?;
    let b = if batch.shape().is_empty() { 0 } else { batch.batch() };
    if b == 0 || batch.is_empty() {
        return Err(AdError::EmptyBatch);
    }
    if batch.row_len() != graph.input_size() {
        return Err(AdError::Shape {
            node: graph.node_name(0),
            detail: format!(
                "batch rows hold {} values, graph expects {:?}",
                batch.row_len(),
                graph.input_shape()
            ),
        });
    }
    if labels.len() != b {
        return Err(AdError::Shape {
            node: graph.node_name(0),
            detail: format!("{b} examples but {} labels", labels.len()),
        });
    }
    for (id, node) in graph.nodes().iter().enumerate() {
        if node.op.uses_labels() {
            let classes = graph.nodes()[node.op.inputs()[0]].size();
            if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(AdError::Label { node: graph.node_name(id), index, label, classes });
            }
        }
    }
    Ok(())
}

/// Index of the largest entry other than `skip` (first on ties).
fn argmax_except(z: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in z.iter().enumerate() {
        if j != skip && (best == usize::MAX || v > z[best]) {
            best = j;
        }
    }
    best
}

pub(crate) fn run_forward(graph: &Graph, params: &ParamVector, batch: &Tensor, labels: &[usize]) -> Result<Tape, AdError> {
    check_inputs(graph, params, batch, labels)?;
    let b = batch.batch();
    let theta = &params.data;
    let layout = graph.layout();
    let nodes = graph.nodes();
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(nodes.len());
    let mut pool_argmax = vec![Vec::new(); nodes.len()];

    for (id, node) in nodes.iter().enumerate() {
        let out_size = node.size().max(1);
        let value = match node.op {
            Op::Input => batch.data().to_vec(),
            Op::Affine { input, in_dim, out_dim, weight, bias } => {
                let x = &values[input];
                let w = &theta[layout[weight].range()];
                let mut y = vec![0.0; b * out_dim];
                gemm(b, in_dim, out_dim, 1.0, x, false, w, true, 0.0, &mut y);
                if let Some(bias) = bias {
                    let bv = &theta[layout[bias].range()];
                    for row in y.chunks_exact_mut(out_dim) {
                        row.iter_mut().zip(bv).for_each(|(v, c)| *v += c);
                    }
                }
                y
            }
            Op::Conv2d { input, geom, weight, bias } => {
                conv_forward(&geom, &values[input], b, &theta[layout[weight].range()], bias.map(|s| &theta[layout[s].range()]))
            }
            Op::MaxPool2 { input, channels, height, width } => {
                let x = &values[input];
                let (oh, ow) = (height / 2, width / 2);
                let in_size = channels * height * width;
                let mut y = vec![0.0; b * channels * oh * ow];
                let mut arg = vec![0u32; y.len()];
                for i in 0..b {
                    let xi = &x[i * in_size..(i + 1) * in_size];
                    for c in 0..channels {
                        for py in 0..oh {
                            for px in 0..ow {
                                let mut best = c * height * width + (2 * py) * width + 2 * px;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let cand = c * height * width + (2 * py + dy) * width + 2 * px + dx;
                                    if xi[cand] > xi[best] {
                                        best = cand;
                                    }
                                }
                                let o = i * channels * oh * ow + (c * oh + py) * ow + px;
                                y[o] = xi[best];
                                arg[o] = best as u32;
                            }
                        }
                    }
                }
                pool_argmax[id] = arg;
                y
            }
            Op::Relu { input } => values[input].iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Op::Flatten { input } => values[input].clone(),
            Op::Add { lhs, rhs } => values[lhs].iter().zip(&values[rhs]).map(|(a, c)| a + c).collect(),
            Op::Mul { lhs, rhs } => values[lhs].iter().zip(&values[rhs]).map(|(a, c)| a * c).collect(),
            Op::Sum { input } => {
                let n = nodes[input].size();
                values[input].chunks_exact(n).map(|r| r.iter().sum()).collect()
            }
            Op::Mean { input } => {
                let n = nodes[input].size();
                values[input].chunks_exact(n).map(|r| r.iter().sum::<f64>() / n as f64).collect()
            }
            Op::SoftmaxCrossEntropy { input } => {
                let c = nodes[input].size();
                values[input]
                    .chunks_exact(c)
                    .zip(labels)
                    .map(|(z, &y)| {
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        lse - z[y]
                    })
                    .collect()
            }
            Op::NegMargin { input } => {
                let c = nodes[input].size();
                values[input]
                    .chunks_exact(c)
                    .zip(labels)
                    .map(|(z, &y)| z[argmax_except(z, y)] - z[y])
                    .collect()
            }
            Op::PickLogit { input } => {
                let c = nodes[input].size();
                values[input].chunks_exact(c).zip(labels).map(|(z, &y)| z[y]).collect()
            }
        };
        debug_assert_eq!(value.len(), b * out_size, "{}", graph.node_name(id));
        values.push(value);
    }
    let losses = &values[graph.loss()];
    if let Some(index) = losses.iter().position(|v| !v.is_finite()) {
        return Err(AdError::NonFiniteLoss { index });
    }
    Ok(Tape { batch: b, values, pool_argmax })
}

fn conv_forward(geom: &ConvGeom, x: &[f64], b: usize, w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = geom.plane();
    let in_size = geom.in_ch * plane;
    let out_size = geom.out_ch * plane;
    let mut col = vec![0.0; geom.patch_len() * plane];
    let mut y = vec![0.0; b * out_size];
    for i in 0..b {
        im2col(geom, &x[i * in_size..(i + 1) * in_size], &mut col);
        let yi = &mut y[i * out_size..(i + 1) * out_size];
        gemm(geom.out_ch, geom.patch_len(), plane, 1.0, w, false, &col, false, 0.0, yi);
        if let Some(bias) = bias {
            for (c, chan) in yi.chunks_exact_mut(plane).enumerate() {
                chan.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    y
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

/// Reverse sweep seeded with `d(total)/d(loss_i) = seed[i]`.
pub(crate) fn run_backward(
    graph: &Graph,
    params: &ParamVector,
    tape: &Tape,
    labels: &[usize],
    seed: &[f64],
    mode: ParamMode,
    want_input: bool,
) -> Result<Grads, AdError> {
    let b = tape.batch;
    if seed.len() != b {
        return Err(AdError::Shape {
            node: graph.node_name(graph.loss()),
            detail: format!("{} loss weights for {b} examples", seed.len()),
        });
    }
    let p = graph.num_params();
    let theta = &params.data;
    let layout = graph.layout();
    let nodes = graph.nodes();
    let values = &tape.values;

    let mut pgrad = match mode {
        ParamMode::None => None,
        ParamMode::Summed => Some(vec![0.0; p]),
        ParamMode::PerExample => Some(vec![0.0; b * p]),
    };
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[graph.loss()] = Some(seed.to_vec());
    // The raw input only needs a gradient when explicitly requested.
    let needs = |id: usize| id != 0 || want_input;

    for id in (0..nodes.len()).rev() {
        let Some(dy) = grads[id].take() else { continue };
        if id == 0 {
            grads[0] = Some(dy);
            break;
        }
        match nodes[id].op {
            Op::Input => unreachable!("input is node 0"),
            Op::Affine { input, in_dim, out_dim, weight, bias } => {
                let x = &values[input];
                let w = &theta[layout[weight].range()];
                if needs(input) {
                    let mut dx = vec![0.0; b * in_dim];
                    gemm(b, out_dim, in_dim, 1.0, &dy, false, w, false, 0.0, &mut dx);
                    accumulate(&mut grads[input], dx);
                }
                let wr = layout[weight].range();
                let br = bias.map(|s| layout[s].range());
                match (mode, pgrad.as_mut()) {
                    (ParamMode::Summed, Some(g)) => {
                        gemm(out_dim, b, in_dim, 1.0, &dy, true, x, false, 1.0, &mut g[wr]);
                        if let Some(br) = br {
                            let gb = &mut g[br];
                            for row in dy.chunks_exact(out_dim) {
                                gb.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                            }
                        }
                    }
                    (ParamMode::PerExample, Some(g)) => {
                        for i in 0..b {
                            let row = &mut g[i * p..(i + 1) * p];
                            let xi = &x[i * in_dim..(i + 1) * in_dim];
                            let di = &dy[i * out_dim..(i + 1) * out_dim];
                            let gw = &mut row[wr.clone()];
                            for (o, &d) in di.iter().enumerate() {
                                if d != 0.0 {
                                    gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xi).for_each(|(a, xv)| *a += d * xv);
                                }
                            }
                            if let Some(br) = br.clone() {
                                row[br].iter_mut().zip(di).for_each(|(a, d)| *a += d);
                            }
                        }
                    }
                    _ => {}
                }
            }
            Op::Conv2d { input, geom, weight, bias } => {
                let plane = geom.plane();
                let in_size = geom.in_ch * plane;
                let out_size = geom.out_ch * plane;
                let w = &theta[layout[weight].range()];
                let wr = layout[weight].range();
                let br = bias.map(|s| layout[s].range());
                let x = &values[input];
                let mut col = vec![0.0; geom.patch_len() * plane];
                let mut dcol = vec![0.0; geom.patch_len() * plane];
                let mut dx = needs(input).then(|| vec![0.0; b * in_size]);
                for i in 0..b {
                    let di = &dy[i * out_size..(i + 1) * out_size];
                    if let Some(g) = pgrad.as_mut() {
                        let base = if mode == ParamMode::PerExample { i * p } else { 0 };
                        im2col(&geom, &x[i * in_size..(i + 1) * in_size], &mut col);
                        let gw = &mut g[base + wr.start..base + wr.end];
                        gemm(geom.out_ch, plane, geom.patch_len(), 1.0, di, false, &col, true, 1.0, gw);
                        if let Some(br) = br.clone() {
                            let gb = &mut g[base + br.start..base + br.end];
                            for (c, chan) in di.chunks_exact(plane).enumerate() {
                                gb[c] += chan.iter().sum::<f64>();
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(geom.patch_len(), geom.out_ch, plane, 1.0, w, true, di, false, 0.0, &mut dcol);
                        col2im(&geom, &dcol, &mut dx[i * in_size..(i + 1) * in_size]);
                    }
                }
                if let Some(dx) = dx {
                    accumulate(&mut grads[input], dx);
                }
            }
            Op::MaxPool2 { input, channels, height, width } => {
                if needs(input) {
                    let in_size = channels * height * width;
                    let out_size = in_size / 4;
                    let mut dx = vec![0.0; b * in_size];
                    for (o, (&d, &a)) in dy.iter().zip(&tape.pool_argmax[id]).enumerate() {
                        let i = o / out_size;
                        dx[i * in_size + a as usize] += d;
                    }
                    accumulate(&mut grads[input], dx);
                }
            }
            Op::Relu { input } => {
                if needs(input) {
                    let dx = dy.iter().zip(&values[input]).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                    accumulate(&mut grads[input], dx);
                }
            }
            Op::Flatten { input } => {
                if needs(input) {
                    accumulate(&mut grads[input], dy);
                }
            }
            Op::Add { lhs, rhs } => {
                if needs(lhs) {
                    accumulate(&mut grads[lhs], dy.clone());
                }
                if needs(rhs) {
                    accumulate(&mut grads[rhs], dy);
                }
            }
            Op::Mul { lhs, rhs } => {
                if needs(lhs) {
                    let d = dy.iter().zip(&values[rhs]).map(|(a, c)| a * c).collect();
                    accumulate(&mut grads[lhs], d);
                }
                if needs(rhs) {
                    let d = dy.iter().zip(&values[lhs]).map(|(a, c)| a * c).collect();
                    accumulate(&mut grads[rhs], d);
                }
            }
            Op::Sum { input } | Op::Mean { input } => {
                if needs(input) {
                    let n = nodes[input].size();
                    let scale = if matches!(nodes[id].op, Op::Mean { .. }) { 1.0 / n as f64 } else { 1.0 };
                    let dx = dy.iter().flat_map(|&d| std::iter::repeat_n(d * scale, n)).collect();
                    accumulate(&mut grads[input], dx);
                }
            }
            Op::SoftmaxCrossEntropy { input } => {
                let c = nodes[input].size();
                let mut dz = vec![0.0; b * c];
                for (i, (z, &y)) in values[input].chunks_exact(c).zip(labels).enumerate() {
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                    let row = &mut dz[i * c..(i + 1) * c];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = dy[i] * (z[j] - m).exp() / denom;
                    }
                    row[y] -= dy[i];
                }
                accumulate(&mut grads[input], dz);
            }
            Op::NegMargin { input } => {
                let c = nodes[input].size();
                let mut dz = vec![0.0; b * c];
                for (i, (z, &y)) in values[input].chunks_exact(c).zip(labels).enumerate() {
                    let j = argmax_except(z, y);
                    dz[i * c + j] += dy[i];
                    dz[i * c + y] -= dy[i];
                }
                accumulate(&mut grads[input], dz);
            }
            Op::PickLogit { input } => {
                let c = nodes[input].size();
                let mut dz = vec![0.0; b * c];
                for (i, &y) in labels.iter().enumerate() {
                    dz[i * c + y] = dy[i];
                }
                accumulate(&mut grads[input], dz);
            }
        }
    }
    let input = if want_input { Some(grads[0].take().unwrap_or_else(|| vec![0.0; b * graph.input_size()])) } else { None };
    Ok(Grads { params: pgrad, input })
}
