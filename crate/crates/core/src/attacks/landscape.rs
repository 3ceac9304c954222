use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::AttackError;
use crate::ad::{self, Graph, ParamVector};
use crate::tensor::{dot, l2_norm, Tensor};

/// Loss sampled on the plane spanned by the adversarial direction and an
/// orthogonal random direction.
#[derive(Clone, Debug)]
pub struct Landscape {
    /// Offsets along the adversarial direction `u` (rows).
    pub a_offsets: Vec<f64>,
    /// Offsets along the orthogonal direction `r` (columns).
    pub b_offsets: Vec<f64>,
    /// `values[i][j]` is the loss at `x + a_i u + b_j r`.
    pub values: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub r: Vec<f64>,
}

fn offsets(n: usize, extent: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let span = (n - 1) as f64;
    (0..n).map(|i| extent * (2.0 * i as f64 - span) / span).collect()
}

/// Unit vector orthogonal to the unit vector `u`, obtained by Gram-Schmidt
/// on a seeded Gaussian draw (orthogonalized twice for accuracy).
pub fn orthogonal_direction(u: &[f64], seed: u64) -> Result<Vec<f64>, AttackError> {
    if u.len() < 2 {
        return Err(AttackError::InvalidConfig("need at least 2 input dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..16 {
        let mut r: Vec<f64> = (0..u.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            let proj = dot(&r, u);
            r.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        let n = l2_norm(&r);
        if n > 1e-8 {
            r.iter_mut().for_each(|v| *v /= n);
            return Ok(r);
        }
    }
    Err(AttackError::ZeroDirection)
}

/// Evaluates the graph's loss on a `grid_n x grid_n` grid spanning
/// `[-extent, extent]` in both directions.
#[allow(clippy::too_many_arguments)]
pub fn loss_landscape(
    graph: &Graph,
    params: &ParamVector,
    x: &Tensor,
    label: usize,
    adv_dir: &Tensor,
    grid_n: usize,
    extent: f64,
    seed: u64,
) -> Result<Landscape, AttackError> {
    if grid_n == 0 {
        return Err(AttackError::InvalidConfig("grid size must be positive".into()));
    }
    if adv_dir.len() != x.len() {
        return Err(AttackError::InvalidConfig(format!("direction has {} entries, input {}", adv_dir.len(), x.len())));
    }
    let norm = l2_norm(adv_dir.data());
    if norm == 0.0 || !norm.is_finite() {
        return Err(AttackError::ZeroDirection);
    }
    let u: Vec<f64> = adv_dir.data().iter().map(|v| v / norm).collect();
    let r = orthogonal_direction(&u, seed)?;
    let a_offsets = offsets(grid_n, extent);
    let b_offsets = offsets(grid_n, extent);

    let d = x.len();
    let mut points = Vec::with_capacity(grid_n * grid_n * d);
    for &a in &a_offsets {
        for &b in &b_offsets {
            points.extend(x.data().iter().zip(&u).zip(&r).map(|((xv, uv), rv)| xv + a * uv + b * rv));
        }
    }
    let mut shape = vec![grid_n * grid_n];
    shape.extend_from_slice(x.shape());
    let batch = Tensor::new(shape, points)?;
    let (losses, _) = ad::forward(graph, params, &batch, &vec![label; grid_n * grid_n])?;
    let values = losses.chunks_exact(grid_n).map(<[f64]>::to_vec).collect();
    Ok(Landscape { a_offsets, b_offsets, values, u, r })
}

impl Landscape {
    /// CSV with a header row of `b` offsets and a leading column of `a` offsets.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a\\b");
        for b in &self.b_offsets {
            write!(out, ",{b:.16e}").unwrap();
        }
        out.push('\n');
        for (a, row) in self.a_offsets.iter().zip(&self.values) {
            write!(out, "{a:.16e}").unwrap();
            for v in row {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AttackError> {
        std::fs::write(path, self.to_csv()).map_err(|e| AttackError::Io(format!("{}: {e}", path.display())))
    }
}
