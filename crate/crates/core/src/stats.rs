//! Gradient statistics and run metrics.
//!
//! `mu` is the mean per-example gradient norm, `sigma2` the mean squared
//! deviation of per-example gradients from their mean. Both can be computed
//! directly from a [`PerExampleGrads`] matrix or streamed chunk by chunk with
//! [`GradMoments`] when the full matrix would not fit in memory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::PerExampleGrads;
use crate::tensor::{dot, l2_norm};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("zero variance: correlation undefined")]
    ZeroVariance,
    #[error("best robust accuracy must be positive, got {0}")]
    NonPositiveBest(f64),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
}

/// Mean of the row norms.
pub fn grad_mu(peg: &PerExampleGrads) -> Result<f64, StatsError> {
    if peg.rows == 0 {
        return Err(StatsError::TooFewRows { need: 1, got: 0 });
    }
    Ok(peg.norms().iter().sum::<f64>() / peg.rows as f64)
}

/// `(1/B) * sum_i ||row_i - mean||^2`.
pub fn grad_sigma2(peg: &PerExampleGrads) -> Result<f64, StatsError> {
    if peg.rows < 2 {
        return Err(StatsError::TooFewRows { need: 2, got: peg.rows });
    }
    let mean = peg.mean_row();
    let total: f64 = peg
        .iter_rows()
        .map(|r| r.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    Ok(total / peg.rows as f64)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::Length(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFewRows { need: 2, got: xs.len() });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `100 * (best - last) / best`, both as accuracies in the same unit.
pub fn overfitting_pct(best_rob: f64, last_rob: f64) -> Result<f64, StatsError> {
    if !(best_rob > 0.0) {
        return Err(StatsError::NonPositiveBest(best_rob));
    }
    Ok(100.0 * (best_rob - last_rob) / best_rob)
}

/// Streaming `mu` / `sigma2` over row chunks.
///
/// Each chunk is reduced exactly (two-pass) and merged with the pairwise
/// update for centred sums of squares, so no cancellation-prone
/// `E||g||^2 - ||E g||^2` is ever formed.
#[derive(Clone, Debug, Default)]
pub struct GradMoments {
    count: usize,
    norm_sum: f64,
    mean: Vec<f64>,
    m2: f64,
}

impl GradMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds a chunk of rows.
    pub fn push(&mut self, peg: &PerExampleGrads) -> Result<(), StatsError> {
        self.merge(&Self::from_rows(peg))
    }

    /// Exact moments of one chunk.
    pub fn from_rows(peg: &PerExampleGrads) -> Self {
        if peg.rows == 0 {
            return Self::default();
        }
        let mean = peg.mean_row();
        let m2 = peg
            .iter_rows()
            .map(|r| r.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
            .sum();
        Self { count: peg.rows, norm_sum: peg.norms().iter().sum(), mean, m2 }
    }

    /// Combines with the moments of a disjoint set of rows.
    pub fn merge(&mut self, other: &GradMoments) -> Result<(), StatsError> {
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        if self.mean.len() != other.mean.len() {
            return Err(StatsError::Length(self.mean.len(), other.mean.len()));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        self.m2 += other.m2 + dot(&delta, &delta) * na * nb / n;
        self.mean.iter_mut().zip(&delta).for_each(|(m, d)| *m += d * nb / n);
        self.norm_sum += other.norm_sum;
        self.count += other.count;
        Ok(())
    }

    pub fn mu(&self) -> Result<f64, StatsError> {
        if self.count == 0 {
            return Err(StatsError::TooFewRows { need: 1, got: 0 });
        }
        Ok(self.norm_sum / self.count as f64)
    }

    pub fn sigma2(&self) -> Result<f64, StatsError> {
        if self.count < 2 {
            return Err(StatsError::TooFewRows { need: 2, got: self.count });
        }
        Ok(self.m2 / self.count as f64)
    }

    /// Norm of the mean gradient.
    pub fn mean_norm(&self) -> f64 {
        l2_norm(&self.mean)
    }
}

/// One row of the per-epoch statistics stream.
///
/// Quantities that are undefined for an epoch (Pearson r with zero variance,
/// weight error for optimizers without a norm estimator) are stored as NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mu: f64,
    pub sigma2: f64,
    pub pearson_r: f64,
    pub weight_err_pct: f64,
    pub nat_acc: f64,
    pub rob_acc: f64,
    pub lr: f64,
    pub gamma0: f64,
    pub gamma1: f64,
}

pub const CSV_HEADER: &str = "epoch,mu,sigma2,pearson_r,weight_err_pct,nat_acc,rob_acc,lr,gamma0,gamma1";

impl EpochStats {
    pub(crate) fn csv_row(&self) -> String {
        let mut s = self.epoch.to_string();
        for v in [self.mu, self.sigma2, self.pearson_r, self.weight_err_pct, self.nat_acc, self.rob_acc, self.lr, self.gamma0, self.gamma1] {
            write!(s, ",{}", fmt_f64(v)).unwrap();
        }
        s
    }

    fn parse_row(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(format!("expected 10 fields, got {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i} {:?}: {e}", f[i]));
        Ok(Self {
            epoch: f[0].parse().map_err(|e| format!("epoch {:?}: {e}", f[0]))?,
            mu: num(1)?,
            sigma2: num(2)?,
            pearson_r: num(3)?,
            weight_err_pct: num(4)?,
            nat_acc: num(5)?,
            rob_acc: num(6)?,
            lr: num(7)?,
            gamma0: num(8)?,
            gamma1: num(9)?,
        })
    }
}

/// Seventeen significant digits: enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// CSV text for a stats stream.
pub fn stats_csv(rows: &[EpochStats]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn emit_csv(rows: &[EpochStats], path: &Path) -> Result<(), StatsError> {
    std::fs::write(path, stats_csv(rows)).map_err(|source| StatsError::Io { path: path.to_owned(), source })
}

pub fn read_csv(path: &Path) -> Result<Vec<EpochStats>, StatsError> {
    let text = std::fs::read_to_string(path).map_err(|source| StatsError::Io { path: path.to_owned(), source })?;
    let mut lines = text.lines();
    let perr = |line, detail| StatsError::Parse { path: path.to_owned(), line, detail };
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(perr(1, format!("bad header {other:?}"))),
    }
    lines.enumerate().map(|(i, l)| EpochStats::parse_row(l).map_err(|d| perr(i + 2, d))).collect()
}

/// Running maximum of a sequence (NaN entries are skipped).
pub fn running_max(values: &[f64]) -> Vec<f64> {
    let mut best = f64::NEG_INFINITY;
    values
        .iter()
        .map(|&v| {
            if v > best {
                best = v;
            }
            best
        })
        .collect()
}

/// Mean over the finite entries, NaN if there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().filter(|v| v.is_finite()) {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Machine-readable summary of one run. Accuracies are fractions; values
/// that are undefined for the run are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub optimizer: String,
    /// Natural accuracy of the selected (best robust) model.
    pub natural: f64,
    pub best: f64,
    pub last: f64,
    pub overfitting_pct: Option<f64>,
    pub best_epoch: usize,
    pub mu_mean: Option<f64>,
    pub sigma2_mean: Option<f64>,
    pub sigma2_max: Option<f64>,
    /// Pearson r averaged over the last (up to) 10 epochs.
    pub pearson_last10: Option<f64>,
    pub weight_err_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rho: Option<f64>,
}

/// `Some(v)` for finite `v`.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn peg(rows: &[&[f64]]) -> PerExampleGrads {
        PerExampleGrads::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn mu_examples() {
        assert_eq!(grad_mu(&peg(&[&[3.0, 4.0], &[0.0, 0.0]])).unwrap(), 2.5);
        assert_eq!(grad_mu(&peg(&[&[3.0, 4.0]])).unwrap(), 5.0);
        assert_eq!(grad_mu(&peg(&[&[0.0, 2.0], &[0.0, 2.0]])).unwrap(), 2.0);
    }

    #[test]
    fn sigma2_examples() {
        assert_eq!(grad_sigma2(&peg(&[&[1.0, 0.0], &[3.0, 0.0]])).unwrap(), 1.0);
        assert_eq!(grad_sigma2(&peg(&[&[1.0, 5.0], &[1.0, 5.0]])).unwrap(), 0.0);
        assert_eq!(grad_sigma2(&peg(&[&[0.0, 0.0], &[0.0, 2.0]])).unwrap(), 1.0);
        assert!(matches!(grad_sigma2(&peg(&[&[1.0]])), Err(StatsError::TooFewRows { .. })));
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 2.0, 1.0, 2.0], &[5.0, 5.0, 9.0, 9.0]).unwrap(), 0.0);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::ZeroVariance)));
    }

    #[test]
    fn overfitting_examples() {
        assert!((overfitting_pct(50.87, 44.15).unwrap() - 13.2).abs() < 0.05);
        assert_eq!(overfitting_pct(0.4, 0.4).unwrap(), 0.0);
        assert!((overfitting_pct(53.04, 52.76).unwrap() - 0.528).abs() < 1e-3);
        assert!(overfitting_pct(0.0, 0.0).is_err());
    }

    #[test]
    fn chunked_moments_match_direct() {
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, (i * i) as f64 * 0.5 - 3.0, 1.0]).collect();
        let all = PerExampleGrads::from_rows(&rows);
        let mut m = GradMoments::new();
        for chunk in rows.chunks(3) {
            m.push(&PerExampleGrads::from_rows(chunk)).unwrap();
        }
        assert_eq!(m.count(), 7);
        assert!((m.mu().unwrap() - grad_mu(&all).unwrap()).abs() < 1e-12);
        assert!((m.sigma2().unwrap() - grad_sigma2(&all).unwrap()).abs() < 1e-10);
        assert!((m.mean_norm() - l2_norm(&all.mean_row())).abs() < 1e-12);
    }

    #[test]
    fn csv_shapes() {
        assert_eq!(stats_csv(&[]), format!("{CSV_HEADER}\n"));
        let row = EpochStats {
            epoch: 1,
            mu: 0.1,
            sigma2: 1.0 / 3.0,
            pearson_r: f64::NAN,
            weight_err_pct: 2.5,
            nat_acc: 0.9,
            rob_acc: 0.4,
            lr: 0.1,
            gamma0: 0.0,
            gamma1: 1.0,
        };
        assert_eq!(stats_csv(&[row, row]).lines().count(), 3);
    }

    #[test]
    fn running_max_is_monotone() {
        assert_eq!(running_max(&[1.0, 0.5, 2.0, f64::NAN, 1.5]), vec![1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
