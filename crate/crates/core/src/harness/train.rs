use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{DataKind, OptimConfig, TrainConfig};
use super::HarnessError;
use crate::ad::{self, GradRequest, Graph, ParamMode, ParamVector};
use crate::attacks::{pgd_batch, AttackConfig};
use crate::data::{load_cifar_bin, load_idx, synth_dataset, Dataset};
use crate::fast_engm::{estimate_weights, fast_engm_train_step, linreg, weight_error, GammaState};
use crate::models::{argmax, build_model, ModelSpec};
use crate::optim::{self, add_weight_decay, add_weight_decay_rows, clip_weight, lr_at, GradInput, OptimKind, OptimState};
use crate::stats::{
    finite, finite_mean, overfitting_pct, pearson, running_max, stats_csv, EpochStats, GradMoments, RunSummary,
    CSV_HEADER,
};
use crate::tensor::l2_norm;

/// Rows per chunk for probe statistics and evaluation. Bounds the
/// per-example gradient buffer to `CHUNK * num_params` floats.
const CHUNK: usize = 128;

/// Sweepable parameters and the config keys they set.
pub const SWEEP_PARAMS: [(&str, &str); 6] = [
    ("alpha", "optim.alpha"),
    ("tau", "fast.tau"),
    ("epsilon", "attack.epsilon"),
    ("weight_decay", "optim.weight_decay"),
    ("optimizer", "optim.kind"),
    ("seed", "train.seed"),
];

/// Config key set by a sweep over `param`. `alpha` resolves to the
/// threshold of the base optimizer.
pub fn sweep_key(param: &str, base: &TrainConfig) -> Result<&'static str, HarnessError> {
    if param == "alpha" {
        return Ok(OptimConfig::alpha_key(base.optim.kind));
    }
    SWEEP_PARAMS.iter().find(|(p, _)| *p == param).map(|(_, k)| *k).ok_or_else(|| {
        let names: Vec<_> = SWEEP_PARAMS.iter().map(|(p, _)| *p).collect();
        HarnessError::Usage(format!("unknown sweep parameter {param:?} (expected one of {})", names.join(", ")))
    })
}

/// Configures the global rayon pool. Results do not depend on the thread
/// count: parallel work is split into fixed chunks with their own seeds and
/// reduced in chunk order.
pub fn init_threads(n: usize) -> Result<(), HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| HarnessError::Usage(format!("thread pool: {e}")))
}

/// Derives an independent stream seed (splitmix64 finalizer).
fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Disjoint partitions of the loaded data. The probe set is a fixed subset of
/// the training split.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub probe: Dataset,
}

impl Splits {
    /// Test split when present, otherwise validation.
    pub fn eval_split(&self) -> &Dataset {
        if self.test.is_empty() {
            &self.val
        } else {
            &self.test
        }
    }
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset, HarnessError> {
    let d = &cfg.data;
    let ds = match d.kind {
        DataKind::Idx => {
            let all = load_idx(&d.path)?;
            if d.subset == 0 {
                all
            } else if d.subset > all.len() {
                return Err(crate::data::DataError::NotEnough { requested: d.subset, available: all.len() }.into());
            } else {
                all.take(d.subset)
            }
        }
        DataKind::CifarBin => load_cifar_bin(&d.path, d.subset)?,
        DataKind::Blobs | DataKind::Moons => {
            synth_dataset(d.kind.synthetic().expect("synthetic kind"), d.subset, d.noise, d.split_seed)?
        }
    };
    Ok(ds)
}

/// Loads the dataset and carves test, validation and probe sets.
pub fn prepare_data(cfg: &TrainConfig) -> Result<Splits, HarnessError> {
    let all = load_dataset(cfg)?;
    let seed = cfg.data.split_seed;
    let (rest, test) = all.split_off(cfg.data.test_size, mix(seed, 1, 0))?;
    let (train, val) = rest.split_off(cfg.data.val_size, mix(seed, 2, 0))?;
    let probe = if cfg.probe_size == 0 {
        Dataset::empty(train.feature_shape().to_vec(), train.classes)
    } else {
        train.split_off(cfg.probe_size.min(train.len() - 1), mix(seed, 3, 0))?.1
    };
    info!("data: {} train, {} val, {} test, {} probe", train.len(), val.len(), test.len(), probe.len());
    Ok(Splits { train, val, test, probe })
}

/// Model spec with the input shape and class count taken from `data`.
pub fn model_for(cfg: &TrainConfig, data: &Dataset) -> ModelSpec {
    let mut spec = cfg.model.clone();
    if spec.input_shape.is_empty() {
        spec.input_shape = data.feature_shape().to_vec();
    }
    if spec.classes == 0 {
        spec.classes = data.classes;
    }
    spec.seed = mix(cfg.seed, 4, 0);
    spec
}

fn chunk_indices(n: usize) -> Vec<Vec<usize>> {
    (0..n).step_by(CHUNK).map(|s| (s..(s + CHUNK).min(n)).collect()).collect()
}

fn attack_chunk(
    graph: &Graph,
    params: &ParamVector,
    data: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<crate::tensor::Tensor, HarnessError> {
    if attack.is_natural() {
        return Ok(data.images.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pgd_batch(graph, params, &data.images, &data.labels, attack, &mut rng)?.adversarial)
}

fn count_correct(graph: &Graph, params: &ParamVector, x: &crate::tensor::Tensor, labels: &[usize]) -> Result<usize, HarnessError> {
    let (_, logits) = ad::forward(graph, params, x, labels)?;
    Ok((0..labels.len()).filter(|&i| argmax(logits.row(i)) == labels[i]).count())
}

/// `(natural accuracy, robust accuracy)` of `params` on `data` under `attack`.
pub fn evaluate(graph: &Graph, params: &ParamVector, data: &Dataset, attack: &AttackConfig) -> Result<(f64, f64), HarnessError> {
    if data.is_empty() {
        return Err(crate::attacks::AttackError::EmptyDataset.into());
    }
    let counts: Vec<(usize, usize)> = chunk_indices(data.len())
        .into_par_iter()
        .enumerate()
        .map(|(c, idx)| {
            let part = data.subset(&idx);
            let nat = count_correct(graph, params, &part.images, &part.labels)?;
            let rob = if attack.is_natural() {
                nat
            } else {
                let adv = attack_chunk(graph, params, &part, attack, mix(0, 5, c as u64))?;
                count_correct(graph, params, &adv, &part.labels)?
            };
            Ok((nat, rob))
        })
        .collect::<Result<_, HarnessError>>()?;
    let n = data.len() as f64;
    let nat: usize = counts.iter().map(|c| c.0).sum();
    let rob: usize = counts.iter().map(|c| c.1).sum();
    Ok((nat as f64 / n, rob as f64 / n))
}

/// Gradient statistics on a (re-attacked) probe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub mu: f64,
    pub sigma2: f64,
    /// Norm of the mean gradient.
    pub mean_norm: f64,
    pub pearson_r: f64,
    pub weight_err_pct: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub input_norms: Vec<f64>,
    pub param_norms: Vec<f64>,
}

/// Statistics of the per-example loss gradients on `probe` after attacking
/// it with `attack`.
///
/// The weight error compares exact capped weights `min(alpha / ||grad_theta||, 1)`
/// with the regression estimate. `gamma` supplies the coefficients (the
/// running state of a fast ENGM run); without it they are fitted on the
/// probe itself.
pub fn probe_stats(
    graph: &Graph,
    params: &ParamVector,
    probe: &Dataset,
    attack: &AttackConfig,
    alpha: f64,
    gamma: Option<&GammaState>,
    seed: u64,
) -> Result<ProbeStats, HarnessError> {
    if probe.len() < 2 {
        return Err(crate::stats::StatsError::TooFewRows { need: 2, got: probe.len() }.into());
    }
    let req = GradRequest { params: ParamMode::PerExample, input: true };
    let parts: Vec<(GradMoments, Vec<f64>, Vec<f64>)> = chunk_indices(probe.len())
        .into_par_iter()
        .enumerate()
        .map(|(c, idx)| {
            let part = probe.subset(&idx);
            let x = attack_chunk(graph, params, &part, attack, mix(seed, 6, c as u64))?;
            let ev = ad::evaluate(graph, params, &x, &part.labels, &vec![1.0; idx.len()], req)?;
            let peg = ev.per_example.expect("per-example requested");
            let gx = ev.input_grad.expect("input gradient requested");
            let input_norms = (0..idx.len()).map(|i| l2_norm(gx.row(i))).collect();
            Ok((GradMoments::from_rows(&peg), input_norms, peg.norms()))
        })
        .collect::<Result<_, HarnessError>>()?;

    let mut moments = GradMoments::new();
    let (mut xs, mut ys) = (Vec::with_capacity(probe.len()), Vec::with_capacity(probe.len()));
    for (m, x, y) in parts {
        moments.merge(&m)?;
        xs.extend(x);
        ys.extend(y);
    }
    let r = pearson(&xs, &ys).unwrap_or(f64::NAN);
    let g = match gamma {
        Some(g) => *g,
        None => {
            let fit = linreg(&xs, &ys)?;
            GammaState { gamma0: fit.intercept, gamma1: fit.slope, beta_gamma: 0.0, tau: 1, naive: false }
        }
    };
    let exact: Vec<f64> = ys.iter().map(|&n| clip_weight(n, alpha)).collect();
    let est = estimate_weights(&xs, &g, alpha)?;
    Ok(ProbeStats {
        mu: moments.mu()?,
        sigma2: moments.sigma2()?,
        mean_norm: moments.mean_norm(),
        pearson_r: r,
        weight_err_pct: weight_error(&exact, &est.weights)?,
        gamma0: g.gamma0,
        gamma1: g.gamma1,
        input_norms: xs,
        param_norms: ys,
    })
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: TrainConfig,
    pub best_params: ParamVector,
    pub last_params: ParamVector,
    pub history: Vec<EpochStats>,
    /// 1-based epoch of the best validation robust accuracy (first on ties).
    pub best_epoch: usize,
    pub summary: RunSummary,
    pub steps: u64,
    /// Regression refreshes performed by a fast ENGM run.
    pub refreshes: usize,
    /// Backpropagations outside the inner attack, with a per-example pass counted as `B`.
    pub backward_passes: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    cfg: &TrainConfig,
    graph: &Graph,
    params: &mut ParamVector,
    optim: &mut OptimState,
    gamma: &mut GammaState,
    batch: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, bool), HarnessError> {
    let (x, y) = (&batch.images, &batch.labels[..]);
    let b = y.len();
    let wd = cfg.optim.weight_decay;
    let kind = cfg.optim.kind;
    if kind.is_fast() {
        let d = fast_engm_train_step(graph, params, optim, gamma, x, y, &cfg.attack, optim.alpha, wd, rng)?;
        debug!("step {} gamma=({:.4}, {:.4}) w_mean={:.4}", d.step, d.gamma0, d.gamma1, d.mean_weight);
        return Ok((d.backward_passes, d.refreshed));
    }
    let adv;
    let x_in = if cfg.attack.is_natural() {
        x
    } else {
        adv = pgd_batch(graph, params, x, y, &cfg.attack, rng)?.adversarial;
        &adv
    };
    let passes = match kind {
        OptimKind::Msgd | OptimKind::Mgnc => {
            let mut g = ad::backward_batch(graph, params, x_in, y)?;
            add_weight_decay(&mut g, params, wd, 1.0);
            optim::step(optim, GradInput::Mean(&g), params)?;
            1
        }
        OptimKind::Sngm => {
            let mut g = ad::backward_weighted(graph, params, x_in, y, &vec![1.0; b])?;
            add_weight_decay(&mut g, params, wd, b as f64);
            optim::step(optim, GradInput::Summed(&g), params)?;
            1
        }
        OptimKind::Engm | OptimKind::Fengm => {
            let mut peg = ad::per_example_grads(graph, params, x_in, y)?;
            add_weight_decay_rows(&mut peg, params, wd);
            optim::step(optim, GradInput::PerExample(&peg), params)?;
            b
        }
        OptimKind::AEngm | OptimKind::NEngm => unreachable!("fast variants handled above"),
    };
    Ok((passes, false))
}

/// Loads data and trains.
pub fn train(cfg: &TrainConfig) -> Result<RunResult, HarnessError> {
    let splits = prepare_data(cfg)?;
    train_on(cfg, &splits)
}

/// Trains on already prepared splits.
pub fn train_on(cfg: &TrainConfig, splits: &Splits) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(crate::data::DataError::Invalid("empty training split".into()).into());
    }
    let spec = model_for(cfg, &splits.train);
    let (graph, mut params) = build_model(&spec)?;
    let kind = cfg.optim.kind;
    let alpha = cfg.optim.effective_alpha();
    let mut optim = OptimState::new(kind, params.len(), cfg.optim.momentum, cfg.optim.lr.initial, alpha)?;
    let mut gamma = cfg.gamma_state()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 7, 0));
    let mut order: Vec<usize> = (0..splits.train.len()).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamVector)> = None;
    let (mut refreshes, mut backward_passes) = (0, 0);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.optim.lr, epoch);
        optim.lr = lr;
        order.shuffle(&mut rng);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = splits.train.subset(idx);
            let (passes, refreshed) = train_batch(cfg, &graph, &mut params, &mut optim, &mut gamma, &batch, &mut rng)
                .map_err(|e| HarnessError::Train { epoch: epoch + 1, batch: bi, source: Box::new(e) })?;
            backward_passes += passes;
            refreshes += usize::from(refreshed);
        }

        let wrap = |e| HarnessError::Train { epoch: epoch + 1, batch: usize::MAX, source: Box::new(e) };
        let probe = if splits.probe.len() >= 2 {
            let g = kind.is_fast().then_some(&gamma);
            Some(probe_stats(&graph, &params, &splits.probe, &cfg.attack, alpha, g, mix(cfg.seed, 8, epoch as u64)).map_err(wrap)?)
        } else {
            None
        };
        let (nat, rob) = if splits.val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate(&graph, &params, &splits.val, &cfg.eval_attack).map_err(wrap)?
        };
        let row = EpochStats {
            epoch: epoch + 1,
            mu: probe.as_ref().map_or(f64::NAN, |p| p.mu),
            sigma2: probe.as_ref().map_or(f64::NAN, |p| p.sigma2),
            pearson_r: probe.as_ref().map_or(f64::NAN, |p| p.pearson_r),
            weight_err_pct: probe.as_ref().map_or(f64::NAN, |p| p.weight_err_pct),
            nat_acc: nat,
            rob_acc: rob,
            lr,
            gamma0: probe.as_ref().map_or(gamma.gamma0, |p| p.gamma0),
            gamma1: probe.as_ref().map_or(gamma.gamma1, |p| p.gamma1),
        };
        info!(
            "[{kind} seed {}] epoch {:>3}: nat {:.4} rob {:.4} mu {:.4} sigma2 {:.4} r {:.3} w_err {:.2}%",
            cfg.seed, row.epoch, row.nat_acc, row.rob_acc, row.mu, row.sigma2, row.pearson_r, row.weight_err_pct
        );
        history.push(row);
        if best.as_ref().is_none_or(|(b, _, _)| rob > *b) && !rob.is_nan() {
            best = Some((rob, epoch + 1, params.clone()));
        }
    }

    let last = history.last().expect("at least one epoch");
    let (best_rob, best_epoch, best_params) = best.unwrap_or((last.rob_acc, last.epoch, params.clone()));
    let natural = history[best_epoch - 1].nat_acc;
    let tail = &history[history.len().saturating_sub(10)..];
    let sigma2s: Vec<f64> = history.iter().map(|h| h.sigma2).collect();
    let summary = RunSummary {
        optimizer: kind.name().to_string(),
        natural,
        best: best_rob,
        last: last.rob_acc,
        overfitting_pct: overfitting_pct(best_rob, last.rob_acc).ok().and_then(finite),
        best_epoch,
        mu_mean: finite(finite_mean(history.iter().map(|h| h.mu))),
        sigma2_mean: finite(finite_mean(sigma2s.iter().copied())),
        sigma2_max: running_max(&sigma2s).last().copied().and_then(finite),
        pearson_last10: finite(finite_mean(tail.iter().map(|h| h.pearson_r))),
        weight_err_mean: finite(finite_mean(history.iter().map(|h| h.weight_err_pct))),
        rho: None,
    };
    Ok(RunResult {
        config: cfg.clone(),
        best_params,
        last_params: params,
        history,
        best_epoch,
        summary,
        steps: optim.step,
        refreshes,
        backward_passes,
    })
}

/// Writes `stats.csv`, `summary.json`, `config.txt`, `best.ckpt` and `last.ckpt` into `dir`.
pub fn write_run(result: &RunResult, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| HarnessError::io(&p, e))
    };
    write("stats.csv", stats_csv(&result.history).as_bytes())?;
    write("summary.json", serde_json::to_string_pretty(&result.summary).expect("summary serializes").as_bytes())?;
    write("config.txt", result.config.to_text().as_bytes())?;
    save_checkpoint(&result.best_params, &dir.join("best.ckpt"))?;
    save_checkpoint(&result.last_params, &dir.join("last.ckpt"))?;
    Ok(())
}

/// JSON summary of a sweep: one entry per swept value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param: String,
    pub runs: Vec<SweepRun>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: String,
    #[serde(flatten)]
    pub summary: RunSummary,
}

impl SweepSummary {
    pub fn new(param: &str, results: &[(String, RunResult)]) -> Self {
        let runs = results.iter().map(|(v, r)| SweepRun { value: v.clone(), summary: r.summary.clone() }).collect();
        Self { param: param.to_string(), runs }
    }
}

fn dir_name(value: &str) -> String {
    value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// One independent run per value of `param`, sharing the base config's data.
/// `on_run` sees each result as soon as it is available.
pub fn sweep(
    base: &TrainConfig,
    param: &str,
    values: &[String],
    mut on_run: impl FnMut(&str, &RunResult) -> Result<(), HarnessError>,
) -> Result<Vec<(String, RunResult)>, HarnessError> {
    let key = sweep_key(param, base)?;
    if values.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.clone();
            c.set(key, v).map_err(|detail| HarnessError::Config { line: None, detail })?;
            c.out_dir = base.out_dir.join(format!("{param}-{}", dir_name(v)));
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let splits = prepare_data(base)?;
    let mut out = Vec::with_capacity(values.len());
    for (v, c) in values.iter().zip(configs) {
        info!("sweep {param} = {v}");
        let r = train_on(&c, &splits)?;
        on_run(v, &r)?;
        out.push((v.clone(), r));
    }
    Ok(out)
}

/// All histories in one table with the swept value as the leading column.
pub fn sweep_csv(param: &str, results: &[(String, RunResult)]) -> String {
    let mut out = format!("{param},{CSV_HEADER}\n");
    for (v, r) in results {
        for row in &r.history {
            out.push_str(&format!("{v},{}\n", row.csv_row()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_separates_streams() {
        assert_ne!(mix(0, 1, 0), mix(0, 2, 0));
        assert_ne!(mix(0, 1, 0), mix(0, 1, 1));
        assert_eq!(mix(3, 1, 4), mix(3, 1, 4));
    }

    #[test]
    fn sweep_params_are_known_config_keys() {
        let mut c = TrainConfig::default();
        for (p, k) in SWEEP_PARAMS {
            let v = match p {
                "optimizer" => "engm",
                "tau" | "seed" => "3",
                _ => "0.5",
            };
            c.set(k, v).unwrap();
        }
        assert!(sweep_key("momentum", &c).is_err());
        c.optim.kind = OptimKind::NEngm;
        assert_eq!(sweep_key("alpha", &c).unwrap(), "optim.naive_alpha");
    }

    #[test]
    fn dir_names_are_path_safe() {
        assert_eq!(dir_name("8/255"), "8_255");
        assert_eq!(dir_name("a-engm"), "a-engm");
    }
}
