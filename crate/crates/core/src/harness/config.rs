//! Experiment configuration.
//!
//! Files are flat `key = value` lines; `#` starts a comment and dotted keys
//! group related settings. Every key has a default, so an empty file is a
//! valid configuration (the MNIST-subset desk setup). Overrides given on the
//! command line are applied after the file, in order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attacks::{AttackConfig, Norm};
use crate::data::SynthKind;
use crate::fast_engm::GammaState;
use crate::models::{Architecture, LossKind, ModelSpec};
use crate::optim::{LrSchedule, OptimKind, MGNC_ALPHA, MOMENTUM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataKind {
    #[serde(rename = "idx")]
    Idx,
    #[serde(rename = "cifar-bin")]
    CifarBin,
    #[serde(rename = "synthetic-blobs")]
    Blobs,
    #[serde(rename = "synthetic-moons")]
    Moons,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Idx => "idx",
            Self::CifarBin => "cifar-bin",
            Self::Blobs => "synthetic-blobs",
            Self::Moons => "synthetic-moons",
        }
    }

    pub fn synthetic(self) -> Option<SynthKind> {
        match self {
            Self::Blobs => Some(SynthKind::Blobs),
            Self::Moons => Some(SynthKind::Moons),
            _ => None,
        }
    }
}

impl FromStr for DataKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::Idx, Self::CifarBin, Self::Blobs, Self::Moons]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown dataset kind {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory for `idx` / `cifar-bin` data.
    pub path: PathBuf,
    /// Examples to load (`0` = the whole file; required for CIFAR and synthetic sets).
    pub subset: usize,
    /// Jitter scale for synthetic sets.
    pub noise: f64,
    pub val_size: usize,
    pub test_size: usize,
    /// Seed of the train/validation/test partition, independent of the run seed.
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    /// Per-example cap for engm, fengm and a-engm.
    pub alpha: f64,
    /// Threshold on the averaged gradient for mgnc.
    pub gnc_alpha: f64,
    /// Cap for n-engm, which folds the regression slope into alpha.
    pub naive_alpha: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: LrSchedule,
}

impl OptimConfig {
    /// Config key of the threshold used by `kind`.
    pub fn alpha_key(kind: OptimKind) -> &'static str {
        match kind {
            OptimKind::Mgnc => "optim.gnc_alpha",
            OptimKind::NEngm => "optim.naive_alpha",
            _ => "optim.alpha",
        }
    }

    /// Threshold used by the configured optimizer.
    pub fn effective_alpha(&self) -> f64 {
        match self.kind {
            OptimKind::Mgnc => self.gnc_alpha,
            OptimKind::NEngm => self.naive_alpha,
            _ => self.alpha,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FastConfig {
    pub beta_gamma: f64,
    pub tau: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `input_shape` and `classes` are filled in from the dataset when left empty / zero.
    pub model: ModelSpec,
    pub data: DataConfig,
    /// Training attack; `epsilon = 0` means natural training.
    pub attack: AttackConfig,
    /// Attack used for validation and evaluation.
    pub eval_attack: AttackConfig,
    pub optim: OptimConfig,
    pub fast: FastConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Training examples re-attacked every epoch for gradient statistics (`0` disables).
    pub probe_size: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    /// MNIST-subset desk setup: 4,000 train / 1,000 validation, `[784, 128, 64, 10]`
    /// MLP, 40 epochs with tenfold decays at epochs 25 and 32, PGD-10 training.
    fn default() -> Self {
        Self {
            model: ModelSpec { architecture: Architecture::Mlp, input_shape: vec![], hidden: vec![128, 64], classes: 0, seed: 0 },
            data: DataConfig {
                kind: DataKind::Idx,
                path: PathBuf::from("data/mnist-5k"),
                subset: 5000,
                noise: 0.1,
                val_size: 1000,
                test_size: 0,
                split_seed: 0,
            },
            attack: AttackConfig::training(),
            eval_attack: AttackConfig::evaluation(),
            optim: OptimConfig {
                kind: OptimKind::Msgd,
                // 5 at 11.1M parameters, scaled by sqrt(P / P_ref) to the ~109k-parameter MLP.
                alpha: 0.5,
                gnc_alpha: MGNC_ALPHA,
                // The reference ratio between the naive and approximated caps (0.5 vs 5).
                naive_alpha: 0.05,
                momentum: MOMENTUM,
                weight_decay: 5e-4,
                lr: LrSchedule { initial: 0.1, milestones: vec![25, 32], factor: 0.1 },
            },
            fast: FastConfig { beta_gamma: 0.7, tau: 50 },
            epochs: 40,
            batch_size: 128,
            seed: 0,
            probe_size: 1000,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Parses `a`, or `a/b` as a quotient (handy for `8/255`).
pub fn parse_f64(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            a / b
        }
        None => s.parse().map_err(|e| format!("{s:?}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?} is not a finite number"))
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',').map(|p| p.trim().parse::<T>().map_err(|e| format!("{p:?}: {e}"))).collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

fn parse<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| format!("{s:?}: {e}"))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn loss_name(l: LossKind) -> &'static str {
    match l {
        LossKind::CrossEntropy => "cross_entropy",
        LossKind::Margin => "margin",
    }
}

fn norm_name(n: Norm) -> &'static str {
    match n {
        Norm::Linf => "linf",
        Norm::L2 => "l2",
    }
}

fn set_attack(a: &mut AttackConfig, field: &str, value: &str) -> Result<bool, String> {
    match field {
        "norm" => a.norm = parse(value)?,
        "epsilon" => a.epsilon = parse_f64(value)?,
        "steps" => a.steps = parse(value)?,
        "step_size" => a.step_size = parse_f64(value)?,
        "loss" => a.loss = value.parse()?,
        "random_start" => a.random_start = parse_bool(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// `(line number, key, value)` triples from config text.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| HarnessError::Config { line: Some(i + 1), detail: format!("expected `key = value`, got {line:?}") })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(HarnessError::Config { line: Some(i + 1), detail: "empty key".into() });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "model.arch" => self.model.architecture = value.parse().map_err(|e| format!("{e}"))?,
            "model.hidden" => self.model.hidden = parse_list(value)?,
            "data.kind" => self.data.kind = value.parse()?,
            "data.path" => self.data.path = PathBuf::from(value),
            "data.subset" => self.data.subset = parse(value)?,
            "data.noise" => self.data.noise = parse_f64(value)?,
            "data.val_size" => self.data.val_size = parse(value)?,
            "data.test_size" => self.data.test_size = parse(value)?,
            "data.split_seed" => self.data.split_seed = parse(value)?,
            "optim.kind" => self.optim.kind = value.parse().map_err(|e| format!("{e}"))?,
            "optim.alpha" => self.optim.alpha = parse_f64(value)?,
            "optim.gnc_alpha" => self.optim.gnc_alpha = parse_f64(value)?,
            "optim.naive_alpha" => self.optim.naive_alpha = parse_f64(value)?,
            "optim.momentum" => self.optim.momentum = parse_f64(value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_f64(value)?,
            "optim.lr" => self.optim.lr.initial = parse_f64(value)?,
            "optim.milestones" => self.optim.lr.milestones = parse_list(value)?,
            "optim.lr_factor" => self.optim.lr.factor = parse_f64(value)?,
            "fast.beta_gamma" => self.fast.beta_gamma = parse_f64(value)?,
            "fast.tau" => self.fast.tau = parse(value)?,
            "train.epochs" => self.epochs = parse(value)?,
            "train.batch_size" => self.batch_size = parse(value)?,
            "train.seed" => self.seed = parse(value)?,
            "stats.probe_size" => self.probe_size = parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                let handled = match key.split_once('.') {
                    Some(("attack", f)) => set_attack(&mut self.attack, f, value)?,
                    Some(("eval", f)) => set_attack(&mut self.eval_attack, f, value)?,
                    _ => false,
                };
                if !handled {
                    return Err(format!("unknown key {key:?}"));
                }
            }
        }
        Ok(())
    }

    /// Defaults, then the file text, then `overrides` (`key=value`).
    pub fn from_text(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v).map_err(|detail| HarnessError::Config { line: Some(line), detail })?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config { line: None, detail: format!("override {o:?} is not key=value") })?;
            cfg.set(k.trim(), v.trim()).map_err(|detail| HarnessError::Config { line: None, detail })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_text(&text, overrides).map_err(|e| match e {
            HarnessError::Config { line, detail } => HarnessError::Config { line, detail: format!("{}: {detail}", path.display()) },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |detail: String| Err(HarnessError::Config { line: None, detail });
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !self.attack.is_natural() {
            self.attack.validate().map_err(|e| HarnessError::Config { line: None, detail: format!("attack: {e}") })?;
        }
        self.eval_attack.validate().map_err(|e| HarnessError::Config { line: None, detail: format!("eval: {e}") })?;
        LrSchedule::new(self.optim.lr.initial, self.optim.lr.milestones.clone(), self.optim.lr.factor)
            .map_err(|e| HarnessError::Config { line: None, detail: e.to_string() })?;
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return bad(format!("optim.momentum {} outside [0, 1)", self.optim.momentum));
        }
        if self.optim.kind.uses_alpha() && !(self.optim.effective_alpha() > 0.0) {
            let key = OptimConfig::alpha_key(self.optim.kind);
            return bad(format!("{key} {} must be positive", self.optim.effective_alpha()));
        }
        if !(self.optim.weight_decay >= 0.0) {
            return bad(format!("optim.weight_decay {} is negative", self.optim.weight_decay));
        }
        self.gamma_state().map_err(|e| HarnessError::Config { line: None, detail: e.to_string() })?;
        Ok(())
    }

    /// Initial regression state; naive mode for `n-engm`.
    pub fn gamma_state(&self) -> Result<GammaState, crate::fast_engm::FastEngmError> {
        GammaState::new(self.fast.beta_gamma, self.fast.tau, self.optim.kind == OptimKind::NEngm)
    }

    /// Canonical text form; parsing it back yields an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("model.arch", self.model.architecture.to_string());
        kv("model.hidden", join(&self.model.hidden));
        kv("data.kind", self.data.kind.name().into());
        kv("data.path", self.data.path.display().to_string());
        kv("data.subset", self.data.subset.to_string());
        kv("data.noise", self.data.noise.to_string());
        kv("data.val_size", self.data.val_size.to_string());
        kv("data.test_size", self.data.test_size.to_string());
        kv("data.split_seed", self.data.split_seed.to_string());
        for (prefix, a) in [("attack", &self.attack), ("eval", &self.eval_attack)] {
            kv(&format!("{prefix}.norm"), norm_name(a.norm).into());
            kv(&format!("{prefix}.epsilon"), a.epsilon.to_string());
            kv(&format!("{prefix}.steps"), a.steps.to_string());
            kv(&format!("{prefix}.step_size"), a.step_size.to_string());
            kv(&format!("{prefix}.loss"), loss_name(a.loss).into());
            kv(&format!("{prefix}.random_start"), a.random_start.to_string());
        }
        kv("optim.kind", self.optim.kind.name().into());
        kv("optim.alpha", self.optim.alpha.to_string());
        kv("optim.gnc_alpha", self.optim.gnc_alpha.to_string());
        kv("optim.naive_alpha", self.optim.naive_alpha.to_string());
        kv("optim.momentum", self.optim.momentum.to_string());
        kv("optim.weight_decay", self.optim.weight_decay.to_string());
        kv("optim.lr", self.optim.lr.initial.to_string());
        kv("optim.milestones", join(&self.optim.lr.milestones));
        kv("optim.lr_factor", self.optim.lr.factor.to_string());
        kv("fast.beta_gamma", self.fast.beta_gamma.to_string());
        kv("fast.tau", self.fast.tau.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.seed", self.seed.to_string());
        kv("stats.probe_size", self.probe_size.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}
