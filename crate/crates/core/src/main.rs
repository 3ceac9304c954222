use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde_json::json;

use advopt::ad::{self, Graph, ParamVector};
use advopt::attacks::{loss_landscape, pgd_eval_attack, rho_metric, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT};
use advopt::harness::{
    self, evaluate, init_threads, load_checkpoint, model_for, prepare_data, probe_stats, sweep, sweep_csv, write_run,
    HarnessError, Splits, SweepSummary, TrainConfig,
};
use advopt::models::build_model;
use advopt::tensor::Tensor;

/// Outer-optimizer experiments for adversarial training.
#[derive(Parser)]
#[command(name = "advopt", version)]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    config: PathBuf,
    /// Override a config key, e.g. `--set optim.kind=engm` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write stats, summary and checkpoints to `out_dir`.
    Train(Common),
    /// One run per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, tau, epsilon, weight_decay, optimizer or seed.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Natural and robust accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Loss surface around one evaluation example.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value_t = 0.1)]
        extent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (default `<out_dir>/landscape-<index>.csv`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Gradient statistics and DeepFool distance of a checkpoint.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        /// Evaluation examples used for the DeepFool distance (0 = all).
        #[arg(long, default_value_t = 0)]
        rho_examples: usize,
    },
}

fn restore(cfg: &TrainConfig, splits: &Splits, weights: &Path) -> Result<(Graph, ParamVector), HarnessError> {
    let (graph, fresh) = build_model(&model_for(cfg, &splits.train))?;
    let params = load_checkpoint(weights)?;
    if params.layout != fresh.layout {
        return Err(HarnessError::Checkpoint(format!("{}: parameter layout does not match the configured model", weights.display())));
    }
    Ok((graph, params))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

/// Direction of the evaluation attack at `x`, falling back to the loss gradient.
fn adversarial_direction(graph: &Graph, params: &ParamVector, x: &Tensor, label: usize) -> Result<Tensor, HarnessError> {
    let batch = Tensor::stack(&[x])?;
    let adv = pgd_eval_attack(graph, params, &batch, &[label])?;
    let delta: Vec<f64> = adv.data().iter().zip(x.data()).map(|(a, b)| a - b).collect();
    if delta.iter().any(|&d| d != 0.0) {
        return Ok(Tensor::new(x.shape().to_vec(), delta)?);
    }
    Ok(ad::input_grads(graph, params, &batch, &[label])?.example(0))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Train(c) => {
            let cfg = TrainConfig::load(&c.config, &c.overrides)?;
            let result = harness::train(&cfg)?;
            write_run(&result, &cfg.out_dir)?;
            info!("wrote {}", cfg.out_dir.display());
            println!("{}", pretty(&result.summary));
        }
        Command::Sweep { common: c, param, values } => {
            let cfg = TrainConfig::load(&c.config, &c.overrides)?;
            let results = sweep(&cfg, &param, &values, |_, r| write_run(r, &r.config.out_dir))?;
            let summary = SweepSummary::new(&param, &results);
            write(&cfg.out_dir.join("sweep.csv"), &sweep_csv(&param, &results))?;
            write(&cfg.out_dir.join("sweep.json"), &pretty(&summary))?;
            println!("{}", pretty(&summary));
        }
        Command::Eval { common: c, weights } => {
            let cfg = TrainConfig::load(&c.config, &c.overrides)?;
            let splits = prepare_data(&cfg)?;
            let (graph, params) = restore(&cfg, &splits, &weights)?;
            let split = if splits.test.is_empty() { "val" } else { "test" };
            let data = splits.eval_split();
            let (natural, robust) = evaluate(&graph, &params, data, &cfg.eval_attack)?;
            println!("{}", pretty(&json!({ "split": split, "examples": data.len(), "natural": natural, "robust": robust })));
        }
        Command::Landscape { common: c, weights, index, grid, extent, seed, output } => {
            let cfg = TrainConfig::load(&c.config, &c.overrides)?;
            let splits = prepare_data(&cfg)?;
            let (graph, params) = restore(&cfg, &splits, &weights)?;
            let data = splits.eval_split();
            if index >= data.len() {
                return Err(HarnessError::Usage(format!("index {index} out of range for {} examples", data.len())));
            }
            let x = data.images.example(index);
            let label = data.labels[index];
            let dir = adversarial_direction(&graph, &params, &x, label)?;
            let land = loss_landscape(&graph, &params, &x, label, &dir, grid, extent, seed)?;
            let path = output.unwrap_or_else(|| cfg.out_dir.join(format!("landscape-{index}.csv")));
            write(&path, &land.to_csv())?;
            println!("{}", path.display());
        }
        Command::Stats { common: c, weights, rho_examples } => {
            let cfg = TrainConfig::load(&c.config, &c.overrides)?;
            let splits = prepare_data(&cfg)?;
            let (graph, params) = restore(&cfg, &splits, &weights)?;
            let probe = probe_stats(&graph, &params, &splits.probe, &cfg.attack, cfg.optim.effective_alpha(), None, cfg.seed)?;
            let data = splits.eval_split();
            let data = if rho_examples == 0 { data.clone() } else { data.take(rho_examples) };
            let rho = rho_metric(&graph, &params, &data, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT)?;
            println!(
                "{}",
                pretty(&json!({
                    "mu": probe.mu,
                    "sigma2": probe.sigma2,
                    "pearson_r": probe.pearson_r,
                    "weight_err_pct": probe.weight_err_pct,
                    "gamma0": probe.gamma0,
                    "gamma1": probe.gamma1,
                    "rho": rho.rho,
                    "rho_converged": rho.converged,
                    "rho_total": rho.total,
                }))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
