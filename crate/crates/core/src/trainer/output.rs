use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{AblationMode, RunConfig};
use crate::nn::ParamSet;
use crate::valuation::{Temperature, TwinCritics};

use super::{TrainError, Trainer};

pub const SUMMARY_FORMAT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub episodes: usize,
    pub ret_mean: f64,
    pub ret_std: f64,
    pub critic_loss: f64,
    pub alpha: f64,
    pub shapley_q_mean: Vec<f64>,
    pub bc_loglik_mean: f64,
}

pub fn metrics_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "episodes",
        "ret_mean",
        "ret_std",
        "critic_loss",
        "alpha",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..n).map(|i| format!("shapley_q_mean_agent{i}")));
    h.push("bc_loglik_mean".into());
    h
}

impl MetricsRecord {
    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.step.to_string(),
            self.episodes.to_string(),
            self.ret_mean.to_string(),
            self.ret_std.to_string(),
            self.critic_loss.to_string(),
            self.alpha.to_string(),
        ];
        f.extend(self.shapley_q_mean.iter().map(f64::to_string));
        f.push(self.bc_loglik_mean.to_string());
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub eval_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub total_steps: usize,
    pub episodes: usize,
    /// Mean training return over the last recorded iteration.
    pub final_ret_mean: f64,
    pub final_eval_return: Option<f64>,
    pub best_eval_return: Option<f64>,
    pub optimal_return: Option<f64>,
    pub threshold: Option<f64>,
    pub steps_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub format_version: u32,
    pub seed: u64,
    pub ablation: AblationMode,
    pub env: String,
    pub completed: bool,
    pub error: Option<String>,
    pub config: RunConfig,
    pub env_constants: Value,
    pub stats: FinalStats,
    pub wall_time_s: f64,
    pub finished_unix_s: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: usize,
    pub action_dim: usize,
    pub policies: Vec<ParamSet>,
    pub critics: TwinCritics,
    pub temperature: Temperature,
}

pub fn read_summary(path: &Path) -> Result<RunSummary, TrainError> {
    let text =
        fs::read_to_string(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
}

fn io<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> TrainError + '_ {
    move |e| TrainError::Io(format!("{}: {e}", path.display()))
}

/// Writes checkpoint `step_<step>.json` under `dir`.
pub fn write_checkpoint(trainer: &Trainer, dir: &Path) -> Result<PathBuf, TrainError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let path = dir.join(format!("step_{}.json", trainer.step()));
    let text = serde_json::to_string(&trainer.checkpoint()).map_err(io(&path))?;
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

/// Trains to completion, streaming metrics and evaluations to `out_dir`.
///
/// Rows are flushed as they are produced, so a failed run leaves the metrics
/// written so far; the summary then records the error.
pub fn run_to_dir(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary, TrainError> {
    let started = Instant::now();
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let eval_path = out_dir.join(EVAL_FILE);
    let mut metrics = csv::WriterBuilder::new()
        .from_path(&metrics_path)
        .map_err(io(&metrics_path))?;
    let mut evals = csv::WriterBuilder::new()
        .from_path(&eval_path)
        .map_err(io(&eval_path))?;
    metrics
        .write_record(metrics_header(cfg.n))
        .map_err(io(&metrics_path))?;
    evals
        .write_record(["step", "eval_return"])
        .map_err(io(&eval_path))?;
    metrics.flush().map_err(io(&metrics_path))?;
    evals.flush().map_err(io(&eval_path))?;

    let ckpt_dir = out_dir.join(CHECKPOINT_DIR);
    let mut last_ckpt = 0usize;
    let mut last_ret = f64::NAN;
    let mut failure = None;
    while !trainer.finished() {
        match trainer.train_iteration() {
            Ok((rec, eval)) => {
                last_ret = rec.ret_mean;
                metrics
                    .write_record(rec.fields())
                    .map_err(io(&metrics_path))?;
                metrics.flush().map_err(io(&metrics_path))?;
                if let Some(e) = eval {
                    evals
                        .write_record([e.step.to_string(), e.eval_return.to_string()])
                        .map_err(io(&eval_path))?;
                    evals.flush().map_err(io(&eval_path))?;
                }
                if cfg.checkpoint_interval > 0
                    && trainer.step() - last_ckpt >= cfg.checkpoint_interval
                {
                    write_checkpoint(&trainer, &ckpt_dir)?;
                    last_ckpt = trainer.step();
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if failure.is_none() {
        write_checkpoint(&trainer, &ckpt_dir)?;
    }

    let summary = RunSummary {
        format_version: SUMMARY_FORMAT_VERSION,
        seed: cfg.seed,
        ablation: cfg.ablation,
        env: cfg.env.clone(),
        completed: failure.is_none(),
        error: failure.as_ref().map(|e| e.to_string()),
        config: cfg.clone(),
        env_constants: trainer.env_constants(),
        stats: trainer.final_stats(last_ret),
        wall_time_s: started.elapsed().as_secs_f64(),
        finished_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let summary_path = out_dir.join(SUMMARY_FILE);
    let mut f = File::create(&summary_path).map_err(io(&summary_path))?;
    f.write_all(
        serde_json::to_string_pretty(&summary)
            .map_err(io(&summary_path))?
            .as_bytes(),
    )
    .map_err(io(&summary_path))?;
    f.write_all(b"\n").map_err(io(&summary_path))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
