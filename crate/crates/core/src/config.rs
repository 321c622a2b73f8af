//! Run configuration: TOML with one key per field, defaults for a small
//! desktop run on `quad_coupled`.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::boxcox::LambdaGrid;
use crate::envs::{EnvParams, ENV_IDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    Share,
    Local,
    NoBc,
    CurrentAction,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        Self::Full,
        Self::Share,
        Self::Local,
        Self::NoBc,
        Self::CurrentAction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Share => "share",
            Self::Local => "local",
            Self::NoBc => "no_bc",
            Self::CurrentAction => "current_action",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown ablation mode `{s}` (expected one of full, share, local, no_bc, current_action)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub n: usize,
    /// Per-agent action dimension `D`.
    pub action_dim: usize,
    /// Steps per episode `T`.
    pub episode_len: usize,
    /// Training budget in episodes `K`; total steps are `K * T`.
    pub episodes: usize,
    pub landmarks: usize,
    pub env_seed: u64,
    pub dummy_index: usize,

    /// Coalitions sampled per agent turn (`M`).
    pub sample_times: usize,
    /// Width of the likelihood floor below the batch maximum (`β`).
    pub log_adjust_beta: f64,
    pub batch_size: usize,
    pub gamma: f64,
    /// Gradient steps per agent turn (`e`).
    pub mini_epochs: usize,
    pub tau: f64,
    /// Apply the target update as `τ·target + (1 - τ)·main`.
    pub literal_polyak: bool,
    pub n_step: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub auto_alpha: bool,
    /// Fixed temperature, or the initial one when `auto_alpha` is on.
    pub alpha: f64,
    /// Per-agent target entropy; defaults to `-D`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_entropy: Option<f64>,
    pub warmup_steps: usize,
    pub train_interval: usize,
    pub updates_per_train: usize,
    /// Std of extra Gaussian noise added to sampled actions while collecting.
    pub exploration_noise: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub hidden_sizes: Vec<usize>,
    pub buffer_capacity: usize,

    pub seed: u64,
    pub ablation: AblationMode,

    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_step: f64,

    /// Environment steps between deterministic evaluations; 0 disables.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Fraction of the optimal return that counts as solved.
    pub threshold_fraction: f64,
    pub stop_at_threshold: bool,
    /// Environment steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "quad_coupled".into(),
            n: 3,
            action_dim: 2,
            episode_len: 1,
            episodes: 50_000,
            landmarks: 3,
            env_seed: 0,
            dummy_index: 0,
            sample_times: 2,
            log_adjust_beta: 10.0,
            batch_size: 256,
            gamma: 0.99,
            mini_epochs: 1,
            tau: 0.005,
            literal_polyak: false,
            n_step: 1,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            auto_alpha: true,
            alpha: 0.2,
            target_entropy: None,
            warmup_steps: 1000,
            train_interval: 50,
            updates_per_train: 50,
            exploration_noise: 0.0,
            grad_clip: None,
            hidden_sizes: vec![64, 64],
            buffer_capacity: 100_000,
            seed: 0,
            ablation: AblationMode::Full,
            lambda_min: -2.0,
            lambda_max: 2.0,
            lambda_step: 0.05,
            eval_interval: 1000,
            eval_episodes: 5,
            threshold_fraction: 0.9,
            stop_at_threshold: false,
            checkpoint_interval: 0,
        }
    }
}

/// A configuration problem, with the 1-based line it refers to when known.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn plain(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` in `text`, if present.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map(|i| i + 1)
}

impl RunConfig {
    /// Parses and validates a TOML document; missing keys take defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|(key, message)| ConfigError {
            line: line_of_key(text, key),
            message,
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; values are parsed as TOML, falling back
    /// to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut table =
            toml::Table::try_from(self).map_err(|e| ConfigError::plain(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::plain(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            table.insert(key.to_string(), value);
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
            ConfigError::plain(format!("override: {}", e.message()))
        })?;
        cfg.validate()
            .map_err(|(key, m)| ConfigError::plain(format!("{key}: {m}")))?;
        Ok(cfg)
    }

    /// Checks ranges; on failure returns the offending key and a message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        fn positive(key: &'static str, v: usize) -> Result<(), (&'static str, String)> {
            if v == 0 {
                Err((key, format!("{key} must be at least 1")))
            } else {
                Ok(())
            }
        }
        if !ENV_IDS.contains(&self.env.as_str()) {
            return Err((
                "env",
                format!(
                    "unknown env `{}` (expected one of {})",
                    self.env,
                    ENV_IDS.join(", ")
                ),
            ));
        }
        positive("n", self.n)?;
        if self.n > 20 {
            return Err(("n", "n must be at most 20".into()));
        }
        positive("action_dim", self.action_dim)?;
        positive("episode_len", self.episode_len)?;
        positive("episodes", self.episodes)?;
        positive("sample_times", self.sample_times)?;
        positive("batch_size", self.batch_size)?;
        positive("mini_epochs", self.mini_epochs)?;
        positive("n_step", self.n_step)?;
        positive("train_interval", self.train_interval)?;
        positive("buffer_capacity", self.buffer_capacity)?;
        positive("eval_episodes", self.eval_episodes)?;
        if self.env.starts_with("dummy_") && self.dummy_index >= self.n {
            return Err((
                "dummy_index",
                format!(
                    "dummy_index {} out of range for n = {}",
                    self.dummy_index, self.n
                ),
            ));
        }
        if self.env.ends_with("spread_mini") {
            positive("landmarks", self.landmarks)?;
        }
        let pos_real = [
            ("log_adjust_beta", self.log_adjust_beta),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_alpha", self.lr_alpha),
            ("alpha", self.alpha),
            ("lambda_step", self.lambda_step),
        ];
        for (k, v) in pos_real {
            if !(v.is_finite() && v > 0.0) {
                return Err((k, format!("{k} must be a positive finite number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err((
                "gamma",
                format!("gamma must be in [0, 1], got {}", self.gamma),
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(("tau", format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !(self.exploration_noise.is_finite() && self.exploration_noise >= 0.0) {
            return Err((
                "exploration_noise",
                "exploration_noise must be non-negative".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(("grad_clip", format!("grad_clip must be positive, got {c}")));
            }
        }
        if let Some(h) = self.target_entropy {
            if !h.is_finite() {
                return Err(("target_entropy", "target_entropy must be finite".into()));
            }
        }
        if self.hidden_sizes.contains(&0) {
            return Err(("hidden_sizes", "hidden layer sizes must be positive".into()));
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return Err((
                "threshold_fraction",
                "threshold_fraction must be in (0, 1]".into(),
            ));
        }
        if self.lambda_grid().validate().is_err() {
            return Err((
                "lambda_min",
                format!(
                    "bad lambda grid [{}, {}] step {}",
                    self.lambda_min, self.lambda_max, self.lambda_step
                ),
            ));
        }
        Ok(())
    }

    pub fn lambda_grid(&self) -> LambdaGrid {
        LambdaGrid {
            lo: self.lambda_min,
            hi: self.lambda_max,
            step: self.lambda_step,
        }
    }

    pub fn env_params(&self) -> EnvParams {
        EnvParams {
            n: self.n,
            action_dim: self.action_dim,
            episode_len: self.episode_len,
            env_seed: self.env_seed,
            landmarks: self.landmarks,
            dummy_index: self.dummy_index,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.episodes * self.episode_len
    }

    /// Target for the summed per-agent log-probabilities.
    pub fn joint_target_entropy(&self) -> f64 {
        self.n as f64 * self.target_entropy.unwrap_or(-(self.action_dim as f64))
    }
}
