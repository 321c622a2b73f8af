//! Squashed-Gaussian per-agent policies.
//!
//! The network maps an observation to `[μ (D), log σ (D)]`; actions are
//! `tanh(μ + σ ε)`. Log-likelihoods of stored actions are recovered by
//! inverting the squash and re-scoring under the current `μ, σ`.

use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::{Activation, NnError, ParamSet, Tape};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Stored actions are clamped to `[-1 + ε, 1 - ε]` before `atanh`.
pub const ATANH_CLAMP_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// `Σ_j log(1 - tanh²(u_j))` in the softplus form `2 (ln 2 - u - softplus(-2u))`.
pub fn tanh_log_det(pre_squash: &[f64]) -> f64 {
    pre_squash
        .iter()
        .map(|&u| 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u)))
        .sum()
}

/// `a^E = ½ ln((1 + a) / (1 - a))` after clamping `a` into the open interval.
pub fn atanh_recover(action: &[f64]) -> Vec<f64> {
    action
        .iter()
        .map(|&a| {
            let a = a.clamp(-1.0 + ATANH_CLAMP_EPS, 1.0 - ATANH_CLAMP_EPS);
            0.5 * ((1.0 + a) / (1.0 - a)).ln()
        })
        .collect()
}

/// One reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub pre_squash: Vec<f64>,
}

/// Network heads for a batch, with the tape needed to backpropagate.
#[derive(Clone, Debug)]
pub struct Heads {
    pub mean: Array2<f64>,
    /// Clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Array2<f64>,
    clamped: Array2<bool>,
    tape: Tape,
}

/// A batch of reparameterized draws sharing one forward pass.
#[derive(Clone, Debug)]
pub struct BatchSample {
    pub heads: Heads,
    pub noise: Array2<f64>,
    pub pre_squash: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    net: ParamSet,
    action_dim: usize,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        let net = ParamSet::mlp(&sizes, Activation::Identity, rng)?;
        Ok(Self { net, action_dim })
    }

    pub fn from_params(net: ParamSet, action_dim: usize) -> Result<Self, PolicyError> {
        if net.output_dim() != 2 * action_dim {
            return Err(PolicyError::Dim(format!(
                "policy head has {} outputs, expected {}",
                net.output_dim(),
                2 * action_dim
            )));
        }
        Ok(Self { net, action_dim })
    }

    pub fn params(&self) -> &ParamSet {
        &self.net
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn heads(&self, obs: ArrayView2<f64>) -> Result<Heads, PolicyError> {
        let d = self.action_dim;
        let (out, tape) = self.net.forward_batch(obs)?;
        let mean = out.slice(s![.., ..d]).to_owned();
        let raw = out.slice(s![.., d..]);
        let clamped = raw.mapv(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
        let log_std = raw.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        Ok(Heads {
            mean,
            log_std,
            clamped,
            tape,
        })
    }

    /// Reparameterized samples `u = μ + σ ⊙ noise`, `a = tanh(u)`.
    pub fn sample_with_noise(
        &self,
        obs: ArrayView2<f64>,
        noise: Array2<f64>,
    ) -> Result<BatchSample, PolicyError> {
        let heads = self.heads(obs)?;
        if noise.dim() != heads.mean.dim() {
            return Err(PolicyError::Dim(format!(
                "noise {:?} vs heads {:?}",
                noise.dim(),
                heads.mean.dim()
            )));
        }
        let mut pre = heads.log_std.mapv(f64::exp);
        pre *= &noise;
        pre += &heads.mean;
        let actions = pre.mapv(f64::tanh);
        let log_probs = Array1::from_iter((0..pre.nrows()).map(|b| {
            let eps = noise.row(b);
            let gauss: f64 = eps
                .iter()
                .zip(heads.log_std.row(b))
                .map(|(e, ls)| -0.5 * e * e - ls - HALF_LN_2PI)
                .sum();
            gauss - tanh_log_det(pre.row(b).as_slice().expect("contiguous"))
        }));
        Ok(BatchSample {
            heads,
            noise,
            pre_squash: pre,
            actions,
            log_probs,
        })
    }

    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        obs: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<BatchSample, PolicyError> {
        let noise = Array2::from_shape_fn((obs.nrows(), self.action_dim), |_| {
            rng.sample(StandardNormal)
        });
        self.sample_with_noise(obs, noise)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        rng: &mut R,
    ) -> Result<PolicySample, PolicyError> {
        let view = row_view(obs);
        let s = self.sample_batch(view, rng)?;
        Ok(PolicySample {
            action: s.actions.row(0).to_vec(),
            log_prob: s.log_probs[0],
            pre_squash: s.pre_squash.row(0).to_vec(),
        })
    }

    /// `tanh(μ)`, used for evaluation.
    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let h = self.heads(row_view(obs))?;
        Ok(h.mean.row(0).iter().map(|m| m.tanh()).collect())
    }

    /// Log-likelihood of a stored (squashed) action under the current policy.
    pub fn historical_log_prob(
        &self,
        obs: &[f64],
        stored_action: &[f64],
    ) -> Result<f64, PolicyError> {
        if stored_action.len() != self.action_dim {
            return Err(PolicyError::Dim(format!(
                "action has {} components, expected {}",
                stored_action.len(),
                self.action_dim
            )));
        }
        let h = self.heads(row_view(obs))?;
        let recovered = atanh_recover(stored_action);
        let log_f = gaussian_log_density(
            &recovered,
            h.mean.row(0).as_slice().expect("contiguous"),
            h.log_std.row(0).as_slice().expect("contiguous"),
        );
        Ok(log_f - tanh_log_det(&recovered))
    }

    /// Backpropagates gradients given on `μ` and on the clamped `log σ`.
    pub fn backward_heads(
        &self,
        heads: &Heads,
        d_mean: ArrayView2<f64>,
        d_log_std: ArrayView2<f64>,
    ) -> Result<ParamSet, PolicyError> {
        let (b, d) = heads.mean.dim();
        if d_mean.dim() != (b, d) || d_log_std.dim() != (b, d) {
            return Err(PolicyError::Dim("head gradient shape".into()));
        }
        let mut out_grad = Array2::zeros((b, 2 * d));
        out_grad.slice_mut(s![.., ..d]).assign(&d_mean);
        let mut ls = out_grad.slice_mut(s![.., d..]);
        Zip::from(&mut ls)
            .and(&d_log_std)
            .and(&heads.clamped)
            .for_each(|o, &g, &c| *o = if c { 0.0 } else { g });
        Ok(self
            .net
            .backward_batch(&heads.tape, out_grad.view())?
            .params)
    }
}

/// Per-row Gaussian log-density of recovered actions, with its partials with
/// respect to `μ` and `log σ`.
pub struct GaussianScore {
    pub log_f: Array1<f64>,
    pub d_mean: Array2<f64>,
    pub d_log_std: Array2<f64>,
}

pub fn gaussian_score(recovered: ArrayView2<f64>, heads: &Heads) -> GaussianScore {
    let (b, d) = recovered.dim();
    let mut log_f = Array1::zeros(b);
    let mut d_mean = Array2::zeros((b, d));
    let mut d_log_std = Array2::zeros((b, d));
    for r in 0..b {
        let mut total = 0.0;
        for j in 0..d {
            let ls = heads.log_std[[r, j]];
            let inv_std = (-ls).exp();
            let z = (recovered[[r, j]] - heads.mean[[r, j]]) * inv_std;
            total += -0.5 * z * z - ls - HALF_LN_2PI;
            d_mean[[r, j]] = z * inv_std;
            d_log_std[[r, j]] = z * z - 1.0;
        }
        log_f[r] = total;
    }
    GaussianScore {
        log_f,
        d_mean,
        d_log_std,
    }
}

fn row_view(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("row view")
}

/// Soft floor on a batch of log-likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub struct FlooredBatch {
    pub t_limit: f64,
    pub values: Vec<f64>,
    /// `d out / d in` for each element with `t_limit` held fixed.
    pub slopes: Vec<f64>,
}

/// Applies the floor with threshold `max(batch) - beta`.
pub fn likelihood_floor(batch: &[f64], beta: f64) -> Result<FlooredBatch, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    if !(beta > 0.0) {
        return Err(PolicyError::BadBeta(beta));
    }
    let max = batch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(likelihood_floor_at(batch, max - beta))
}

/// Values below `t_limit` become `t_limit + exp(v - t_limit) - 1`.
pub fn likelihood_floor_at(batch: &[f64], t_limit: f64) -> FlooredBatch {
    let (values, slopes) = batch
        .iter()
        .map(|&v| {
            if v < t_limit {
                let e = (v - t_limit).exp();
                (t_limit + e - 1.0, e)
            } else {
                (v, 1.0)
            }
        })
        .unzip();
    FlooredBatch {
        t_limit,
        values,
        slopes,
    }
}

pub fn apply_likelihood_floor(batch: &[f64], beta: f64) -> Result<Vec<f64>, PolicyError> {
    Ok(likelihood_floor(batch, beta)?.values)
}
