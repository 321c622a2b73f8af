//! Per-agent policy objective and its exact parameter gradient.
//!
//! Per sample the maximized quantity is
//! `Q(s, a_{-i}, a^i_θ) - α log π(a^i_θ) + BC(floor(log f(a^E)) - corr) · Qφ`
//! with the mode deciding which terms are present. `Qφ`, the floor threshold
//! and the Box-Cox fit carry no gradient.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::boxcox::{
    bc_shifted_slope, bc_transform_shifted, estimate_lambda_on_grid, BoxCoxFit, LambdaGrid,
};
use crate::config::AblationMode;
use crate::coopgame::Coalition;
use crate::nn::ParamSet;
use crate::policy::{
    atanh_recover, gaussian_score, likelihood_floor_at, tanh_log_det, BatchSample, GaussianPolicy,
};
use crate::valuation::TwinCritics;

use super::TrainError;

/// Everything an agent's turn reads from the batch.
#[derive(Clone, Debug)]
pub struct TurnInputs<'a> {
    pub agent: usize,
    pub states: ArrayView2<'a, f64>,
    pub obs: ArrayView2<'a, f64>,
    /// Joint action context; the agent's own block is overwritten by its
    /// fresh sample before the critic sees it.
    pub joint: ArrayView2<'a, f64>,
    /// The agent's stored actions from the batch.
    pub stored_own: ArrayView2<'a, f64>,
    /// Shapley-Q of the stored joint action (modes full, local, no_bc).
    pub historical_shapley: Option<ArrayView1<'a, f64>>,
    /// Coalitions used for the fresh-action Shapley-Q (mode current_action).
    pub coalitions: &'a [Coalition],
}

#[derive(Clone, Debug)]
pub struct ObjectiveSettings {
    pub mode: AblationMode,
    pub alpha: f64,
    pub beta: f64,
    pub grid: LambdaGrid,
}

/// Stop-gradient quantities. Missing entries are computed from the current
/// parameters; pass the returned ones back in to hold them fixed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenTerms {
    pub t_limit: Option<f64>,
    /// `None` inside `Some` means the transform fell back to identity.
    pub fit: Option<Option<BoxCoxFit>>,
    pub fresh_shapley: Option<Array1<f64>>,
    /// Pre-squash sample scored by the current_action term.
    pub score_point: Option<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    /// Batch mean of the maximized objective.
    pub value: f64,
    /// Gradient of `-value` with respect to the policy parameters.
    pub loss_grads: ParamSet,
    pub frozen: FrozenTerms,
    /// Mean of the (transformed) historical log-likelihood, when used.
    pub bc_mean: Option<f64>,
    pub fresh: BatchSample,
}

pub fn agent_objective(
    policy: &GaussianPolicy,
    critics: &TwinCritics,
    input: &TurnInputs<'_>,
    settings: &ObjectiveSettings,
    noise: &Array2<f64>,
    frozen: &FrozenTerms,
) -> Result<ObjectiveEval, TrainError> {
    let d = policy.action_dim();
    let i = input.agent;
    let b = input.obs.nrows();
    let alpha = settings.alpha;
    let fresh = policy.sample_with_noise(input.obs, noise.clone())?;
    let heads = &fresh.heads;
    let mut out_frozen = frozen.clone();

    let mut joint = input.joint.to_owned();
    joint
        .slice_mut(s![.., i * d..(i + 1) * d])
        .assign(&fresh.actions);

    // d(objective)/du, and the parts of d/dμ, d/dlogσ not routed through u
    let mut d_u = Array2::<f64>::zeros((b, d));
    let mut d_mean = Array2::<f64>::zeros((b, d));
    let mut d_log_std = Array2::<f64>::from_elem((b, d), alpha);
    let mut total = -alpha * fresh.log_probs.sum();

    Zip::from(&mut d_u)
        .and(&fresh.pre_squash)
        .for_each(|g, &u| *g -= alpha * 2.0 * u.tanh());

    if settings.mode != AblationMode::Local {
        let (q, dq) = critics.q_min_action_grad(input.states, joint.view())?;
        total += q.sum();
        let own = dq.slice(s![.., i * d..(i + 1) * d]);
        Zip::from(&mut d_u)
            .and(&own)
            .and(&fresh.actions)
            .for_each(|g, &dq, &a| *g += dq * (1.0 - a * a));
    }

    let mut bc_mean = None;
    match settings.mode {
        AblationMode::Share => {}
        AblationMode::Full | AblationMode::Local | AblationMode::NoBc => {
            let coef = input
                .historical_shapley
                .ok_or_else(|| TrainError::Internal("historical Shapley-Q missing".into()))?;
            let recovered = Array2::from_shape_vec(
                (b, d),
                input
                    .stored_own
                    .rows()
                    .into_iter()
                    .flat_map(|r| atanh_recover(&r.to_vec()))
                    .collect(),
            )
            .expect("shape");
            let score = gaussian_score(recovered.view(), heads);
            let t_limit = match frozen.t_limit {
                Some(t) => t,
                None => {
                    score
                        .log_f
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                        - settings.beta
                }
            };
            out_frozen.t_limit = Some(t_limit);
            let floored = likelihood_floor_at(score.log_f.as_slice().expect("contiguous"), t_limit);
            let log_pi: Vec<f64> = recovered
                .rows()
                .into_iter()
                .zip(&floored.values)
                .map(|(r, v)| v - tanh_log_det(r.as_slice().expect("contiguous")))
                .collect();
            let (transformed, slopes) = if settings.mode == AblationMode::NoBc {
                (log_pi.clone(), vec![1.0; b])
            } else {
                let fit = match &frozen.fit {
                    Some(f) => *f,
                    None => estimate_lambda_on_grid(&log_pi, &settings.grid).ok(),
                };
                out_frozen.fit = Some(fit);
                match fit {
                    Some(fit) => {
                        let vals = log_pi
                            .iter()
                            .map(|&x| bc_transform_shifted(x, &fit).map(|t| t + fit.x_min))
                            .collect::<Result<Vec<_>, _>>()?;
                        (
                            vals,
                            log_pi.iter().map(|&x| bc_shifted_slope(x, &fit)).collect(),
                        )
                    }
                    None => {
                        log::debug!("Box-Cox fit unavailable for agent {i}; using identity");
                        (log_pi.clone(), vec![1.0; b])
                    }
                }
            };
            bc_mean = Some(transformed.iter().sum::<f64>() / b as f64);
            for r in 0..b {
                total += coef[r] * transformed[r];
                let g = coef[r] * slopes[r] * floored.slopes[r];
                d_mean.row_mut(r).scaled_add(g, &score.d_mean.row(r));
                d_log_std.row_mut(r).scaled_add(g, &score.d_log_std.row(r));
            }
        }
        AblationMode::CurrentAction => {
            let coef = match &frozen.fresh_shapley {
                Some(c) => c.clone(),
                None => critics.shapley_q_batch(input.states, joint.view(), i, input.coalitions)?,
            };
            // score of the sampled pre-squash value, held fixed
            let point = frozen
                .score_point
                .clone()
                .unwrap_or_else(|| fresh.pre_squash.clone());
            let score = gaussian_score(point.view(), heads);
            for r in 0..b {
                let corr = tanh_log_det(point.row(r).as_slice().expect("contiguous"));
                total += coef[r] * (score.log_f[r] - corr);
                d_mean.row_mut(r).scaled_add(coef[r], &score.d_mean.row(r));
                d_log_std
                    .row_mut(r)
                    .scaled_add(coef[r], &score.d_log_std.row(r));
            }
            out_frozen.fresh_shapley = Some(coef);
            out_frozen.score_point = Some(point);
        }
    }

    // u = μ + σ ε: du/dμ = 1, du/dlogσ = σ ε = u - μ
    let sigma_eps = &fresh.pre_squash - &heads.mean;
    d_mean += &d_u;
    d_log_std += &(&d_u * &sigma_eps);
    let scale = -1.0 / b as f64;
    d_mean *= scale;
    d_log_std *= scale;
    let loss_grads = policy.backward_heads(heads, d_mean.view(), d_log_std.view())?;
    let value = total / b as f64;
    Ok(ObjectiveEval {
        value,
        loss_grads,
        frozen: out_frozen,
        bc_mean,
        fresh,
    })
}

pub(crate) fn column_block(m: &Array2<f64>, agent: usize, d: usize) -> Array2<f64> {
    m.slice(s![.., agent * d..(agent + 1) * d]).to_owned()
}

pub(crate) fn mean_of(a: &Array1<f64>) -> f64 {
    a.mean_axis(Axis(0))
        .map(|m| m.into_scalar())
        .unwrap_or(f64::NAN)
}
