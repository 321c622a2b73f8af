//! Twin soft critics, temperature, and coalition-masked Shapley-Q estimates.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coopgame::{coalition_weight, Coalition, GameError};
use crate::nn::{Activation, NnError, ParamSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValuationError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("agent {agent} already in coalition {coalition}")]
    AgentInCoalition { agent: usize, coalition: Coalition },
    #[error("agent {agent} out of range for n = {n}")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("non-finite critic target")]
    NonFiniteTarget,
    #[error("sample count must be at least 1")]
    NoSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticSet {
    Main,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwinCritics {
    pub q1: ParamSet,
    pub q2: ParamSet,
    pub q1_target: ParamSet,
    pub q2_target: ParamSet,
    state_dim: usize,
    n: usize,
    action_dim: usize,
}

/// Per-critic loss and gradients for one batch.
#[derive(Clone, Debug)]
pub struct CriticLoss {
    pub loss1: f64,
    pub loss2: f64,
    pub grads1: ParamSet,
    pub grads2: ParamSet,
}

impl CriticLoss {
    pub fn mean_loss(&self) -> f64 {
        0.5 * (self.loss1 + self.loss2)
    }
}

impl TwinCritics {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        n: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, ValuationError> {
        let mut sizes = vec![state_dim + n * action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = ParamSet::mlp(&sizes, Activation::Identity, rng)?;
        let q2 = ParamSet::mlp(&sizes, Activation::Identity, rng)?;
        Self::from_params(q1, q2, state_dim, n, action_dim)
    }

    /// Targets start as copies of the mains.
    pub fn from_params(
        q1: ParamSet,
        q2: ParamSet,
        state_dim: usize,
        n: usize,
        action_dim: usize,
    ) -> Result<Self, ValuationError> {
        let input = state_dim + n * action_dim;
        for q in [&q1, &q2] {
            if q.input_dim() != input || q.output_dim() != 1 {
                return Err(ValuationError::Shape(format!(
                    "critic maps {} -> {}, expected {input} -> 1",
                    q.input_dim(),
                    q.output_dim()
                )));
            }
        }
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            state_dim,
            n,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn pair(&self, set: CriticSet) -> (&ParamSet, &ParamSet) {
        match set {
            CriticSet::Main => (&self.q1, &self.q2),
            CriticSet::Target => (&self.q1_target, &self.q2_target),
        }
    }

    fn inputs(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array2<f64>, ValuationError> {
        if states.ncols() != self.state_dim
            || actions.ncols() != self.n * self.action_dim
            || states.nrows() != actions.nrows()
        {
            return Err(ValuationError::Shape(format!(
                "states {:?} and actions {:?} for critic over {} + {}",
                states.dim(),
                actions.dim(),
                self.state_dim,
                self.n * self.action_dim
            )));
        }
        Ok(concatenate(Axis(1), &[states, actions]).expect("row counts checked"))
    }

    pub fn q_values(
        &self,
        set: CriticSet,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array1<f64>), ValuationError> {
        let x = self.inputs(states, actions)?;
        let (a, b) = self.pair(set);
        let q1 = a.predict_batch(x.view())?.column(0).to_owned();
        let q2 = b.predict_batch(x.view())?.column(0).to_owned();
        Ok((q1, q2))
    }

    pub fn q_min_batch(
        &self,
        set: CriticSet,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<Array1<f64>, ValuationError> {
        let (q1, q2) = self.q_values(set, states, actions)?;
        Ok(ndarray::Zip::from(&q1)
            .and(&q2)
            .map_collect(|a, b| a.min(*b)))
    }

    pub fn q_min(
        &self,
        set: CriticSet,
        state: &[f64],
        joint_action: &[f64],
    ) -> Result<f64, ValuationError> {
        let s = row(state);
        let a = row(joint_action);
        Ok(self.q_min_batch(set, s, a)?[0])
    }

    /// `min(Q1, Q2)` on the main critics and its gradient with respect to the
    /// joint action, taken through whichever critic attains the minimum.
    pub fn q_min_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>), ValuationError> {
        let x = self.inputs(states, actions)?;
        let (o1, t1) = self.q1.forward_batch(x.view())?;
        let (o2, t2) = self.q2.forward_batch(x.view())?;
        let b = x.nrows();
        let mut sel1 = Array2::zeros((b, 1));
        let mut sel2 = Array2::zeros((b, 1));
        let mut q = Array1::zeros(b);
        for r in 0..b {
            if o1[[r, 0]] <= o2[[r, 0]] {
                q[r] = o1[[r, 0]];
                sel1[[r, 0]] = 1.0;
            } else {
                q[r] = o2[[r, 0]];
                sel2[[r, 0]] = 1.0;
            }
        }
        let g1 = self.q1.backward_batch(&t1, sel1.view())?.input;
        let g2 = self.q2.backward_batch(&t2, sel2.view())?.input;
        let grad = (g1 + g2).slice(s![.., self.state_dim..]).to_owned();
        Ok((q, grad))
    }

    /// `(1/B) Σ ½ (y - Q_k)²` for each main critic.
    pub fn critic_loss_and_grads(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        targets: &[f64],
    ) -> Result<CriticLoss, ValuationError> {
        let b = states.nrows();
        if b == 0 || targets.len() != b {
            return Err(ValuationError::Shape(format!(
                "{} targets for batch of {b}",
                targets.len()
            )));
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(ValuationError::NonFiniteTarget);
        }
        let x = self.inputs(states, actions)?;
        let one = |q: &ParamSet| -> Result<(f64, ParamSet), ValuationError> {
            let (out, tape) = q.forward_batch(x.view())?;
            let mut d = Array2::zeros((b, 1));
            let mut loss = 0.0;
            for r in 0..b {
                let err = out[[r, 0]] - targets[r];
                loss += 0.5 * err * err;
                d[[r, 0]] = err / b as f64;
            }
            Ok((loss / b as f64, q.backward_batch(&tape, d.view())?.params))
        };
        let (loss1, grads1) = one(&self.q1)?;
        let (loss2, grads2) = one(&self.q2)?;
        Ok(CriticLoss {
            loss1,
            loss2,
            grads1,
            grads2,
        })
    }

    /// Polyak step on both targets.
    pub fn soft_update_targets(&mut self, tau: f64) -> Result<(), ValuationError> {
        crate::nn::soft_update(&mut self.q1_target, &self.q1, tau)?;
        crate::nn::soft_update(&mut self.q2_target, &self.q2, tau)?;
        Ok(())
    }

    /// Entropy-augmented bootstrap target from the target critics.
    #[allow(clippy::too_many_arguments)]
    pub fn td_target(
        &self,
        temp: &Temperature,
        reward: f64,
        next_state: &[f64],
        next_joint_action: &[f64],
        next_log_probs: &[f64],
        gamma: f64,
        terminal: bool,
    ) -> Result<f64, ValuationError> {
        if terminal {
            return Ok(reward);
        }
        let q = self.q_min(CriticSet::Target, next_state, next_joint_action)?;
        Ok(soft_target(
            reward,
            gamma,
            false,
            q,
            temp.alpha(),
            next_log_probs.iter().sum(),
        ))
    }
}

/// `r` if terminal, else `r + γ (q_min - α Σ log π)`.
pub fn soft_target(
    reward: f64,
    gamma: f64,
    terminal: bool,
    q_min: f64,
    alpha: f64,
    sum_log_probs: f64,
) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * (q_min - alpha * sum_log_probs)
    }
}

fn row(x: &[f64]) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((1, x.len()), x).expect("row view")
}

/// Entropy temperature with its own scalar Adam state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_alpha: f64,
    pub auto: bool,
    /// Target entropy in nats for the quantity whose log-probs are passed to
    /// [`Temperature::step`].
    pub target_entropy: f64,
    m: f64,
    v: f64,
    t: u64,
}

impl Temperature {
    pub fn new(alpha: f64, auto: bool, target_entropy: f64) -> Self {
        Self {
            log_alpha: alpha.ln(),
            auto,
            target_entropy,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// `d/d log α` of `E[-α log π - α H̄]`.
    pub fn gradient(&self, log_probs: &[f64]) -> f64 {
        if log_probs.is_empty() {
            return 0.0;
        }
        let entropy = -log_probs.iter().sum::<f64>() / log_probs.len() as f64;
        self.alpha() * (entropy - self.target_entropy)
    }

    /// One Adam step on `log α`; no-op when `auto` is off or the gradient is
    /// not finite.
    pub fn step(&mut self, log_probs: &[f64], lr: f64) {
        if !self.auto {
            return;
        }
        let g = self.gradient(log_probs);
        if !g.is_finite() {
            return;
        }
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        self.m = B1 * self.m + (1.0 - B1) * g;
        self.v = B2 * self.v + (1.0 - B2) * g * g;
        let mh = self.m / (1.0 - B1.powi(self.t as i32));
        let vh = self.v / (1.0 - B2.powi(self.t as i32));
        self.log_alpha -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

pub fn temperature_step(temp: &Temperature, batch_log_probs: &[f64], lr: f64) -> Temperature {
    let mut next = temp.clone();
    next.step(batch_log_probs, lr);
    next
}

/// Predecessors of `i` in a uniformly random ordering of `0..n`.
pub fn sample_coalition<R: Rng + ?Sized>(rng: &mut R, n: usize, i: usize) -> Coalition {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Coalition::from_members(order.into_iter().take_while(|&j| j != i))
}

/// A joint action with non-member agent blocks set to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedJointAction {
    pub action: Vec<f64>,
    pub coalition: Coalition,
}

pub fn mask_joint_action(
    joint_action: &[f64],
    coalition: Coalition,
    action_dim: usize,
) -> MaskedJointAction {
    let mut action = joint_action.to_vec();
    for (agent, block) in action.chunks_mut(action_dim).enumerate() {
        if !coalition.contains(agent) {
            block.fill(0.0);
        }
    }
    MaskedJointAction { action, coalition }
}

fn mask_batch(actions: ArrayView2<f64>, coalition: Coalition, action_dim: usize) -> Array2<f64> {
    let mut out = actions.to_owned();
    for agent in 0..actions.ncols() / action_dim {
        if !coalition.contains(agent) {
            out.slice_mut(s![.., agent * action_dim..(agent + 1) * action_dim])
                .fill(0.0);
        }
    }
    out
}

impl TwinCritics {
    fn check_agent(&self, i: usize, c: Coalition) -> Result<(), ValuationError> {
        if i >= self.n {
            return Err(ValuationError::AgentOutOfRange {
                agent: i,
                n: self.n,
            });
        }
        if c.contains(i) {
            return Err(ValuationError::AgentInCoalition {
                agent: i,
                coalition: c,
            });
        }
        Ok(())
    }

    /// `½ [q_min(s, a|C∪{i}) - q_min(s, a|C)]` on the main critics, per row.
    pub fn amc_marginal_batch(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        coalition: Coalition,
        i: usize,
    ) -> Result<Array1<f64>, ValuationError> {
        self.check_agent(i, coalition)?;
        let d = self.action_dim;
        let with = mask_batch(actions, coalition.with(i), d);
        let without = mask_batch(actions, coalition, d);
        let hi = self.q_min_batch(CriticSet::Main, states, with.view())?;
        let lo = self.q_min_batch(CriticSet::Main, states, without.view())?;
        Ok(0.5 * (hi - lo))
    }

    pub fn amc_marginal(
        &self,
        state: &[f64],
        joint_action: &[f64],
        coalition: Coalition,
        i: usize,
    ) -> Result<f64, ValuationError> {
        Ok(self.amc_marginal_batch(row(state), row(joint_action), coalition, i)?[0])
    }

    /// Mean marginal over the given coalitions, per row.
    pub fn shapley_q_batch(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        i: usize,
        coalitions: &[Coalition],
    ) -> Result<Array1<f64>, ValuationError> {
        if coalitions.is_empty() {
            return Err(ValuationError::NoSamples);
        }
        let mut acc = Array1::zeros(states.nrows());
        for &c in coalitions {
            acc += &self.amc_marginal_batch(states, actions, c, i)?;
        }
        Ok(acc / coalitions.len() as f64)
    }

    /// Monte-Carlo Shapley-Q from `m` sampled coalitions.
    pub fn shapley_q<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        joint_action: &[f64],
        i: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<f64, ValuationError> {
        if i >= self.n {
            return Err(ValuationError::AgentOutOfRange {
                agent: i,
                n: self.n,
            });
        }
        let cs: Vec<Coalition> = (0..m).map(|_| sample_coalition(rng, self.n, i)).collect();
        Ok(self.shapley_q_batch(row(state), row(joint_action), i, &cs)?[0])
    }

    /// `Σ_C Pr(C) · marginal(C)` over every coalition not containing `i`.
    pub fn shapley_q_exhaustive_batch(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        i: usize,
    ) -> Result<Array1<f64>, ValuationError> {
        if i >= self.n {
            return Err(ValuationError::AgentOutOfRange {
                agent: i,
                n: self.n,
            });
        }
        let mut acc = Array1::zeros(states.nrows());
        for bits in 0u32..(1u32 << self.n) {
            let c = Coalition::from_bits(bits);
            if c.contains(i) {
                continue;
            }
            let w = coalition_weight(c.len(), self.n)?;
            acc.scaled_add(w, &self.amc_marginal_batch(states, actions, c, i)?);
        }
        Ok(acc)
    }

    pub fn shapley_q_exhaustive(
        &self,
        state: &[f64],
        joint_action: &[f64],
        i: usize,
    ) -> Result<f64, ValuationError> {
        Ok(self.shapley_q_exhaustive_batch(row(state), row(joint_action), i)?[0])
    }
}
