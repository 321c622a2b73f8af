//! The training loop: collection, replay, twin-critic updates, randomized
//! sequential per-agent policy updates, temperature and target maintenance.

mod buffer;
mod objective;
mod output;

pub use buffer::{Batch, ReplayBuffer, Transition};
pub use objective::{agent_objective, FrozenTerms, ObjectiveEval, ObjectiveSettings, TurnInputs};
pub use output::{
    metrics_header, read_summary, run_to_dir, write_checkpoint, Checkpoint, EvalRecord, FinalStats,
    MetricsRecord, RunSummary, CHECKPOINT_DIR, EVAL_FILE, METRICS_FILE, SUMMARY_FILE,
    SUMMARY_FORMAT_VERSION,
};

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::boxcox::BoxCoxError;
use crate::config::{AblationMode, RunConfig};
use crate::coopgame::Coalition;
use crate::envs::{make_env, EnvError, Environment, Observation};
use crate::nn::{Adam, NnError};
use crate::policy::{GaussianPolicy, PolicyError, ATANH_CLAMP_EPS};
use crate::valuation::{sample_coalition, CriticSet, Temperature, TwinCritics, ValuationError};

use objective::{column_block, mean_of};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Valuation(#[from] ValuationError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    BoxCox(#[from] BoxCoxError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Internal(String),
}

/// Independent random streams, one per purpose, all derived from the seed.
#[derive(Clone, Debug)]
struct Streams {
    init: ChaCha8Rng,
    env: ChaCha8Rng,
    action: ChaCha8Rng,
    batch: ChaCha8Rng,
    permutation: ChaCha8Rng,
    coalition: ChaCha8Rng,
    policy: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            init: stream(1),
            env: stream(2),
            action: stream(3),
            batch: stream(4),
            permutation: stream(5),
            coalition: stream(6),
            policy: stream(7),
            eval: stream(8),
        }
    }
}

/// Uniformly random ordering of `0..n`.
pub fn draw_permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Diagnostics from one gradient update.
#[derive(Clone, Debug, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    /// Per-agent batch mean of the Shapley-Q coefficient, if computed.
    pub shapley_q_mean: Vec<Option<f64>>,
    /// Per-agent mean of the transformed historical log-likelihood.
    pub bc_loglik_mean: Vec<Option<f64>>,
    pub permutation: Vec<usize>,
    /// Agents whose update was abandoned.
    pub failed_agents: Vec<usize>,
}

#[derive(Default)]
struct IterationAccum {
    critic_losses: Vec<f64>,
    shapley: Vec<Vec<f64>>,
    bc: Vec<f64>,
    returns: Vec<f64>,
}

pub struct Trainer {
    cfg: RunConfig,
    env: Box<dyn Environment>,
    eval_env: Box<dyn Environment>,
    policies: Vec<GaussianPolicy>,
    actor_opts: Vec<Adam>,
    critics: TwinCritics,
    critic_opts: [Adam; 2],
    temp: Temperature,
    buffer: ReplayBuffer,
    rng: Streams,
    current: Observation,
    ep_return: f64,
    step: usize,
    episodes: usize,
    optimal: Option<f64>,
    evals: Vec<EvalRecord>,
    steps_to_threshold: Option<usize>,
    shapley_calls: u64,
    next_eval: usize,
}

fn sum_rows(parts: &[Array1<f64>]) -> Array1<f64> {
    parts
        .iter()
        .fold(Array1::zeros(parts[0].len()), |acc, p| acc + p)
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        cfg.validate()
            .map_err(|(k, m)| TrainError::Config(format!("{k}: {m}")))?;
        let params = cfg.env_params();
        let mut env = make_env(&cfg.env, &params)?;
        let eval_env = make_env(&cfg.env, &params)?;
        let spec = env.spec().clone();
        let mut rng = Streams::new(cfg.seed);
        let policies = (0..spec.n)
            .map(|_| {
                GaussianPolicy::new(
                    spec.obs_dim,
                    spec.action_dim,
                    &cfg.hidden_sizes,
                    &mut rng.init,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let actor_opts = policies
            .iter()
            .map(|p| Adam::new(p.params(), cfg.lr_actor).with_clip(cfg.grad_clip))
            .collect();
        let critics = TwinCritics::new(
            spec.state_dim,
            spec.n,
            spec.action_dim,
            &cfg.hidden_sizes,
            &mut rng.init,
        )?;
        let critic_opts = [
            Adam::new(&critics.q1, cfg.lr_critic).with_clip(cfg.grad_clip),
            Adam::new(&critics.q2, cfg.lr_critic).with_clip(cfg.grad_clip),
        ];
        let temp = Temperature::new(cfg.alpha, cfg.auto_alpha, cfg.joint_target_entropy());
        let current = env.reset(&mut rng.env);
        let optimal = env.optimal_return();
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            next_eval: cfg.eval_interval,
            cfg,
            env,
            eval_env,
            policies,
            actor_opts,
            critics,
            critic_opts,
            temp,
            rng,
            current,
            ep_return: 0.0,
            step: 0,
            episodes: 0,
            optimal,
            evals: Vec::new(),
            steps_to_threshold: None,
            shapley_calls: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn policies(&self) -> &[GaussianPolicy] {
        &self.policies
    }

    pub fn critics(&self) -> &TwinCritics {
        &self.critics
    }

    pub fn temperature(&self) -> &Temperature {
        &self.temp
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    /// Number of Shapley-Q evaluations made by policy updates.
    pub fn shapley_calls(&self) -> u64 {
        self.shapley_calls
    }

    pub fn optimal_return(&self) -> Option<f64> {
        self.optimal
    }

    /// Return counted as solving the task: `f · opt` for a positive optimum,
    /// `opt - (1 - f)|opt|` in general.
    pub fn threshold(&self) -> Option<f64> {
        self.optimal
            .map(|o| o - (1.0 - self.cfg.threshold_fraction) * o.abs())
    }

    pub fn steps_to_threshold(&self) -> Option<usize> {
        self.steps_to_threshold
    }

    pub fn env_constants(&self) -> serde_json::Value {
        self.env.constants()
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.total_steps()
            || (self.cfg.stop_at_threshold && self.steps_to_threshold.is_some())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: SUMMARY_FORMAT_VERSION,
            step: self.step,
            action_dim: self.cfg.action_dim,
            policies: self.policies.iter().map(|p| p.params().clone()).collect(),
            critics: self.critics.clone(),
            temperature: self.temp.clone(),
        }
    }

    pub fn final_stats(&self, final_ret_mean: f64) -> FinalStats {
        FinalStats {
            total_steps: self.step,
            episodes: self.episodes,
            final_ret_mean,
            final_eval_return: self.evals.last().map(|e| e.eval_return),
            best_eval_return: self.evals.iter().map(|e| e.eval_return).reduce(f64::max),
            optimal_return: self.optimal,
            threshold: self.threshold(),
            steps_to_threshold: self.steps_to_threshold,
        }
    }

    fn joint_action(&mut self) -> Result<Vec<f64>, TrainError> {
        let d = self.cfg.action_dim;
        let n = self.policies.len();
        let lim = 1.0 - ATANH_CLAMP_EPS;
        let mut a = Vec::with_capacity(n * d);
        if self.step < self.cfg.warmup_steps {
            for _ in 0..n * d {
                a.push(self.rng.action.random_range(-1.0..1.0f64).clamp(-lim, lim));
            }
            return Ok(a);
        }
        for (i, p) in self.policies.iter().enumerate() {
            let s = p.sample(&self.current.obs[i], &mut self.rng.action)?;
            for x in s.action {
                let noise = if self.cfg.exploration_noise > 0.0 {
                    self.cfg.exploration_noise * self.rng.action.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                a.push((x + noise).clamp(-lim, lim));
            }
        }
        Ok(a)
    }

    /// Steps the environment `steps` times, storing every transition; returns
    /// the returns of episodes that ended.
    pub fn collect(&mut self, steps: usize) -> Result<Vec<f64>, TrainError> {
        let mut finished = Vec::new();
        for _ in 0..steps {
            let action = self.joint_action()?;
            let out = self.env.step(&action)?;
            self.ep_return += out.reward;
            let done = out.done();
            self.buffer.push(Transition {
                obs: self.current.obs.clone(),
                state: self.current.state.clone(),
                action,
                reward: out.reward,
                next_obs: out.next.obs.clone(),
                next_state: out.next.state.clone(),
                terminal: out.terminal,
                episode_end: done,
            });
            self.step += 1;
            if done {
                finished.push(self.ep_return);
                self.episodes += 1;
                self.ep_return = 0.0;
                self.current = self.env.reset(&mut self.rng.env);
            } else {
                self.current = out.next;
            }
        }
        Ok(finished)
    }

    /// Mean return of deterministic (`tanh μ`) episodes on a separate instance.
    pub fn evaluate(&mut self) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for _ in 0..self.cfg.eval_episodes {
            let mut obs = self.eval_env.reset(&mut self.rng.eval);
            loop {
                let mut a = Vec::new();
                for (i, p) in self.policies.iter().enumerate() {
                    a.extend(p.deterministic_action(&obs.obs[i])?);
                }
                let out = self.eval_env.step(&a)?;
                total += out.reward;
                if out.done() {
                    break;
                }
                obs = out.next;
            }
        }
        Ok(total / self.cfg.eval_episodes as f64)
    }

    /// Samples each agent's policy on `obs`; returns the joint action and the
    /// summed log-probabilities per row.
    fn sample_joint(
        &mut self,
        obs: &[Array2<f64>],
    ) -> Result<(Array2<f64>, Array1<f64>), TrainError> {
        let d = self.cfg.action_dim;
        let b = obs[0].nrows();
        let mut joint = Array2::zeros((b, self.policies.len() * d));
        let mut lps = Vec::with_capacity(self.policies.len());
        for (i, p) in self.policies.iter().enumerate() {
            let s = p.sample_batch(obs[i].view(), &mut self.rng.policy)?;
            joint
                .slice_mut(s![.., i * d..(i + 1) * d])
                .assign(&s.actions);
            lps.push(s.log_probs);
        }
        Ok((joint, sum_rows(&lps)))
    }

    /// Regression targets `R + γ^m (min Q_targ - α Σ log π)` for a batch.
    pub fn critic_targets(&mut self, batch: &Batch) -> Result<Array1<f64>, TrainError> {
        let (next, lp) = self.sample_joint(&batch.boot_obs)?;
        let q =
            self.critics
                .q_min_batch(CriticSet::Target, batch.boot_states.view(), next.view())?;
        let alpha = self.temp.alpha();
        Ok(&batch.returns + &(&batch.boot_discount * &(q - alpha * lp)))
    }

    fn update_critics(&mut self, batch: &Batch) -> Result<f64, TrainError> {
        let y = self.critic_targets(batch)?;
        let loss = self.critics.critic_loss_and_grads(
            batch.states.view(),
            batch.actions.view(),
            y.as_slice().expect("contiguous"),
        )?;
        if !(loss.grads1.is_finite() && loss.grads2.is_finite()) {
            return Err(NnError::NonFiniteGradient.into());
        }
        self.critic_opts[0].step(&mut self.critics.q1, &loss.grads1)?;
        self.critic_opts[1].step(&mut self.critics.q2, &loss.grads2)?;
        Ok(loss.mean_loss())
    }

    fn objective_settings(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            mode: self.cfg.ablation,
            alpha: self.temp.alpha(),
            beta: self.cfg.log_adjust_beta,
            grid: self.cfg.lambda_grid(),
        }
    }

    /// Updates every agent once, in a fresh random order. Predecessors'
    /// actions in the critic context are re-sampled from their updated
    /// policies; successors keep the stored ones.
    pub fn policy_update_sequential(
        &mut self,
        batch: &Batch,
        stats: &mut UpdateStats,
    ) -> Result<(), TrainError> {
        let n = self.policies.len();
        let d = self.cfg.action_dim;
        let mode = self.cfg.ablation;
        let settings = self.objective_settings();
        let perm = draw_permutation(&mut self.rng.permutation, n);
        let mut joint = batch.actions.clone();
        stats.shapley_q_mean = vec![None; n];
        stats.bc_loglik_mean = vec![None; n];
        for &i in &perm {
            let coalitions: Vec<Coalition> = if mode == AblationMode::Share {
                Vec::new()
            } else {
                (0..self.cfg.sample_times)
                    .map(|_| sample_coalition(&mut self.rng.coalition, n, i))
                    .collect()
            };
            let historical = match mode {
                AblationMode::Full | AblationMode::Local | AblationMode::NoBc => {
                    self.shapley_calls += 1;
                    Some(self.critics.shapley_q_batch(
                        batch.states.view(),
                        batch.actions.view(),
                        i,
                        &coalitions,
                    )?)
                }
                _ => None,
            };
            let stored_own = column_block(&batch.actions, i, d);
            let backup = (self.policies[i].clone(), self.actor_opts[i].clone());
            let mut shapley_mean = historical.as_ref().map(mean_of);
            let mut bc_mean = None;
            for _ in 0..self.cfg.mini_epochs {
                let noise = Array2::from_shape_fn((batch.len(), d), |_| {
                    self.rng.policy.sample(StandardNormal)
                });
                let input = TurnInputs {
                    agent: i,
                    states: batch.states.view(),
                    obs: batch.obs[i].view(),
                    joint: joint.view(),
                    stored_own: stored_own.view(),
                    historical_shapley: historical.as_ref().map(|h| h.view()),
                    coalitions: &coalitions,
                };
                let eval = agent_objective(
                    &self.policies[i],
                    &self.critics,
                    &input,
                    &settings,
                    &noise,
                    &FrozenTerms::default(),
                )?;
                if mode == AblationMode::CurrentAction {
                    self.shapley_calls += 1;
                    shapley_mean = eval.frozen.fresh_shapley.as_ref().map(mean_of);
                }
                bc_mean = eval.bc_mean;
                let ok = eval.value.is_finite()
                    && self.actor_opts[i]
                        .step(self.policies[i].params_mut(), &eval.loss_grads)
                        .is_ok();
                if !ok {
                    log::warn!(
                        "step {}: non-finite objective for agent {i}; update skipped",
                        self.step
                    );
                    self.policies[i] = backup.0.clone();
                    self.actor_opts[i] = backup.1.clone();
                    stats.failed_agents.push(i);
                    break;
                }
            }
            stats.shapley_q_mean[i] = shapley_mean;
            stats.bc_loglik_mean[i] = bc_mean;
            let fresh = self.policies[i].sample_batch(batch.obs[i].view(), &mut self.rng.policy)?;
            joint
                .slice_mut(s![.., i * d..(i + 1) * d])
                .assign(&fresh.actions);
        }
        stats.permutation = perm;
        Ok(())
    }

    /// One gradient update: critics, policies, temperature, targets.
    pub fn update(&mut self) -> Result<UpdateStats, TrainError> {
        let batch = self.buffer.sample(
            &mut self.rng.batch,
            self.cfg.batch_size,
            self.cfg.n_step,
            self.cfg.gamma,
        );
        let mut stats = UpdateStats {
            critic_loss: self.update_critics(&batch)?,
            ..Default::default()
        };
        self.policy_update_sequential(&batch, &mut stats)?;
        if self.temp.auto {
            let (_, lp) = self.sample_joint(&batch.obs)?;
            self.temp
                .step(lp.as_slice().expect("contiguous"), self.cfg.lr_alpha);
        }
        let tau = if self.cfg.literal_polyak {
            1.0 - self.cfg.tau
        } else {
            self.cfg.tau
        };
        self.critics.soft_update_targets(tau)?;
        Ok(stats)
    }

    /// Collects `train_interval` steps, then (past warmup) runs
    /// `updates_per_train` updates and, when due, an evaluation.
    pub fn train_iteration(&mut self) -> Result<(MetricsRecord, Option<EvalRecord>), TrainError> {
        let n = self.policies.len();
        let steps = self
            .cfg
            .train_interval
            .min(self.cfg.total_steps() - self.step);
        let mut acc = IterationAccum {
            shapley: vec![Vec::new(); n],
            ..Default::default()
        };
        acc.returns = self.collect(steps)?;
        if self.step >= self.cfg.warmup_steps && !self.buffer.is_empty() {
            for _ in 0..self.cfg.updates_per_train {
                let st = self.update()?;
                acc.critic_losses.push(st.critic_loss);
                for (i, q) in st.shapley_q_mean.iter().enumerate() {
                    if let Some(q) = q {
                        acc.shapley[i].push(*q);
                    }
                }
                acc.bc.extend(st.bc_loglik_mean.iter().flatten());
            }
        }
        let mut eval = None;
        if self.cfg.eval_interval > 0
            && (self.step >= self.next_eval || self.step >= self.cfg.total_steps())
        {
            while self.next_eval <= self.step {
                self.next_eval += self.cfg.eval_interval;
            }
            let r = self.evaluate()?;
            if let Some(th) = self.threshold() {
                if r >= th && self.steps_to_threshold.is_none() {
                    self.steps_to_threshold = Some(self.step);
                }
            }
            let rec = EvalRecord {
                step: self.step,
                eval_return: r,
            };
            self.evals.push(rec.clone());
            eval = Some(rec);
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let ret_mean = mean(&acc.returns);
        let ret_std = if acc.returns.is_empty() {
            f64::NAN
        } else {
            (acc.returns
                .iter()
                .map(|r| (r - ret_mean).powi(2))
                .sum::<f64>()
                / acc.returns.len() as f64)
                .sqrt()
        };
        let rec = MetricsRecord {
            step: self.step,
            episodes: self.episodes,
            ret_mean,
            ret_std,
            critic_loss: mean(&acc.critic_losses),
            alpha: self.temp.alpha(),
            shapley_q_mean: acc.shapley.iter().map(|v| mean(v)).collect(),
            bc_loglik_mean: mean(&acc.bc),
        };
        Ok((rec, eval))
    }
}
