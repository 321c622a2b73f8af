//! Small cooperative environments with a single team reward and actions in
//! `[-1, 1]^D` per agent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("unknown environment id `{0}`")]
    UnknownId(String),
    #[error("invalid environment parameter: {0}")]
    Param(String),
    #[error("step called on a finished episode; call reset first")]
    NeedsReset,
    #[error("non-finite action")]
    NonFiniteAction,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvSpec {
    pub n: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub episode_len: usize,
    /// Inclusive per-step reward bounds.
    pub reward_bounds: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: Observation,
    pub reward: f64,
    pub terminal: bool,
    /// Episode cut by the time limit without a true terminal state.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation;
    /// `joint_action` holds `n` blocks of `D` components; values outside
    /// `[-1, 1]` are clipped.
    fn step(&mut self, joint_action: &[f64]) -> Result<StepOutcome, EnvError>;
    /// Constants echoed into run summaries.
    fn constants(&self) -> Value;
    /// Upper bound on the episode return, exact where stated by the env.
    fn optimal_return(&self) -> Option<f64> {
        None
    }
    /// Same as [`Environment::optimal_return`] with the listed agents' actions
    /// pinned to zero.
    fn optimal_return_without(&self, _disabled: &[usize]) -> Option<f64> {
        None
    }
}

fn check_action(spec: &EnvSpec, a: &[f64]) -> Result<Vec<f64>, EnvError> {
    if a.len() != spec.n * spec.action_dim {
        return Err(EnvError::Dim(format!(
            "joint action has {} components, expected {}",
            a.len(),
            spec.n * spec.action_dim
        )));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    Ok(a.iter().map(|x| x.clamp(-1.0, 1.0)).collect())
}

/// `r(a) = c - ||W a - g||²` with a constant context state.
///
/// The state is `[g, t / T]`; every agent observes the full state. The last
/// step of an episode is terminal.
#[derive(Clone, Debug)]
pub struct QuadCoupledEnv {
    spec: EnvSpec,
    w: DMatrix<f64>,
    g: DVector<f64>,
    c: f64,
    t: usize,
}

impl QuadCoupledEnv {
    pub fn new(
        n: usize,
        d: usize,
        w: DMatrix<f64>,
        g: DVector<f64>,
        c: f64,
        episode_len: usize,
    ) -> Result<Self, EnvError> {
        if n == 0 || d == 0 || episode_len == 0 {
            return Err(EnvError::Param("n, D and T must be positive".into()));
        }
        if w.ncols() != n * d || w.nrows() != g.len() || g.is_empty() {
            return Err(EnvError::Dim(format!(
                "W is {}x{}, g has {} rows, n*D = {}",
                w.nrows(),
                w.ncols(),
                g.len(),
                n * d
            )));
        }
        if !c.is_finite() || w.iter().chain(g.iter()).any(|x| !x.is_finite()) {
            return Err(EnvError::Param("non-finite W, g or c".into()));
        }
        let worst: f64 = (0..w.nrows())
            .map(|r| {
                let s: f64 = w.row(r).iter().map(|x| x.abs()).sum::<f64>() + g[r].abs();
                s * s
            })
            .sum();
        let k = g.len();
        let spec = EnvSpec {
            n,
            obs_dim: k + 1,
            state_dim: k + 1,
            action_dim: d,
            episode_len,
            reward_bounds: (c - worst, c),
        };
        Ok(Self {
            spec,
            w,
            g,
            c,
            t: episode_len,
        })
    }

    /// `W` has `D` rows of i.i.d. `N(0, 1/(nD))` entries; `g = W a*` with `a*`
    /// uniform in `[-0.5, 0.5]^{nD}`, so the optimum is attained inside the
    /// action box. The offset is `|g|²`.
    pub fn seeded(n: usize, d: usize, episode_len: usize, seed: u64) -> Result<Self, EnvError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = n * d;
        let scale = 1.0 / (cols as f64).sqrt();
        let w = DMatrix::from_fn(d, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let a_star = DVector::from_fn(cols, |_, _| rng.random_range(-0.5..0.5));
        let g = &w * a_star;
        // c = |g|² puts the zero action at return 0 and the optimum at c
        let c = g.norm_squared();
        Self::new(n, d, w, g, c, episode_len)
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn reward(&self, joint_action: &[f64]) -> f64 {
        let a = DVector::from_column_slice(joint_action);
        self.c - (&self.w * a - &self.g).norm_squared()
    }

    /// Minimum-norm least-squares joint action over the columns of agents not
    /// in `disabled` (those are zero).
    pub fn least_squares_action(&self, disabled: &[usize]) -> Vec<f64> {
        let d = self.spec.action_dim;
        let active: Vec<usize> = (0..self.spec.n * d)
            .filter(|j| !disabled.contains(&(j / d)))
            .collect();
        let mut a = vec![0.0; self.spec.n * d];
        if active.is_empty() {
            return a;
        }
        let sub = self.w.select_columns(active.iter());
        let sol = sub
            .svd(true, true)
            .solve(&self.g, 1e-12)
            .expect("svd computed with u and v");
        for (k, &j) in active.iter().enumerate() {
            a[j] = sol[k];
        }
        a
    }

    fn state(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.g.iter().copied().collect();
        s.push(self.t as f64 / self.spec.episode_len as f64);
        s
    }

    fn observe(&self) -> Observation {
        let state = self.state();
        Observation {
            obs: vec![state.clone(); self.spec.n],
            state,
        }
    }
}

impl Environment for QuadCoupledEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Observation {
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, joint_action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.t >= self.spec.episode_len {
            return Err(EnvError::NeedsReset);
        }
        let a = check_action(&self.spec, joint_action)?;
        let reward = self.reward(&a);
        self.t += 1;
        Ok(StepOutcome {
            next: self.observe(),
            reward,
            terminal: self.t == self.spec.episode_len,
            truncated: false,
        })
    }

    fn constants(&self) -> Value {
        json!({
            "id": "quad_coupled",
            "n": self.spec.n,
            "action_dim": self.spec.action_dim,
            "episode_len": self.spec.episode_len,
            "offset": self.c,
            "coupling": self.w.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
            "target": self.g.iter().copied().collect::<Vec<f64>>(),
            "optimal_return": self.optimal_return(),
        })
    }

    fn optimal_return(&self) -> Option<f64> {
        self.optimal_return_without(&[])
    }

    fn optimal_return_without(&self, disabled: &[usize]) -> Option<f64> {
        let a = self.least_squares_action(disabled);
        Some(self.spec.episode_len as f64 * self.reward(&a))
    }
}

/// Point agents covering landmarks in `[-1, 1]²`.
#[derive(Clone, Debug)]
pub struct SpreadMiniEnv {
    spec: EnvSpec,
    landmarks: usize,
    pos: Vec<[f64; 2]>,
    vel: Vec<[f64; 2]>,
    marks: Vec<[f64; 2]>,
    t: usize,
}

impl SpreadMiniEnv {
    pub const AGENT_RADIUS: f64 = 0.1;
    pub const COLLISION_PENALTY: f64 = 1.0;
    pub const ARENA: f64 = 1.0;
    /// Displacement per step at full action.
    pub const MAX_SPEED: f64 = 0.1;

    pub fn new(n: usize, landmarks: usize, episode_len: usize) -> Result<Self, EnvError> {
        if !(1..=4).contains(&n) {
            return Err(EnvError::Param(format!(
                "spread_mini supports 1..=4 agents, got {n}"
            )));
        }
        if landmarks == 0 || episode_len == 0 {
            return Err(EnvError::Param("landmarks and T must be positive".into()));
        }
        let obs_dim = 4 + 2 * landmarks + 2 * (n - 1);
        let diag = 2.0 * Self::ARENA * std::f64::consts::SQRT_2;
        let pairs = (n * (n - 1) / 2) as f64;
        let spec = EnvSpec {
            n,
            obs_dim,
            state_dim: 4 * n + 2 * landmarks,
            action_dim: 2,
            episode_len,
            reward_bounds: (
                -(landmarks as f64) * diag - pairs * Self::COLLISION_PENALTY,
                0.0,
            ),
        };
        Ok(Self {
            spec,
            landmarks,
            pos: vec![[0.0; 2]; n],
            vel: vec![[0.0; 2]; n],
            marks: vec![[0.0; 2]; landmarks],
            t: episode_len,
        })
    }

    /// Places agents and landmarks directly, with zero velocity.
    pub fn set_layout(&mut self, agents: &[[f64; 2]], marks: &[[f64; 2]]) -> Result<(), EnvError> {
        if agents.len() != self.spec.n || marks.len() != self.landmarks {
            return Err(EnvError::Dim("layout sizes".into()));
        }
        self.pos = agents.to_vec();
        self.vel = vec![[0.0; 2]; self.spec.n];
        self.marks = marks.to_vec();
        self.t = 0;
        Ok(())
    }

    pub fn reward(&self) -> f64 {
        let dist =
            |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let cover: f64 = self
            .marks
            .iter()
            .map(|&m| {
                self.pos
                    .iter()
                    .map(|&p| dist(p, m))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        let mut collisions = 0usize;
        for i in 0..self.pos.len() {
            for j in i + 1..self.pos.len() {
                if dist(self.pos[i], self.pos[j]) < 2.0 * Self::AGENT_RADIUS {
                    collisions += 1;
                }
            }
        }
        -cover - collisions as f64 * Self::COLLISION_PENALTY
    }

    fn observe(&self) -> Observation {
        let obs = (0..self.spec.n)
            .map(|i| {
                let p = self.pos[i];
                let mut o = vec![p[0], p[1], self.vel[i][0], self.vel[i][1]];
                for m in &self.marks {
                    o.extend([m[0] - p[0], m[1] - p[1]]);
                }
                for (j, q) in self.pos.iter().enumerate() {
                    if j != i {
                        o.extend([q[0] - p[0], q[1] - p[1]]);
                    }
                }
                o
            })
            .collect();
        let mut state = Vec::with_capacity(self.spec.state_dim);
        for i in 0..self.spec.n {
            state.extend(self.pos[i]);
            state.extend(self.vel[i]);
        }
        for m in &self.marks {
            state.extend(m);
        }
        Observation { obs, state }
    }
}

impl Environment for SpreadMiniEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        let mut draw = || {
            [
                rng.random_range(-Self::ARENA..Self::ARENA),
                rng.random_range(-Self::ARENA..Self::ARENA),
            ]
        };
        self.pos = (0..self.spec.n).map(|_| draw()).collect();
        self.marks = (0..self.landmarks).map(|_| draw()).collect();
        self.vel = vec![[0.0; 2]; self.spec.n];
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, joint_action: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.t >= self.spec.episode_len {
            return Err(EnvError::NeedsReset);
        }
        let a = check_action(&self.spec, joint_action)?;
        for i in 0..self.spec.n {
            for k in 0..2 {
                self.vel[i][k] = Self::MAX_SPEED * a[2 * i + k];
                self.pos[i][k] = (self.pos[i][k] + self.vel[i][k]).clamp(-Self::ARENA, Self::ARENA);
            }
        }
        self.t += 1;
        Ok(StepOutcome {
            next: self.observe(),
            reward: self.reward(),
            terminal: false,
            truncated: self.t == self.spec.episode_len,
        })
    }

    fn constants(&self) -> Value {
        json!({
            "id": "spread_mini",
            "n": self.spec.n,
            "landmarks": self.landmarks,
            "episode_len": self.spec.episode_len,
            "agent_radius": Self::AGENT_RADIUS,
            "collision_penalty": Self::COLLISION_PENALTY,
            "arena": [-Self::ARENA, Self::ARENA],
            "max_speed": Self::MAX_SPEED,
        })
    }
}

/// Discards one agent's action before the wrapped environment sees it.
pub struct DummyAgentEnv {
    base: Box<dyn Environment>,
    dummy: usize,
}

impl DummyAgentEnv {
    pub fn new(base: Box<dyn Environment>, dummy: usize) -> Result<Self, EnvError> {
        if dummy >= base.spec().n {
            return Err(EnvError::Param(format!(
                "dummy index {dummy} out of range for n = {}",
                base.spec().n
            )));
        }
        Ok(Self { base, dummy })
    }

    pub fn dummy_index(&self) -> usize {
        self.dummy
    }
}

impl Environment for DummyAgentEnv {
    fn spec(&self) -> &EnvSpec {
        self.base.spec()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Observation {
        self.base.reset(rng)
    }

    fn step(&mut self, joint_action: &[f64]) -> Result<StepOutcome, EnvError> {
        let d = self.spec().action_dim;
        let mut a = joint_action.to_vec();
        if a.len() == self.spec().n * d {
            a[self.dummy * d..(self.dummy + 1) * d].fill(0.0);
        }
        self.base.step(&a)
    }

    fn constants(&self) -> Value {
        json!({ "id": "dummy_agent", "dummy_index": self.dummy, "base": self.base.constants() })
    }

    fn optimal_return(&self) -> Option<f64> {
        self.base.optimal_return_without(&[self.dummy])
    }

    fn optimal_return_without(&self, disabled: &[usize]) -> Option<f64> {
        let mut all = disabled.to_vec();
        all.push(self.dummy);
        self.base.optimal_return_without(&all)
    }
}

/// Parameters for [`make_env`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnvParams {
    pub n: usize,
    pub action_dim: usize,
    pub episode_len: usize,
    pub env_seed: u64,
    pub landmarks: usize,
    pub dummy_index: usize,
}

pub const ENV_IDS: [&str; 4] = [
    "quad_coupled",
    "spread_mini",
    "dummy_quad_coupled",
    "dummy_spread_mini",
];

pub fn make_env(id: &str, p: &EnvParams) -> Result<Box<dyn Environment>, EnvError> {
    let quad = || QuadCoupledEnv::seeded(p.n, p.action_dim, p.episode_len, p.env_seed);
    let spread = || {
        if p.action_dim != 2 {
            return Err(EnvError::Param(format!(
                "spread_mini has D = 2, got {}",
                p.action_dim
            )));
        }
        SpreadMiniEnv::new(p.n, p.landmarks, p.episode_len)
    };
    Ok(match id {
        "quad_coupled" => Box::new(quad()?),
        "spread_mini" => Box::new(spread()?),
        "dummy_quad_coupled" => Box::new(DummyAgentEnv::new(Box::new(quad()?), p.dummy_index)?),
        "dummy_spread_mini" => Box::new(DummyAgentEnv::new(Box::new(spread()?), p.dummy_index)?),
        other => return Err(EnvError::UnknownId(other.to_string())),
    })
}
