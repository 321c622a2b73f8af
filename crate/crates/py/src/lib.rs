//! Python bindings: games, Box-Cox, policies, critics, environments and the
//! trainer.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use his_core::boxcox;
use his_core::config::RunConfig;
use his_core::coopgame::{self, Allocation, CharacteristicGame, Coalition};
use his_core::envs::{make_env, Environment};
use his_core::policy::GaussianPolicy;
use his_core::trainer::{self as tr, Trainer};
use his_core::valuation::{CriticSet, TwinCritics};
use his_core::verify::{run_suite, Suite};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Characteristic game; `values[bits]` is the value of the coalition whose
/// members are the set bits.
#[pyclass(name = "Game", from_py_object)]
#[derive(Clone)]
struct PyGame {
    inner: CharacteristicGame,
}

#[pymethods]
impl PyGame {
    #[new]
    fn new(n: usize, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: CharacteristicGame::new(n, values).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CharacteristicGame::from_json_str(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn random_convex(seed: u64, n: usize) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: coopgame::generate_convex_game(&mut rng, n).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn value(&self, members: Vec<usize>) -> PyResult<f64> {
        if members.iter().any(|&i| i >= self.inner.n()) {
            return Err(PyValueError::new_err("member index out of range"));
        }
        Ok(self.inner.value(Coalition::from_members(members)))
    }

    fn shapley_values(&self) -> Vec<f64> {
        coopgame::shapley_values(&self.inner).0
    }

    fn hybrid_allocation(&self) -> Vec<f64> {
        coopgame::hybrid_allocation(&self.inner).0
    }

    fn is_convex(&self) -> PyResult<bool> {
        coopgame::is_convex(&self.inner).map_err(value_err)
    }

    fn is_superadditive(&self) -> PyResult<bool> {
        coopgame::is_superadditive(&self.inner).map_err(value_err)
    }

    fn is_efficient(&self, x: Vec<f64>) -> PyResult<bool> {
        coopgame::is_efficient(&self.inner, &Allocation(x)).map_err(value_err)
    }

    fn is_in_core(&self, x: Vec<f64>) -> PyResult<bool> {
        coopgame::is_in_core(&self.inner, &Allocation(x)).map_err(value_err)
    }
}

#[pyfunction]
fn bc_transform(x: f64, lam: f64) -> PyResult<f64> {
    boxcox::bc_transform(x, lam).map_err(value_err)
}

/// Returns `(lambda, x_min, shift)`.
#[pyfunction]
fn estimate_lambda(data: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let f = boxcox::estimate_lambda(&data).map_err(value_err)?;
    Ok((f.lambda, f.x_min, f.shift))
}

#[pyfunction]
fn bc_training_transform(values: Vec<f64>) -> PyResult<Vec<f64>> {
    boxcox::bc_training_transform(&values).map_err(value_err)
}

#[pyclass(name = "GaussianPolicy", from_py_object)]
#[derive(Clone)]
struct PyPolicy {
    inner: GaussianPolicy,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (obs_dim, action_dim, hidden, seed=0))]
    fn new(obs_dim: usize, action_dim: usize, hidden: Vec<usize>, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: GaussianPolicy::new(obs_dim, action_dim, &hidden, &mut rng)
                .map_err(value_err)?,
        })
    }

    /// Returns `(action, log_prob, pre_squash)`.
    fn sample(&self, obs: Vec<f64>, seed: u64) -> PyResult<(Vec<f64>, f64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.inner.sample(&obs, &mut rng).map_err(value_err)?;
        Ok((s.action, s.log_prob, s.pre_squash))
    }

    fn deterministic_action(&self, obs: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.deterministic_action(&obs).map_err(value_err)
    }

    fn historical_log_prob(&self, obs: Vec<f64>, action: Vec<f64>) -> PyResult<f64> {
        self.inner
            .historical_log_prob(&obs, &action)
            .map_err(value_err)
    }
}

#[pyclass(name = "TwinCritics", from_py_object)]
#[derive(Clone)]
struct PyCritics {
    inner: TwinCritics,
}

#[pymethods]
impl PyCritics {
    #[new]
    #[pyo3(signature = (state_dim, n, action_dim, hidden, seed=0))]
    fn new(
        state_dim: usize,
        n: usize,
        action_dim: usize,
        hidden: Vec<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: TwinCritics::new(state_dim, n, action_dim, &hidden, &mut rng)
                .map_err(value_err)?,
        })
    }

    fn q_min(&self, state: Vec<f64>, joint_action: Vec<f64>) -> PyResult<f64> {
        self.inner
            .q_min(CriticSet::Main, &state, &joint_action)
            .map_err(value_err)
    }

    /// Shapley-Q of agent `i` by enumerating every coalition of the others.
    fn shapley_q_exhaustive(
        &self,
        state: Vec<f64>,
        joint_action: Vec<f64>,
        i: usize,
    ) -> PyResult<f64> {
        self.inner
            .shapley_q_exhaustive(&state, &joint_action, i)
            .map_err(value_err)
    }

    /// Monte-Carlo Shapley-Q with `m` coalitions drawn from `seed`.
    fn shapley_q(
        &self,
        state: Vec<f64>,
        joint_action: Vec<f64>,
        i: usize,
        m: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.inner
            .shapley_q(&state, &joint_action, i, m, &mut rng)
            .map_err(value_err)
    }
}

/// Environment built from a config's env keys.
#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    inner: Box<dyn Environment>,
    rng: ChaCha8Rng,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (config_toml="", seed=0))]
    fn new(config_toml: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config_toml).map_err(value_err)?;
        let inner = make_env(&cfg.env, &cfg.env_params()).map_err(value_err)?;
        Ok(Self {
            inner,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Per-agent observations.
    fn reset(&mut self) -> Vec<Vec<f64>> {
        self.inner.reset(&mut self.rng).obs
    }

    /// Returns `(observations, reward, done)`.
    fn step(&mut self, joint_action: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, f64, bool)> {
        let out = self.inner.step(&joint_action).map_err(value_err)?;
        let done = out.done();
        Ok((out.next.obs, out.reward, done))
    }

    fn optimal_return(&self) -> Option<f64> {
        self.inner.optimal_return()
    }

    fn constants(&self) -> String {
        self.inner.constants().to_string()
    }
}

#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config_toml="", overrides=Vec::new()))]
    fn new(config_toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config_toml).map_err(value_err)?;
        let cfg = cfg.with_overrides(&overrides).map_err(value_err)?;
        Ok(Self {
            inner: Trainer::new(cfg).map_err(value_err)?,
        })
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step()
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.finished()
    }

    #[getter]
    fn steps_to_threshold(&self) -> Option<usize> {
        self.inner.steps_to_threshold()
    }

    /// One collect/update/evaluate cycle; returns `(metrics_header,
    /// metrics_row, eval_return_or_None)`.
    fn train_iteration(&mut self) -> PyResult<(Vec<String>, Vec<f64>, Option<f64>)> {
        let (m, e) = self.inner.train_iteration().map_err(runtime_err)?;
        let mut row = vec![
            m.step as f64,
            m.episodes as f64,
            m.ret_mean,
            m.ret_std,
            m.critic_loss,
            m.alpha,
        ];
        row.extend(&m.shapley_q_mean);
        row.push(m.bc_loglik_mean);
        Ok((
            tr::metrics_header(self.inner.config().n),
            row,
            e.map(|e| e.eval_return),
        ))
    }

    fn evaluate(&mut self) -> PyResult<f64> {
        self.inner.evaluate().map_err(runtime_err)
    }
}

/// Trains to completion into `out_dir`; returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, overrides=Vec::new()))]
fn run(config_toml: &str, out_dir: &str, overrides: Vec<String>) -> PyResult<String> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(value_err)?;
    let cfg = cfg.with_overrides(&overrides).map_err(value_err)?;
    let s = tr::run_to_dir(&cfg, std::path::Path::new(out_dir)).map_err(runtime_err)?;
    serde_json::to_string(&s).map_err(runtime_err)
}

/// Runs a verification suite and returns its JSON report.
#[pyfunction]
#[pyo3(signature = (suite, seed=0, count=None))]
fn verify(suite: &str, seed: u64, count: Option<usize>) -> PyResult<String> {
    let s: Suite = suite.parse().map_err(PyValueError::new_err)?;
    let report = run_suite(s, seed, count.unwrap_or_else(|| s.default_count()));
    serde_json::to_string(&report).map_err(runtime_err)
}

#[pymodule]
fn his(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGame>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyCritics>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(bc_transform, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(bc_training_transform, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
