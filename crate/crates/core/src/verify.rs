//! Batch self-checks behind `his verify`: game-theoretic guarantees on random
//! games, the coalition sampler's distribution, and gradient agreement with
//! central finite differences.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::boxcox::LambdaGrid;
use crate::config::AblationMode;
use crate::coopgame::{
    coalition_weight, core_violation, generate_convex_game, generate_random_game,
    hybrid_allocation, is_efficient, shapley_values, CharacteristicGame, Coalition,
};
use crate::nn::ParamSet;
use crate::policy::GaussianPolicy;
use crate::trainer::{agent_objective, FrozenTerms, ObjectiveSettings, TurnInputs};
use crate::valuation::{sample_coalition, Temperature, TwinCritics};

pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_ABS_FLOOR: f64 = 1e-6;
pub const MIN_P_VALUE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorems,
    Distributions,
    Gradients,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Theorems, Suite::Distributions, Suite::Gradients];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Theorems => "theorems",
            Suite::Distributions => "distributions",
            Suite::Gradients => "gradients",
        }
    }

    /// Games for `theorems`, draws per `n` for `distributions`, fixtures for
    /// `gradients`.
    pub fn default_count(self) -> usize {
        match self {
            Suite::Theorems => 200,
            Suite::Distributions => 100_000,
            Suite::Gradients => 3,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown suite {s:?} (expected theorems, distributions or gradients)")
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Observed statistic: failure count, p-value or worst relative error.
    pub value: f64,
    pub limit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    pub count: usize,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// First failing case, enough to replay it.
    pub failure: Option<Value>,
}

pub fn run_suite(suite: Suite, seed: u64, count: usize) -> VerifyReport {
    let (checks, failure) = match suite {
        Suite::Theorems => theorems(seed, count),
        Suite::Distributions => distributions(seed, count),
        Suite::Gradients => gradients(seed, count),
    };
    VerifyReport {
        suite,
        seed,
        count,
        passed: checks.iter().all(|c| c.passed),
        checks,
        failure,
    }
}

fn count_check(name: &str, failures: usize) -> Check {
    Check {
        name: name.into(),
        passed: failures == 0,
        value: failures as f64,
        limit: 0.0,
    }
}

fn theorems(seed: u64, count: usize) -> (Vec<Check>, Option<Value>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = [0usize; 4];
    let mut failure = None;
    let mut note = |k: usize,
                    what: &str,
                    game: &CharacteristicGame,
                    x: &[f64],
                    extra: Value,
                    fails: &mut [usize; 4]| {
        fails[k] += 1;
        if failure.is_none() {
            failure = Some(json!({
                "check": what,
                "game": serde_json::from_str::<Value>(&game.to_json_string()).unwrap_or(Value::Null),
                "allocation": x,
                "detail": extra,
            }));
        }
    };
    for k in 0..count {
        let n = 2 + k % 5;
        let convex = generate_convex_game(&mut rng, n).expect("n within generator range");
        let arbitrary = generate_random_game(&mut rng, n).expect("n within range");

        for game in [&convex, &arbitrary] {
            let x = hybrid_allocation(game);
            if !is_efficient(game, &x).expect("sizes match") {
                let gap = x.total() - game.grand_value();
                note(
                    0,
                    "hybrid_efficient",
                    game,
                    x.payoffs(),
                    json!({ "gap": gap }),
                    &mut fails,
                );
            }
        }
        let x = hybrid_allocation(&convex);
        if let Some(c) = core_violation(&convex, &x).expect("sizes match") {
            note(
                1,
                "hybrid_in_core",
                &convex,
                x.payoffs(),
                json!({ "coalition": c.key() }),
                &mut fails,
            );
        }
        let phi = shapley_values(&convex);
        if let Some(c) = core_violation(&convex, &phi).expect("sizes match") {
            note(
                2,
                "shapley_in_core",
                &convex,
                phi.payoffs(),
                json!({ "coalition": c.key() }),
                &mut fails,
            );
        }
        if (phi.total() - convex.grand_value()).abs() > crate::coopgame::GAME_TOL {
            note(
                3,
                "shapley_efficient",
                &convex,
                phi.payoffs(),
                Value::Null,
                &mut fails,
            );
        }
    }
    let checks = vec![
        count_check("hybrid_efficient", fails[0]),
        count_check("hybrid_in_core", fails[1]),
        count_check("shapley_in_core", fails[2]),
        count_check("shapley_efficient", fails[3]),
    ];
    (checks, failure)
}

/// Chi-square test of the predecessor-coalition sampler for agent 0 against
/// the weights `|C|!(n-|C|-1)!/n!`.
pub fn sampler_chi_square<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    draws: usize,
) -> (f64, f64, Vec<u64>) {
    let mut counts = vec![0u64; 1 << n];
    for _ in 0..draws {
        counts[sample_coalition(rng, n, 0).bits() as usize] += 1;
    }
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (bits, &obs) in counts.iter().enumerate() {
        let c = Coalition::from_bits(bits as u32);
        if c.contains(0) {
            continue;
        }
        let expected = draws as f64 * coalition_weight(c.len(), n).expect("|C| < n");
        stat += (obs as f64 - expected).powi(2) / expected;
        cells += 1;
    }
    let p = if cells > 1 {
        let dist = ChiSquared::new((cells - 1) as f64).expect("positive degrees of freedom");
        1.0 - dist.cdf(stat)
    } else {
        1.0
    };
    (stat, p, counts)
}

fn distributions(seed: u64, draws: usize) -> (Vec<Check>, Option<Value>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut failure = None;
    for n in 2..=5 {
        let (stat, p, counts) = sampler_chi_square(&mut rng, n, draws);
        let passed = p > MIN_P_VALUE;
        if !passed && failure.is_none() {
            failure = Some(json!({ "n": n, "draws": draws, "statistic": stat, "counts": counts }));
        }
        checks.push(Check {
            name: format!("sampler_n{n}"),
            passed,
            value: p,
            limit: MIN_P_VALUE,
        });
    }
    (checks, failure)
}

/// Worst disagreement between an analytic gradient and central differences of
/// `f`, trying several step sizes per coordinate. The relative error's
/// denominator is floored so that an absolute error of [`GRAD_ABS_FLOOR`] on a
/// tiny gradient sits exactly at the tolerance; steps where `f` is NaN are
/// skipped.
pub fn gradient_error<F: Fn(&[f64]) -> f64>(
    f: F,
    theta: &[f64],
    analytic: &[f64],
) -> (f64, Option<(usize, f64)>) {
    let mut worst = 0.0;
    let mut at = None;
    for k in 0..theta.len() {
        let mut best = f64::INFINITY;
        let mut best_fd = f64::NAN;
        for h in [1e-4, 1e-5, 1e-6, 1e-7, 1e-8] {
            let mut t = theta.to_vec();
            t[k] += h;
            let up = f(&t);
            t[k] -= 2.0 * h;
            let dn = f(&t);
            let fd = (up - dn) / (2.0 * h);
            let abs = (fd - analytic[k]).abs();
            let rel = abs
                / fd.abs()
                    .max(analytic[k].abs())
                    .max(GRAD_ABS_FLOOR / GRAD_REL_TOL);
            if rel.is_finite() && rel < best {
                best = rel;
                best_fd = fd;
            }
        }
        if best > worst {
            worst = best;
            at = Some((k, best_fd));
        }
    }
    (worst, at)
}

fn jitter<R: Rng + ?Sized>(p: &mut ParamSet, rng: &mut R) {
    // keeps ReLU pre-activations off their kink at zero-initialized biases
    let flat: Vec<f64> = p
        .to_flat()
        .iter()
        .map(|v| v + rng.random_range(-0.1..0.1))
        .collect();
    p.set_flat(&flat).expect("same length");
}

/// Tiny two-agent fixture: policy 3 -> [6, 5] -> 2, critics 5 -> [7] -> 1,
/// batch of 4.
pub struct GradientFixture {
    pub policy: GaussianPolicy,
    pub critics: TwinCritics,
    pub states: Array2<f64>,
    pub joint: Array2<f64>,
    pub targets: Vec<f64>,
    pub hist: Array1<f64>,
    pub coalitions: Vec<Coalition>,
    pub noise: Array2<f64>,
}

impl GradientFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = GaussianPolicy::new(3, 1, &[6, 5], &mut rng)
            .expect("valid sizes")
            .params()
            .clone();
        jitter(&mut net, &mut rng);
        let policy = GaussianPolicy::from_params(net, 1).expect("valid head");
        let mut critics = TwinCritics::new(3, 2, 1, &[7], &mut rng).expect("valid sizes");
        jitter(&mut critics.q1, &mut rng);
        jitter(&mut critics.q2, &mut rng);
        let states = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let joint = Array2::from_shape_fn((4, 2), |_| rng.random_range(-0.9..0.9));
        let targets = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coalitions = vec![Coalition::EMPTY, Coalition::singleton(1)];
        let hist = critics
            .shapley_q_batch(states.view(), joint.view(), 0, &coalitions)
            .expect("shapes agree");
        let noise = Array2::from_shape_fn((4, 1), |_| rng.sample(StandardNormal));
        Self {
            policy,
            critics,
            states,
            joint,
            targets,
            hist,
            coalitions,
            noise,
        }
    }

    /// `(value, gradient of -value)` of agent 0's objective. A probe that moves
    /// a log-likelihood outside a frozen Box-Cox fit's domain gives NaN.
    pub fn objective(
        &self,
        params: &ParamSet,
        mode: AblationMode,
        frozen: &FrozenTerms,
    ) -> (f64, Vec<f64>, FrozenTerms) {
        let policy = GaussianPolicy::from_params(params.clone(), 1).expect("valid head");
        let stored = self.joint.slice(ndarray::s![.., 0..1]).to_owned();
        let input = TurnInputs {
            agent: 0,
            states: self.states.view(),
            obs: self.states.view(),
            joint: self.joint.view(),
            stored_own: stored.view(),
            historical_shapley: Some(self.hist.view()),
            coalitions: &self.coalitions,
        };
        let settings = ObjectiveSettings {
            mode,
            alpha: 0.3,
            beta: 10.0,
            grid: LambdaGrid::default(),
        };
        match agent_objective(
            &policy,
            &self.critics,
            &input,
            &settings,
            &self.noise,
            frozen,
        ) {
            Ok(e) => (e.value, e.loss_grads.to_flat(), e.frozen),
            Err(_) => (f64::NAN, Vec::new(), frozen.clone()),
        }
    }
}

fn grad_check(
    name: String,
    err: (f64, Option<(usize, f64)>),
    analytic: &[f64],
    seed: u64,
    failure: &mut Option<Value>,
) -> Check {
    let (worst, at) = err;
    let passed = worst <= GRAD_REL_TOL;
    if !passed && failure.is_none() {
        let (k, fd) = at.expect("a coordinate was worst");
        *failure = Some(json!({
            "check": name,
            "fixture_seed": seed,
            "param_index": k,
            "analytic": analytic[k],
            "finite_difference": fd,
        }));
    }
    Check {
        name,
        passed,
        value: worst,
        limit: GRAD_REL_TOL,
    }
}

fn gradients(seed: u64, count: usize) -> (Vec<Check>, Option<Value>) {
    let mut worst: Vec<(String, f64, bool)> = Vec::new();
    let mut failure = None;
    let mut record = |c: Check| match worst.iter_mut().find(|w| w.0 == c.name) {
        Some(w) => {
            w.1 = w.1.max(c.value);
            w.2 &= c.passed;
        }
        None => worst.push((c.name, c.value, c.passed)),
    };
    for k in 0..count as u64 {
        let fx_seed = seed.wrapping_add(k);
        let fx = GradientFixture::new(fx_seed);

        // critic regression loss, each critic against its own parameters
        let loss = fx
            .critics
            .critic_loss_and_grads(fx.states.view(), fx.joint.view(), &fx.targets)
            .expect("shapes");
        for (which, grads) in [(0, &loss.grads1), (1, &loss.grads2)] {
            let base = if which == 0 {
                fx.critics.q1.clone()
            } else {
                fx.critics.q2.clone()
            };
            let f = |t: &[f64]| {
                let mut c = fx.critics.clone();
                let p = if which == 0 { &mut c.q1 } else { &mut c.q2 };
                p.set_flat(t).expect("same length");
                let l = c
                    .critic_loss_and_grads(fx.states.view(), fx.joint.view(), &fx.targets)
                    .expect("shapes");
                if which == 0 {
                    l.loss1
                } else {
                    l.loss2
                }
            };
            let an = grads.to_flat();
            let err = gradient_error(f, &base.to_flat(), &an);
            record(grad_check(
                "critic_loss".into(),
                err,
                &an,
                fx_seed,
                &mut failure,
            ));
        }

        // policy objective per mode; share is the plain soft actor term
        for mode in AblationMode::ALL {
            let params = fx.policy.params();
            let (_, an, frozen) = fx.objective(params, mode, &FrozenTerms::default());
            let f = |t: &[f64]| {
                let mut p = params.clone();
                p.set_flat(t).expect("same length");
                -fx.objective(&p, mode, &frozen).0
            };
            let err = gradient_error(f, &params.to_flat(), &an);
            let name = match mode {
                AblationMode::Share => "policy_soft_actor".to_string(),
                m => format!("policy_shapley_{m}"),
            };
            record(grad_check(name, err, &an, fx_seed, &mut failure));
        }

        // temperature: d/d log α of mean(-α log π - α H̄)
        let log_probs: Vec<f64> = {
            let s = fx
                .policy
                .sample_with_noise(fx.states.view(), fx.noise.clone())
                .expect("shapes");
            s.log_probs.to_vec()
        };
        let temp = Temperature::new(0.3, true, -1.0);
        let an = [temp.gradient(&log_probs)];
        let f = |t: &[f64]| {
            let alpha = t[0].exp();
            log_probs
                .iter()
                .map(|lp| -alpha * lp - alpha * temp.target_entropy)
                .sum::<f64>()
                / log_probs.len() as f64
        };
        let err = gradient_error(f, &[temp.log_alpha], &an);
        record(grad_check(
            "temperature".into(),
            err,
            &an,
            fx_seed,
            &mut failure,
        ));
    }
    let checks = worst
        .into_iter()
        .map(|(name, value, passed)| Check {
            name,
            passed,
            value,
            limit: GRAD_REL_TOL,
        })
        .collect();
    (checks, failure)
}
