//! Exact cooperative game theory over small agent sets.
//!
//! A [`CharacteristicGame`] assigns a value to each of the `2^n` coalitions of
//! `n` agents. On top of it this module provides Shapley values, the hybrid
//! "equal base share plus half-game Shapley" allocation, and the convexity,
//! superadditivity, efficiency and Core predicates used to check them.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance for every game inequality and equality check.
pub const GAME_TOL: f64 = 1e-9;
/// Largest agent count supported by exact enumeration.
pub const MAX_EXACT_AGENTS: usize = 20;
/// Largest agent count for the `4^n` pairwise checks.
pub const MAX_PAIRWISE_AGENTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GameError {
    #[error("coalition weight undefined for |C| = {size}, n = {n}")]
    WeightDomain { size: usize, n: usize },
    #[error("agent index {agent} out of range for a game with {n} agents")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("unsupported agent count {n} (expected 1..={max})")]
    AgentCount { n: usize, max: usize },
    #[error("exhaustive check infeasible for n = {n} (limit {MAX_PAIRWISE_AGENTS})")]
    ExhaustiveInfeasible { n: usize },
    #[error("v(empty) must be 0, got {0}")]
    EmptyCoalitionValue(f64),
    #[error("expected {expected} coalition values, got {got}")]
    ValueCount { expected: usize, got: usize },
    #[error("missing value for coalition {{{0}}}")]
    MissingCoalition(String),
    #[error("invalid coalition key {key:?}: {reason}")]
    BadCoalitionKey { key: String, reason: String },
    #[error("non-finite value for coalition {{{0}}}")]
    NonFinite(String),
    #[error("allocation has {got} payoffs but the game has {n} agents")]
    LengthMismatch { n: usize, got: usize },
    #[error("malformed game file: {0}")]
    Format(String),
}

/// A set of agents, stored as a bitset over agent indices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Coalition(u32);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn from_bits(bits: u32) -> Self {
        Coalition(bits)
    }

    pub fn grand(n: usize) -> Self {
        debug_assert!(n <= 32);
        if n >= 32 {
            Coalition(u32::MAX)
        } else {
            Coalition((1u32 << n) - 1)
        }
    }

    pub fn singleton(i: usize) -> Self {
        Coalition(1 << i)
    }

    pub fn from_members<I: IntoIterator<Item = usize>>(members: I) -> Self {
        Coalition(members.into_iter().fold(0, |acc, i| acc | (1 << i)))
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 & (1 << i) != 0
    }

    pub fn with(self, i: usize) -> Self {
        Coalition(self.0 | (1 << i))
    }

    pub fn without(self, i: usize) -> Self {
        Coalition(self.0 & !(1 << i))
    }

    pub fn union(self, other: Self) -> Self {
        Coalition(self.0 | other.0)
    }

    pub fn intersection(self, other: Self) -> Self {
        Coalition(self.0 & other.0)
    }

    pub fn is_disjoint(self, other: Self) -> bool {
        self.0 & other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Member indices in increasing order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..32).filter(move |i| bits & (1 << i) != 0)
    }

    /// Canonical file key: sorted comma-separated members, `""` for the empty set.
    pub fn key(self) -> String {
        self.members()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl fmt::Display for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.key())
    }
}

/// The cooperative game `(N, v)`. Values are indexed by coalition bits.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicGame {
    n: usize,
    values: Vec<f64>,
}

impl CharacteristicGame {
    /// Builds a game from `2^n` values indexed by coalition bits.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, GameError> {
        if n == 0 || n > MAX_EXACT_AGENTS {
            return Err(GameError::AgentCount {
                n,
                max: MAX_EXACT_AGENTS,
            });
        }
        let expected = 1usize << n;
        if values.len() != expected {
            return Err(GameError::ValueCount {
                expected,
                got: values.len(),
            });
        }
        if let Some(bits) = values.iter().position(|v| !v.is_finite()) {
            return Err(GameError::NonFinite(Coalition(bits as u32).key()));
        }
        if values[0] != 0.0 {
            return Err(GameError::EmptyCoalitionValue(values[0]));
        }
        Ok(Self { n, values })
    }

    pub fn from_fn<F: Fn(Coalition) -> f64>(n: usize, f: F) -> Result<Self, GameError> {
        if n == 0 || n > MAX_EXACT_AGENTS {
            return Err(GameError::AgentCount {
                n,
                max: MAX_EXACT_AGENTS,
            });
        }
        let values = (0..1u32 << n).map(|b| f(Coalition(b))).collect();
        Self::new(n, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, c: Coalition) -> f64 {
        self.values[c.0 as usize]
    }

    pub fn grand_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn coalitions(&self) -> impl Iterator<Item = Coalition> {
        (0..1u32 << self.n).map(Coalition)
    }

    /// The game `v'(C) = factor * v(C)`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    fn check_agent(&self, i: usize) -> Result<(), GameError> {
        if i >= self.n {
            Err(GameError::AgentOutOfRange {
                agent: i,
                n: self.n,
            })
        } else {
            Ok(())
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, GameError> {
        let file: GameFile =
            serde_json::from_str(text).map_err(|e| GameError::Format(e.to_string()))?;
        file.into_game()
    }

    pub fn to_json_string(&self) -> String {
        let file = GameFile::from_game(self);
        serde_json::to_string_pretty(&file).expect("game file serializes")
    }
}

/// On-disk game format: `{"n": 3, "values": {"": 0, "0": 1, "0,1": 2, ...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameFile {
    pub n: usize,
    pub values: BTreeMap<String, f64>,
}

impl GameFile {
    pub fn from_game(game: &CharacteristicGame) -> Self {
        let values = game
            .coalitions()
            .map(|c| (c.key(), game.value(c)))
            .collect();
        Self { n: game.n, values }
    }

    pub fn into_game(self) -> Result<CharacteristicGame, GameError> {
        let n = self.n;
        if n == 0 || n > MAX_EXACT_AGENTS {
            return Err(GameError::AgentCount {
                n,
                max: MAX_EXACT_AGENTS,
            });
        }
        let mut values = vec![None; 1 << n];
        for (key, value) in &self.values {
            let c = parse_coalition_key(key, n)?;
            if values[c.0 as usize].replace(*value).is_some() {
                return Err(GameError::BadCoalitionKey {
                    key: key.clone(),
                    reason: "duplicate coalition".into(),
                });
            }
        }
        let values = values
            .into_iter()
            .enumerate()
            .map(|(b, v)| v.ok_or_else(|| GameError::MissingCoalition(Coalition(b as u32).key())))
            .collect::<Result<Vec<_>, _>>()?;
        CharacteristicGame::new(n, values)
    }
}

fn parse_coalition_key(key: &str, n: usize) -> Result<Coalition, GameError> {
    let bad = |reason: &str| GameError::BadCoalitionKey {
        key: key.to_string(),
        reason: reason.to_string(),
    };
    if key.trim().is_empty() {
        return Ok(Coalition::EMPTY);
    }
    let mut prev: Option<usize> = None;
    let mut c = Coalition::EMPTY;
    for part in key.split(',') {
        let i: usize = part.trim().parse().map_err(|_| bad("not an agent index"))?;
        if i >= n {
            return Err(bad("agent index out of range"));
        }
        if prev.is_some_and(|p| p >= i) {
            return Err(bad("members must be strictly increasing"));
        }
        prev = Some(i);
        c = c.with(i);
    }
    Ok(c)
}

/// A payoff vector `x = (x^1, ..., x^n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation(pub Vec<f64>);

impl Allocation {
    pub fn payoffs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// `x(C)`: payoff summed over the members of `c`.
    pub fn coalition_sum(&self, c: Coalition) -> f64 {
        c.members().map(|i| self.0[i]).sum()
    }
}

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|j| (j as f64).ln()).sum()
}

fn factorial(k: usize) -> f64 {
    (2..=k).fold(1.0, |acc, j| acc * j as f64)
}

/// Shapley weight `|C|! (n - |C| - 1)! / n!` of a coalition of size `c_size`.
pub fn coalition_weight(c_size: usize, n: usize) -> Result<f64, GameError> {
    if n == 0 || c_size >= n {
        return Err(GameError::WeightDomain { size: c_size, n });
    }
    if n <= 12 {
        Ok(factorial(c_size) * factorial(n - c_size - 1) / factorial(n))
    } else {
        Ok((ln_factorial(c_size) + ln_factorial(n - c_size - 1) - ln_factorial(n)).exp())
    }
}

fn weight_table(n: usize) -> Vec<f64> {
    (0..n)
        .map(|s| coalition_weight(s, n).expect("size below n"))
        .collect()
}

/// The first ordered pair `(C, D)` violating supermodularity, if any.
pub fn convexity_violation(
    game: &CharacteristicGame,
) -> Result<Option<(Coalition, Coalition)>, GameError> {
    if game.n > MAX_PAIRWISE_AGENTS {
        return Err(GameError::ExhaustiveInfeasible { n: game.n });
    }
    for c in game.coalitions() {
        for d in game.coalitions() {
            let lhs = game.value(c.union(d)) + game.value(c.intersection(d));
            let rhs = game.value(c) + game.value(d);
            if lhs < rhs - GAME_TOL {
                return Ok(Some((c, d)));
            }
        }
    }
    Ok(None)
}

/// `v(C ∪ D) + v(C ∩ D) >= v(C) + v(D)` for every pair of coalitions.
pub fn is_convex(game: &CharacteristicGame) -> Result<bool, GameError> {
    Ok(convexity_violation(game)?.is_none())
}

/// `v(C ∪ D) >= v(C) + v(D)` for every disjoint pair.
pub fn is_superadditive(game: &CharacteristicGame) -> Result<bool, GameError> {
    if game.n > MAX_PAIRWISE_AGENTS {
        return Err(GameError::ExhaustiveInfeasible { n: game.n });
    }
    let grand = Coalition::grand(game.n);
    for c in game.coalitions() {
        // enumerate subsets of the complement of c
        let rest = grand.bits() & !c.bits();
        let mut d = rest;
        loop {
            let dc = Coalition(d);
            if game.value(c.union(dc)) < game.value(c) + game.value(dc) - GAME_TOL {
                return Ok(false);
            }
            if d == 0 {
                break;
            }
            d = (d - 1) & rest;
        }
    }
    Ok(true)
}

/// Shapley value of agent `i` by the subset formula.
pub fn shapley_exact(game: &CharacteristicGame, i: usize) -> Result<f64, GameError> {
    game.check_agent(i)?;
    Ok(shapley_with_weights(game, i, &weight_table(game.n)))
}

fn shapley_with_weights(game: &CharacteristicGame, i: usize, weights: &[f64]) -> f64 {
    let others = Coalition::grand(game.n).without(i).bits();
    let mut total = 0.0;
    let mut sub = others;
    loop {
        let c = Coalition(sub);
        total += weights[c.len()] * (game.value(c.with(i)) - game.value(c));
        if sub == 0 {
            break;
        }
        sub = (sub - 1) & others;
    }
    total
}

/// Shapley values of every agent.
pub fn shapley_values(game: &CharacteristicGame) -> Allocation {
    let weights = weight_table(game.n);
    Allocation(
        (0..game.n)
            .map(|i| shapley_with_weights(game, i, &weights))
            .collect(),
    )
}

/// `x^i = v(N) / 2n + Φ_i(v / 2)`: an equal split of half the grand value plus
/// the Shapley value of the halved game.
pub fn hybrid_allocation(game: &CharacteristicGame) -> Allocation {
    let base = game.grand_value() / (2.0 * game.n as f64);
    let half = shapley_values(&game.scaled(0.5));
    Allocation(half.0.into_iter().map(|phi| base + phi).collect())
}

fn check_len(game: &CharacteristicGame, x: &Allocation) -> Result<(), GameError> {
    if x.len() != game.n {
        Err(GameError::LengthMismatch {
            n: game.n,
            got: x.len(),
        })
    } else {
        Ok(())
    }
}

pub fn is_efficient(game: &CharacteristicGame, x: &Allocation) -> Result<bool, GameError> {
    check_len(game, x)?;
    Ok((x.total() - game.grand_value()).abs() <= GAME_TOL)
}

/// First coalition `C` with `x(C) < v(C)`, if any.
pub fn core_violation(
    game: &CharacteristicGame,
    x: &Allocation,
) -> Result<Option<Coalition>, GameError> {
    check_len(game, x)?;
    Ok(game
        .coalitions()
        .find(|&c| x.coalition_sum(c) < game.value(c) - GAME_TOL))
}

/// Core membership: `x(C) >= v(C)` for every coalition, the grand one included.
/// Efficiency is checked separately by [`is_efficient`].
pub fn is_in_core(game: &CharacteristicGame, x: &Allocation) -> Result<bool, GameError> {
    Ok(core_violation(game, x)?.is_none())
}

/// Random convex game `v(C) = a|C|^2 + b|C| + Σ_{i∈C} w_i` with `a > 0`,
/// `b >= 0`, `w_i >= 0`.
pub fn generate_convex_game<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
) -> Result<CharacteristicGame, GameError> {
    if !(2..=8).contains(&n) {
        return Err(GameError::AgentCount { n, max: 8 });
    }
    let a = rng.random_range(0.1..2.0);
    let b = rng.random_range(0.0..1.0);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    CharacteristicGame::from_fn(n, |c| {
        let k = c.len() as f64;
        a * k * k + b * k + c.members().map(|i| w[i]).sum::<f64>()
    })
}

/// Random game with independent uniform coalition values in `[-1, 2)`; usually
/// not convex.
pub fn generate_random_game<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
) -> Result<CharacteristicGame, GameError> {
    if n == 0 || n > MAX_EXACT_AGENTS {
        return Err(GameError::AgentCount {
            n,
            max: MAX_EXACT_AGENTS,
        });
    }
    let mut values: Vec<f64> = (0..1usize << n)
        .map(|_| rng.random_range(-1.0..2.0))
        .collect();
    values[0] = 0.0;
    CharacteristicGame::new(n, values)
}
