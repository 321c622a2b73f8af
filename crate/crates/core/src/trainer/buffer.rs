use ndarray::{Array1, Array2};
use rand::Rng;

/// One joint environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    /// `n` blocks of `D` components, each in `(-1, 1)`.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<Vec<f64>>,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    /// Last step of its episode, terminal or truncated.
    pub episode_end: bool,
}

/// Fixed-capacity FIFO store with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    /// Slot holding the oldest transition once full.
    head: usize,
    pushed: u64,
}

/// Minibatch with n-step returns already folded in.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array2<f64>,
    /// One `B x obs_dim` matrix per agent.
    pub obs: Vec<Array2<f64>>,
    pub actions: Array2<f64>,
    /// `Σ_{k<m} γ^k r_{t+k}`.
    pub returns: Array1<f64>,
    pub boot_states: Array2<f64>,
    pub boot_obs: Vec<Array2<f64>>,
    /// `γ^m`, or 0 when the window reached a terminal state.
    pub boot_discount: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.pushed += 1;
    }

    /// `k`-th oldest stored transition.
    pub fn get(&self, k: usize) -> &Transition {
        &self.data[(self.head + k) % self.data.len()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).map(move |k| self.get(k))
    }

    /// Positions (oldest-first) of `size` uniform draws with replacement.
    pub fn sample_positions<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Vec<usize> {
        assert!(!self.is_empty(), "sampling from an empty buffer");
        (0..size).map(|_| rng.random_range(0..self.len())).collect()
    }

    /// Window of up to `n_step` transitions starting at position `k`, cut at
    /// episode ends and at the newest stored transition.
    pub fn segment(&self, k: usize, n_step: usize) -> Vec<&Transition> {
        let mut out = Vec::with_capacity(n_step);
        for j in k..(k + n_step).min(self.len()) {
            let t = self.get(j);
            out.push(t);
            if t.episode_end {
                break;
            }
        }
        out
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        size: usize,
        n_step: usize,
        gamma: f64,
    ) -> Batch {
        let positions = self.sample_positions(rng, size);
        self.batch_at(&positions, n_step, gamma)
    }

    pub fn batch_at(&self, positions: &[usize], n_step: usize, gamma: f64) -> Batch {
        let first = self.get(positions[0]);
        let n = first.obs.len();
        let b = positions.len();
        let obs_dims: Vec<usize> = first.obs.iter().map(Vec::len).collect();
        let mut states = Array2::zeros((b, first.state.len()));
        let mut obs: Vec<Array2<f64>> = obs_dims.iter().map(|&d| Array2::zeros((b, d))).collect();
        let mut actions = Array2::zeros((b, first.action.len()));
        let mut returns = Array1::zeros(b);
        let mut boot_states = Array2::zeros((b, first.state.len()));
        let mut boot_obs: Vec<Array2<f64>> =
            obs_dims.iter().map(|&d| Array2::zeros((b, d))).collect();
        let mut boot_discount = Array1::zeros(b);
        for (r, &k) in positions.iter().enumerate() {
            let seg = self.segment(k, n_step);
            let t0 = seg[0];
            let last = seg[seg.len() - 1];
            states.row_mut(r).assign(&Array1::from(t0.state.clone()));
            actions.row_mut(r).assign(&Array1::from(t0.action.clone()));
            for i in 0..n {
                obs[i].row_mut(r).assign(&Array1::from(t0.obs[i].clone()));
                boot_obs[i]
                    .row_mut(r)
                    .assign(&Array1::from(last.next_obs[i].clone()));
            }
            boot_states
                .row_mut(r)
                .assign(&Array1::from(last.next_state.clone()));
            let mut g = 1.0;
            let mut ret = 0.0;
            for t in &seg {
                ret += g * t.reward;
                g *= gamma;
            }
            returns[r] = ret;
            boot_discount[r] = if last.terminal { 0.0 } else { g };
        }
        Batch {
            states,
            obs,
            actions,
            returns,
            boot_states,
            boot_obs,
            boot_discount,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tr(id: f64, end: bool, terminal: bool) -> Transition {
        Transition {
            obs: vec![vec![id]],
            state: vec![id],
            action: vec![0.0],
            reward: id,
            next_obs: vec![vec![id + 1.0]],
            next_state: vec![id + 1.0],
            terminal,
            episode_end: end,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(5);
        for k in 0..8 {
            b.push(tr(k as f64, false, false));
        }
        assert_eq!(b.len(), 5);
        let ids: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(ids, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(b.total_pushed(), 8);
    }

    #[test]
    fn n_step_windows() {
        let mut b = ReplayBuffer::new(10);
        b.push(tr(1.0, false, false));
        b.push(tr(2.0, false, false));
        b.push(tr(3.0, true, true));
        b.push(tr(4.0, false, false));
        // 1 + 0.5*2 + 0.25*3, terminal inside the window
        let batch = b.batch_at(&[0], 3, 0.5);
        assert_eq!(batch.returns[0], 2.75);
        assert_eq!(batch.boot_discount[0], 0.0);
        let batch = b.batch_at(&[0], 2, 0.5);
        assert_eq!(batch.returns[0], 2.0);
        assert_eq!(batch.boot_discount[0], 0.25);
        assert_eq!(batch.boot_states[[0, 0]], 3.0);
        // window truncated by the newest transition
        let batch = b.batch_at(&[3], 3, 0.5);
        assert_eq!(batch.returns[0], 4.0);
        assert_eq!(batch.boot_discount[0], 0.5);
        let one = b.batch_at(&[1], 1, 0.9);
        assert_eq!((one.returns[0], one.boot_discount[0]), (2.0, 0.9));
    }

    #[test]
    fn truncated_end_still_bootstraps() {
        let mut b = ReplayBuffer::new(4);
        b.push(tr(1.0, true, false));
        b.push(tr(2.0, false, false));
        let batch = b.batch_at(&[0], 5, 0.9);
        assert_eq!(batch.returns[0], 1.0);
        assert_eq!(batch.boot_discount[0], 0.9);
    }

    #[test]
    fn sampling_is_seeded() {
        let mut b = ReplayBuffer::new(50);
        for k in 0..50 {
            b.push(tr(k as f64, false, false));
        }
        let draw = |s| b.sample_positions(&mut ChaCha8Rng::seed_from_u64(s), 20);
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }
}
