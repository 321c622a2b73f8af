//! Dense multi-layer perceptrons with exact reverse-mode gradients, an Adam
//! optimizer and Polyak target updates.
//!
//! Everything works on row-major batches: one sample per row.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite parameter")]
    NonFiniteParam,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of one MLP: rectifier hidden layers and a configurable head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamSetRecord", try_from = "ParamSetRecord")]
pub struct ParamSet {
    layers: Vec<Layer>,
    hidden: Activation,
    output: Activation,
}

/// Cached activations from a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter gradients plus the gradient with respect to the network input.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: ParamSet,
    pub input: Array2<f64>,
}

impl ParamSet {
    /// `sizes = [in, h1, ..., out]`. Weights are uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn mlp<R: Rng + ?Sized>(
        sizes: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NnError::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..=limit));
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            hidden: Activation::Relu,
            output,
        })
    }

    pub fn from_layers(
        layers: Vec<Layer>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Shape("no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(NnError::Shape(format!(
                    "layer {k}: bias length {} != rows {}",
                    l.bias.len(),
                    l.weight.nrows()
                )));
            }
        }
        for (k, w) in layers.windows(2).enumerate() {
            if w[0].weight.nrows() != w[1].weight.ncols() {
                return Err(NnError::Shape(format!(
                    "layer {} outputs {} but layer {} takes {}",
                    k,
                    w[0].weight.nrows(),
                    k + 1,
                    w[1].weight.ncols()
                )));
            }
        }
        let p = Self {
            layers,
            hidden,
            output,
        };
        if !p.is_finite() {
            return Err(NnError::NonFiniteParam);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.len() == b.bias.len())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    /// Weights then bias, layer by layer, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.num_params() {
            return Err(NnError::Shape(format!(
                "expected {} values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn sum_squares(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weight
                    .iter()
                    .chain(l.bias.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
            })
            .sum()
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &ParamSet, k: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(k, &b.weight);
            a.bias.scaled_add(k, &b.bias);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight *= k;
            l.bias *= k;
        }
    }

    fn check_input(&self, cols: usize) -> Result<(), NnError> {
        if cols != self.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {cols} columns, network expects {}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn activation(&self, k: usize) -> Activation {
        if k + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Tape), NnError> {
        self.check_input(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.weight.t()) + &l.bias;
            let act = self.activation(k);
            let out = z.mapv(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        let tape = Tape {
            inputs,
            pre,
            output: h.clone(),
        };
        Ok((h, tape))
    }

    /// Forward pass without keeping a tape.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x.ncols())?;
        let mut h = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            let act = self.activation(k);
            h = (h.dot(&l.weight.t()) + &l.bias).mapv(|v| act.apply(v));
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (out, tape) = self.forward_batch(view)?;
        Ok((out.row(0).to_vec(), tape))
    }

    /// Reverse pass: gradients of `Σ output ⊙ out_grad` with respect to every
    /// parameter (summed over the batch) and to each input row.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        out_grad: ArrayView2<f64>,
    ) -> Result<Gradients, NnError> {
        if tape.inputs.len() != self.layers.len() || out_grad.dim() != tape.output.dim() {
            return Err(NnError::Shape(format!(
                "output gradient {:?} does not match tape output {:?}",
                out_grad.dim(),
                tape.output.dim()
            )));
        }
        let mut grads = self.zeros_like();
        let mut g = out_grad.to_owned();
        let mut post = tape.output.clone();
        for k in (0..self.layers.len()).rev() {
            let act = self.activation(k);
            if act != Activation::Identity {
                Zip::from(&mut g)
                    .and(&tape.pre[k])
                    .and(&post)
                    .for_each(|g, &x, &y| *g *= act.derivative(x, y));
            }
            let gl = &mut grads.layers[k];
            gl.weight = g.t().dot(&tape.inputs[k]);
            gl.bias = g.sum_axis(Axis(0));
            let next = g.dot(&self.layers[k].weight);
            post = tape.inputs[k].clone();
            g = next;
        }
        Ok(Gradients {
            params: grads,
            input: g,
        })
    }

    pub fn backward(&self, tape: &Tape, out_grad: &[f64]) -> Result<Gradients, NnError> {
        let view = ArrayView2::from_shape((1, out_grad.len()), out_grad)
            .map_err(|e| NnError::Shape(e.to_string()))?;
        self.backward_batch(tape, view)
    }
}

/// Adam with bias correction. Decays 0.9 / 0.999, epsilon 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional global-norm gradient clip.
    pub clip_norm: Option<f64>,
    step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on `params`. A non-finite gradient leaves both the
    /// parameters and the moment estimates untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), NnError> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(NnError::Shape(
                "optimizer state does not match parameters".into(),
            ));
        }
        if !grads.is_finite() {
            return Err(NnError::NonFiniteGradient);
        }
        let mut scale = 1.0;
        if let Some(max_norm) = self.clip_norm {
            let norm = grads.sum_squares().sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            };
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

/// `target <- (1 - tau) * target + tau * main`.
pub fn soft_update(target: &mut ParamSet, main: &ParamSet, tau: f64) -> Result<(), NnError> {
    if !target.same_shape(main) {
        return Err(NnError::Shape("target and main differ in shape".into()));
    }
    for (t, m) in target.layers.iter_mut().zip(&main.layers) {
        Zip::from(&mut t.weight)
            .and(&m.weight)
            .for_each(|t, &m| *t = (1.0 - tau) * *t + tau * m);
        Zip::from(&mut t.bias)
            .and(&m.bias)
            .for_each(|t, &m| *t = (1.0 - tau) * *t + tau * m);
    }
    Ok(())
}

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamSetRecord {
    version: u32,
    hidden_activation: Activation,
    output_activation: Activation,
    layers: Vec<LayerRecord>,
}

impl From<ParamSet> for ParamSetRecord {
    fn from(p: ParamSet) -> Self {
        Self {
            version: PARAMS_FORMAT_VERSION,
            hidden_activation: p.hidden,
            output_activation: p.output,
            layers: p
                .layers
                .into_iter()
                .map(|l| LayerRecord {
                    rows: l.weight.nrows(),
                    cols: l.weight.ncols(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ParamSetRecord> for ParamSet {
    type Error = NnError;

    fn try_from(r: ParamSetRecord) -> Result<Self, NnError> {
        if r.version != PARAMS_FORMAT_VERSION {
            return Err(NnError::Version(r.version));
        }
        let layers = r
            .layers
            .into_iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.rows, l.cols), l.weight)
                    .map_err(|e| NnError::Shape(e.to_string()))?;
                Ok(Layer {
                    weight,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>, NnError>>()?;
        ParamSet::from_layers(layers, r.hidden_activation, r.output_activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, sizes: &[usize], out: Activation) -> ParamSet {
        ParamSet::mlp(sizes, out, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    // straightforward per-sample evaluation, independent of the batched path
    fn naive_forward(p: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = p.layers().len();
        for (k, l) in p.layers().iter().enumerate() {
            let mut out = vec![0.0; l.weight.nrows()];
            for o in 0..out.len() {
                let mut s = l.bias[o];
                for i in 0..h.len() {
                    s += l.weight[[o, i]] * h[i];
                }
                out[o] = if k + 1 == n {
                    p.output.apply(s)
                } else {
                    s.max(0.0)
                };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = net(0, &[3, 4, 2], Activation::Identity);
        let zeros = vec![0.0; p.num_params()];
        p.set_flat(&zeros).unwrap();
        let (y, _) = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer() {
        let layer = Layer {
            weight: array![[1.0, 2.0], [0.5, -1.0]],
            bias: array![0.25, -0.5],
        };
        let p = ParamSet::from_layers(vec![layer], Activation::Relu, Activation::Identity).unwrap();
        let (y, _) = p.forward(&[3.0, 4.0]).unwrap();
        assert_eq!(y, vec![11.25, -3.0]);
    }

    #[test]
    fn batched_forward_matches_naive() {
        for out in [Activation::Identity, Activation::Tanh] {
            let p = net(7, &[5, 16, 8, 3], out);
            let x = [0.3, -1.1, 0.7, 2.0, -0.4];
            let (y, _) = p.forward(&x).unwrap();
            let oracle = naive_forward(&p, &x);
            for (a, b) in y.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = net(1, &[3, 4, 2], Activation::Identity);
        assert!(p.forward(&[1.0, 2.0]).is_err());
        let (_, tape) = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(p.backward(&tape, &[1.0]).is_err());
        assert!(ParamSet::mlp(
            &[3],
            Activation::Identity,
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let p = net(2, &[3, 8, 2], Activation::Identity);
        let (_, tape) = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        let g = p.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.params.to_flat().iter().all(|v| *v == 0.0));
        assert!(g.input.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_linear_gradient() {
        let layer = Layer {
            weight: array![[2.5]],
            bias: array![0.0],
        };
        let p = ParamSet::from_layers(vec![layer], Activation::Relu, Activation::Identity).unwrap();
        let (_, tape) = p.forward(&[3.0]).unwrap();
        let g = p.backward(&tape, &[0.5]).unwrap();
        assert_eq!(g.params.layers()[0].weight[[0, 0]], 1.5);
        assert_eq!(g.input[[0, 0]], 1.25);
    }

    #[test]
    fn backward_matches_central_differences() {
        for out in [Activation::Identity, Activation::Tanh] {
            let p = net(3, &[4, 6, 5, 2], out);
            let x = [0.4, -0.9, 1.3, 0.2];
            let w = [0.7, -1.3];
            let (_, tape) = p.forward(&x).unwrap();
            let g = p.backward(&tape, &w).unwrap();
            let objective = |q: &ParamSet, x: &[f64]| -> f64 {
                let y = naive_forward(q, x);
                y[0] * w[0] + y[1] * w[1]
            };
            let h = 1e-5;
            let flat = p.to_flat();
            let analytic = g.params.to_flat();
            let mut q = p.clone();
            for k in 0..flat.len() {
                let mut f = flat.clone();
                f[k] += h;
                q.set_flat(&f).unwrap();
                let up = objective(&q, &x);
                f[k] -= 2.0 * h;
                q.set_flat(&f).unwrap();
                let down = objective(&q, &x);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - analytic[k]).abs();
                assert!(
                    err <= 1e-6 || err <= 1e-4 * fd.abs().max(analytic[k].abs()),
                    "param {k}: fd {fd} analytic {}",
                    analytic[k]
                );
            }
            for i in 0..x.len() {
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                let fd = (objective(&p, &xp) - objective(&p, &xm)) / (2.0 * h);
                assert!((fd - g.input[[0, i]]).abs() <= 1e-6_f64.max(1e-4 * fd.abs()));
            }
        }
    }

    fn scalar(v: f64) -> ParamSet {
        let layer = Layer {
            weight: array![[v]],
            bias: array![0.0],
        };
        ParamSet::from_layers(vec![layer], Activation::Relu, Activation::Identity).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = net(4, &[2, 3, 1], Activation::Identity);
        let before = p.clone();
        let mut opt = Adam::new(&p, 0.1);
        let zeros = p.zeros_like();
        for _ in 0..5 {
            opt.step(&mut p, &zeros).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(&p, 0.1);
        let g = scalar(1.0);
        opt.step(&mut p, &g).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.layers()[0].weight[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_under_constant_gradient() {
        let mut p = scalar(0.0);
        let mut opt = Adam::new(&p, 0.01);
        let g = scalar(-3.0);
        for _ in 0..50 {
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.layers()[0].weight[[0, 0]] > 0.0);
    }

    #[test]
    fn adam_rejects_non_finite_without_writing() {
        let mut p = net(5, &[2, 3, 1], Activation::Identity);
        let before = p.clone();
        let mut opt = Adam::new(&p, 0.1);
        let mut g = p.zeros_like();
        g.layers_mut()[0].weight[[0, 0]] = f64::NAN;
        assert_eq!(opt.step(&mut p, &g), Err(NnError::NonFiniteGradient));
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn soft_update_examples() {
        let main = net(6, &[2, 3, 1], Activation::Identity);
        let mut t = net(7, &[2, 3, 1], Activation::Identity);
        let orig = t.clone();
        soft_update(&mut t, &main, 0.0).unwrap();
        assert_eq!(t, orig);
        soft_update(&mut t, &main, 1.0).unwrap();
        assert_eq!(t, main);

        let mut t = scalar(0.0);
        soft_update(&mut t, &scalar(1.0), 0.005).unwrap();
        assert!((t.layers()[0].weight[[0, 0]] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = net(8, &[3, 7, 2], Activation::Tanh);
        let text = serde_json::to_string(&p).unwrap();
        let back: ParamSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        let bad = text.replace("\"version\":1", "\"version\":9");
        assert!(serde_json::from_str::<ParamSet>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn soft_update_contracts_toward_main(seed_a in 0u64..1000, seed_b in 0u64..1000, tau in 0.0f64..=1.0) {
            let main = net(seed_a, &[2, 4, 1], Activation::Identity);
            let mut t = net(seed_b, &[2, 4, 1], Activation::Identity);
            let before = t.to_flat();
            soft_update(&mut t, &main, tau).unwrap();
            for ((a, b), m) in t.to_flat().iter().zip(&before).zip(main.to_flat()) {
                prop_assert!((a - m).abs() <= (1.0 - tau) * (b - m).abs() + 1e-15);
            }
        }

        #[test]
        fn flat_round_trip(seed in 0u64..1000, scale in -1e6f64..1e6) {
            let mut p = net(seed, &[3, 5, 2], Activation::Identity);
            let flat: Vec<f64> = p.to_flat().iter().map(|v| v * scale).collect();
            p.set_flat(&flat).unwrap();
            prop_assert_eq!(p.to_flat(), flat.clone());
            let back: ParamSet = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(back.to_flat(), flat);
        }
    }
}
