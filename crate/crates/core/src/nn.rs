//! A small multilayer perceptron with hand-written backpropagation, plus the
//! optimizers and schedules used during training. Everything is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected network with `tanh` hidden activations and a linear output.
///
/// Parameters live in one flat vector. Layer `l` maps `sizes[l]` inputs to
/// `sizes[l + 1]` outputs and stores its weights input-major (`w[i * out + j]`)
/// followed by its bias, so a sparse input skips whole weight rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by a forward pass, reused by backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let count = w[0] * w[1] + w[1];
            for p in &mut net.params[offset..offset + count] {
                *p = rng.gen_range(-bound..bound);
            }
            offset += count;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        Ok(Self { params, ..net })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn apply(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.acts.pop().unwrap())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Trace> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let x = &acts[l];
            let mut y = b.to_vec();
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let row = &w[i * fan_out..(i + 1) * fan_out];
                    for (yj, &wij) in y.iter_mut().zip(row) {
                        *yj += xi * wij;
                    }
                }
            }
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
            offset += fan_in * fan_out + fan_out;
        }
        Ok(Trace { acts })
    }

    /// Gradients of `<upstream, output>` with respect to every parameter and the input.
    pub fn grad(&self, input: &[f64], upstream: &[f64]) -> Result<MlpGrad> {
        let trace = self.forward(input)?;
        let mut params = vec![0.0; self.params.len()];
        let input = self.backward(&trace, upstream, &mut params, true)?;
        Ok(MlpGrad {
            params,
            input: input.unwrap(),
        })
    }

    /// Adds the parameter gradient of `<upstream, output>` into `out`.
    pub fn accumulate_grad(&self, trace: &Trace, upstream: &[f64], out: &mut [f64]) -> Result<()> {
        self.backward(trace, upstream, out, false).map(|_| ())
    }

    fn backward(
        &self,
        trace: &Trace,
        upstream: &[f64],
        out: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Vec<f64>>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if out.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: out.len(),
            });
        }
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in self.sizes.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        // delta holds d<upstream, out>/d(pre-activation) of the current layer.
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let x = &trace.acts[l];
            {
                let (gw, gb) =
                    out[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for (g, &d) in gb.iter_mut().zip(&delta) {
                    *g += d;
                }
                for (i, &xi) in x.iter().enumerate() {
                    if xi != 0.0 {
                        for (g, &d) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(&delta) {
                            *g += xi * d;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut prev: Vec<f64> = (0..fan_in)
                .map(|i| {
                    w[i * fan_out..(i + 1) * fan_out]
                        .iter()
                        .zip(&delta)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
            if l > 0 {
                // Previous activation is tanh: d tanh = 1 - tanh^2.
                for (p, &a) in prev.iter_mut().zip(x) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        Ok(if want_input { Some(delta) } else { None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn check_step_inputs(expected: usize, params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != expected || grads.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: if params.len() != expected {
                params.len()
            } else {
                grads.len()
            },
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// Adam with bias correction. A non-finite gradient leaves params and state untouched.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    check_step_inputs(state.m.len(), params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSgdState {
    pub velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
}

impl MomentumSgdState {
    pub fn new(n: usize, lr: f64, momentum: f64) -> Self {
        Self {
            velocity: vec![0.0; n],
            lr,
            momentum,
        }
    }
}

/// `v <- momentum * v + g; p <- p - lr * v`. With zero momentum this is plain SGD.
pub fn momentum_sgd_step(
    state: &mut MomentumSgdState,
    params: &mut [f64],
    grads: &[f64],
) -> Result<()> {
    check_step_inputs(state.velocity.len(), params, grads)?;
    for i in 0..params.len() {
        state.velocity[i] = state.momentum * state.velocity[i] + grads[i];
        params[i] -= state.lr * state.velocity[i];
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd(MomentumSgdState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n: usize, lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(AdamState::new(n, lr)),
            OptimizerKind::Sgd => Self::Sgd(MomentumSgdState::new(n, lr, momentum)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        match self {
            Self::Adam(s) => adam_step(s, params, grads),
            Self::Sgd(s) => momentum_sgd_step(s, params, grads),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Adam(s) => s.lr,
            Self::Sgd(s) => s.lr,
        }
    }

    pub fn scale_lr(&mut self, factor: f64) {
        match self {
            Self::Adam(s) => s.lr *= factor,
            Self::Sgd(s) => s.lr *= factor,
        }
    }
}

/// Cosine annealing from `eps_init` at `t = 0` to 0 at `t >= t_max`.
/// A zero horizon means the schedule has already finished.
pub fn cosine_epsilon(eps_init: f64, t: u64, t_max: u64) -> f64 {
    if t_max == 0 {
        return 0.0;
    }
    let frac = t.min(t_max) as f64 / t_max as f64;
    eps_init * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
