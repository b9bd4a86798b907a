//! Parametric function approximators with analytic parameter gradients.
//!
//! Two fixed architectures are supported, a linear map and a one-hidden-layer
//! ReLU perceptron, each topped by a typed output head. Parameters live in one
//! flat row-major vector laid out as `[W1, b1, W2, b2]` (or `[W, b]` for the
//! linear map). The hybrid head stores its `d_a` mean rows before its `k + 1`
//! logit rows so that its mean block shares layout and initialization order
//! with a plain Gaussian head.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// Mean of an isotropic Gaussian over `dim` controls.
    Gaussian { dim: usize },
    /// Log-probabilities over `classes` categories.
    Softmax { classes: usize },
    /// Scalar probability via the logistic function.
    Logistic,
    /// `options + 1` logits (index 0 is physical control) plus a `dim`-wide control mean.
    Hybrid { options: usize, dim: usize },
}

impl Head {
    pub fn width(&self) -> usize {
        match *self {
            Head::Gaussian { dim } => dim,
            Head::Softmax { classes } => classes,
            Head::Logistic => 1,
            Head::Hybrid { options, dim } => dim + options + 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Head::Gaussian { .. } => "gaussian",
            Head::Softmax { .. } => "softmax",
            Head::Logistic => "logistic",
            Head::Hybrid { .. } => "hybrid",
        }
    }
}

/// Evaluation mode. Training mode applies inverted dropout to the hidden layer.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// What a log-probability is taken of.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// A control vector; valid for the Gaussian head and the control branch of the hybrid head.
    Control { action: &'a [f64], sigma: f64 },
    /// A class index; for the hybrid head this is option `h` (logit `h + 1`).
    Class(usize),
    /// A binary outcome for the logistic head.
    Binary(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    Gaussian {
        mean: Vec<f64>,
    },
    Softmax {
        log_probs: Vec<f64>,
    },
    Logistic {
        prob: f64,
        log_prob: f64,
        log_complement: f64,
    },
    /// `log_probs[0]` is the physical-control branch, `log_probs[h + 1]` option `h`.
    Hybrid {
        log_probs: Vec<f64>,
        mean: Vec<f64>,
    },
}

/// A differentiable map from states to a typed head output.
#[derive(Debug, Clone, PartialEq)]
pub struct Approximator {
    architecture: Architecture,
    head: Head,
    input_dim: usize,
    dropout: f64,
    params: Vec<f64>,
}

/// Hidden activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Activations {
    /// Masked post-ReLU hidden values.
    hidden: Vec<f64>,
    /// Derivative of each masked hidden value w.r.t. its pre-activation.
    gate: Vec<f64>,
    output: Vec<f64>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Approximator {
    pub fn param_len(architecture: Architecture, head: Head, input_dim: usize) -> usize {
        let out = head.width();
        match architecture {
            Architecture::Linear => out * input_dim + out,
            Architecture::Mlp { hidden } => hidden * input_dim + hidden + out * hidden + out,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn new(architecture: Architecture, head: Head, input_dim: usize, rng: &mut impl Rng) -> Self {
        let mut net = Self::zeros(architecture, head, input_dim);
        let blocks: Vec<(usize, usize)> = match head {
            Head::Hybrid { options, dim } => vec![(dim, dim), (options + 1, options + 1)],
            _ => vec![(head.width(), head.width())],
        };
        let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in slice.iter_mut() {
                *p = rng.random_range(-bound..=bound);
            }
        };
        let (last_in, offset) = match architecture {
            Architecture::Linear => (input_dim, 0),
            Architecture::Mlp { hidden } => {
                fill(&mut net.params[..hidden * input_dim], input_dim, hidden);
                (hidden, hidden * input_dim + hidden)
            }
        };
        let mut row = offset;
        for (rows, fan_out) in blocks {
            fill(&mut net.params[row..row + rows * last_in], last_in, fan_out);
            row += rows * last_in;
        }
        net
    }

    pub fn zeros(architecture: Architecture, head: Head, input_dim: usize) -> Self {
        Approximator {
            architecture,
            head,
            input_dim,
            dropout: 0.0,
            params: vec![0.0; Self::param_len(architecture, head, input_dim)],
        }
    }

    pub fn from_params(architecture: Architecture, head: Head, input_dim: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_len(architecture, head, input_dim);
        if params.len() != expected {
            return Err(Error::dim("approximator parameters", expected, params.len()));
        }
        Ok(Approximator {
            architecture,
            head,
            input_dim,
            dropout: 0.0,
            params,
        })
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout = rate;
        Ok(self)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn hidden_width(&self) -> usize {
        match self.architecture {
            Architecture::Linear => 0,
            Architecture::Mlp { hidden } => hidden,
        }
    }

    fn sample_mask(&self, mode: Mode<'_>) -> Option<Vec<f64>> {
        let hidden = self.hidden_width();
        match mode {
            Mode::Train(rng) if self.dropout > 0.0 && hidden > 0 => {
                let keep = 1.0 / (1.0 - self.dropout);
                Some(
                    (0..hidden)
                        .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Raw (pre-head) output, keeping what backpropagation needs.
    pub fn activate(&self, s: &[f64], mode: Mode<'_>) -> Result<Activations> {
        if s.len() != self.input_dim {
            return Err(Error::dim("approximator input", self.input_dim, s.len()));
        }
        let mask = self.sample_mask(mode);
        let out = self.head.width();
        let n = self.input_dim;
        match self.architecture {
            Architecture::Linear => {
                let (w, b) = self.params.split_at(out * n);
                let output = (0..out).map(|o| b[o] + dot(&w[o * n..(o + 1) * n], s)).collect();
                Ok(Activations {
                    hidden: Vec::new(),
                    gate: Vec::new(),
                    output,
                })
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * n);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(out * hidden);
                let mut h = Vec::with_capacity(hidden);
                let mut gate = Vec::with_capacity(hidden);
                for j in 0..hidden {
                    let pre = b1[j] + dot(&w1[j * n..(j + 1) * n], s);
                    let m = mask.as_ref().map_or(1.0, |m| m[j]);
                    if pre > 0.0 {
                        h.push(pre * m);
                        gate.push(m);
                    } else {
                        h.push(0.0);
                        gate.push(0.0);
                    }
                }
                let output = (0..out)
                    .map(|o| b2[o] + dot(&w2[o * hidden..(o + 1) * hidden], &h))
                    .collect();
                Ok(Activations {
                    hidden: h,
                    gate,
                    output,
                })
            }
        }
    }

    /// Adds `∂(dout · output)/∂params` into `acc`.
    pub fn backprop(&self, s: &[f64], act: &Activations, dout: &[f64], acc: &mut [f64]) {
        debug_assert_eq!(acc.len(), self.params.len());
        debug_assert_eq!(dout.len(), self.head.width());
        let out = self.head.width();
        let n = self.input_dim;
        match self.architecture {
            Architecture::Linear => {
                let (gw, gb) = acc.split_at_mut(out * n);
                for o in 0..out {
                    let d = dout[o];
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d, s, &mut gw[o * n..(o + 1) * n]);
                    gb[o] += d;
                }
            }
            Architecture::Mlp { hidden } => {
                let w2 = &self.params[hidden * n + hidden..hidden * n + hidden + out * hidden];
                let (gw1, rest) = acc.split_at_mut(hidden * n);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(out * hidden);
                let mut dh = vec![0.0; hidden];
                for o in 0..out {
                    let d = dout[o];
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d, &act.hidden, &mut gw2[o * hidden..(o + 1) * hidden]);
                    gb2[o] += d;
                    axpy(d, &w2[o * hidden..(o + 1) * hidden], &mut dh);
                }
                for j in 0..hidden {
                    let d = dh[j] * act.gate[j];
                    if d == 0.0 {
                        continue;
                    }
                    axpy(d, s, &mut gw1[j * n..(j + 1) * n]);
                    gb1[j] += d;
                }
            }
        }
    }

    pub fn forward(&self, s: &[f64], mode: Mode<'_>) -> Result<HeadOutput> {
        let act = self.activate(s, mode)?;
        Ok(self.interpret(act.output))
    }

    fn interpret(&self, z: Vec<f64>) -> HeadOutput {
        match self.head {
            Head::Gaussian { .. } => HeadOutput::Gaussian { mean: z },
            Head::Softmax { .. } => HeadOutput::Softmax {
                log_probs: log_softmax(&z),
            },
            Head::Logistic => HeadOutput::Logistic {
                prob: sigmoid(z[0]),
                log_prob: -softplus(-z[0]),
                log_complement: -softplus(z[0]),
            },
            Head::Hybrid { dim, .. } => HeadOutput::Hybrid {
                log_probs: log_softmax(&z[dim..]),
                mean: z[..dim].to_vec(),
            },
        }
    }

    /// `acc += weight · ∇ log p(target | s)`; returns `log p(target | s)`.
    pub fn weighted_logprob_grad(
        &self,
        s: &[f64],
        target: Target<'_>,
        weight: f64,
        acc: &mut [f64],
        mode: Mode<'_>,
    ) -> Result<f64> {
        if acc.len() != self.params.len() {
            return Err(Error::dim("gradient accumulator", self.params.len(), acc.len()));
        }
        let act = self.activate(s, mode)?;
        let mut dout = vec![0.0; self.head.width()];
        let logp = self.head_logprob_grad(act.output(), target, weight, &mut dout)?;
        if weight != 0.0 {
            self.backprop(s, &act, &dout, acc);
        }
        Ok(logp)
    }

    /// Eval-mode `log p(target | s)`.
    pub fn log_prob(&self, s: &[f64], target: Target<'_>) -> Result<f64> {
        let act = self.activate(s, Mode::Eval)?;
        let mut scratch = vec![0.0; self.head.width()];
        self.head_logprob_grad(act.output(), target, 0.0, &mut scratch)
    }

    /// Log-probability of `target` given raw output `z`, adding `weight · ∂logp/∂z` into `dout`.
    pub fn head_logprob_grad(&self, z: &[f64], target: Target<'_>, weight: f64, dout: &mut [f64]) -> Result<f64> {
        let mismatch = || Error::HeadTarget { head: self.head.name() };
        match (self.head, target) {
            (Head::Gaussian { dim }, Target::Control { action, sigma }) => {
                if action.len() != dim {
                    return Err(Error::dim("control target", dim, action.len()));
                }
                let inv_var = 1.0 / (sigma * sigma);
                for i in 0..dim {
                    dout[i] += weight * (action[i] - z[i]) * inv_var;
                }
                Ok(gaussian_logdensity(z, action, sigma))
            }
            (Head::Softmax { classes }, Target::Class(c)) => {
                if c >= classes {
                    return Err(Error::OptionIndex {
                        index: c,
                        count: classes,
                    });
                }
                let lp = log_softmax(z);
                add_class_grad(&lp, c, weight, dout);
                Ok(lp[c])
            }
            (Head::Logistic, Target::Binary(outcome)) => {
                let x = z[0];
                if outcome {
                    dout[0] += weight * sigmoid(-x);
                    Ok(-softplus(-x))
                } else {
                    dout[0] -= weight * sigmoid(x);
                    Ok(-softplus(x))
                }
            }
            (Head::Hybrid { options, dim }, Target::Class(h)) => {
                if h >= options {
                    return Err(Error::OptionIndex {
                        index: h,
                        count: options,
                    });
                }
                let lp = log_softmax(&z[dim..]);
                add_class_grad(&lp, h + 1, weight, &mut dout[dim..]);
                Ok(lp[h + 1])
            }
            (Head::Hybrid { dim, .. }, Target::Control { action, sigma }) => {
                if action.len() != dim {
                    return Err(Error::dim("control target", dim, action.len()));
                }
                let inv_var = 1.0 / (sigma * sigma);
                for i in 0..dim {
                    dout[i] += weight * (action[i] - z[i]) * inv_var;
                }
                let lp = log_softmax(&z[dim..]);
                add_class_grad(&lp, 0, weight, &mut dout[dim..]);
                Ok(lp[0] + gaussian_logdensity(&z[..dim], action, sigma))
            }
            _ => Err(mismatch()),
        }
    }
}

fn add_class_grad(log_probs: &[f64], class: usize, weight: f64, dout: &mut [f64]) {
    if weight == 0.0 {
        return;
    }
    for (j, lp) in log_probs.iter().enumerate() {
        dout[j] -= weight * lp.exp();
    }
    dout[class] += weight;
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|x| x - lse).collect()
}

/// Normalized isotropic Gaussian log-density `log N(a; mu, sigma² I)`.
pub fn gaussian_logdensity(mu: &[f64], a: &[f64], sigma: f64) -> f64 {
    debug_assert_eq!(mu.len(), a.len());
    debug_assert!(sigma > 0.0);
    let sq: f64 = mu.iter().zip(a).map(|(m, x)| (x - m) * (x - m)).sum();
    let var = sigma * sigma;
    -sq / (2.0 * var) - 0.5 * mu.len() as f64 * (LN_2PI + var.ln())
}

/// Target of the hybrid high-level distribution.
#[derive(Debug, Clone, Copy)]
pub enum HybridTarget<'a> {
    Option(usize),
    Control(&'a [f64]),
}

/// Log-density of the hybrid categorical–continuous distribution.
pub fn hybrid_logdensity(net: &Approximator, s: &[f64], target: HybridTarget<'_>, sigma: f64) -> Result<f64> {
    if !matches!(net.head(), Head::Hybrid { .. }) {
        return Err(Error::HeadTarget { head: "hybrid" });
    }
    match target {
        HybridTarget::Option(h) => net.log_prob(s, Target::Class(h)),
        HybridTarget::Control(action) => net.log_prob(s, Target::Control { action, sigma }),
    }
}

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_difference_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + step;
            let up = f(&p);
            p[i] = orig - step;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}
