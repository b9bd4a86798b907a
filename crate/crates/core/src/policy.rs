//! Flat and two-level hierarchical control policies.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approx::{Approximator, Architecture, Head};
use crate::error::{Error, Result};

/// Output distribution of the high-level policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Softmax over the `k` options only.
    Categorical,
    /// Options plus a physical-control branch with its own Gaussian mean.
    Hybrid,
}

/// A low-level skill: Gaussian control policy plus logistic termination.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionSpec {
    pub policy: Approximator,
    pub termination: Approximator,
}

impl OptionSpec {
    pub fn new(policy: Approximator, termination: Approximator) -> Result<Self> {
        if !matches!(policy.head(), Head::Gaussian { .. }) {
            return Err(Error::Config("option policy must have a gaussian head".into()));
        }
        if termination.head() != Head::Logistic {
            return Err(Error::Config("option termination must have a logistic head".into()));
        }
        if policy.input_dim() != termination.input_dim() {
            return Err(Error::dim(
                "termination input",
                policy.input_dim(),
                termination.input_dim(),
            ));
        }
        Ok(OptionSpec { policy, termination })
    }

    /// Option with a Glorot-initialized policy and a zero (ψ = 0.5) termination.
    pub fn init(
        policy_arch: Architecture,
        termination_arch: Architecture,
        d_s: usize,
        d_a: usize,
        rng: &mut impl Rng,
    ) -> Self {
        OptionSpec {
            policy: Approximator::new(policy_arch, Head::Gaussian { dim: d_a }, d_s, rng),
            termination: Approximator::zeros(termination_arch, Head::Logistic, d_s),
        }
    }

    pub fn param_len(&self) -> usize {
        self.policy.params().len() + self.termination.params().len()
    }
}

/// High-level policy η over options, with the options themselves and a shared σ.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalPolicy {
    head_mode: HeadMode,
    sigma: f64,
    high: Approximator,
    options: Vec<OptionSpec>,
}

/// Gradient slices of one option: control policy, then termination.
pub type OptionGrad<'g> = (&'g mut [f64], &'g mut [f64]);

impl HierarchicalPolicy {
    pub fn new(head_mode: HeadMode, sigma: f64, high: Approximator, options: Vec<OptionSpec>) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        let k = options.len();
        match (head_mode, high.head()) {
            (HeadMode::Categorical, Head::Softmax { classes }) if classes == k && k >= 1 => {}
            (HeadMode::Categorical, _) => {
                return Err(Error::Config(format!(
                    "categorical high-level policy needs a softmax head over k >= 1 options (k = {k})"
                )))
            }
            (HeadMode::Hybrid, Head::Hybrid { options: m, dim })
                if m == k && options.iter().all(|o| o.policy.head().width() == dim) => {}
            (HeadMode::Hybrid, _) => {
                return Err(Error::Config(format!(
                    "hybrid high-level policy needs a hybrid head over {k} options"
                )))
            }
        }
        let d_s = high.input_dim();
        for o in &options {
            if o.policy.input_dim() != d_s {
                return Err(Error::dim("option input", d_s, o.policy.input_dim()));
            }
        }
        if let Some(first) = options.first() {
            let d_a = first.policy.head().width();
            if options.iter().any(|o| o.policy.head().width() != d_a) {
                return Err(Error::Config("options disagree on control dimension".into()));
            }
        }
        Ok(HierarchicalPolicy {
            head_mode,
            sigma,
            high,
            options,
        })
    }

    /// Random high-level policy and `k` freshly initialized options.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        head_mode: HeadMode,
        k: usize,
        d_s: usize,
        d_a: usize,
        sigma: f64,
        high_arch: Architecture,
        option_arch: Architecture,
        termination_arch: Architecture,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let head = match head_mode {
            HeadMode::Categorical => Head::Softmax { classes: k },
            HeadMode::Hybrid => Head::Hybrid { options: k, dim: d_a },
        };
        let high = Approximator::new(high_arch, head, d_s, rng);
        let options = (0..k)
            .map(|_| OptionSpec::init(option_arch, termination_arch, d_s, d_a, rng))
            .collect();
        Self::new(head_mode, sigma, high, options)
    }

    pub fn head_mode(&self) -> HeadMode {
        self.head_mode
    }

    pub fn is_hybrid(&self) -> bool {
        self.head_mode == HeadMode::Hybrid
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn k(&self) -> usize {
        self.options.len()
    }

    /// Number of latent values per step: `k`, plus one with the hybrid head.
    pub fn latent_count(&self) -> usize {
        self.k() + usize::from(self.is_hybrid())
    }

    pub fn state_dim(&self) -> usize {
        self.high.input_dim()
    }

    pub fn control_dim(&self) -> usize {
        match self.high.head() {
            Head::Hybrid { dim, .. } => dim,
            _ => self.options[0].policy.head().width(),
        }
    }

    pub fn high(&self) -> &Approximator {
        &self.high
    }

    pub fn options(&self) -> &[OptionSpec] {
        &self.options
    }

    pub fn into_parts(self) -> (HeadMode, f64, Approximator, Vec<OptionSpec>) {
        (self.head_mode, self.sigma, self.high, self.options)
    }

    /// Applies one dropout rate to every network.
    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        self.high = self.high.with_dropout(rate)?;
        for o in &mut self.options {
            o.policy = o.policy.clone().with_dropout(rate)?;
            o.termination = o.termination.clone().with_dropout(rate)?;
        }
        Ok(self)
    }

    pub fn param_len(&self) -> usize {
        self.high.params().len() + self.options.iter().map(OptionSpec::param_len).sum::<usize>()
    }

    /// Range of the high-level parameters inside the flat vector.
    pub fn high_range(&self) -> Range<usize> {
        0..self.high.params().len()
    }

    /// Range of all option parameters inside the flat vector.
    pub fn options_range(&self) -> Range<usize> {
        self.high.params().len()..self.param_len()
    }

    /// Concatenation `[η, π_0, ψ_0, π_1, ψ_1, ...]`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend_from_slice(self.high.params());
        for o in &self.options {
            out.extend_from_slice(o.policy.params());
            out.extend_from_slice(o.termination.params());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::dim("policy parameters", self.param_len(), params.len()));
        }
        let mut rest = params;
        for net in self.networks_mut() {
            let (head, tail) = rest.split_at(net.params().len());
            net.params_mut().copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Networks in flat-parameter order.
    pub fn networks_mut(&mut self) -> impl Iterator<Item = &mut Approximator> {
        std::iter::once(&mut self.high).chain(
            self.options
                .iter_mut()
                .flat_map(|o| [&mut o.policy, &mut o.termination]),
        )
    }

    /// Splits a flat gradient buffer into per-network slices, in flat-parameter order.
    pub fn split_grad<'g>(&self, grad: &'g mut [f64]) -> (&'g mut [f64], Vec<OptionGrad<'g>>) {
        let (high, mut rest) = grad.split_at_mut(self.high.params().len());
        let mut per_option = Vec::with_capacity(self.k());
        for o in &self.options {
            let (p, tail) = rest.split_at_mut(o.policy.params().len());
            let (t, tail) = tail.split_at_mut(o.termination.params().len());
            per_option.push((p, t));
            rest = tail;
        }
        (high, per_option)
    }

    pub(crate) fn replace_options(&mut self, options: Vec<OptionSpec>) {
        debug_assert_eq!(options.len(), self.options.len());
        self.options = options;
    }
}

/// A non-hierarchical Gaussian policy trained by behavior cloning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatPolicy {
    pub net: Approximator,
    pub sigma: f64,
}

impl FlatPolicy {
    pub fn new(net: Approximator, sigma: f64) -> Result<Self> {
        if !matches!(net.head(), Head::Gaussian { .. }) {
            return Err(Error::Config("flat policy needs a gaussian head".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        Ok(FlatPolicy { net, sigma })
    }

    pub fn init(architecture: Architecture, d_s: usize, d_a: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            Approximator::new(architecture, Head::Gaussian { dim: d_a }, d_s, rng),
            sigma,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.net.head().width()
    }
}
