//! Closed-loop execution of flat and hierarchical policies in the pushing task.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::push::{PushConfig, PushEnv, CONTROL_DIM, OBS_DIM};
use crate::approx::{HeadOutput, Mode};
use crate::error::{Error, Result};
use crate::io::Policy;
use crate::policy::{FlatPolicy, HierarchicalPolicy};
use crate::training::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Controls sampled from the Gaussian with the trained σ.
    Stochastic,
    /// Controls set to the Gaussian mean; option choices are still sampled.
    Mean,
}

#[derive(Debug, Clone, Copy)]
pub enum Agent<'a> {
    Flat(&'a FlatPolicy),
    Hierarchical(&'a HierarchicalPolicy),
}

impl<'a> From<&'a Policy> for Agent<'a> {
    fn from(p: &'a Policy) -> Self {
        match p {
            Policy::Flat(f) => Agent::Flat(f),
            Policy::Hierarchical(h) => Agent::Hierarchical(h),
        }
    }
}

impl<'a> From<&'a FlatPolicy> for Agent<'a> {
    fn from(p: &'a FlatPolicy) -> Self {
        Agent::Flat(p)
    }
}

impl<'a> From<&'a HierarchicalPolicy> for Agent<'a> {
    fn from(p: &'a HierarchicalPolicy) -> Self {
        Agent::Hierarchical(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub state: Vec<f64>,
    /// Active option; with the hybrid head, `k` marks the physical-control branch.
    pub option: Option<usize>,
    pub control: Vec<f64>,
    /// A new selection happened at this step.
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub reward: usize,
    pub toppled: bool,
    pub steps: usize,
    pub selections: usize,
    pub hc_selections: usize,
    pub trace: Vec<TraceStep>,
}

impl RolloutResult {
    /// Share of high-level selections that picked the physical-control branch.
    pub fn hc_fraction(&self) -> f64 {
        if self.selections == 0 {
            0.0
        } else {
            self.hc_selections as f64 / self.selections as f64
        }
    }

    pub fn write_trace_csv(&self, out: impl Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d_s = self.trace.first().map_or(0, |s| s.state.len());
        let d_a = self.trace.first().map_or(0, |s| s.control.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..d_s).map(|i| format!("s{i}")));
        header.push("option".into());
        header.extend((0..d_a).map(|i| format!("a{i}")));
        header.push("terminated".into());
        w.write_record(&header)?;
        for step in &self.trace {
            let mut row = vec![step.t.to_string()];
            row.extend(step.state.iter().map(f64::to_string));
            row.push(step.option.map(|h| h.to_string()).unwrap_or_default());
            row.extend(step.control.iter().map(f64::to_string));
            row.push(u8::from(step.terminated).to_string());
            w.write_record(&row)?;
        }
        w.flush()
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_trace_csv(file).map_err(|e| Error::io(path, e))
    }
}

fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut r: f64 = rng.random();
    for (i, lp) in log_probs.iter().enumerate() {
        r -= lp.exp();
        if r < 0.0 {
            return i;
        }
    }
    log_probs.len() - 1
}

fn emit(mean: &[f64], sigma: f64, mode: ActionMode, rng: &mut impl Rng) -> Vec<f64> {
    match mode {
        ActionMode::Mean => mean.to_vec(),
        ActionMode::Stochastic => mean
            .iter()
            .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    }
}

fn gaussian_mean(out: HeadOutput) -> Vec<f64> {
    match out {
        HeadOutput::Gaussian { mean } => mean,
        _ => unreachable!("control heads are gaussian"),
    }
}

/// Internal state of an agent across steps.
enum Active {
    None,
    Option(usize),
    Control(Vec<f64>),
}

/// Picks a new latent at `s`: an option index, or the physical-control mean.
fn select(policy: &HierarchicalPolicy, s: &[f64], rng: &mut impl Rng) -> Result<Active> {
    Ok(match policy.high().forward(s, Mode::Eval)? {
        HeadOutput::Softmax { log_probs } => Active::Option(sample_categorical(&log_probs, rng)),
        HeadOutput::Hybrid { log_probs, mean } => match sample_categorical(&log_probs, rng) {
            0 => Active::Control(mean),
            i => Active::Option(i - 1),
        },
        _ => unreachable!("policy invariants fix the high-level head"),
    })
}

/// Runs one episode of the pushing task. The environment and the policy draw
/// from separate streams derived from `seed`.
pub fn rollout<'a>(
    agent: impl Into<Agent<'a>>,
    cfg: &PushConfig,
    horizon: usize,
    seed: u64,
    mode: ActionMode,
    record_trace: bool,
) -> Result<RolloutResult> {
    let agent = agent.into();
    let (d_s, d_a) = match agent {
        Agent::Flat(p) => (p.state_dim(), p.control_dim()),
        Agent::Hierarchical(p) => (p.state_dim(), p.control_dim()),
    };
    if d_s != OBS_DIM {
        return Err(Error::dim("policy state", OBS_DIM, d_s));
    }
    if d_a != CONTROL_DIM {
        return Err(Error::dim("policy control", CONTROL_DIM, d_a));
    }
    let env_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xe0]));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xa9]));
    let mut env = PushEnv::new(PushConfig { horizon, ..*cfg }, env_rng);
    let mut result = RolloutResult {
        reward: 0,
        toppled: false,
        steps: 0,
        selections: 0,
        hc_selections: 0,
        trace: Vec::new(),
    };
    let mut active = Active::None;
    let mut s = env.state.observation();
    while !env.done() {
        let t = env.state.steps_elapsed;
        let (control, option, terminated) = match agent {
            Agent::Flat(p) => {
                let mean = gaussian_mean(p.net.forward(&s, Mode::Eval)?);
                (emit(&mean, p.sigma, mode, &mut rng), None, false)
            }
            Agent::Hierarchical(p) => {
                let terminated = match &active {
                    Active::None | Active::Control(_) => true,
                    Active::Option(h) => {
                        let psi = match p.options()[*h].termination.forward(&s, Mode::Eval)? {
                            HeadOutput::Logistic { prob, .. } => prob,
                            _ => unreachable!("terminations are logistic"),
                        };
                        rng.random::<f64>() < psi
                    }
                };
                if terminated {
                    active = select(p, &s, &mut rng)?;
                    result.selections += 1;
                    if matches!(active, Active::Control(_)) {
                        result.hc_selections += 1;
                    }
                }
                let (mean, option) = match &active {
                    Active::Option(h) => (gaussian_mean(p.options()[*h].policy.forward(&s, Mode::Eval)?), *h),
                    Active::Control(mean) => (mean.clone(), p.k()),
                    Active::None => unreachable!("a latent is always selected first"),
                };
                (emit(&mean, p.sigma(), mode, &mut rng), Some(option), terminated)
            }
        };
        if control.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinitePolicy { step: t });
        }
        if record_trace {
            result.trace.push(TraceStep {
                t,
                state: s.clone(),
                option,
                control: control.clone(),
                terminated,
            });
        }
        s = env.step(&control).observation();
    }
    result.reward = env.state.goals_reached;
    result.toppled = env.state.box_toppled;
    result.steps = env.state.steps_elapsed;
    Ok(result)
}

/// Mean reward and physical-control selection share over `seeds`.
pub fn evaluate<'a>(
    agent: impl Into<Agent<'a>>,
    cfg: &PushConfig,
    seeds: &[u64],
    mode: ActionMode,
) -> Result<(f64, f64)> {
    let agent = agent.into();
    let mut reward = 0.0;
    let mut hc = 0.0;
    for &seed in seeds {
        let r = rollout(agent, cfg, cfg.horizon, seed, mode, false)?;
        reward += r.reward as f64;
        hc += r.hc_fraction();
    }
    let n = seeds.len().max(1) as f64;
    Ok((reward / n, hc / n))
}
