//! Exact posterior inference over options and terminations.
//!
//! Latent index `h < k` is option `h`; with the hybrid head, index `k` is the
//! physical-control branch, which emits one control from the high-level
//! Gaussian and always terminates after a single step.
//!
//! Messages are rescaled per step. Emission log-densities are additionally
//! shifted by their per-step maximum before exponentiation; that shift is a
//! constant across latent paths, so it only moves the log-likelihood, which
//! is restored from the recorded log-scales.

use rayon::prelude::*;

use crate::approx::{log_sum_exp, HeadOutput, Mode, Target};
use crate::error::{Error, Result};
use crate::policy::HierarchicalPolicy;
use crate::types::{Dataset, PosteriorTables, Trajectory};

/// Per-step model quantities evaluated along one trajectory.
#[derive(Debug, Clone)]
pub(crate) struct StepTables {
    /// `log η(h | s_t)`, T × K.
    pub log_eta: Vec<Vec<f64>>,
    /// `log π_h(a_t | s_t)` (control branch: Gaussian around `μ_η`), T × K.
    pub log_emit: Vec<Vec<f64>>,
    /// `ψ_h(s_t)`, T × K; row 0 is unused.
    pub psi: Vec<Vec<f64>>,
    /// `1 − ψ_h(s_t)`, computed directly from the logit.
    pub stay: Vec<Vec<f64>>,
}

/// Rescaled forward/backward messages of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageTable {
    /// Forward messages, each row normalized to one.
    pub alpha: Vec<Vec<f64>>,
    /// Backward messages on the same scale as `alpha`.
    pub beta: Vec<Vec<f64>>,
    /// Log of the per-step normalizers, including the emission shift.
    pub log_scale: Vec<f64>,
}

impl MessageTable {
    pub fn loglik(&self) -> f64 {
        self.log_scale.iter().sum()
    }
}

fn check_dims(policy: &HierarchicalPolicy, traj: &Trajectory) -> Result<()> {
    if traj.state_dim() != policy.state_dim() {
        return Err(Error::dim("trajectory state", policy.state_dim(), traj.state_dim()));
    }
    if traj.control_dim() != policy.control_dim() {
        return Err(Error::dim(
            "trajectory control",
            policy.control_dim(),
            traj.control_dim(),
        ));
    }
    if traj.is_empty() {
        return Err(Error::dim("trajectory length", 1, 0));
    }
    Ok(())
}

pub(crate) fn step_tables(
    policy: &HierarchicalPolicy,
    traj: &Trajectory,
    log_dynamics: Option<&[f64]>,
) -> Result<StepTables> {
    check_dims(policy, traj)?;
    let t_len = traj.len();
    let k = policy.k();
    let n = policy.latent_count();
    let sigma = policy.sigma();
    let mut tables = StepTables {
        log_eta: Vec::with_capacity(t_len),
        log_emit: Vec::with_capacity(t_len),
        psi: Vec::with_capacity(t_len),
        stay: Vec::with_capacity(t_len),
    };
    for t in 0..t_len {
        let s = &traj.states[t];
        let a = &traj.controls[t];
        let mut log_eta = vec![0.0; n];
        let mut log_emit = vec![0.0; n];
        match policy.high().forward(s, Mode::Eval)? {
            HeadOutput::Softmax { log_probs } => log_eta.copy_from_slice(&log_probs),
            HeadOutput::Hybrid { log_probs, mean } => {
                log_eta[..k].copy_from_slice(&log_probs[1..]);
                log_eta[k] = log_probs[0];
                log_emit[k] = crate::approx::gaussian_logdensity(&mean, a, sigma);
            }
            _ => unreachable!("policy invariants fix the high-level head"),
        }
        let mut psi = vec![1.0; n];
        let mut stay = vec![0.0; n];
        for (h, option) in policy.options().iter().enumerate() {
            log_emit[h] = option.policy.log_prob(s, Target::Control { action: a, sigma })?;
            if t > 0 {
                if let HeadOutput::Logistic {
                    log_prob,
                    log_complement,
                    ..
                } = option.termination.forward(s, Mode::Eval)?
                {
                    psi[h] = log_prob.exp();
                    stay[h] = log_complement.exp();
                }
            }
        }
        if let Some(d) = log_dynamics {
            for e in &mut log_emit {
                *e += d[t];
            }
        }
        tables.log_eta.push(log_eta);
        tables.log_emit.push(log_emit);
        tables.psi.push(psi);
        tables.stay.push(stay);
    }
    Ok(tables)
}

struct Shifted {
    /// `exp(log_emit − shift_t)`.
    emit: Vec<Vec<f64>>,
    eta: Vec<Vec<f64>>,
    shift: Vec<f64>,
}

fn shift_emissions(tables: &StepTables) -> Result<Shifted> {
    let mut emit = Vec::with_capacity(tables.log_emit.len());
    let mut shift = Vec::with_capacity(tables.log_emit.len());
    for (t, row) in tables.log_emit.iter().enumerate() {
        if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::Underflow { step: t });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(Error::Underflow { step: t });
        }
        emit.push(row.iter().map(|x| (x - m).exp()).collect());
        shift.push(m);
    }
    let eta = tables
        .log_eta
        .iter()
        .map(|row| row.iter().map(|x| x.exp()).collect())
        .collect();
    Ok(Shifted { emit, eta, shift })
}

struct Forward {
    alpha: Vec<Vec<f64>>,
    scale: Vec<f64>,
    log_scale: Vec<f64>,
    /// `Σ_h alpha[t-1][h] ψ_h(s_t)`: probability mass that terminates entering step `t`.
    switch_mass: Vec<f64>,
}

fn forward_pass(tables: &StepTables, sh: &Shifted) -> Result<Forward> {
    let t_len = sh.emit.len();
    let n = sh.emit[0].len();
    let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut scale = Vec::with_capacity(t_len);
    let mut log_scale = Vec::with_capacity(t_len);
    let mut switch_mass = vec![1.0; t_len];
    for t in 0..t_len {
        let mut row = vec![0.0; n];
        if t == 0 {
            for h in 0..n {
                row[h] = sh.eta[0][h] * sh.emit[0][h];
            }
        } else {
            let prev = &alpha[t - 1];
            let m: f64 = (0..n).map(|h| prev[h] * tables.psi[t][h]).sum();
            switch_mass[t] = m;
            for h in 0..n {
                row[h] = (m * sh.eta[t][h] + prev[h] * tables.stay[t][h]) * sh.emit[t][h];
            }
        }
        let c: f64 = row.iter().sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Underflow { step: t });
        }
        for x in &mut row {
            *x /= c;
        }
        scale.push(c);
        log_scale.push(c.ln() + sh.shift[t]);
        alpha.push(row);
    }
    Ok(Forward {
        alpha,
        scale,
        log_scale,
        switch_mass,
    })
}

fn run(
    policy: &HierarchicalPolicy,
    traj: &Trajectory,
    log_dynamics: Option<&[f64]>,
) -> Result<(MessageTable, PosteriorTables)> {
    if let Some(d) = log_dynamics {
        if d.len() != traj.len() {
            return Err(Error::dim("dynamics constants", traj.len(), d.len()));
        }
    }
    let tables = step_tables(policy, traj, log_dynamics)?;
    let sh = shift_emissions(&tables)?;
    let Forward {
        alpha,
        scale,
        log_scale,
        switch_mass,
    } = forward_pass(&tables, &sh)?;
    let t_len = alpha.len();
    let n = policy.latent_count();
    let k = policy.k();

    // g[t][h] = emit_t(h) · β_t(h) / c_t, shared by the backward step and the posteriors.
    let mut beta = vec![vec![1.0; n]; t_len];
    let mut g = vec![vec![0.0; n]; t_len];
    for h in 0..n {
        g[t_len - 1][h] = sh.emit[t_len - 1][h] / scale[t_len - 1];
    }
    for t in (0..t_len - 1).rev() {
        let next = t + 1;
        let restart: f64 = (0..n).map(|h| sh.eta[next][h] * g[next][h]).sum();
        for h in 0..n {
            beta[t][h] = tables.psi[next][h] * restart + tables.stay[next][h] * g[next][h];
        }
        for h in 0..n {
            g[t][h] = sh.emit[t][h] * beta[t][h] / scale[t];
        }
    }

    let mut u = vec![vec![0.0; k]; t_len];
    let mut v = vec![vec![0.0; k]; t_len];
    let mut w = vec![vec![0.0; k]; t_len.saturating_sub(1)];
    let mut vc = policy.is_hybrid().then(|| vec![0.0; t_len]);
    for t in 0..t_len {
        for h in 0..n {
            let post = alpha[t][h] * beta[t][h];
            let started = if t == 0 {
                post
            } else {
                switch_mass[t] * sh.eta[t][h] * g[t][h]
            };
            if h < k {
                u[t][h] = post;
                v[t][h] = started;
                if t + 1 < t_len {
                    w[t][h] = alpha[t][h] * tables.stay[t + 1][h] * g[t + 1][h];
                }
            } else if let Some(vc) = vc.as_mut() {
                vc[t] = post;
            }
        }
    }
    let messages = MessageTable { alpha, beta, log_scale };
    let loglik = messages.loglik();
    Ok((messages, PosteriorTables { u, v, w, vc, loglik }))
}

/// Exact marginal posteriors and log-likelihood of one trajectory.
///
/// The log-likelihood omits the initial-state and dynamics densities, which
/// are common to every latent path.
pub fn forward_backward(policy: &HierarchicalPolicy, traj: &Trajectory) -> Result<PosteriorTables> {
    run(policy, traj, None).map(|(_, p)| p)
}

/// As [`forward_backward`], with a per-step log-density `log_dynamics[t]`
/// standing in for `log p(s_{t+1} | s_t, a_t)`.
pub fn forward_backward_with_dynamics(
    policy: &HierarchicalPolicy,
    traj: &Trajectory,
    log_dynamics: &[f64],
) -> Result<PosteriorTables> {
    run(policy, traj, Some(log_dynamics)).map(|(_, p)| p)
}

pub fn messages(policy: &HierarchicalPolicy, traj: &Trajectory) -> Result<MessageTable> {
    run(policy, traj, None).map(|(m, _)| m)
}

/// Log-likelihood from the forward pass alone.
pub fn trajectory_loglikelihood(policy: &HierarchicalPolicy, traj: &Trajectory) -> Result<f64> {
    let tables = step_tables(policy, traj, None)?;
    let sh = shift_emissions(&tables)?;
    Ok(forward_pass(&tables, &sh)?.log_scale.iter().sum())
}

/// Per-trajectory log-likelihoods, in dataset order.
pub fn dataset_logliks(policy: &HierarchicalPolicy, data: &Dataset) -> Result<Vec<f64>> {
    data.trajectories()
        .par_iter()
        .map(|traj| trajectory_loglikelihood(policy, traj))
        .collect()
}

pub fn dataset_loglikelihood(policy: &HierarchicalPolicy, data: &Dataset) -> Result<f64> {
    Ok(dataset_logliks(policy, data)?.iter().sum())
}

/// Most likely latent value per step; physical control is labelled `k`; ties go to the lower index.
pub fn annotate_segments(policy: &HierarchicalPolicy, traj: &Trajectory) -> Result<Vec<usize>> {
    let post = forward_backward(policy, traj)?;
    Ok(labels_from_posteriors(&post))
}

pub fn labels_from_posteriors(post: &PosteriorTables) -> Vec<usize> {
    let k = post.options();
    (0..post.steps())
        .map(|t| {
            let mut best = 0;
            let mut best_mass = f64::NEG_INFINITY;
            for h in 0..k {
                if post.u[t][h] > best_mass {
                    best = h;
                    best_mass = post.u[t][h];
                }
            }
            if post.control_mass(t) > best_mass {
                best = k;
            }
            best
        })
        .collect()
}

const MAX_ENUM_STEPS: usize = 8;
const MAX_ENUM_LATENT: usize = 4;

/// Posteriors by explicit enumeration of every latent path. Test oracle.
pub fn brute_force_posteriors(policy: &HierarchicalPolicy, traj: &Trajectory) -> Result<PosteriorTables> {
    brute_force_impl(policy, traj, None)
}

pub fn brute_force_posteriors_with_dynamics(
    policy: &HierarchicalPolicy,
    traj: &Trajectory,
    log_dynamics: &[f64],
) -> Result<PosteriorTables> {
    brute_force_impl(policy, traj, Some(log_dynamics))
}

fn brute_force_impl(
    policy: &HierarchicalPolicy,
    traj: &Trajectory,
    log_dynamics: Option<&[f64]>,
) -> Result<PosteriorTables> {
    check_dims(policy, traj)?;
    let t_len = traj.len();
    let k = policy.k();
    let n = policy.latent_count();
    if t_len > MAX_ENUM_STEPS || n > MAX_ENUM_LATENT {
        return Err(Error::TooLarge {
            steps: t_len,
            latent: n,
        });
    }
    let sigma = policy.sigma();
    // Direct per-factor evaluation, one network query per factor.
    let mut log_select = vec![vec![0.0; n]; t_len];
    let mut log_act = vec![vec![0.0; n]; t_len];
    let mut log_term = vec![vec![(0.0, f64::NEG_INFINITY); n]; t_len];
    for t in 0..t_len {
        let (s, a) = (&traj.states[t], &traj.controls[t]);
        for h in 0..n {
            // The physical-control branch folds its Gaussian into the selection factor.
            log_select[t][h] = if h == k {
                policy.high().log_prob(s, Target::Control { action: a, sigma })?
            } else {
                policy.high().log_prob(s, Target::Class(h))?
            };
            if h < k {
                let o = &policy.options()[h];
                log_act[t][h] = o.policy.log_prob(s, Target::Control { action: a, sigma })?;
                log_term[t][h] = (
                    o.termination.log_prob(s, Target::Binary(true))?,
                    o.termination.log_prob(s, Target::Binary(false))?,
                );
            }
            if let Some(d) = log_dynamics {
                log_act[t][h] += d[t];
            }
        }
    }

    let mut paths: Vec<(f64, Vec<usize>, Vec<bool>)> = Vec::new();
    let total = n.pow(t_len as u32) << (t_len - 1);
    for code in 0..total {
        let mut rest = code;
        let mut b = vec![true; t_len];
        for bt in b.iter_mut().skip(1) {
            *bt = rest & 1 == 1;
            rest >>= 1;
        }
        let mut h = vec![0; t_len];
        for ht in h.iter_mut() {
            *ht = rest % n;
            rest /= n;
        }
        let mut logp = 0.0;
        let mut valid = true;
        for t in 0..t_len {
            if t > 0 {
                let prev = h[t - 1];
                let (term, stay) = log_term[t][prev];
                if b[t] {
                    logp += term;
                } else if h[t] != prev || prev == k {
                    valid = false;
                    break;
                } else {
                    logp += stay;
                }
            }
            if b[t] {
                logp += log_select[t][h[t]];
            }
            logp += log_act[t][h[t]];
        }
        if valid {
            paths.push((logp, h, b));
        }
    }
    let logs: Vec<f64> = paths.iter().map(|p| p.0).collect();
    let loglik = log_sum_exp(&logs);
    let mut u = vec![vec![0.0; k]; t_len];
    let mut v = vec![vec![0.0; k]; t_len];
    let mut w = vec![vec![0.0; k]; t_len - 1];
    let mut vc = policy.is_hybrid().then(|| vec![0.0; t_len]);
    for (logp, h, b) in &paths {
        let p = (logp - loglik).exp();
        for t in 0..t_len {
            if h[t] == k {
                if let Some(vc) = vc.as_mut() {
                    vc[t] += p;
                }
                continue;
            }
            u[t][h[t]] += p;
            if b[t] {
                v[t][h[t]] += p;
            }
            if t + 1 < t_len && !b[t + 1] {
                w[t][h[t]] += p;
            }
        }
    }
    Ok(PosteriorTables { u, v, w, vc, loglik })
}
