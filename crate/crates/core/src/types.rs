//! Demonstration records and the latent/posterior quantities attached to them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One demonstration `(s_0, a_0, s_1, ..., s_T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

/// A single broken trajectory invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch { states: usize, controls: usize },
    Empty,
    StateDim { t: usize, expected: usize, actual: usize },
    ControlDim { t: usize, expected: usize, actual: usize },
    NonFiniteState { t: usize },
    NonFiniteControl { t: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { states, controls } => write!(
                f,
                "length mismatch: {states} states but {controls} controls (need controls + 1)"
            ),
            Violation::Empty => write!(f, "trajectory has no controls (T must be >= 1)"),
            Violation::StateDim { t, expected, actual } => {
                write!(f, "state dimension {actual} at t={t}, expected {expected}")
            }
            Violation::ControlDim { t, expected, actual } => {
                write!(f, "control dimension {actual} at t={t}, expected {expected}")
            }
            Violation::NonFiniteState { t } => write!(f, "non-finite value at t={t} (state)"),
            Violation::NonFiniteControl { t } => write!(f, "non-finite value at t={t} (control)"),
        }
    }
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> Result<Self> {
        let traj = Trajectory { states, controls };
        let d_s = traj.states.first().map_or(0, Vec::len);
        let d_a = traj.controls.first().map_or(0, Vec::len);
        validate_trajectory(&traj, d_s, d_a).map_err(|v| Error::InvalidRecord {
            line: 0,
            violations: v.iter().map(ToString::to_string).collect(),
        })?;
        Ok(traj)
    }

    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn control_dim(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }
}

/// Checks every trajectory invariant and reports all violations found.
pub fn validate_trajectory(traj: &Trajectory, d_s: usize, d_a: usize) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if traj.controls.is_empty() {
        violations.push(Violation::Empty);
    }
    if traj.states.len() != traj.controls.len() + 1 {
        violations.push(Violation::LengthMismatch {
            states: traj.states.len(),
            controls: traj.controls.len(),
        });
    }
    for (t, s) in traj.states.iter().enumerate() {
        if s.len() != d_s {
            violations.push(Violation::StateDim {
                t,
                expected: d_s,
                actual: s.len(),
            });
        }
        if s.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFiniteState { t });
        }
    }
    for (t, a) in traj.controls.iter().enumerate() {
        if a.len() != d_a {
            violations.push(Violation::ControlDim {
                t,
                expected: d_a,
                actual: a.len(),
            });
        }
        if a.iter().any(|x| !x.is_finite()) {
            violations.push(Violation::NonFiniteControl { t });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// A nonempty set of demonstrations sharing state and control dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    state_dim: usize,
    control_dim: usize,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyDataset)?;
        let (d_s, d_a) = (first.state_dim(), first.control_dim());
        if d_s == 0 || d_a == 0 {
            return Err(Error::Config("state and control dimensions must be positive".into()));
        }
        for (i, traj) in trajectories.iter().enumerate() {
            validate_trajectory(traj, d_s, d_a).map_err(|v| Error::InvalidRecord {
                line: i + 1,
                violations: v.iter().map(ToString::to_string).collect(),
            })?;
        }
        Ok(Dataset {
            trajectories,
            state_dim: d_s,
            control_dim: d_a,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    /// Total number of transitions across all trajectories.
    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Sub-dataset made of the trajectories at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Dataset::new(indices.iter().map(|&i| self.trajectories[i].clone()).collect())
    }
}

/// One assignment of the latent termination indicators and options.
///
/// Option indices run over `0..k`; with the hybrid head, index `k` is the
/// physical-control branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentPath {
    pub terminations: Vec<bool>,
    pub options: Vec<usize>,
}

impl LatentPath {
    pub fn is_consistent(&self) -> bool {
        self.terminations.len() == self.options.len()
            && self.terminations.first() == Some(&true)
            && (1..self.options.len()).all(|t| self.terminations[t] || self.options[t] == self.options[t - 1])
    }
}

/// Marginal posteriors over the latent process of one trajectory.
///
/// `u[t][h] = P(h_t = h | ξ)`, `v[t][h] = P(b_t = 1, h_t = h | ξ)`,
/// `w[t][h] = P(h_t = h, b_{t+1} = 0 | ξ)`; `vc[t]` is the probability that
/// the high level applies physical control at `t` (hybrid head only).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTables {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    pub vc: Option<Vec<f64>>,
    pub loglik: f64,
}

impl PosteriorTables {
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn options(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }

    /// Physical-control mass at step `t` (zero without the hybrid head).
    pub fn control_mass(&self, t: usize) -> f64 {
        self.vc.as_ref().map_or(0.0, |vc| vc[t])
    }

    /// Largest violation of the posterior invariants; zero when they hold exactly.
    pub fn invariant_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.steps() {
            let mass: f64 = self.u[t].iter().sum::<f64>() + self.control_mass(t);
            worst = worst.max((mass - 1.0).abs());
            let v_mass: f64 = self.v[t].iter().sum::<f64>() + self.control_mass(t);
            worst = worst.max(v_mass - 1.0);
            for h in 0..self.options() {
                let (u, v) = (self.u[t][h], self.v[t][h]);
                worst = worst.max(-u).max(u - 1.0).max(-v).max(v - u);
                if t == 0 {
                    worst = worst.max((v - u).abs());
                }
                if let Some(w) = self.w.get(t) {
                    worst = worst.max(-w[h]).max(w[h] - u);
                }
            }
            let c = self.control_mass(t);
            worst = worst.max(-c).max(c - 1.0);
        }
        worst
    }
}
