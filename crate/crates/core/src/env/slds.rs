//! Switching linear system with state-dependent modes and ground-truth labels.
//!
//! The plane is split into `k_true` equal angular sectors around the origin.
//! In sector `m` the control is `a = G_m s + ε` and the state advances as
//! `s' = s + a`. The default gains rotate the state so that trajectories
//! sweep through several sectors.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, Trajectory};

/// `(a, b)` of the default gains `G = [[a, −b], [b, a]]`, cycled over modes.
const DEFAULT_GAINS: [(f64, f64); 5] = [(0.0, 0.4), (-0.15, 0.5), (0.1, 0.25), (-0.1, 0.6), (0.05, 0.3)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SldsConfig {
    pub k_true: usize,
    /// One `d_a × d_s` gain matrix per mode.
    pub gains: Vec<Vec<Vec<f64>>>,
    /// Angle at which sector 0 begins.
    pub sector_offset: f64,
    pub noise: f64,
    pub horizon: usize,
    /// Initial radius range.
    pub radius: (f64, f64),
}

impl SldsConfig {
    pub fn new(k_true: usize, noise: f64, horizon: usize) -> Self {
        let gains = (0..k_true)
            .map(|m| {
                let (a, b) = DEFAULT_GAINS[m % DEFAULT_GAINS.len()];
                vec![vec![a, -b], vec![b, a]]
            })
            .collect();
        SldsConfig {
            k_true,
            gains,
            sector_offset: 0.0,
            noise,
            horizon,
            radius: (1.0, 2.0),
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn control_dim(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.gains.len() != self.k_true {
            return Err(Error::Config(format!(
                "{} gain matrices for {} modes",
                self.gains.len(),
                self.k_true
            )));
        }
        if self
            .gains
            .iter()
            .any(|g| g.len() != 2 || g.iter().any(|r| r.len() != 2))
        {
            return Err(Error::Config("gains must be 2x2".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return Err(Error::Config("initial radius range must be positive".into()));
        }
        Ok(())
    }

    /// Sector index of a state.
    pub fn mode(&self, s: &[f64]) -> usize {
        let angle = (s[1].atan2(s[0]) - self.sector_offset).rem_euclid(TAU);
        ((angle / TAU * self.k_true as f64) as usize).min(self.k_true - 1)
    }
}

/// Generates `n` trajectories with per-step true mode labels.
pub fn slds_generate(cfg: &SldsConfig, n: usize, seed: u64) -> Result<(Dataset, Vec<Vec<usize>>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut trajectories = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let angle = rng.random_range(0.0..TAU);
        let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let mut s = vec![r * angle.cos(), r * angle.sin()];
        let mut states = vec![s.clone()];
        let mut controls = Vec::with_capacity(cfg.horizon);
        let mut modes = Vec::with_capacity(cfg.horizon);
        for _ in 0..cfg.horizon {
            let m = cfg.mode(&s);
            let g = &cfg.gains[m];
            let a: Vec<f64> = (0..2)
                .map(|i| g[i][0] * s[0] + g[i][1] * s[1] + noise.sample(&mut rng))
                .collect();
            s = vec![s[0] + a[0], s[1] + a[1]];
            modes.push(m);
            controls.push(a);
            states.push(s.clone());
        }
        trajectories.push(Trajectory { states, controls });
        labels.push(modes);
    }
    Ok((Dataset::new(trajectories)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_mode_is_linear() {
        let cfg = SldsConfig::new(1, 0.0, 10);
        let (d, labels) = slds_generate(&cfg, 5, 1).unwrap();
        for (t, l) in d.trajectories().iter().zip(&labels) {
            assert!(l.iter().all(|m| *m == 0));
            for (s, a) in t.states.iter().zip(&t.controls) {
                assert_eq!(a[0], 0.0 * s[0] + -0.4 * s[1]);
                assert_eq!(a[1], 0.4 * s[0] + 0.0 * s[1]);
            }
        }
    }

    #[test]
    fn labels_follow_half_planes() {
        let cfg = SldsConfig::new(2, 0.05, 20);
        let (d, labels) = slds_generate(&cfg, 20, 2).unwrap();
        let mut switches = 0;
        for (t, l) in d.trajectories().iter().zip(&labels) {
            assert_eq!(l.len(), t.len());
            for (s, m) in t.states.iter().zip(l) {
                assert_eq!(*m, usize::from(s[1] < 0.0));
            }
            switches += l.windows(2).filter(|w| w[0] != w[1]).count();
        }
        assert!(switches >= 20, "only {switches} mode switches");
    }

    #[test]
    fn same_seed_same_data() {
        let cfg = SldsConfig::new(3, 0.1, 8);
        assert_eq!(slds_generate(&cfg, 4, 9).unwrap(), slds_generate(&cfg, 4, 9).unwrap());
        assert_ne!(
            slds_generate(&cfg, 4, 9).unwrap().0,
            slds_generate(&cfg, 4, 10).unwrap().0
        );
    }
}
