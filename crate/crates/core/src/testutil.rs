//! Random instances for tests, oracles and benchmarks.

use rand::Rng;

use crate::approx::Architecture;
use crate::policy::{HeadMode, HierarchicalPolicy};
use crate::types::Trajectory;

/// A policy with Glorot weights perturbed by uniform noise, random terminations and σ in [0.5, 1.5).
pub fn random_policy(
    rng: &mut impl Rng,
    mode: HeadMode,
    k: usize,
    d_s: usize,
    d_a: usize,
    option_arch: Architecture,
) -> HierarchicalPolicy {
    let sigma = rng.random_range(0.5..1.5);
    let mut p = HierarchicalPolicy::init(
        mode,
        k,
        d_s,
        d_a,
        sigma,
        Architecture::Linear,
        option_arch,
        Architecture::Linear,
        rng,
    )
    .expect("valid random policy");
    let mut flat = p.flat_params();
    for x in &mut flat {
        *x += rng.random_range(-0.5..0.5);
    }
    p.set_flat_params(&flat).expect("same length");
    p
}

/// States and controls drawn uniformly from [-1, 1).
pub fn random_trajectory(rng: &mut impl Rng, steps: usize, d_s: usize, d_a: usize) -> Trajectory {
    let mut draw = |d: usize| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let states = (0..=steps).map(|_| draw(d_s)).collect();
    let controls = (0..steps).map(|_| draw(d_a)).collect();
    Trajectory { states, controls }
}
