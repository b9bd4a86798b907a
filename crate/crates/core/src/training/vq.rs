//! Vector-quantization initialization: k-means over states, then one
//! behavior-cloned policy per cluster.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optimizer::OptimizerState;
use super::{derive_seed, TrainConfig};
use crate::approx::{Head, Mode, Target};
use crate::error::{Error, Result};
use crate::policy::{FlatPolicy, OptionSpec};
use crate::types::Dataset;

const MAX_ITERS: usize = 100;
const REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(Error::Cluster(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assignments = vec![0; points.len()];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        iterations += 1;
        let mut next_inertia = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            *a = c;
            next_inertia += d;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, p) in assignments.iter().zip(points) {
            counts[*a] += 1;
            for (s, x) in sums[*a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let change = (inertia - next_inertia).abs();
        inertia = next_inertia;
        if change <= REL_TOL * inertia.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

/// Moves the points nearest to each undersized cluster's centroid out of
/// clusters that can spare them. Returns how many points moved.
pub fn rebalance(points: &[Vec<f64>], clusters: &mut KMeans, min_size: usize) -> Result<usize> {
    let k = clusters.centroids.len();
    if points.len() < k * min_size {
        return Err(Error::Cluster(format!(
            "{} points cannot fill {k} clusters of at least {min_size}",
            points.len()
        )));
    }
    let mut counts = vec![0usize; k];
    for a in &clusters.assignments {
        counts[*a] += 1;
    }
    let mut moved = 0;
    for c in 0..k {
        if counts[c] >= min_size {
            continue;
        }
        warn!(
            "cluster {c} has {} samples (< {min_size}); reassigning nearest points",
            counts[c]
        );
        let mut candidates: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|(i, _)| clusters.assignments[*i] != c)
            .map(|(i, p)| (sq_dist(p, &clusters.centroids[c]), i))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, i) in candidates {
            if counts[c] >= min_size {
                break;
            }
            let from = clusters.assignments[i];
            if counts[from] > min_size {
                counts[from] -= 1;
                counts[c] += 1;
                clusters.assignments[i] = c;
                moved += 1;
            }
        }
    }
    Ok(moved)
}

#[derive(Debug, Clone)]
pub struct VqInit {
    pub options: Vec<OptionSpec>,
    pub clusters: KMeans,
    /// Points moved to keep every cluster trainable.
    pub reassigned: usize,
}

/// k-means over all visited states, then one BC policy per cluster; terminations start at ψ = 0.5.
pub fn vq_initialize(data: &Dataset, k: usize, cfg: &TrainConfig) -> Result<VqInit> {
    if k == 0 {
        return Err(Error::Config("vector quantization needs k >= 1".into()));
    }
    let (d_s, d_a) = (data.state_dim(), data.control_dim());
    let mut states = Vec::with_capacity(data.total_steps());
    let mut controls = Vec::with_capacity(data.total_steps());
    for traj in data.trajectories() {
        states.extend(traj.states[..traj.len()].iter().cloned());
        controls.extend(traj.controls.iter().cloned());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x7651]));
    let mut clusters = kmeans(&states, k, &mut rng)?;
    let reassigned = rebalance(&states, &mut clusters, d_a + 1)?;

    let batch = (data.total_steps() / data.len()).max(1);
    let mut options = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> = (0..states.len()).filter(|&i| clusters.assignments[i] == c).collect();
        let mut policy = FlatPolicy::init(cfg.option_arch, d_s, d_a, cfg.sigma, &mut rng)?;
        policy.net = policy.net.with_dropout(cfg.dropout)?;
        fit_pairs(&mut policy, &states, &controls, members, batch, cfg, &mut rng)?;
        let termination =
            crate::approx::Approximator::zeros(cfg.termination_arch, Head::Logistic, d_s).with_dropout(cfg.dropout)?;
        options.push(OptionSpec::new(policy.net, termination)?);
    }
    Ok(VqInit {
        options,
        clusters,
        reassigned,
    })
}

/// Minibatch behavior cloning on a set of (state, control) pairs.
fn fit_pairs(
    policy: &mut FlatPolicy,
    states: &[Vec<f64>],
    controls: &[Vec<f64>],
    mut members: Vec<usize>,
    batch: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut opt = OptimizerState::new(cfg.optimizer, policy.net.params().len())?;
    let mut grad = vec![0.0; policy.net.params().len()];
    let mut params = policy.net.params().to_vec();
    for _ in 0..cfg.epochs {
        members.shuffle(rng);
        for chunk in members.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                policy.net.weighted_logprob_grad(
                    &states[i],
                    Target::Control {
                        action: &controls[i],
                        sigma: policy.sigma,
                    },
                    1.0,
                    &mut grad,
                    Mode::Train(rng),
                )?;
            }
            opt.step(&mut params, &grad)?;
            policy.net.params_mut().copy_from_slice(&params);
        }
    }
    Ok(())
}
