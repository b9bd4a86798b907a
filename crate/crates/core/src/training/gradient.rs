//! Log-likelihood gradients for flat and hierarchical policies.

use rand::RngCore;

use crate::approx::{log_softmax, sigmoid, Head, Mode, Target};
use crate::error::{Error, Result};
use crate::policy::{FlatPolicy, HierarchicalPolicy};
use crate::types::{PosteriorTables, Trajectory};

fn mode<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Mode<'a> {
    match rng {
        Some(r) => Mode::Train(&mut **r),
        None => Mode::Eval,
    }
}

/// Behavior-cloning gradient `Σ_t ((a_t − μ(s_t))/σ²)ᵀ ∇μ(s_t)` and the log-likelihood.
pub fn bc_gradient(policy: &FlatPolicy, traj: &Trajectory) -> Result<(Vec<f64>, f64)> {
    let mut grad = vec![0.0; policy.net.params().len()];
    let loglik = bc_gradient_into(policy, traj, &mut grad, None)?;
    Ok((grad, loglik))
}

/// Accumulating form of [`bc_gradient`]; a supplied rng enables dropout.
pub fn bc_gradient_into(
    policy: &FlatPolicy,
    traj: &Trajectory,
    acc: &mut [f64],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    if traj.state_dim() != policy.state_dim() {
        return Err(Error::dim("trajectory state", policy.state_dim(), traj.state_dim()));
    }
    let mut loglik = 0.0;
    for (s, a) in traj.states.iter().zip(&traj.controls) {
        loglik += policy.net.weighted_logprob_grad(
            s,
            Target::Control {
                action: a,
                sigma: policy.sigma,
            },
            1.0,
            acc,
            mode(&mut rng),
        )?;
    }
    Ok(loglik)
}

/// G-step: the log-likelihood gradient assembled from E-step posteriors.
pub fn eg_gradient(policy: &HierarchicalPolicy, traj: &Trajectory, post: &PosteriorTables) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; policy.param_len()];
    eg_gradient_into(policy, traj, post, &mut grad, None)?;
    Ok(grad)
}

/// Accumulating form of [`eg_gradient`]; a supplied rng enables dropout.
pub fn eg_gradient_into(
    policy: &HierarchicalPolicy,
    traj: &Trajectory,
    post: &PosteriorTables,
    acc: &mut [f64],
    mut rng: Option<&mut dyn RngCore>,
) -> Result<()> {
    let t_len = traj.len();
    let k = policy.k();
    if post.steps() != t_len
        || post.options() != k
        || post.w.len() != t_len.saturating_sub(1)
        || post.vc.is_some() != policy.is_hybrid()
    {
        return Err(Error::Config(format!(
            "posterior tables ({} steps, {} options) do not match trajectory ({t_len} steps) and policy (k = {k})",
            post.steps(),
            post.options()
        )));
    }
    if acc.len() != policy.param_len() {
        return Err(Error::dim("gradient accumulator", policy.param_len(), acc.len()));
    }
    let sigma = policy.sigma();
    let inv_var = 1.0 / (sigma * sigma);
    let (g_high, mut g_options) = policy.split_grad(acc);
    let high = policy.high();
    let mut dout = vec![0.0; high.head().width()];

    for t in 0..t_len {
        let s = &traj.states[t];
        let a = &traj.controls[t];

        // Σ_h v_t(h) ∇log η(h|s_t), plus the physical-control terms.
        let act = high.activate(s, mode(&mut rng))?;
        let z = act.output();
        dout.iter_mut().for_each(|d| *d = 0.0);
        match high.head() {
            Head::Softmax { .. } => {
                selection_grad(&log_softmax(z), &post.v[t], &mut dout);
            }
            Head::Hybrid { dim, .. } => {
                let vc = post.control_mass(t);
                for i in 0..dim {
                    dout[i] = vc * (a[i] - z[i]) * inv_var;
                }
                let mut weights = Vec::with_capacity(k + 1);
                weights.push(vc);
                weights.extend_from_slice(&post.v[t]);
                selection_grad(&log_softmax(&z[dim..]), &weights, &mut dout[dim..]);
            }
            _ => unreachable!("policy invariants fix the high-level head"),
        }
        if dout.iter().any(|d| *d != 0.0) {
            high.backprop(s, &act, &dout, g_high);
        }

        for (h, option) in policy.options().iter().enumerate() {
            let (g_pi, g_psi) = &mut g_options[h];
            let u = post.u[t][h];
            // u_t(h) ∇log π_h(a_t|s_t)
            let act = option.policy.activate(s, mode(&mut rng))?;
            let mu = act.output();
            let d_pi: Vec<f64> = (0..a.len()).map(|i| u * (a[i] - mu[i]) * inv_var).collect();
            if d_pi.iter().any(|d| *d != 0.0) {
                option.policy.backprop(s, &act, &d_pi, g_pi);
            }
            // (u − w) ∇log ψ_h(s_{t+1}) + w ∇log(1 − ψ_h(s_{t+1}))
            if t + 1 < t_len {
                let next = &traj.states[t + 1];
                let w = post.w[t][h];
                let act = option.termination.activate(next, mode(&mut rng))?;
                let x = act.output()[0];
                let d = (u - w) * sigmoid(-x) - w * sigmoid(x);
                if d != 0.0 {
                    option.termination.backprop(next, &act, &[d], g_psi);
                }
            }
        }
    }
    Ok(())
}

/// `dout_j = Σ_c weight_c (δ_cj − p_j)`.
fn selection_grad(log_probs: &[f64], weights: &[f64], dout: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    for j in 0..log_probs.len() {
        dout[j] += weights[j] - total * log_probs[j].exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{finite_difference_grad, Approximator, Architecture};
    use crate::inference::{forward_backward, trajectory_loglikelihood};
    use crate::policy::HeadMode;
    use crate::testutil::{random_policy, random_trajectory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / norm(a).max(norm(b)).max(1e-12)
    }

    #[test]
    fn bc_gradient_vanishes_at_perfect_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = FlatPolicy::init(Architecture::Mlp { hidden: 5 }, 3, 2, 0.1, &mut rng).unwrap();
        let mut traj = random_trajectory(&mut rng, 5, 3, 2);
        for t in 0..5 {
            if let crate::HeadOutput::Gaussian { mean } = policy.net.forward(&traj.states[t], Mode::Eval).unwrap() {
                traj.controls[t] = mean;
            }
        }
        let (g, _) = bc_gradient(&policy, &traj).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn bc_gradient_of_linear_policy_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Approximator::new(Architecture::Linear, Head::Gaussian { dim: 2 }, 3, &mut rng);
        let sigma = 0.5;
        let policy = FlatPolicy::new(net, sigma).unwrap();
        let traj = random_trajectory(&mut rng, 1, 3, 2);
        let (s, a) = (&traj.states[0], &traj.controls[0]);
        let p = policy.net.params();
        let (g, _) = bc_gradient(&policy, &traj).unwrap();
        for o in 0..2 {
            let mu = p[6 + o] + (0..3).map(|i| p[o * 3 + i] * s[i]).sum::<f64>();
            let r = (a[o] - mu) / (sigma * sigma);
            for i in 0..3 {
                assert!((g[o * 3 + i] - r * s[i]).abs() < 1e-12);
            }
            assert!((g[6 + o] - r).abs() < 1e-12);
        }
    }

    #[test]
    fn bc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture::Mlp { hidden: 6 };
        let policy = FlatPolicy::init(arch, 3, 2, 0.7, &mut rng).unwrap();
        let traj = random_trajectory(&mut rng, 6, 3, 2);
        let (g, _) = bc_gradient(&policy, &traj).unwrap();
        let fd = finite_difference_grad(
            |p| {
                let net = Approximator::from_params(arch, Head::Gaussian { dim: 2 }, 3, p.to_vec()).unwrap();
                bc_gradient(&FlatPolicy::new(net, 0.7).unwrap(), &traj).unwrap().1
            },
            policy.net.params(),
            1e-5,
        );
        assert!(rel_err(&g, &fd) < 1e-6);
    }

    #[test]
    fn eg_gradient_matches_finite_differences_of_marginal_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [HeadMode::Categorical, HeadMode::Hybrid] {
            for k in 1..=3 {
                let policy = random_policy(&mut rng, mode, k, 2, 2, Architecture::Mlp { hidden: 3 });
                let steps = rng.random_range(2..6);
                let traj = random_trajectory(&mut rng, steps, 2, 2);
                let post = forward_backward(&policy, &traj).unwrap();
                let g = eg_gradient(&policy, &traj, &post).unwrap();
                let fd = finite_difference_grad(
                    |p| {
                        let mut q = policy.clone();
                        q.set_flat_params(p).unwrap();
                        trajectory_loglikelihood(&q, &traj).unwrap()
                    },
                    &policy.flat_params(),
                    1e-5,
                );
                let e = rel_err(&g, &fd);
                assert!(e < 1e-4, "{mode:?} k={k}: rel err {e}");
            }
        }
    }

    #[test]
    fn single_option_gradient_is_bc_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let policy = random_policy(&mut rng, HeadMode::Categorical, 1, 3, 2, Architecture::Linear);
        let traj = random_trajectory(&mut rng, 5, 3, 2);
        let post = forward_backward(&policy, &traj).unwrap();
        let g = eg_gradient(&policy, &traj, &post).unwrap();
        assert!(g[policy.high_range()].iter().all(|x| x.abs() < 1e-12));
        let flat = FlatPolicy::new(policy.options()[0].policy.clone(), policy.sigma()).unwrap();
        let (bc, _) = bc_gradient(&flat, &traj).unwrap();
        let start = policy.options_range().start;
        for (i, b) in bc.iter().enumerate() {
            assert!((g[start + i] - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mismatched_posteriors_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = random_policy(&mut rng, HeadMode::Categorical, 2, 2, 1, Architecture::Linear);
        let traj = random_trajectory(&mut rng, 4, 2, 1);
        let other = random_trajectory(&mut rng, 5, 2, 1);
        let post = forward_backward(&policy, &other).unwrap();
        assert!(eg_gradient(&policy, &traj, &post).is_err());
    }
}
