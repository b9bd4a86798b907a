//! Property checks shared by the property tests and the acceptance run.

use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddco::env::{arm_fk, push_step, slds_generate, PushConfig, SldsConfig};
use ddco::inference::{brute_force_posteriors_with_dynamics, forward_backward_with_dynamics};
use ddco::io::{self, Policy};
use ddco::modelselect::{fold_assignment, nmi};
use ddco::testutil::{random_policy, random_trajectory};
use ddco::{
    brute_force_posteriors, forward_backward, trajectory_loglikelihood, validate_trajectory, Approximator,
    Architecture, Dataset, FlatPolicy, Head, HeadMode, HeadOutput, HierarchicalPolicy, Mode, PosteriorTables,
};

pub const CASES: u32 = 128;

fn check<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(cases)
    };
    TestRunner::new(config)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn head_mode() -> impl Strategy<Value = HeadMode> {
    prop_oneof![Just(HeadMode::Categorical), Just(HeadMode::Hybrid)]
}

fn max_diff(a: &PosteriorTables, b: &PosteriorTables) -> f64 {
    let rows = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter()
            .flatten()
            .zip(y.iter().flatten())
            .fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()))
    };
    let mut d = rows(&a.u, &b.u).max(rows(&a.v, &b.v)).max(rows(&a.w, &b.w));
    if let (Some(x), Some(y)) = (&a.vc, &b.vc) {
        d = x.iter().zip(y).fold(d, |m, (p, q)| m.max((p - q).abs()));
    }
    d
}

/// Reorders options so that new option `i` is old option `perm[i]`.
fn permute_options(policy: &HierarchicalPolicy, perm: &[usize]) -> HierarchicalPolicy {
    let (mode, sigma, high, options) = policy.clone().into_parts();
    let d_s = high.input_dim();
    let offset = match high.head() {
        Head::Hybrid { dim, .. } => dim + 1,
        _ => 0,
    };
    let width = high.head().width();
    let old = high.params().to_vec();
    let mut params = old.clone();
    for (new, &from) in perm.iter().enumerate() {
        let (r_new, r_old) = (offset + new, offset + from);
        params[r_new * d_s..(r_new + 1) * d_s].copy_from_slice(&old[r_old * d_s..(r_old + 1) * d_s]);
        params[width * d_s + r_new] = old[width * d_s + r_old];
    }
    let high = Approximator::from_params(high.architecture(), high.head(), d_s, params).unwrap();
    let options = perm.iter().map(|&i| options[i].clone()).collect();
    HierarchicalPolicy::new(mode, sigma, high, options).unwrap()
}

pub fn posterior_tables_satisfy_invariants_and_match_enumeration(cases: u32) -> Result<(), String> {
    check(
        cases,
        (any::<u64>(), head_mode(), 1usize..=3, 1usize..=6),
        |(seed, mode, k, steps)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = random_policy(&mut rng, mode, k, 2, 2, Architecture::Mlp { hidden: 3 });
            let traj = random_trajectory(&mut rng, steps, 2, 2);
            let fb = forward_backward(&policy, &traj).unwrap();
            prop_assert!(
                fb.invariant_violation() <= 1e-12,
                "violation {}",
                fb.invariant_violation()
            );
            let bf = brute_force_posteriors(&policy, &traj).unwrap();
            prop_assert!(max_diff(&fb, &bf) <= 1e-8);
            prop_assert!((fb.loglik - bf.loglik).abs() <= 1e-8);
            prop_assert_eq!(fb.vc.is_some(), mode == HeadMode::Hybrid);
            Ok(())
        },
    )
}

pub fn dynamics_constants_leave_posteriors_unchanged(cases: u32) -> Result<(), String> {
    check(
        cases,
        (any::<u64>(), head_mode(), 1usize..=3, 1usize..=5),
        |(seed, mode, k, steps)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = random_policy(&mut rng, mode, k, 2, 1, Architecture::Linear);
            let traj = random_trajectory(&mut rng, steps, 2, 1);
            let dynamics: Vec<f64> = (0..steps).map(|_| rng.random_range(-20.0..20.0)).collect();
            let plain = forward_backward(&policy, &traj).unwrap();
            let scaled = forward_backward_with_dynamics(&policy, &traj, &dynamics).unwrap();
            prop_assert!(max_diff(&plain, &scaled) <= 1e-12);
            let offset: f64 = dynamics.iter().sum();
            prop_assert!((scaled.loglik - plain.loglik - offset).abs() <= 1e-9);
            let oracle = brute_force_posteriors_with_dynamics(&policy, &traj, &dynamics).unwrap();
            prop_assert!(max_diff(&scaled, &oracle) <= 1e-8);
            Ok(())
        },
    )
}

pub fn relabelling_options_permutes_posteriors(cases: u32) -> Result<(), String> {
    check(
        cases,
        (
            any::<u64>(),
            head_mode(),
            Just(vec![0usize, 1, 2]).prop_shuffle(),
            1usize..=6,
        ),
        |(seed, mode, perm, steps)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = random_policy(&mut rng, mode, 3, 2, 2, Architecture::Linear);
            let traj = random_trajectory(&mut rng, steps, 2, 2);
            let base = forward_backward(&policy, &traj).unwrap();
            let moved = forward_backward(&permute_options(&policy, &perm), &traj).unwrap();
            for t in 0..steps {
                for (new, &old) in perm.iter().enumerate() {
                    prop_assert!((moved.u[t][new] - base.u[t][old]).abs() <= 1e-12);
                    prop_assert!((moved.v[t][new] - base.v[t][old]).abs() <= 1e-12);
                    if t + 1 < steps {
                        prop_assert!((moved.w[t][new] - base.w[t][old]).abs() <= 1e-12);
                    }
                }
            }
            prop_assert!((moved.loglik - base.loglik).abs() <= 1e-10);
            Ok(())
        },
    )
}

pub fn categorical_heads_carry_unit_mass(cases: u32) -> Result<(), String> {
    check(
        cases,
        (
            any::<u64>(),
            any::<bool>(),
            1usize..=6,
            prop_oneof![Just(1.0), Just(30.0), Just(1e3)],
            any::<bool>(),
        ),
        |(seed, hybrid, classes, scale, mlp)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = if hybrid {
                Head::Hybrid {
                    options: classes - 1,
                    dim: 2,
                }
            } else {
                Head::Softmax { classes }
            };
            let arch = if mlp {
                Architecture::Mlp { hidden: 5 }
            } else {
                Architecture::Linear
            };
            let mut net = Approximator::new(arch, head, 3, &mut rng);
            for p in net.params_mut() {
                *p *= scale;
            }
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let log_probs = match net.forward(&s, Mode::Eval).unwrap() {
                HeadOutput::Softmax { log_probs } | HeadOutput::Hybrid { log_probs, .. } => log_probs,
                other => panic!("unexpected head {other:?}"),
            };
            prop_assert_eq!(log_probs.len(), classes);
            let mass: f64 = log_probs.iter().map(|l| l.exp()).sum();
            prop_assert!((mass - 1.0).abs() <= 1e-12, "mass {}", mass);
            Ok(())
        },
    )
}

pub fn nmi_is_symmetric_bounded_and_label_free(cases: u32) -> Result<(), String> {
    check(
        cases,
        (
            prop::collection::vec((0usize..4, 0usize..5), 1..60),
            Just(vec![7usize, 3, 11, 0, 5]).prop_shuffle(),
        ),
        |(pairs, relabel)| {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() <= 1e-12);
            let renamed: Vec<usize> = b.iter().map(|&l| relabel[l]).collect();
            prop_assert!((nmi(&a, &renamed).unwrap() - ab).abs() <= 1e-12);
            prop_assert!((nmi(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
            Ok(())
        },
    )
}

pub fn checkpoints_round_trip_exactly(cases: u32) -> Result<(), String> {
    check(
        cases,
        (any::<u64>(), head_mode(), 0usize..=3, any::<bool>(), any::<bool>()),
        |(seed, mode, k, flat, mlp)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arch = if mlp {
                Architecture::Mlp { hidden: 4 }
            } else {
                Architecture::Linear
            };
            let traj = random_trajectory(&mut rng, 4, 3, 2);
            let policy = if flat {
                Policy::Flat(FlatPolicy::init(arch, 3, 2, rng.random_range(0.1..2.0), &mut rng).unwrap())
            } else {
                let k = if mode == HeadMode::Categorical { k.max(1) } else { k };
                Policy::Hierarchical(random_policy(&mut rng, mode, k, 3, 2, arch))
            };
            let text = io::checkpoint_to_string(&policy);
            let back = io::checkpoint_from_str(&text).unwrap();
            prop_assert_eq!(&back, &policy);
            prop_assert_eq!(io::checkpoint_to_string(&back), text);
            if let (Policy::Hierarchical(a), Policy::Hierarchical(b)) = (&policy, &back) {
                let la = trajectory_loglikelihood(a, &traj).unwrap();
                let lb = trajectory_loglikelihood(b, &traj).unwrap();
                prop_assert_eq!(la.to_bits(), lb.to_bits());
            }
            Ok(())
        },
    )
}

pub fn environment_replays_identically(cases: u32) -> Result<(), String> {
    check(
        cases,
        (
            any::<u64>(),
            prop::collection::vec(prop::array::uniform3(-1.5f64..1.5), 1..120),
        ),
        |(seed, controls)| {
            let cfg = PushConfig::default();
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut state = ddco::env::PushEnv::new(cfg, ChaCha8Rng::seed_from_u64(seed)).state;
                let mut states = vec![state];
                for u in &controls {
                    state = push_step(&state, u, &cfg, &mut rng);
                    states.push(state);
                }
                states
            };
            let first = run();
            prop_assert_eq!(&first, &run());
            for s in &first {
                prop_assert!(s
                    .joints
                    .iter()
                    .all(|q| q.is_finite() && q.abs() <= std::f64::consts::PI));
                prop_assert!(s.observation().iter().all(|x| x.is_finite()));
            }
            Ok(())
        },
    )
}

pub fn kinematics_preserve_link_lengths(cases: u32) -> Result<(), String> {
    check(cases, prop::array::uniform3(-10.0f64..10.0), |joints| {
        let p = arm_fk(joints);
        let lengths = [
            p[0][0].hypot(p[0][1]),
            (p[1][0] - p[0][0]).hypot(p[1][1] - p[0][1]),
            (p[2][0] - p[1][0]).hypot(p[2][1] - p[1][1]),
        ];
        for (l, want) in lengths.iter().zip(ddco::env::arm::LINKS) {
            prop_assert!((l - want).abs() <= 1e-12);
        }
        Ok(())
    })
}

pub fn fold_assignment_partitions_trajectories(cases: u32) -> Result<(), String> {
    check(cases, (1usize..200, 2usize..12, any::<u64>()), |(n, folds, seed)| {
        let parts = fold_assignment(n, folds, seed);
        prop_assert_eq!(parts.len(), folds.min(n));
        prop_assert!(parts.iter().all(|f| !f.is_empty()));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(parts, fold_assignment(n, folds, seed));
        Ok(())
    })
}

pub fn slds_labels_align_with_steps(cases: u32) -> Result<(), String> {
    check(
        cases,
        (any::<u64>(), 1usize..=5, 1usize..8, 1usize..30),
        |(seed, k, n, horizon)| {
            let (data, labels) = slds_generate(&SldsConfig::new(k, 0.05, horizon), n, seed).unwrap();
            prop_assert!(io::check_labels(&data, &labels).is_ok());
            prop_assert!(labels.iter().all(|l| l.len() == horizon && l.iter().all(|&m| m < k)));
            Ok(())
        },
    )
}

fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let d_s = rng.random_range(1..5);
    let d_a = rng.random_range(1..4);
    let n = rng.random_range(1..6);
    let trajectories = (0..n)
        .map(|_| {
            let steps = rng.random_range(1..8);
            let mut t = random_trajectory(rng, steps, d_s, d_a);
            for x in t.states.iter_mut().flatten() {
                *x *= 10f64.powi(rng.random_range(-8..8));
            }
            t
        })
        .collect();
    Dataset::new(trajectories).unwrap()
}

#[derive(Debug, Clone)]
enum Corruption {
    Truncate(usize),
    DeleteChar(usize),
    ReplaceNumber(usize, &'static str),
    DropState(usize),
    ExtraControlEntry(usize),
    EmptyLine(usize),
}

fn corruption() -> impl Strategy<Value = Corruption> {
    prop_oneof![
        any::<usize>().prop_map(Corruption::Truncate),
        any::<usize>().prop_map(Corruption::DeleteChar),
        (
            any::<usize>(),
            prop_oneof![Just("NaN"), Just("1e999"), Just("\"x\""), Just("null"), Just("[]")]
        )
            .prop_map(|(i, s)| Corruption::ReplaceNumber(i, s)),
        any::<usize>().prop_map(Corruption::DropState),
        any::<usize>().prop_map(Corruption::ExtraControlEntry),
        any::<usize>().prop_map(Corruption::EmptyLine),
    ]
}

fn corrupt(data: &Dataset, c: &Corruption) -> String {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    io::save_dataset(&path, data).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    match *c {
        Corruption::Truncate(i) => text[..i % text.len()].to_string(),
        Corruption::DeleteChar(i) => {
            let i = i % text.len();
            format!("{}{}", &text[..i], &text[i + 1..])
        }
        Corruption::ReplaceNumber(i, with) => {
            let starts: Vec<usize> = text
                .char_indices()
                .filter(|&(j, ch)| (ch == '-' || ch.is_ascii_digit()) && j > 0 && matches!(&text[j - 1..j], "[" | ","))
                .map(|(j, _)| j)
                .collect();
            let start = starts[i % starts.len()];
            let end = text[start..].find([',', ']']).map_or(text.len(), |e| start + e);
            format!("{}{}{}", &text[..start], with, &text[end..])
        }
        Corruption::DropState(i) | Corruption::ExtraControlEntry(i) => {
            let mut trajs = data.trajectories().to_vec();
            let j = i % trajs.len();
            if matches!(c, Corruption::DropState(_)) {
                trajs[j].states.pop();
            } else if trajs[j].controls.len() > 1 {
                trajs[j].controls[0].push(0.5);
            } else {
                trajs[j].states[0].push(0.5);
            }
            trajs.iter().map(|t| serde_json::to_string(t).unwrap() + "\n").collect()
        }
        Corruption::EmptyLine(i) => {
            let mut lines: Vec<&str> = text.lines().collect();
            lines.insert(i % lines.len(), "");
            lines.join("\n")
        }
    }
}

pub fn well_formed_datasets_load_back_exactly(cases: u32) -> Result<(), String> {
    check(cases, any::<u64>(), |seed| {
        let data = random_dataset(&mut ChaCha8Rng::seed_from_u64(seed));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        io::save_dataset(&path, &data).unwrap();
        let back = io::load_dataset(&path).unwrap();
        prop_assert_eq!(&back, &data);
        for t in back.trajectories() {
            prop_assert!(validate_trajectory(t, back.state_dim(), back.control_dim()).is_ok());
        }
        Ok(())
    })
}

pub fn corrupted_datasets_are_rejected_or_valid(cases: u32) -> Result<(), String> {
    check(cases, (any::<u64>(), corruption()), |(seed, c)| {
        let data = random_dataset(&mut ChaCha8Rng::seed_from_u64(seed));
        let text = corrupt(&data, &c);
        match io::parse_dataset(&text) {
            Ok(loaded) => {
                prop_assert!(!loaded.is_empty());
                for t in loaded.trajectories() {
                    prop_assert!(validate_trajectory(t, loaded.state_dim(), loaded.control_dim()).is_ok());
                }
            }
            Err(e) => prop_assert!(!e.to_string().is_empty()),
        }
        if matches!(
            c,
            Corruption::DropState(_) | Corruption::ExtraControlEntry(_) | Corruption::EmptyLine(_)
        ) {
            prop_assert!(io::parse_dataset(&text).is_err());
        }
        Ok(())
    })
}

pub type Invariant = fn(u32) -> Result<(), String>;

/// Every invariant, by name.
pub const SUITE: &[(&str, Invariant)] = &[
    (
        "posterior_tables_satisfy_invariants_and_match_enumeration",
        posterior_tables_satisfy_invariants_and_match_enumeration,
    ),
    (
        "dynamics_constants_leave_posteriors_unchanged",
        dynamics_constants_leave_posteriors_unchanged,
    ),
    (
        "relabelling_options_permutes_posteriors",
        relabelling_options_permutes_posteriors,
    ),
    ("categorical_heads_carry_unit_mass", categorical_heads_carry_unit_mass),
    (
        "nmi_is_symmetric_bounded_and_label_free",
        nmi_is_symmetric_bounded_and_label_free,
    ),
    ("checkpoints_round_trip_exactly", checkpoints_round_trip_exactly),
    ("environment_replays_identically", environment_replays_identically),
    ("kinematics_preserve_link_lengths", kinematics_preserve_link_lengths),
    (
        "fold_assignment_partitions_trajectories",
        fold_assignment_partitions_trajectories,
    ),
    ("slds_labels_align_with_steps", slds_labels_align_with_steps),
    (
        "well_formed_datasets_load_back_exactly",
        well_formed_datasets_load_back_exactly,
    ),
    (
        "corrupted_datasets_are_rejected_or_valid",
        corrupted_datasets_are_rejected_or_valid,
    ),
];
