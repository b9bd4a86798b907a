//! Fixed-seed fixtures shared by the benchmarks.

use ddco::env::{slds_generate, SldsConfig};
use ddco::testutil::{random_policy, random_trajectory};
use ddco::{Architecture, Dataset, HeadMode, HierarchicalPolicy, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STATE_DIM: usize = 6;
pub const CONTROL_DIM: usize = 3;

/// A random MLP-option policy and a trajectory of `steps` steps.
pub fn instance(mode: HeadMode, k: usize, steps: usize) -> (HierarchicalPolicy, Trajectory) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe7c);
    let policy = random_policy(
        &mut rng,
        mode,
        k,
        STATE_DIM,
        CONTROL_DIM,
        Architecture::Mlp { hidden: 64 },
    );
    let traj = random_trajectory(&mut rng, steps, STATE_DIM, CONTROL_DIM);
    (policy, traj)
}

/// A two-mode switching linear dataset.
pub fn slds(n: usize) -> Dataset {
    slds_generate(&SldsConfig::new(2, 0.05, 20), n, 5)
        .expect("valid config")
        .0
}
