//! Scripted two-branch pushing supervisor and demonstration generation.
//!
//! The supervisor picks a Cartesian target for the effector, turns it into a
//! posture by inverse kinematics, and drives each joint a fixed fraction of
//! the way there. Behind the box it holds a staging point while high and
//! advances through the box as it comes down to push height; over or past the
//! box it rises and crosses back once clear. The branch is the side of the box
//! the goal lies on. Each step moves the target at most [`MAX_VERTICAL`]
//! vertically, so contact is never fast enough to topple the box.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::arm::arm_ik;
use super::push::{initial_state, PushConfig, PushEnv, PushEnvState};
use crate::error::Result;
use crate::types::{Dataset, Trajectory};

/// Fraction of the remaining joint displacement covered per step.
const GAIN: f64 = 0.3;
/// Vertical effector travel per step (units), below the topple speed.
const MAX_VERTICAL: f64 = 0.12;
/// Height of the crossing target above the box top, effector radius included.
const CLEARANCE: f64 = 0.8;
/// Height band below the crossing target over which horizontal travel ramps in.
const CROSS_RAMP: f64 = 0.4;
/// Horizontal gap between the effector and the box face at the staging point.
const STANDOFF: f64 = 0.6;
/// Height band above push height inside which the effector advances.
const APPROACH_BAND: f64 = 0.6;
/// How far past the box centre the push target sits.
const AHEAD: f64 = 0.5;

/// Deterministic supervisor control for `state`.
pub fn scripted_supervisor(state: &PushEnvState, cfg: &PushConfig) -> [f64; 3] {
    let tip = state.tip(cfg);
    let dir = if state.goal_x >= state.box_x { 1.0 } else { -1.0 };
    let push_y = cfg.push_height();
    let contact = cfg.contact_distance();
    let lift_y = cfg.surface_y + cfg.box_size + cfg.effector_radius + CLEARANCE;
    // effector position along the push direction; negative is behind the box
    let along = (tip[0] - state.box_x) * dir;
    let stage_x = state.box_x - dir * (contact + STANDOFF);
    let above_band = tip[1] > push_y + APPROACH_BAND;

    let target = if along <= -0.15 && !(along > -contact && above_band) {
        let w = (1.0 - (tip[1] - push_y) / APPROACH_BAND).clamp(0.0, 1.0);
        let ahead_x = state.box_x + dir * AHEAD;
        [stage_x + w * (ahead_x - stage_x), push_y]
    } else {
        let clear = ((tip[1] - (lift_y - 0.3 - CROSS_RAMP)) / CROSS_RAMP).clamp(0.0, 1.0);
        [tip[0] + clear * (stage_x - tip[0]), lift_y]
    };
    let rise = MAX_VERTICAL / GAIN;
    let target = [target[0], tip[1] + (target[1] - tip[1]).clamp(-rise, rise)];
    let posture = arm_ik(target, -FRAC_PI_2, cfg.links);
    [0, 1, 2].map(|i| (GAIN * (posture[i] - state.joints[i]) / cfg.rate_limit).clamp(-1.0, 1.0))
}

/// Demonstration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoConfig {
    pub env: PushConfig,
    /// Goal episodes recorded per demonstration rollout; the episode horizon
    /// usually ends a demonstration first.
    pub goals_per_demo: usize,
    /// Longest goal episode kept; longer attempts are cut here.
    pub max_episode_steps: usize,
    /// Standard deviation of Gaussian noise added to the executed control.
    /// The recorded control is always the supervisor's own.
    pub execution_noise: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            env: PushConfig::default(),
            goals_per_demo: usize::MAX,
            max_episode_steps: 200,
            execution_noise: 0.05,
        }
    }
}

/// Runs `n` supervisor rollouts and splits each into one trajectory per goal episode.
pub fn generate_demos(n: usize, seed: u64, cfg: &DemoConfig) -> Result<Dataset> {
    let mut trajectories = Vec::new();
    for i in 0..n {
        let rng = ChaCha8Rng::seed_from_u64(crate::training::derive_seed(seed, &[0xde30, i as u64]));
        let mut env = PushEnv::new(cfg.env, rng);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(crate::training::derive_seed(seed, &[0xde31, i as u64]));
        for _ in 0..cfg.goals_per_demo.max(1) {
            let goals = env.state.goals_reached;
            let mut states = vec![env.state.observation()];
            let mut controls = Vec::new();
            while env.state.goals_reached == goals && !env.done() && controls.len() < cfg.max_episode_steps {
                let u = scripted_supervisor(&env.state, &env.cfg);
                let executed: Vec<f64> = u
                    .iter()
                    .map(|x| x + cfg.execution_noise * noise_rng.sample::<f64, _>(StandardNormal))
                    .collect();
                controls.push(u.to_vec());
                let mut trial = env.clone();
                trial.step(&executed);
                if trial.state.box_toppled {
                    // perturbations that would topple the box are not applied
                    env.step(&u);
                } else {
                    env = trial;
                }
                states.push(env.state.observation());
            }
            if env.state.box_toppled {
                // a perturbation knocked the box over; the attempt is not a demonstration
                break;
            }
            if controls.is_empty() {
                break;
            }
            trajectories.push(Trajectory { states, controls });
            if env.done() || env.state.goals_reached == goals {
                break;
            }
        }
    }
    Dataset::new(trajectories)
}

/// Goals the supervisor reaches in one full episode.
pub fn supervisor_reward(cfg: &PushConfig, seed: u64) -> (usize, bool) {
    let mut env = PushEnv::new(*cfg, ChaCha8Rng::seed_from_u64(seed));
    while !env.done() {
        let u = scripted_supervisor(&env.state, &env.cfg);
        env.step(&u);
    }
    (env.state.goals_reached, env.state.box_toppled)
}

/// Same as [`initial_state`], exposed for evaluation code that seeds episodes itself.
pub fn episode_start(cfg: &PushConfig, seed: u64) -> PushEnvState {
    initial_state(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}
