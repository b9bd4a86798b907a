//! Quasi-static box pushing with a planar three-link arm.
//!
//! The box is a unit square resting on a horizontal surface below the arm
//! base and only translates along the surface. The end effector is a disc;
//! when it overlaps a side face of the box while moving toward it, the box
//! slides away by a friction-attenuated share of the overlap. Moving the end
//! effector vertically too fast while in contact topples the box, which is
//! absorbing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use std::f64::consts::PI;

use super::arm::{fk_with, LINKS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushConfig {
    pub links: [f64; 3],
    /// Maximum joint speed in rad/step; controls are expressed as fractions of it.
    pub rate_limit: f64,
    pub friction: f64,
    /// Vertical end-effector speed at contact that topples the box (units/step).
    pub topple_speed: f64,
    pub goal_tolerance: f64,
    pub horizon: usize,
    pub effector_radius: f64,
    pub surface_y: f64,
    pub box_size: f64,
    /// Allowed box and goal positions along the surface.
    pub box_range: (f64, f64),
    /// Distance band of a new goal from the box.
    pub goal_offset: (f64, f64),
}

impl Default for PushConfig {
    fn default() -> Self {
        PushConfig {
            links: LINKS,
            rate_limit: 0.2,
            friction: 0.8,
            topple_speed: 0.15,
            goal_tolerance: 0.5,
            horizon: 2000,
            effector_radius: 0.15,
            surface_y: -9.0,
            box_size: 1.0,
            box_range: (-7.0, 7.0),
            goal_offset: (1.5, 5.0),
        }
    }
}

impl PushConfig {
    /// Height of the box's vertical centre.
    pub fn push_height(&self) -> f64 {
        self.surface_y + 0.5 * self.box_size
    }

    /// Horizontal distance between box centre and effector centre at first contact.
    pub fn contact_distance(&self) -> f64 {
        0.5 * self.box_size + self.effector_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushEnvState {
    pub joints: [f64; 3],
    pub box_x: f64,
    pub box_toppled: bool,
    pub goal_x: f64,
    pub steps_elapsed: usize,
    pub goals_reached: usize,
}

pub const OBS_DIM: usize = 6;
pub const CONTROL_DIM: usize = 3;

impl PushEnvState {
    pub fn tip(&self, cfg: &PushConfig) -> [f64; 2] {
        fk_with(self.joints, cfg.links)[2]
    }

    /// `[φ1/π, φ2/π, φ3/π, box_x/10, toppled, goal_x/10]`.
    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.joints[0] / PI,
            self.joints[1] / PI,
            self.joints[2] / PI,
            self.box_x / 10.0,
            f64::from(u8::from(self.box_toppled)),
            self.goal_x / 10.0,
        ]
    }
}

/// Draws a goal on either side of the box within the allowed range.
pub fn sample_goal(box_x: f64, cfg: &PushConfig, rng: &mut impl Rng) -> f64 {
    let (lo, hi) = cfg.goal_offset;
    let (min, max) = cfg.box_range;
    let left = box_x - lo >= min;
    let right = box_x + lo <= max;
    let dir = match (left, right) {
        (true, true) => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
        (false, _) => 1.0,
        (true, false) => -1.0,
    };
    let limit = if dir > 0.0 { max - box_x } else { box_x - min };
    let dist = rng.random_range(lo..=hi.min(limit).max(lo));
    box_x + dir * dist
}

/// Initial state: a random box and goal with the effector above the surface.
pub fn initial_state(cfg: &PushConfig, rng: &mut impl Rng) -> PushEnvState {
    use std::f64::consts::FRAC_PI_2;
    let (min, max) = cfg.box_range;
    let box_x = rng.random_range((min + 2.0)..=(max - 2.0));
    let goal_x = sample_goal(box_x, cfg, rng);
    let tip = [rng.random_range(-2.0..=2.0), cfg.push_height() + 1.5];
    PushEnvState {
        joints: super::arm::arm_ik(tip, -FRAC_PI_2, cfg.links),
        box_x,
        box_toppled: false,
        goal_x,
        steps_elapsed: 0,
        goals_reached: 0,
    }
}

/// Advances one step. `control` holds joint speeds as fractions of the rate
/// limit; entries outside `[−1, 1]` are clipped.
pub fn push_step(state: &PushEnvState, control: &[f64], cfg: &PushConfig, rng: &mut impl Rng) -> PushEnvState {
    let mut next = *state;
    next.steps_elapsed += 1;
    let before = state.tip(cfg);
    for (q, u) in next.joints.iter_mut().zip(control) {
        let u = if u.is_finite() { u.clamp(-1.0, 1.0) } else { 0.0 };
        *q = (*q + cfg.rate_limit * u).clamp(-PI, PI);
    }
    if state.box_toppled {
        return next;
    }
    let after = next.tip(cfg);
    let r = cfg.effector_radius;
    let at_box_height = after[1] >= cfg.surface_y - r && after[1] <= cfg.surface_y + cfg.box_size + r;
    let gap = after[0] - next.box_x;
    let overlap = cfg.contact_distance() - gap.abs();
    if at_box_height && overlap > 0.0 {
        if (after[1] - before[1]).abs() > cfg.topple_speed {
            next.box_toppled = true;
            return next;
        }
        let toward = -gap.signum();
        let dx = after[0] - before[0];
        if dx * toward > 0.0 {
            let (min, max) = cfg.box_range;
            next.box_x = (next.box_x + toward * cfg.friction * overlap).clamp(min, max);
        }
    }
    if (next.box_x - next.goal_x).abs() < cfg.goal_tolerance {
        next.goals_reached += 1;
        next.goal_x = sample_goal(next.box_x, cfg, rng);
    }
    next
}

/// An environment instance owning its random stream.
#[derive(Debug, Clone)]
pub struct PushEnv<R> {
    pub cfg: PushConfig,
    pub state: PushEnvState,
    rng: R,
}

impl<R: Rng> PushEnv<R> {
    pub fn new(cfg: PushConfig, mut rng: R) -> Self {
        let state = initial_state(&cfg, &mut rng);
        PushEnv { cfg, state, rng }
    }

    pub fn with_state(cfg: PushConfig, state: PushEnvState, rng: R) -> Self {
        PushEnv { cfg, state, rng }
    }

    pub fn step(&mut self, control: &[f64]) -> &PushEnvState {
        self.state = push_step(&self.state, control, &self.cfg, &mut self.rng);
        &self.state
    }

    pub fn done(&self) -> bool {
        self.state.box_toppled || self.state.steps_elapsed >= self.cfg.horizon
    }
}
