//! Demonstration sources and closed-loop evaluation.

pub mod arm;
pub mod push;
pub mod rollout;
pub mod slds;
pub mod supervisor;

pub use arm::arm_fk;
pub use push::{push_step, PushConfig, PushEnv, PushEnvState};
pub use rollout::{evaluate, rollout, ActionMode, Agent, RolloutResult, TraceStep};
pub use slds::{slds_generate, SldsConfig};
pub use supervisor::{generate_demos, scripted_supervisor, supervisor_reward, DemoConfig};
