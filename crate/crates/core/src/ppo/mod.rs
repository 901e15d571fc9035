//! Clipped-surrogate PPO with GAE over vectorized [`ToyEnv`] rollouts.
//!
//! Works with any [`PolicyModel`]. Biases are recomputed from the stored
//! node positions and contacts inside every update, so the bias parameters
//! are trained by the PPO objective like every other weight.

mod eval;
mod gae;
mod rollout;
mod train;
mod update;

pub use eval::{evaluate_policy, run_episodes, EvalSummary};
pub use gae::{compute_gae, normalize};
pub use rollout::{collect_rollouts, episode_seed, RolloutBatch, VecEnv, VecEnvState};
pub use train::{
    build_policy, eval_episode_seeds, install_params, load_policy, train_seed, BiasLog, TrainSummary, Trainer, TrainerState, UpdateRecord,
    BEST_CHECKPOINT, CONFIG_FILE, EPISODES_FILE, LATEST_CHECKPOINT, METRICS_FILE,
};
pub use update::{ppo_update, LossReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nncore::NnError;
use crate::toyenv::EnvError;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid ppo.{field}: {reason}")]
    Config { field: String, reason: String },
    #[error("env {index}: {error}")]
    Env { index: usize, error: EnvError },
    #[error(transparent)]
    EnvSetup(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss at update {update}, epoch {epoch}, minibatch {minibatch}: policy {policy}, value {value}, entropy {entropy}")]
    NonFiniteLoss {
        update: usize,
        epoch: usize,
        minibatch: usize,
        policy: f64,
        value: f64,
        entropy: f64,
    },
    #[error("checkpoint does not match the configured model:\n{0}")]
    CheckpointMismatch(String),
    #[error("{0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

/// Trainer hyperparameters, shared by every architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    /// Parallel environments.
    pub num_envs: usize,
    /// Steps per environment per update.
    pub rollout_steps: usize,
    pub max_updates: usize,
    /// Evaluate after every `eval_every`-th update (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Multiplies env rewards before advantage estimation.
    pub reward_scale: f64,
    /// Worker threads for env stepping; `PHYSGRAPH_DETERMINISTIC=1` forces 1.
    pub threads: usize,
    /// Write `latest.ckpt` every this many updates (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 1024,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.003,
            max_grad_norm: 1.0,
            normalize_advantages: true,
            num_envs: 64,
            rollout_steps: 32,
            max_updates: 300,
            eval_every: 10,
            eval_episodes: 32,
            reward_scale: 1.0,
            threads: 1,
            checkpoint_every: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |field: &str, reason: &str| {
            Err(PpoError::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda", "must lie in [0, 1]");
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return bad("clip", "must be positive");
        }
        if self.minibatch == 0 {
            return bad("minibatch", "must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a non-negative number");
        }
        if !(self.value_coef >= 0.0 && self.value_coef.is_finite()) {
            return bad("value_coef", "must be non-negative");
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad("entropy_coef", "must be non-negative");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", "must be positive");
        }
        if self.num_envs == 0 {
            return bad("num_envs", "must be at least 1");
        }
        if self.rollout_steps == 0 {
            return bad("rollout_steps", "must be at least 1");
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return bad("eval_episodes", "must be at least 1 when evaluation is enabled");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad("reward_scale", "must be positive");
        }
        if self.threads == 0 {
            return bad("threads", "must be at least 1");
        }
        Ok(())
    }

    /// Worker count after the deterministic-mode override.
    pub fn effective_threads(&self) -> usize {
        if deterministic_mode() {
            1
        } else {
            self.threads
        }
    }
}

/// True when `PHYSGRAPH_DETERMINISTIC=1`.
pub fn deterministic_mode() -> bool {
    std::env::var("PHYSGRAPH_DETERMINISTIC").is_ok_and(|v| v == "1")
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests;
