use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{compute_gae, mix, normalize, PpoConfig, PpoError};
use crate::encoder::{act, policy_outputs, PolicyModel, PolicySample};
use crate::toyenv::{EnvConfig, EnvSnapshot, EpisodeMetrics, Scene, ToyEnv};

/// Seed of episode `episode` on env slot `env` of a run.
pub fn episode_seed(run_seed: u64, env: usize, episode: u64) -> u64 {
    mix(mix(run_seed, env as u64 + 1), episode)
}

/// `E` independent environments with automatic reset on episode end.
pub struct VecEnv {
    envs: Vec<ToyEnv>,
    obs: Vec<PolicySample>,
    episodes: Vec<u64>,
    run_seed: u64,
    threads: usize,
}

/// Serializable [`VecEnv`] state for exact resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VecEnvState {
    pub envs: Vec<EnvSnapshot>,
    pub episodes: Vec<u64>,
}

/// One env's outcome for a vector step.
#[derive(Clone, Debug)]
pub struct VecStep {
    pub reward: f64,
    pub done: bool,
    pub episode: Option<EpisodeMetrics>,
}

impl VecEnv {
    pub fn new(scene: Arc<Scene>, cfg: &EnvConfig, n: usize, run_seed: u64, threads: usize) -> Result<Self, PpoError> {
        let mut envs = Vec::with_capacity(n);
        let mut obs = Vec::with_capacity(n);
        for i in 0..n {
            let env = ToyEnv::new(scene.clone(), cfg.clone(), episode_seed(run_seed, i, 0))
                .map_err(|error| PpoError::Env { index: i, error })?;
            obs.push(env.observe());
            envs.push(env);
        }
        Ok(Self {
            envs,
            obs,
            episodes: vec![0; n],
            run_seed,
            threads: threads.max(1),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn observations(&self) -> &[PolicySample] {
        &self.obs
    }

    pub fn envs(&self) -> &[ToyEnv] {
        &self.envs
    }

    /// Steps every env; finished envs are reset with their next episode seed
    /// and report the fresh observation.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<Vec<VecStep>, PpoError> {
        if actions.len() != self.envs.len() {
            return Err(PpoError::State(format!("{} actions for {} envs", actions.len(), self.envs.len())));
        }
        let run_seed = self.run_seed;
        let step_one = |i: usize, env: &mut ToyEnv, ep: &mut u64, obs: &mut PolicySample, a: &[f64]| {
            let r = env.step(a).map_err(|error| PpoError::Env { index: i, error })?;
            *obs = if r.done {
                *ep += 1;
                env.reset(episode_seed(run_seed, i, *ep))
                    .map_err(|error| PpoError::Env { index: i, error })?
            } else {
                r.sample
            };
            Ok(VecStep {
                reward: r.reward,
                done: r.done,
                episode: r.episode,
            })
        };
        let n = self.envs.len();
        let work = self
            .envs
            .iter_mut()
            .zip(self.episodes.iter_mut())
            .zip(self.obs.iter_mut())
            .zip(actions)
            .enumerate()
            .map(|(i, (((e, ep), o), a))| (i, e, ep, o, a.as_slice()));
        if self.threads <= 1 || n < 2 {
            return work.map(|(i, e, ep, o, a)| step_one(i, e, ep, o, a)).collect();
        }
        let mut items: Vec<_> = work.collect();
        let chunk = n.div_ceil(self.threads);
        let results: Vec<Result<Vec<VecStep>, PpoError>> = std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks_mut(chunk)
                .map(|c| {
                    let step_one = &step_one;
                    s.spawn(move || {
                        c.iter_mut()
                            .map(|(i, e, ep, o, a)| step_one(*i, e, ep, o, a))
                            .collect::<Result<Vec<_>, _>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("env worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(n);
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn state(&self) -> VecEnvState {
        VecEnvState {
            envs: self.envs.iter().map(ToyEnv::snapshot).collect(),
            episodes: self.episodes.clone(),
        }
    }

    pub fn restore(&mut self, state: &VecEnvState) -> Result<(), PpoError> {
        if state.envs.len() != self.envs.len() || state.episodes.len() != self.envs.len() {
            return Err(PpoError::State(format!(
                "saved state has {} envs, trainer has {}",
                state.envs.len(),
                self.envs.len()
            )));
        }
        for (i, (env, snap)) in self.envs.iter_mut().zip(&state.envs).enumerate() {
            env.restore(snap).map_err(|error| PpoError::Env { index: i, error })?;
            self.obs[i] = env.observe();
        }
        self.episodes = state.episodes.clone();
        Ok(())
    }
}

/// `E x R` transitions, stored time-major (`index = t * E + env`).
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub n_steps: usize,
    /// Observation plus the positions and contacts the biases are rebuilt from.
    pub samples: Vec<PolicySample>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Scaled by `reward_scale`.
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the observation following each env's last step (0 if done).
    pub last_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Unscaled mean per-step reward.
    pub mean_reward: f64,
    pub finished: Vec<EpisodeMetrics>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fills advantages and returns per env column; optionally normalizes the
    /// advantages (returns keep the unnormalized values).
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64, normalize_adv: bool) {
        let (e, r) = (self.n_envs, self.n_steps);
        self.advantages = vec![0.0; e * r];
        self.returns = vec![0.0; e * r];
        for env in 0..e {
            let col = |v: &[f64]| (0..r).map(|t| v[t * e + env]).collect::<Vec<f64>>();
            let dones: Vec<bool> = (0..r).map(|t| self.dones[t * e + env]).collect();
            let (adv, ret) = compute_gae(
                &col(&self.rewards),
                &col(&self.values),
                &dones,
                self.last_values[env],
                gamma,
                lambda,
            );
            for t in 0..r {
                self.advantages[t * e + env] = adv[t];
                self.returns[t * e + env] = ret[t];
            }
        }
        if normalize_adv {
            normalize(&mut self.advantages);
        }
    }
}

/// Runs the frozen policy for `cfg.rollout_steps` steps on every env and
/// computes advantages.
pub fn collect_rollouts<R: Rng + ?Sized>(
    model: &dyn PolicyModel,
    venv: &mut VecEnv,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<RolloutBatch, PpoError> {
    let (e, r) = (venv.len(), cfg.rollout_steps);
    let mut b = RolloutBatch {
        n_envs: e,
        n_steps: r,
        samples: Vec::with_capacity(e * r),
        actions: Vec::with_capacity(e * r),
        log_probs: Vec::with_capacity(e * r),
        values: Vec::with_capacity(e * r),
        rewards: Vec::with_capacity(e * r),
        dones: Vec::with_capacity(e * r),
        last_values: vec![0.0; e],
        advantages: Vec::new(),
        returns: Vec::new(),
        mean_reward: 0.0,
        finished: Vec::new(),
    };
    let mut raw_reward = 0.0;
    for _ in 0..r {
        let obs = venv.observations().to_vec();
        let refs: Vec<&PolicySample> = obs.iter().collect();
        let outs = act(model, &refs, rng, false)?;
        let actions: Vec<Vec<f64>> = outs.iter().map(|o| o.action.clone()).collect();
        let steps = venv.step(&actions)?;
        for ((o, s), (sample, a)) in outs.into_iter().zip(steps).zip(obs.into_iter().zip(actions)) {
            raw_reward += s.reward;
            b.samples.push(sample);
            b.actions.push(a);
            b.log_probs.push(o.log_prob);
            b.values.push(o.value);
            b.rewards.push(s.reward * cfg.reward_scale);
            b.dones.push(s.done);
            if let Some(ep) = s.episode {
                b.finished.push(ep);
            }
        }
    }
    let refs: Vec<&PolicySample> = venv.observations().iter().collect();
    let tail = policy_outputs(model, &refs)?;
    for (env, o) in tail.iter().enumerate() {
        b.last_values[env] = if b.dones[(r - 1) * e + env] { 0.0 } else { o.value };
    }
    b.mean_reward = raw_reward / (e * r) as f64;
    b.compute_advantages(cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages);
    Ok(b)
}
