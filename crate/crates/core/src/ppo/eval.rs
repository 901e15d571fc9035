use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::PpoError;
use crate::encoder::{act, PolicyModel, PolicySample};
use crate::toyenv::{batch_metrics, BatchMetrics, EnvConfig, EpisodeMetrics, Scene, ToyEnv};

/// Aggregate evaluation numbers as logged during training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub sr: f64,
    pub e_t_cm: f64,
    pub e_j_cm: f64,
    pub e_ft_cm: f64,
    pub mean_return: f64,
}

impl From<BatchMetrics> for EvalSummary {
    fn from(b: BatchMetrics) -> Self {
        Self {
            episodes: b.episodes,
            sr: b.sr,
            e_t_cm: b.e_t_cm,
            e_j_cm: b.e_j_cm,
            e_ft_cm: b.e_ft_cm,
            mean_return: b.mean_return,
        }
    }
}

/// Runs one episode per seed, all in lockstep, querying `policy` with the
/// batch of still-running episodes. Results follow `seeds` order.
pub fn run_episodes<F>(scene: Arc<Scene>, cfg: &EnvConfig, seeds: &[u64], mut policy: F) -> Result<Vec<EpisodeMetrics>, PpoError>
where
    F: FnMut(&[&PolicySample]) -> Result<Vec<Vec<f64>>, PpoError>,
{
    let mut envs = Vec::with_capacity(seeds.len());
    let mut obs = Vec::with_capacity(seeds.len());
    for (i, &s) in seeds.iter().enumerate() {
        let env = ToyEnv::new(scene.clone(), cfg.clone(), s).map_err(|error| PpoError::Env { index: i, error })?;
        obs.push(env.observe());
        envs.push(env);
    }
    let mut results: Vec<Option<EpisodeMetrics>> = vec![None; seeds.len()];
    loop {
        let live: Vec<usize> = (0..envs.len()).filter(|&i| results[i].is_none()).collect();
        if live.is_empty() {
            break;
        }
        let refs: Vec<&PolicySample> = live.iter().map(|&i| &obs[i]).collect();
        let actions = policy(&refs)?;
        if actions.len() != live.len() {
            return Err(PpoError::State(format!("policy returned {} actions for {} envs", actions.len(), live.len())));
        }
        for (&i, a) in live.iter().zip(&actions) {
            let r = envs[i].step(a).map_err(|error| PpoError::Env { index: i, error })?;
            obs[i] = r.sample;
            if r.done {
                results[i] = r.episode;
            }
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every episode finished")).collect())
}

/// Deterministic (mean-action) evaluation of `model`.
pub fn evaluate_policy(
    model: &dyn PolicyModel,
    scene: Arc<Scene>,
    cfg: &EnvConfig,
    seeds: &[u64],
) -> Result<(EvalSummary, Vec<EpisodeMetrics>), PpoError> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let eps = run_episodes(scene, cfg, seeds, |batch| {
        Ok(act(model, batch, &mut rng, true)?.into_iter().map(|o| o.action).collect())
    })?;
    Ok((batch_metrics(&eps).into(), eps))
}
