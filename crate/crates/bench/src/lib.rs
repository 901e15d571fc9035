//! Shared fixtures for the benchmarks: a scene and a batch of observations
//! taken from real environment states.

use std::sync::Arc;

use physgraph::encoder::PolicySample;
use physgraph::{EnvConfig, GraphSpec, Scene, ToyEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scene(fingers: usize, links: usize) -> Arc<Scene> {
    Arc::new(Scene::new(&GraphSpec::bimanual(fingers, links), None).expect("bench scene"))
}

/// `n` observations from envs stepped a few times with small random actions.
pub fn samples(scene: &Arc<Scene>, n: usize, seed: u64) -> Vec<PolicySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EnvConfig {
        horizon: 120,
        ..EnvConfig::default()
    };
    (0..n)
        .map(|i| {
            let mut env = ToyEnv::new(scene.clone(), cfg.clone(), seed + i as u64).expect("bench env");
            let mut s = env.observe();
            for _ in 0..rng.random_range(0..10) {
                let mut a = env.reference_action();
                a.iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
                let r = env.step(&a).expect("bench step");
                if r.done {
                    break;
                }
                s = r.sample;
            }
            s
        })
        .collect()
}
