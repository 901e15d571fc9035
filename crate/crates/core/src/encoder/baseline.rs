use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokens::TokenMap;
use super::{Arch, Mlp, PolicyHeads, PolicyModel, PolicySample};
use crate::kingraph::KinematicGraph;
use crate::nncore::{NnError, ParamId, ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Trunk widths; `None` applies [`BaselineConfig::default_hidden`].
    pub hidden: Option<Vec<usize>>,
    pub init_log_std: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            init_log_std: -0.5,
        }
    }
}

impl BaselineConfig {
    /// `[p, p, p/2, p/2]` with `p` the smallest power of two not below the input width.
    pub fn default_hidden(obs_width: usize) -> Vec<usize> {
        let p = obs_width.max(2).next_power_of_two();
        vec![p, p, p / 2, p / 2]
    }

    pub fn hidden_for(&self, obs_width: usize) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| Self::default_hidden(obs_width))
    }
}

/// Flat-observation MLP sharing its trunk between policy and value heads.
pub struct MlpBaseline {
    token_map: TokenMap,
    store: ParamStore,
    trunk: Mlp,
    pi: Mlp,
    vf: Mlp,
    log_std: ParamId,
    action_dim: usize,
    hidden: Vec<usize>,
}

impl MlpBaseline {
    pub fn new(graph: &KinematicGraph, action_dim: usize, cfg: &BaselineConfig, seed: u64) -> Result<Self, NnError> {
        let token_map = TokenMap::new(graph)?;
        let hidden = cfg.hidden_for(token_map.obs_width());
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(NnError::Invalid(format!("invalid baseline hidden widths {hidden:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut dims = vec![token_map.obs_width()];
        dims.extend(&hidden);
        let trunk = Mlp::register(&mut store, "trunk", &dims, 1.0, &mut rng)?;
        let last = *hidden.last().unwrap();
        let pi = Mlp::register(&mut store, "pi", &[last, action_dim], 0.01, &mut rng)?;
        let vf = Mlp::register(&mut store, "vf", &[last, 1], 1.0, &mut rng)?;
        let log_std = store.add("log_std", Tensor::full(&[action_dim], cfg.init_log_std))?;
        Ok(Self {
            token_map,
            store,
            trunk,
            pi,
            vf,
            log_std,
            action_dim,
            hidden,
        })
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }
}

impl PolicyModel for MlpBaseline {
    fn arch(&self) -> Arch {
        Arch::MlpBaseline
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn log_std_id(&self) -> ParamId {
        self.log_std
    }

    fn token_map(&self) -> &TokenMap {
        &self.token_map
    }

    fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &[&PolicySample]) -> Result<PolicyHeads, NnError> {
        let w = self.token_map.obs_width();
        let mut flat = Vec::with_capacity(batch.len() * w);
        for s in batch {
            if s.obs.len() != w {
                return Err(NnError::ShapeMismatch {
                    op: "mlp forward",
                    lhs: vec![s.obs.len()],
                    rhs: vec![w],
                });
            }
            flat.extend_from_slice(&s.obs);
        }
        let x = tape.constant(Tensor::new(&[batch.len(), w], flat)?);
        let h = self.trunk.forward(tape, store, x)?;
        // the trunk's last layer is left linear by Mlp; activate it here
        let h = tape.elu(h);
        let mu = self.pi.forward(tape, store, h)?;
        let value = self.vf.forward(tape, store, h)?;
        let log_std = tape.param(store, self.log_std);
        Ok(PolicyHeads { mu, log_std, value })
    }

    fn param_breakdown(&self) -> Vec<(String, usize)> {
        let s = &self.store;
        vec![
            ("trunk".into(), s.num_scalars_with_prefix("trunk.")),
            ("policy_head".into(), s.num_scalars_with_prefix("pi.") + s.num_scalars_with_prefix("log_std")),
            ("value_head".into(), s.num_scalars_with_prefix("vf.")),
        ]
    }
}
