//! Policy networks: the kinematic-graph transformer and the flat-MLP
//! baseline, both behind [`PolicyModel`] so the trainer is architecture-agnostic.

mod baseline;
mod physgraph;
mod tokens;

pub use baseline::{BaselineConfig, MlpBaseline};
pub use physgraph::{EncodeOutput, EncoderConfig, PhysGraphNet};
pub use tokens::{TokenDesc, TokenMap, TokenSignature, BODY_FEATURES, HAND_FEATURES, LINK_FEATURES};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::biasgen::BiasParams;
use crate::kingraph::ContactSet;
use crate::nncore::{NnError, ParamId, ParamStore, Tape, Tensor, Var, LOG_STD_MAX, LOG_STD_MIN};

/// Architecture selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "physgraph")]
    PhysGraph,
    /// Same transformer with every bias coefficient frozen at zero.
    #[serde(rename = "physgraph-nobias")]
    PhysGraphNoBias,
    #[serde(rename = "mlp-baseline")]
    MlpBaseline,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::PhysGraph, Arch::PhysGraphNoBias, Arch::MlpBaseline];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::PhysGraph => "physgraph",
            Arch::PhysGraphNoBias => "physgraph-nobias",
            Arch::MlpBaseline => "mlp-baseline",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown architecture `{s}` (expected physgraph, physgraph-nobias or mlp-baseline)"))
    }
}

/// Everything a policy needs for one decision: the flat observation (token
/// features concatenated in token-map order) plus the node positions and
/// contacts that drive the bias generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub obs: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
    pub contacts: ContactSet,
}

/// Tape handles for a batch forward pass.
pub struct PolicyHeads {
    /// `[B, A]`
    pub mu: Var,
    /// `[A]`, raw (unclamped) parameter.
    pub log_std: Var,
    /// `[B, 1]`
    pub value: Var,
}

/// Gaussian action distribution and value for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub mu: Vec<f64>,
    /// Clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

pub trait PolicyModel {
    fn arch(&self) -> Arch;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn action_dim(&self) -> usize;
    fn log_std_id(&self) -> ParamId;
    fn token_map(&self) -> &TokenMap;
    /// Forward pass reading parameters from `store`, which must share this model's layout.
    fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &[&PolicySample]) -> Result<PolicyHeads, NnError>;
    fn forward(&self, tape: &mut Tape, batch: &[&PolicySample]) -> Result<PolicyHeads, NnError> {
        self.forward_with(tape, self.store(), batch)
    }
    /// Scalar parameter counts per submodule.
    fn param_breakdown(&self) -> Vec<(String, usize)>;
    fn bias_params(&self) -> Option<&BiasParams> {
        None
    }
}

/// Exact number of scalar parameters.
pub fn param_count(model: &dyn PolicyModel) -> usize {
    model.store().num_scalars()
}

fn clamp_log_std(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
}

/// Distribution parameters and values for a batch (no sampling).
pub fn policy_outputs(model: &dyn PolicyModel, batch: &[&PolicySample]) -> Result<Vec<PolicyOutput>, NnError> {
    let mut tape = Tape::new();
    let h = model.forward(&mut tape, batch)?;
    let a = model.action_dim();
    let mu = tape.value(h.mu).data();
    let ls = clamp_log_std(tape.value(h.log_std).data());
    let v = tape.value(h.value).data();
    Ok((0..batch.len())
        .map(|b| PolicyOutput {
            mu: mu[b * a..(b + 1) * a].to_vec(),
            log_std: ls.clone(),
            value: v[b],
        })
        .collect())
}

/// Samples `mu + exp(log_std) * eps`, or returns `mu` when `deterministic`.
pub fn act<R: Rng + ?Sized>(
    model: &dyn PolicyModel,
    batch: &[&PolicySample],
    rng: &mut R,
    deterministic: bool,
) -> Result<Vec<ActOutput>, NnError> {
    let outs = policy_outputs(model, batch)?;
    let ln2pi = (2.0 * PI).ln();
    Ok(outs
        .into_iter()
        .map(|o| {
            let mut action = Vec::with_capacity(o.mu.len());
            let mut log_prob = 0.0;
            for (m, ls) in o.mu.iter().zip(&o.log_std) {
                let eps: f64 = if deterministic { 0.0 } else { StandardNormal.sample(rng) };
                action.push(m + ls.exp() * eps);
                log_prob += eps * eps + 2.0 * ls + ln2pi;
            }
            ActOutput {
                action,
                log_prob: -0.5 * log_prob,
                value: o.value,
            }
        })
        .collect())
}

/// Handles produced by [`evaluate`].
pub struct EvalVars {
    /// `[B]`
    pub log_probs: Var,
    /// Scalar; identical for every sample of a diagonal Gaussian.
    pub entropy: Var,
    /// `[B, 1]`
    pub values: Var,
}

/// Re-evaluates stored actions under the current parameters.
pub fn evaluate(
    model: &dyn PolicyModel,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &[&PolicySample],
    actions: &[&[f64]],
) -> Result<EvalVars, NnError> {
    let a = model.action_dim();
    if actions.len() != batch.len() || actions.iter().any(|x| x.len() != a) {
        return Err(NnError::ShapeMismatch {
            op: "evaluate",
            lhs: vec![batch.len(), a],
            rhs: vec![actions.len(), actions.first().map_or(0, |x| x.len())],
        });
    }
    let h = model.forward_with(tape, store, batch)?;
    let flat: Vec<f64> = actions.iter().flat_map(|x| x.iter().copied()).collect();
    let actions = Tensor::new(&[batch.len(), a], flat)?;
    let log_probs = tape.gaussian_log_prob(h.mu, h.log_std, actions)?;
    let entropy = tape.gaussian_entropy(h.log_std);
    Ok(EvalVars {
        log_probs,
        entropy,
        values: h.value,
    })
}

/// Stack of affine layers with ELU between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Fan-in uniform init; the last layer's weights are multiplied by `last_scale`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        last_scale: f64,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut weight = Tensor::uniform(&[fan_in, fan_out], bound, rng);
            if i + 2 == dims.len() {
                weight = weight.map(|x| x * last_scale);
            }
            let wid = store.add(format!("{prefix}.{i}.weight"), weight)?;
            let bid = store.add(format!("{prefix}.{i}.bias"), Tensor::uniform(&[fan_out], bound, rng))?;
            layers.push((wid, bid));
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var, NnError> {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, *w);
            let bv = tape.param(store, *b);
            x = tape.linear(x, wv, bv)?;
            if i + 1 < self.layers.len() {
                x = tape.elu(x);
            }
        }
        Ok(x)
    }
}

pub(crate) fn linear_param<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId), NnError> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.add(format!("{name}.weight"), Tensor::uniform(&[fan_in, fan_out], bound, rng))?;
    let b = store.add(format!("{name}.bias"), Tensor::uniform(&[fan_out], bound, rng))?;
    Ok((w, b))
}

#[cfg(test)]
mod tests;
