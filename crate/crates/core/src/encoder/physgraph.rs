use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokens::{TokenMap, TokenSignature};
use super::{linear_param, Arch, Mlp, PolicyHeads, PolicyModel, PolicySample};
use crate::biasgen::{composite_bias, lift_indices, BiasConfig, BiasParams, GraphBiasCache};
use crate::kingraph::KinematicGraph;
use crate::nncore::{NnError, ParamId, ParamStore, RowPlacement, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Hidden widths of the policy and value heads.
    pub head_hidden: Vec<usize>,
    pub init_log_std: f64,
    pub ln_eps: f64,
    pub bias: BiasConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 8,
            layers: 3,
            d_ff: 256,
            head_hidden: vec![128],
            init_log_std: -0.5,
            ln_eps: 1e-5,
            bias: BiasConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.d_ff == 0 {
            return Err(NnError::Invalid("encoder dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(NnError::Invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        self.bias.allocation(self.heads).validate(self.heads).map_err(NnError::Invalid)
    }
}

#[derive(Clone, Debug)]
struct Tokenizer {
    signature: TokenSignature,
    tokens: Vec<usize>,
    proj: (ParamId, ParamId),
    norm: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Encoder activations kept for inspection.
pub struct EncodeOutput {
    /// `[B, T, d]`, before the final layer norm.
    pub tokens: Var,
    /// One attention node per layer; see [`Tape::attention_weights`].
    pub attention: Vec<Var>,
    /// Token-space bias `[B, H, T, T]`, absent in the no-bias variant.
    pub bias: Option<Var>,
}

/// Kinematic-graph transformer policy.
pub struct PhysGraphNet {
    cfg: EncoderConfig,
    arch: Arch,
    graph: KinematicGraph,
    token_map: TokenMap,
    token_nodes: Vec<Option<crate::kingraph::NodeId>>,
    cache: GraphBiasCache,
    store: ParamStore,
    tokenizers: Vec<Tokenizer>,
    policy_token: ParamId,
    layers: Vec<Layer>,
    final_ln: (ParamId, ParamId),
    pi: Mlp,
    vf: Mlp,
    log_std: ParamId,
    bias: BiasParams,
    action_dim: usize,
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) -> Result<(ParamId, ParamId), NnError> {
    Ok((
        store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?,
        store.add(format!("{name}.shift"), Tensor::zeros(&[d]))?,
    ))
}

impl PhysGraphNet {
    /// `arch` must be `PhysGraph` or `PhysGraphNoBias`.
    pub fn new(graph: &KinematicGraph, action_dim: usize, cfg: EncoderConfig, arch: Arch, seed: u64) -> Result<Self, NnError> {
        if arch == Arch::MlpBaseline {
            return Err(NnError::Invalid("PhysGraphNet cannot be built as mlp-baseline".into()));
        }
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_map = TokenMap::new(graph)?;
        let d = cfg.d_model;
        let mut store = ParamStore::new();

        let mut tokenizers = Vec::new();
        for (sig, tokens) in token_map.signature_groups() {
            let name = format!("tokenizer.{}", sig.label());
            let proj = linear_param(&mut store, &name, sig.width(), d, &mut rng)?;
            let norm = norm_params(&mut store, &format!("{name}.norm"), d)?;
            tokenizers.push(Tokenizer {
                signature: sig,
                tokens,
                proj,
                norm,
            });
        }
        let policy_token = store.add("policy_token", Tensor::randn(&[1, d], 0.02, &mut rng))?;

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            layers.push(Layer {
                ln1: norm_params(&mut store, &format!("{p}.ln1"), d)?,
                q: linear_param(&mut store, &format!("{p}.attn.q"), d, d, &mut rng)?,
                k: linear_param(&mut store, &format!("{p}.attn.k"), d, d, &mut rng)?,
                v: linear_param(&mut store, &format!("{p}.attn.v"), d, d, &mut rng)?,
                o: linear_param(&mut store, &format!("{p}.attn.o"), d, d, &mut rng)?,
                ln2: norm_params(&mut store, &format!("{p}.ln2"), d)?,
                ff1: linear_param(&mut store, &format!("{p}.ff1"), d, cfg.d_ff, &mut rng)?,
                ff2: linear_param(&mut store, &format!("{p}.ff2"), cfg.d_ff, d, &mut rng)?,
            });
        }
        let final_ln = norm_params(&mut store, "final_ln", d)?;

        let mut dims = vec![d];
        dims.extend(&cfg.head_hidden);
        dims.push(action_dim);
        let pi = Mlp::register(&mut store, "pi", &dims, 0.01, &mut rng)?;
        *dims.last_mut().unwrap() = 1;
        let vf = Mlp::register(&mut store, "vf", &dims, 1.0, &mut rng)?;
        let log_std = store.add("log_std", Tensor::full(&[action_dim], cfg.init_log_std))?;

        let bias = BiasParams::register(&mut store, "bias.", cfg.heads, &cfg.bias, &mut rng)?;
        if arch == Arch::PhysGraphNoBias {
            bias.freeze_lambdas_at_zero(&mut store);
        }
        let cache = GraphBiasCache::new(graph, cfg.heads, &cfg.bias)?;

        Ok(Self {
            token_nodes: token_map.token_nodes(),
            cfg,
            arch,
            graph: graph.clone(),
            token_map,
            cache,
            store,
            tokenizers,
            policy_token,
            layers,
            final_ln,
            pi,
            vf,
            log_std,
            bias,
            action_dim,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &KinematicGraph {
        &self.graph
    }

    pub fn bias_cache(&self) -> &GraphBiasCache {
        &self.cache
    }

    fn use_bias(&self) -> bool {
        self.arch == Arch::PhysGraph
    }

    /// Token embeddings `[B, T, d]`.
    pub fn tokenize(&self, tape: &mut Tape, store: &ParamStore, batch: &[&PolicySample]) -> Result<Var, NnError> {
        let b = batch.len();
        let d = self.cfg.d_model;
        let width = self.token_map.obs_width();
        if let Some(s) = batch.iter().find(|s| s.obs.len() != width) {
            return Err(NnError::ShapeMismatch {
                op: "tokenize",
                lhs: vec![s.obs.len()],
                rhs: vec![width],
            });
        }
        let mut placements = Vec::with_capacity(self.tokenizers.len() + 1);
        let pol = tape.param(store, self.policy_token);
        placements.push(RowPlacement {
            var: pol,
            rows: vec![0],
            broadcast: true,
        });
        for tk in &self.tokenizers {
            let w = tk.signature.width();
            let n = tk.tokens.len();
            let mut feats = Vec::with_capacity(b * n * w);
            for s in batch {
                for &t in &tk.tokens {
                    feats.extend_from_slice(self.token_map.slice(&s.obs, t));
                }
            }
            let x = tape.constant(Tensor::new(&[b, n, w], feats)?);
            let (pw, pb) = (tape.param(store, tk.proj.0), tape.param(store, tk.proj.1));
            let y = tape.linear(x, pw, pb)?;
            let (g, sh) = (tape.param(store, tk.norm.0), tape.param(store, tk.norm.1));
            let y = tape.layer_norm(y, g, sh, self.cfg.ln_eps)?;
            placements.push(RowPlacement {
                var: y,
                rows: tk.tokens.clone(),
                broadcast: false,
            });
        }
        tape.assemble(b, self.token_map.len(), d, placements)
    }

    /// Composite bias lifted to token space, `[B, H, T, T]`.
    pub fn token_bias(&self, tape: &mut Tape, store: &ParamStore, batch: &[&PolicySample]) -> Result<Var, NnError> {
        let contacts: Vec<_> = batch.iter().map(|s| s.contacts.clone()).collect();
        let positions: Vec<_> = batch.iter().map(|s| s.positions.clone()).collect();
        let c = composite_bias(tape, store, &self.bias, &self.cache, &contacts, &positions)?;
        let n = self.cache.n;
        let h = self.cfg.heads;
        let t = self.token_nodes.len();
        tape.gather(
            c.composite,
            lift_indices(&self.token_nodes, n, h),
            h * n * n,
            &[batch.len(), h, t, t],
        )
    }

    /// Runs the transformer stack. The same bias is added in every layer.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, batch: &[&PolicySample]) -> Result<EncodeOutput, NnError> {
        let mut x = self.tokenize(tape, store, batch)?;
        let bias = if self.use_bias() {
            Some(self.token_bias(tape, store, batch)?)
        } else {
            None
        };
        let p = |tape: &mut Tape, ids: (ParamId, ParamId)| (tape.param(store, ids.0), tape.param(store, ids.1));
        let mut attention = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let (g, s) = p(tape, layer.ln1);
            let h = tape.layer_norm(x, g, s, self.cfg.ln_eps)?;
            let (w, b) = p(tape, layer.q);
            let q = tape.linear(h, w, b)?;
            let (w, b) = p(tape, layer.k);
            let k = tape.linear(h, w, b)?;
            let (w, b) = p(tape, layer.v);
            let v = tape.linear(h, w, b)?;
            let a = tape.attention(q, k, v, bias, self.cfg.heads)?;
            if !tape.value(a).is_finite() {
                return Err(self.nonfinite_error(tape, a, li));
            }
            attention.push(a);
            let (w, b) = p(tape, layer.o);
            let o = tape.linear(a, w, b)?;
            x = tape.add(x, o)?;
            let (g, s) = p(tape, layer.ln2);
            let h = tape.layer_norm(x, g, s, self.cfg.ln_eps)?;
            let (w, b) = p(tape, layer.ff1);
            let f = tape.linear(h, w, b)?;
            let f = tape.elu(f);
            let (w, b) = p(tape, layer.ff2);
            let f = tape.linear(f, w, b)?;
            x = tape.add(x, f)?;
        }
        Ok(EncodeOutput {
            tokens: x,
            attention,
            bias,
        })
    }

    fn nonfinite_error(&self, tape: &Tape, a: Var, layer: usize) -> NnError {
        let heads = self.cfg.heads;
        let out = tape.value(a);
        let dm = out.shape()[2];
        let dh = dm / heads;
        let head = out
            .data()
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i % dm) / dh)
            .unwrap_or(0);
        NnError::NonFinite(format!("attention output at layer {layer}, head {head}"))
    }
}

impl PolicyModel for PhysGraphNet {
    fn arch(&self) -> Arch {
        self.arch
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
        let b = batch.len();
        let d = self.cfg.d_model;
        let t = self.token_map.len();
        let enc = self.encode(tape, store, batch)?;
        let idx: Vec<usize> = (0..d).collect();
        let pol = tape.gather(enc.tokens, idx, t * d, &[b, d])?;
        let (g, s) = (tape.param(store, self.final_ln.0), tape.param(store, self.final_ln.1));
        let pol = tape.layer_norm(pol, g, s, self.cfg.ln_eps)?;
        let mu = self.pi.forward(tape, store, pol)?;
        let value = self.vf.forward(tape, store, pol)?;
        let log_std = tape.param(store, self.log_std);
        Ok(PolicyHeads { mu, log_std, value })
    }

    fn param_breakdown(&self) -> Vec<(String, usize)> {
        let s = &self.store;
        let mut out = vec![("tokenizers".to_string(), s.num_scalars_with_prefix("tokenizer."))];
        out.push(("policy_token".into(), s.num_scalars_with_prefix("policy_token")));
        out.push(("transformer".into(), s.num_scalars_with_prefix("layer") + s.num_scalars_with_prefix("final_ln")));
        out.push(("policy_head".into(), s.num_scalars_with_prefix("pi.") + s.num_scalars_with_prefix("log_std")));
        out.push(("value_head".into(), s.num_scalars_with_prefix("vf.")));
        for (name, n) in self.bias.count_breakdown() {
            out.push((format!("bias.{name}"), n));
        }
        out
    }

    fn bias_params(&self) -> Option<&BiasParams> {
        Some(&self.bias)
    }
}
