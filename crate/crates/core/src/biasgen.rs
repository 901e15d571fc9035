//! Physically grounded attention biases.
//!
//! Four node-space components per head (hop-distance embedding, edge-type
//! embedding, gated RBF proximity and anatomical soft bonuses) are mixed by
//! learnable coefficients into one composite bias per head, then lifted to
//! token space. All components are built on the [`Tape`], so every bias
//! parameter receives gradients from whatever objective consumes the bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kingraph::{ContactSet, KinematicGraph, NodeId, RelationMasks, HOP_INF};
use crate::nncore::{CustomOp, NnError, ParamId, ParamStore, Tape, Tensor, Var, GATHER_ZERO};

/// Which anatomical prior a head receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadGroup {
    Serial,
    Synergy,
    Global,
}

/// Disjoint split of the attention heads into serial, synergy and global groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadAllocation {
    pub serial: Vec<usize>,
    pub synergy: Vec<usize>,
    pub global: Vec<usize>,
}

impl HeadAllocation {
    /// First quarter serial, second quarter synergy, the rest global
    /// (`{0,1}`, `{2,3}`, `{4..7}` for eight heads).
    pub fn default_for(heads: usize) -> Self {
        let q = (heads / 4).max(usize::from(heads >= 3));
        Self {
            serial: (0..q).collect(),
            synergy: (q..2 * q).collect(),
            global: (2 * q..heads).collect(),
        }
    }

    pub fn validate(&self, heads: usize) -> Result<(), String> {
        let mut seen = vec![false; heads];
        for &h in self.serial.iter().chain(&self.synergy).chain(&self.global) {
            if h >= heads {
                return Err(format!("head {h} out of range for {heads} heads"));
            }
            if seen[h] {
                return Err(format!("head {h} assigned to more than one group"));
            }
            seen[h] = true;
        }
        if let Some(h) = seen.iter().position(|s| !s) {
            return Err(format!("head {h} not assigned to any group"));
        }
        Ok(())
    }

    pub fn group(&self, h: usize) -> HeadGroup {
        if self.serial.contains(&h) {
            HeadGroup::Serial
        } else if self.synergy.contains(&h) {
            HeadGroup::Synergy
        } else {
            HeadGroup::Global
        }
    }
}

/// Structural bias settings plus initial values for the learnable coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasConfig {
    pub d_max: u32,
    /// Geometric gate: only pairs with `hop > d0` receive proximity bias.
    pub d0: u32,
    /// `None` uses [`HeadAllocation::default_for`].
    pub allocation: Option<HeadAllocation>,
    pub init_lambda: f64,
    pub init_table_std: f64,
    pub init_w_geo: f64,
    pub init_sigma: f64,
    pub init_alpha: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            d_max: 8,
            d0: 2,
            allocation: None,
            init_lambda: 1.0,
            init_table_std: 0.02,
            init_w_geo: 0.1,
            init_sigma: 0.1,
            init_alpha: 0.5,
        }
    }
}

impl BiasConfig {
    pub fn allocation(&self, heads: usize) -> HeadAllocation {
        self.allocation
            .clone()
            .unwrap_or_else(|| HeadAllocation::default_for(heads))
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameter handles for the bias generator. `sigma` is stored through its
/// softplus pre-image so the bandwidth stays strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasParams {
    pub heads: usize,
    pub d_max: u32,
    pub spatial_table: ParamId,
    pub edge_table: ParamId,
    pub w_geo: ParamId,
    pub sigma_raw: ParamId,
    pub lambda_sp: ParamId,
    pub lambda_edge: ParamId,
    pub lambda_geo: ParamId,
    pub lambda_anat: ParamId,
    pub alpha_ser: ParamId,
    pub alpha_syn: ParamId,
}

/// Plain snapshot of the bias parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasValues {
    pub spatial_table: Vec<f64>,
    pub edge_table: Vec<f64>,
    pub w_geo: Vec<f64>,
    pub sigma: f64,
    pub lambda_sp: f64,
    pub lambda_edge: f64,
    pub lambda_geo: f64,
    pub lambda_anat: Vec<f64>,
    pub alpha_ser: f64,
    pub alpha_syn: f64,
}

impl BiasParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        heads: usize,
        cfg: &BiasConfig,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let d = cfg.d_max as usize + 1;
        let scalar = |v: f64| Tensor::scalar(v);
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}{name}"), t);
        Ok(Self {
            heads,
            d_max: cfg.d_max,
            spatial_table: add("spatial_table", Tensor::randn(&[heads, d], cfg.init_table_std, rng))?,
            edge_table: add("edge_table", Tensor::randn(&[heads, 4], cfg.init_table_std, rng))?,
            w_geo: add("w_geo", Tensor::full(&[heads], cfg.init_w_geo))?,
            sigma_raw: add("sigma_raw", scalar(softplus_inverse(cfg.init_sigma)))?,
            lambda_sp: add("lambda_sp", scalar(cfg.init_lambda))?,
            lambda_edge: add("lambda_edge", scalar(cfg.init_lambda))?,
            lambda_geo: add("lambda_geo", scalar(cfg.init_lambda))?,
            lambda_anat: add("lambda_anat", Tensor::full(&[heads], cfg.init_lambda))?,
            alpha_ser: add("alpha_ser", scalar(cfg.init_alpha))?,
            alpha_syn: add("alpha_syn", scalar(cfg.init_alpha))?,
        })
    }

    pub fn lambda_ids(&self) -> [ParamId; 4] {
        [self.lambda_sp, self.lambda_edge, self.lambda_geo, self.lambda_anat]
    }

    pub fn all_ids(&self) -> [ParamId; 10] {
        [
            self.spatial_table,
            self.edge_table,
            self.w_geo,
            self.sigma_raw,
            self.lambda_sp,
            self.lambda_edge,
            self.lambda_geo,
            self.lambda_anat,
            self.alpha_ser,
            self.alpha_syn,
        ]
    }

    /// Zeroes every mixing coefficient and removes them from optimization.
    pub fn freeze_lambdas_at_zero(&self, store: &mut ParamStore) {
        for id in self.lambda_ids() {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            store.set_trainable(id, false);
        }
    }

    pub fn values(&self, store: &ParamStore) -> BiasValues {
        let v = |id| store.value(id).data().to_vec();
        let s = |id| store.value(id).item();
        BiasValues {
            spatial_table: v(self.spatial_table),
            edge_table: v(self.edge_table),
            w_geo: v(self.w_geo),
            sigma: softplus(s(self.sigma_raw)),
            lambda_sp: s(self.lambda_sp),
            lambda_edge: s(self.lambda_edge),
            lambda_geo: s(self.lambda_geo),
            lambda_anat: v(self.lambda_anat),
            alpha_ser: s(self.alpha_ser),
            alpha_syn: s(self.alpha_syn),
        }
    }

    /// Line-itemized scalar counts.
    pub fn count_breakdown(&self) -> Vec<(&'static str, usize)> {
        let h = self.heads;
        vec![
            ("spatial_table", h * (self.d_max as usize + 1)),
            ("edge_table", h * 4),
            ("w_geo", h),
            ("lambda_anat", h),
            ("lambda_sp+lambda_edge+lambda_geo", 3),
            ("alpha_ser+alpha_syn", 2),
            ("sigma_raw", 1),
        ]
    }
}

/// Per-graph static buffers: hop lookup indices, geometric gate, relation
/// masks and the sparse bone list. Built once per graph.
#[derive(Clone, Debug)]
pub struct GraphBiasCache {
    pub n: usize,
    pub heads: usize,
    pub d_max: u32,
    pub d0: u32,
    spatial_idx: Vec<usize>,
    gate: Vec<bool>,
    masks: RelationMasks,
    bones: Vec<(usize, usize)>,
    allocation: HeadAllocation,
}

impl GraphBiasCache {
    pub fn new(graph: &KinematicGraph, heads: usize, cfg: &BiasConfig) -> Result<Self, NnError> {
        let n = graph.n();
        let allocation = cfg.allocation(heads);
        allocation.validate(heads).map_err(NnError::Invalid)?;
        let d = cfg.d_max as usize + 1;
        let hop = graph.hop_matrix();
        let mut spatial_idx = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            spatial_idx.extend(hop.iter().map(|&k| h * d + k.min(cfg.d_max) as usize));
        }
        let gate = hop.iter().map(|&k| k == HOP_INF || k > cfg.d0).collect();
        Ok(Self {
            n,
            heads,
            d_max: cfg.d_max,
            d0: cfg.d0,
            spatial_idx,
            gate,
            masks: graph.relation_masks(),
            bones: graph.bone_edges().iter().map(|(u, v)| (u.0, v.0)).collect(),
            allocation,
        })
    }

    pub fn allocation(&self) -> &HeadAllocation {
        &self.allocation
    }

    pub fn masks(&self) -> &RelationMasks {
        &self.masks
    }

    /// True when the geometric gate is open for `(u, v)`.
    pub fn gate(&self, u: usize, v: usize) -> bool {
        self.gate[u * self.n + v]
    }
}

/// `[H, N, N]`: `table[h][min(hop(u,v), d_max)]`.
pub fn spatial_bias(tape: &mut Tape, store: &ParamStore, p: &BiasParams, cache: &GraphBiasCache) -> Result<Var, NnError> {
    let table = tape.param(store, p.spatial_table);
    let block = tape.value(table).len();
    let n = cache.n;
    tape.gather(table, cache.spatial_idx.clone(), block, &[cache.heads, n, n])
}

struct EdgeBiasOp {
    heads: usize,
    n: usize,
    /// Per sample: `(u, v, edge type)` for every entry that is not "disconnected", both orientations.
    overrides: Vec<Vec<(usize, usize, usize)>>,
}

impl CustomOp for EdgeBiasOp {
    fn name(&self) -> &'static str {
        "edge_bias"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        if !needs[0] {
            return vec![None];
        }
        let (h_count, n) = (self.heads, self.n);
        let mut d = vec![0.0; h_count * 4];
        let g = grad.data();
        for (b, ov) in self.overrides.iter().enumerate() {
            for h in 0..h_count {
                let base = (b * h_count + h) * n * n;
                d[h * 4] += g[base..base + n * n].iter().sum::<f64>();
                for &(u, v, t) in ov {
                    let gv = g[base + u * n + v];
                    d[h * 4] -= gv;
                    d[h * 4 + t] += gv;
                }
            }
        }
        vec![Some(Tensor::new(&[h_count, 4], d).unwrap())]
    }
}

/// `[B, H, N, N]`: `edge_table[h][type(u,v)]` for each sample's contact set.
///
/// Starts from the disconnected embedding and writes the sparse static
/// entries (diagonal, bone pairs) and the sparse contact pairs on top; no
/// dense per-step edge-type matrix is built.
pub fn edge_bias(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BiasParams,
    cache: &GraphBiasCache,
    contacts: &[ContactSet],
) -> Result<Var, NnError> {
    let table = tape.param(store, p.edge_table);
    let tv = tape.value(table).data().to_vec();
    let (heads, n) = (cache.heads, cache.n);
    let batch = contacts.len();
    let mut overrides = Vec::with_capacity(batch);
    for c in contacts {
        let mut ov = Vec::with_capacity(n + 2 * (cache.bones.len() + c.len()));
        for u in 0..n {
            ov.push((u, u, 3));
        }
        for &(u, v) in &cache.bones {
            if !c.contains(NodeId(u), NodeId(v)) {
                ov.push((u, v, 1));
                ov.push((v, u, 1));
            }
        }
        for (u, v) in c.iter() {
            if u.0 >= n || v.0 >= n {
                return Err(NnError::Invalid(format!("contact ({u}, {v}) outside graph of {n} nodes")));
            }
            ov.push((u.0, v.0, 2));
            ov.push((v.0, u.0, 2));
        }
        overrides.push(ov);
    }
    let mut out = vec![0.0; batch * heads * n * n];
    for (b, ov) in overrides.iter().enumerate() {
        for h in 0..heads {
            let base = (b * heads + h) * n * n;
            out[base..base + n * n].fill(tv[h * 4]);
            for &(u, v, t) in ov {
                out[base + u * n + v] = tv[h * 4 + t];
            }
        }
    }
    let value = Tensor::new(&[batch, heads, n, n], out)?;
    Ok(tape.custom(vec![table], value, Box::new(EdgeBiasOp { heads, n, overrides })))
}

struct GeoBiasOp {
    heads: usize,
    n: usize,
    /// Gated kernel values and squared distances, `[B, N, N]`.
    kernel: Vec<f64>,
    dist2: Vec<f64>,
}

impl CustomOp for GeoBiasOp {
    fn name(&self) -> &'static str {
        "geometric_bias"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (w, rho) = (inputs[0].data(), inputs[1].item());
        let sigma = softplus(rho);
        let nn = self.n * self.n;
        let batch = self.kernel.len() / nn;
        let g = grad.data();
        let mut dw = vec![0.0; self.heads];
        let mut dsigma = 0.0;
        for b in 0..batch {
            let k = &self.kernel[b * nn..(b + 1) * nn];
            let d2 = &self.dist2[b * nn..(b + 1) * nn];
            for h in 0..self.heads {
                let gs = &g[(b * self.heads + h) * nn..][..nn];
                let mut acc_w = 0.0;
                let mut acc_s = 0.0;
                for i in 0..nn {
                    if k[i] != 0.0 {
                        acc_w += gs[i] * k[i];
                        acc_s += gs[i] * k[i] * d2[i];
                    }
                }
                dw[h] += acc_w;
                dsigma += w[h] * acc_s;
            }
        }
        let drho = dsigma / (sigma * sigma * sigma) * sigmoid(rho);
        vec![
            needs[0].then(|| Tensor::new(inputs[0].shape(), dw).unwrap()),
            needs[1].then(|| Tensor::new(inputs[1].shape(), vec![drho]).unwrap()),
        ]
    }
}

/// `[B, H, N, N]`: `1[hop > d0] * w_geo[h] * exp(-|p_u - p_v|^2 / (2 sigma^2))`.
/// Disconnected pairs count as `hop > d0`.
pub fn geometric_bias(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BiasParams,
    cache: &GraphBiasCache,
    positions: &[Vec<[f64; 3]>],
) -> Result<Var, NnError> {
    let w = tape.param(store, p.w_geo);
    let rho = tape.param(store, p.sigma_raw);
    let sigma = softplus(tape.value(rho).item());
    let wv = tape.value(w).data().to_vec();
    let (heads, n) = (cache.heads, cache.n);
    let nn = n * n;
    let batch = positions.len();
    let mut kernel = vec![0.0; batch * nn];
    let mut dist2 = vec![0.0; batch * nn];
    for (b, pos) in positions.iter().enumerate() {
        if pos.len() != n {
            return Err(NnError::Invalid(format!("sample {b}: {} positions for {n} nodes", pos.len())));
        }
        for u in 0..n {
            for v in 0..n {
                if !cache.gate[u * n + v] {
                    continue;
                }
                let d2: f64 = (0..3).map(|k| (pos[u][k] - pos[v][k]).powi(2)).sum();
                dist2[b * nn + u * n + v] = d2;
                kernel[b * nn + u * n + v] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let mut out = vec![0.0; batch * heads * nn];
    for b in 0..batch {
        for h in 0..heads {
            let o = &mut out[(b * heads + h) * nn..][..nn];
            for (x, k) in o.iter_mut().zip(&kernel[b * nn..(b + 1) * nn]) {
                *x = wv[h] * k;
            }
        }
    }
    let value = Tensor::new(&[batch, heads, n, n], out)?;
    Ok(tape.custom(
        vec![w, rho],
        value,
        Box::new(GeoBiasOp {
            heads,
            n,
            kernel,
            dist2,
        }),
    ))
}

struct AnatBiasOp {
    /// Per head: 0 serial, 1 synergy, 2 global.
    groups: Vec<u8>,
    serial: Vec<bool>,
    synergy: Vec<bool>,
}

impl CustomOp for AnatBiasOp {
    fn name(&self) -> &'static str {
        "anatomical_bias"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let nn = self.serial.len();
        let g = grad.data();
        let (mut ds, mut dy) = (0.0, 0.0);
        for (h, grp) in self.groups.iter().enumerate() {
            let gs = &g[h * nn..(h + 1) * nn];
            match grp {
                0 => ds += gs.iter().zip(&self.serial).filter(|(_, m)| **m).map(|(x, _)| x).sum::<f64>(),
                1 => dy += gs.iter().zip(&self.synergy).filter(|(_, m)| **m).map(|(x, _)| x).sum::<f64>(),
                _ => {}
            }
        }
        vec![
            needs[0].then(|| Tensor::scalar(ds)),
            needs[1].then(|| Tensor::scalar(dy)),
        ]
    }
}

/// `[H, N, N]`: `alpha_ser * S` on serial heads, `alpha_syn * Y` on synergy heads, zero on global heads.
pub fn anatomical_bias(tape: &mut Tape, store: &ParamStore, p: &BiasParams, cache: &GraphBiasCache) -> Result<Var, NnError> {
    let a_ser = tape.param(store, p.alpha_ser);
    let a_syn = tape.param(store, p.alpha_syn);
    let (vs, vy) = (tape.value(a_ser).item(), tape.value(a_syn).item());
    let (heads, n) = (cache.heads, cache.n);
    let nn = n * n;
    let groups: Vec<u8> = (0..heads)
        .map(|h| match cache.allocation.group(h) {
            HeadGroup::Serial => 0,
            HeadGroup::Synergy => 1,
            HeadGroup::Global => 2,
        })
        .collect();
    let mut out = vec![0.0; heads * nn];
    for (h, grp) in groups.iter().enumerate() {
        let o = &mut out[h * nn..(h + 1) * nn];
        match grp {
            0 => o.iter_mut().zip(&cache.masks.serial).for_each(|(x, m)| *x = if *m { vs } else { 0.0 }),
            1 => o.iter_mut().zip(&cache.masks.synergy).for_each(|(x, m)| *x = if *m { vy } else { 0.0 }),
            _ => {}
        }
    }
    let value = Tensor::new(&[heads, n, n], out)?;
    Ok(tape.custom(
        vec![a_ser, a_syn],
        value,
        Box::new(AnatBiasOp {
            groups,
            serial: cache.masks.serial.clone(),
            synergy: cache.masks.synergy.clone(),
        }),
    ))
}

/// Node-space bias components and their weighted sum, all `[B, H, N, N]`
/// except `spatial` and `anatomical`, which are batch-independent `[H, N, N]`.
pub struct BiasComponents {
    pub spatial: Var,
    pub edge: Var,
    pub geometric: Var,
    pub anatomical: Var,
    pub composite: Var,
}

/// `lambda_sp * B_sp + lambda_edge * B_edge + lambda_geo * B_geo + lambda_anat[h] * B_anat`.
pub fn composite_bias(
    tape: &mut Tape,
    store: &ParamStore,
    p: &BiasParams,
    cache: &GraphBiasCache,
    contacts: &[ContactSet],
    positions: &[Vec<[f64; 3]>],
) -> Result<BiasComponents, NnError> {
    if contacts.len() != positions.len() {
        return Err(NnError::Invalid(format!(
            "{} contact sets for {} position sets",
            contacts.len(),
            positions.len()
        )));
    }
    let nn = cache.n * cache.n;
    let spatial = spatial_bias(tape, store, p, cache)?;
    let edge = edge_bias(tape, store, p, cache, contacts)?;
    let geometric = geometric_bias(tape, store, p, cache, positions)?;
    let anatomical = anatomical_bias(tape, store, p, cache)?;
    let l_sp = tape.param(store, p.lambda_sp);
    let l_edge = tape.param(store, p.lambda_edge);
    let l_geo = tape.param(store, p.lambda_geo);
    let l_anat = tape.param(store, p.lambda_anat);
    let e = tape.scale_by(edge, l_edge)?;
    let g = tape.scale_by(geometric, l_geo)?;
    let s = tape.scale_by(spatial, l_sp)?;
    let a = tape.scale_axis(anatomical, l_anat, nn)?;
    let eg = tape.add(e, g)?;
    let egs = tape.add(eg, s)?;
    let composite = tape.add(egs, a)?;
    Ok(BiasComponents {
        spatial,
        edge,
        geometric,
        anatomical,
        composite,
    })
}

/// Token-space gather indices: token `i` maps to node `token_nodes[i]`, or
/// to nothing (zero row and column, used for the policy token).
pub fn lift_indices(token_nodes: &[Option<NodeId>], n: usize, heads: usize) -> Vec<usize> {
    let t = token_nodes.len();
    let mut idx = Vec::with_capacity(heads * t * t);
    for h in 0..heads {
        for ti in token_nodes {
            for tj in token_nodes {
                idx.push(match (ti, tj) {
                    (Some(u), Some(v)) => h * n * n + u.0 * n + v.0,
                    _ => GATHER_ZERO,
                });
            }
        }
    }
    idx
}

/// Lifts a `[B, H, N, N]` node-space bias to `[B, H, T, T]` token space.
pub fn lift_to_tokens(
    tape: &mut Tape,
    node_bias: Var,
    token_nodes: &[Option<NodeId>],
    n: usize,
    heads: usize,
) -> Result<Var, NnError> {
    let nb = tape.value(node_bias);
    let block = heads * n * n;
    if nb.len() % block != 0 {
        return Err(NnError::ShapeMismatch {
            op: "lift_to_tokens",
            lhs: nb.shape().to_vec(),
            rhs: vec![heads, n, n],
        });
    }
    let batch = nb.len() / block;
    let t = token_nodes.len();
    tape.gather(node_bias, lift_indices(token_nodes, n, heads), block, &[batch, heads, t, t])
}

/// Evaluated node-space components for a single sample, each `[H, N, N]` row-major.
#[derive(Clone, Debug)]
pub struct NodeBiasSnapshot {
    pub heads: usize,
    pub n: usize,
    pub spatial: Vec<f64>,
    pub edge: Vec<f64>,
    pub geometric: Vec<f64>,
    pub anatomical: Vec<f64>,
    pub composite: Vec<f64>,
}

/// Evaluates all components for one `(contacts, positions)` sample.
pub fn evaluate_bias(
    store: &ParamStore,
    p: &BiasParams,
    cache: &GraphBiasCache,
    contacts: &ContactSet,
    positions: &[[f64; 3]],
) -> Result<NodeBiasSnapshot, NnError> {
    let mut tape = Tape::new();
    let c = composite_bias(
        &mut tape,
        store,
        p,
        cache,
        std::slice::from_ref(contacts),
        &[positions.to_vec()],
    )?;
    let get = |v: Var| tape.value(v).data().to_vec();
    Ok(NodeBiasSnapshot {
        heads: cache.heads,
        n: cache.n,
        spatial: get(c.spatial),
        edge: get(c.edge),
        geometric: get(c.geometric),
        anatomical: get(c.anatomical),
        composite: get(c.composite),
    })
}
