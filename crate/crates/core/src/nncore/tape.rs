//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every op appends one node holding its forward value. [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients for nodes that depend
//! on a parameter (or on a leaf created with [`Tape::variable`]).

use std::collections::HashMap;
use std::f64::consts::PI;

use super::{NnError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Lower/upper clamp applied to Gaussian log standard deviations.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Marker for [`Tape::gather`] indices that produce an exact zero.
pub const GATHER_ZERO: usize = usize::MAX;

/// Extension point for ops whose backward lives outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contributions for each input. `needs[i]` is false when input
    /// `i` does not require a gradient; returning `None` for it is fine.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        a: Var,
        c: Tensor,
    },
    Scale {
        a: Var,
        c: f64,
    },
    ScaleBy {
        a: Var,
        s: Var,
    },
    ScaleAxis {
        a: Var,
        s: Var,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Elu {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Square {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Min {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
        src_block: usize,
    },
    Assemble {
        parts: Vec<AssemblePart>,
        rows: usize,
        width: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        bias_shared: bool,
        heads: usize,
        probs: Vec<f64>,
    },
    GaussianLogProb {
        mu: Var,
        log_std: Var,
        actions: Tensor,
    },
    GaussianEntropy {
        log_std: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct AssemblePart {
    var: Var,
    rows: Vec<usize>,
    broadcast: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One contribution to [`Tape::assemble`]: rows of `var` placed at `rows` of
/// the output. With `broadcast`, `var` has shape `[n, width]` and is copied
/// into every batch element; otherwise it has shape `[batch, n, width]`.
pub struct RowPlacement {
    pub var: Var,
    pub rows: Vec<usize>,
    pub broadcast: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaf_grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter in store order; zeros for parameters the root does not depend on.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, p)| {
                self.param_vars
                    .get(&id)
                    .and_then(|v| self.wrt(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// `c = a * b + beta * c` with explicit strides (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` ([m,k]), `b` ([k,n])
    // and `c` ([m,n], row-major); callers pass buffers of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient (retrievable with [`Gradients::wrt`]).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    /// `a @ b` where `a` is `[.., k]` and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.last_dim() != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let k = bv.shape()[0];
        let n = bv.shape()[1];
        let m = av.len() / k.max(1);
        let mut out_shape = av.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Affine map `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let sa = av.shape();
        let sb = bv.shape();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", av, bv));
        }
        let block = bv.len();
        let mut out = av.data().to_vec();
        if block > 0 {
            for chunk in out.chunks_mut(block) {
                for (o, x) in chunk.iter_mut().zip(bv.data()) {
                    *o += x;
                }
            }
        }
        let t = Tensor::new(sa, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("sub", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Elementwise product with constant data.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, NnError> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(shape_err("mul_const", av, &c));
        }
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst { a, c }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, NnError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(shape_err("scale_by", self.value(a), sv));
        }
        let k = sv.item();
        let t = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy { a, s }, rg))
    }

    /// Views `a` as `[outer, len(s), inner]` and scales slice `i` of the middle axis by `s[i]`.
    pub fn scale_axis(&mut self, a: Var, s: Var, inner: usize) -> Result<Var, NnError> {
        let (av, sv) = (self.value(a), self.value(s));
        let m = sv.len();
        if m == 0 || inner == 0 || av.len() % (m * inner) != 0 {
            return Err(shape_err("scale_axis", av, sv));
        }
        let mut out = av.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let k = sv.data()[i % m];
            chunk.iter_mut().for_each(|x| *x *= k);
        }
        let t = Tensor::new(av.shape(), out)?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleAxis { a, s, inner }, rg))
    }

    /// Normalizes each trailing row to zero mean and unit variance, then applies `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var, NnError> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (gv, sv) = (self.value(gain), self.value(shift));
        if gv.len() != d || sv.len() != d {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + sv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the trailing dimension, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax { x }, rg)
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(elu);
        let rg = self.rg(x);
        self.push(t, Op::Elu { x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(t, Op::Exp { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(t, Op::Square { x }, rg)
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("minimum", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| if x <= y { *x } else { *y })
            .collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Min { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::scalar(xv.sum() / xv.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(t, Op::Mean { x }, rg)
    }

    /// Blocked gather. `src` is viewed as `[outer, src_block]`; output block `o`
    /// entry `j` is `src[o][idx[j]]`, or zero when `idx[j] == GATHER_ZERO`.
    /// The output shape is `out_shape`, whose element count must be `outer * idx.len()`.
    pub fn gather(
        &mut self,
        src: Var,
        idx: Vec<usize>,
        src_block: usize,
        out_shape: &[usize],
    ) -> Result<Var, NnError> {
        let sv = self.value(src);
        let bad = || NnError::ShapeMismatch {
            op: "gather",
            lhs: sv.shape().to_vec(),
            rhs: out_shape.to_vec(),
        };
        if src_block == 0 || sv.len() % src_block != 0 {
            return Err(bad());
        }
        let outer = sv.len() / src_block;
        if out_shape.iter().product::<usize>() != outer * idx.len() {
            return Err(bad());
        }
        if idx.iter().any(|&i| i != GATHER_ZERO && i >= src_block) {
            return Err(bad());
        }
        let mut out = Vec::with_capacity(outer * idx.len());
        for o in 0..outer {
            let block = &sv.data()[o * src_block..(o + 1) * src_block];
            out.extend(idx.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { block[i] }));
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.rg(src);
        Ok(self.push(
            t,
            Op::Gather {
                src,
                idx,
                src_block,
            },
            rg,
        ))
    }

    /// Builds a `[batch, rows, width]` tensor from row placements. Rows not
    /// covered by any placement are zero; a row covered twice is an error.
    pub fn assemble(
        &mut self,
        batch: usize,
        rows: usize,
        width: usize,
        placements: Vec<RowPlacement>,
    ) -> Result<Var, NnError> {
        let mut out = vec![0.0; batch * rows * width];
        let mut seen = vec![false; rows];
        let mut rg = false;
        for p in &placements {
            let v = self.value(p.var);
            let expect = if p.broadcast {
                p.rows.len() * width
            } else {
                batch * p.rows.len() * width
            };
            if v.len() != expect || v.last_dim() != width {
                return Err(NnError::ShapeMismatch {
                    op: "assemble",
                    lhs: v.shape().to_vec(),
                    rhs: vec![batch, p.rows.len(), width],
                });
            }
            for &r in &p.rows {
                if r >= rows || seen[r] {
                    return Err(NnError::Invalid(format!("assemble: row {r} out of range or duplicated")));
                }
                seen[r] = true;
            }
            let n = p.rows.len();
            for b in 0..batch {
                for (j, &r) in p.rows.iter().enumerate() {
                    let src = if p.broadcast { j * width } else { (b * n + j) * width };
                    let dst = (b * rows + r) * width;
                    out[dst..dst + width].copy_from_slice(&v.data()[src..src + width]);
                }
            }
            rg |= self.rg(p.var);
        }
        let parts = placements
            .into_iter()
            .map(|p| AssemblePart {
                var: p.var,
                rows: p.rows,
                broadcast: p.broadcast,
            })
            .collect();
        let t = Tensor::new(&[batch, rows, width], out)?;
        Ok(self.push(t, Op::Assemble { parts, rows, width }, rg))
    }

    /// Multi-head scaled dot-product attention with an optional additive bias.
    ///
    /// `q`, `k`, `v` are `[batch, t, heads * d_h]`; the bias is `[batch, heads, t, t]`
    /// or `[heads, t, t]` (shared across the batch). Logits are
    /// `q_h k_h^T / sqrt(d_h) + bias_h`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize) -> Result<Var, NnError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape().len() != 3 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err("attention", qv, kv));
        }
        let (b, t, dm) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || dm % heads != 0 {
            return Err(NnError::Invalid(format!("attention: width {dm} not divisible by {heads} heads")));
        }
        let dh = dm / heads;
        let mut bias_shared = false;
        let bias_data = match bias {
            Some(bv) => {
                let bt = self.value(bv);
                if bt.shape() == [heads, t, t] {
                    bias_shared = true;
                } else if bt.shape() != [b, heads, t, t] {
                    return Err(NnError::ShapeMismatch {
                        op: "attention bias",
                        lhs: bt.shape().to_vec(),
                        rhs: vec![b, heads, t, t],
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * t * t];
        let mut out = vec![0.0; b * t * dm];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for bi in 0..b {
            for h in 0..heads {
                let pbase = (bi * heads + h) * t * t;
                let bbase = if bias_shared { h * t * t } else { pbase };
                for i in 0..t {
                    let qrow = &qd[(bi * t + i) * dm + h * dh..][..dh];
                    let prow = &mut probs[pbase + i * t..pbase + (i + 1) * t];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(bi * t + j) * dm + h * dh..][..dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        *p = dot * scale;
                        if let Some(bd) = bias_data {
                            *p += bd[bbase + i * t + j];
                        }
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(bi * t + i) * dm + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(bi * t + j) * dm + h * dh..][..dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t_out = Tensor::new(qv.shape(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(
            t_out,
            Op::Attention {
                q,
                k,
                v,
                bias,
                bias_shared,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention weights `[batch, heads, t, t]` stored by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Diagonal-Gaussian log density of constant `actions` (`[batch, a]`) under
    /// mean `mu` (`[batch, a]`) and raw log standard deviation `log_std` (`[a]`,
    /// clamped to `[LOG_STD_MIN, LOG_STD_MAX]`). Output is `[batch]`.
    pub fn gaussian_log_prob(&mut self, mu: Var, log_std: Var, actions: Tensor) -> Result<Var, NnError> {
        let (mv, lv) = (self.value(mu), self.value(log_std));
        let a = lv.len();
        if mv.shape() != actions.shape() || mv.last_dim() != a {
            return Err(shape_err("gaussian_log_prob", mv, &actions));
        }
        let batch = mv.len() / a.max(1);
        let ls: Vec<f64> = lv.data().iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let ln2pi = (2.0 * PI).ln();
        let mut out = vec![0.0; batch];
        for (bi, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..a {
                let z = (actions.data()[bi * a + j] - mv.data()[bi * a + j]) * (-ls[j]).exp();
                acc += z * z + 2.0 * ls[j] + ln2pi;
            }
            *o = -0.5 * acc;
        }
        let t = Tensor::new(&[batch], out)?;
        let rg = self.rg(mu) || self.rg(log_std);
        Ok(self.push(t, Op::GaussianLogProb { mu, log_std, actions }, rg))
    }

    /// Entropy of a diagonal Gaussian with clamped `log_std`; a single scalar.
    pub fn gaussian_entropy(&mut self, log_std: Var) -> Var {
        let half_ln_2pie = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        let e: f64 = self
            .value(log_std)
            .data()
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX) + half_ln_2pie)
            .sum();
        let rg = self.rg(log_std);
        self.push(Tensor::scalar(e), Op::GaussianEntropy { log_std }, rg)
    }

    /// Appends a node computed outside this module.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(value, Op::Custom { inputs, op }, rg)
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, NnError> {
        if self.value(root).len() != 1 {
            return Err(NnError::Invalid(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaf_grads[i] = Some(g);
                }
                op => self.backward_op(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients {
            leaf_grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.len() / k.max(1);
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    // da[m,k] = g[m,n] * b^T
                    gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), &mut da, 0.0);
                    self.acc(grads, *a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    // db[k,n] = a^T * g[m,n]
                    gemm(k, m, n, av.data(), (1, k), gd, (n, 1), &mut db, 0.0);
                    self.acc(grads, *b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let block = bv.len();
                    let mut db = vec![0.0; block];
                    for chunk in gd.chunks(block) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(av.shape(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(bv.shape(), d).unwrap());
                }
            }
            Op::MulConst { a, c } => {
                let d = gd.iter().zip(c.data()).map(|(x, y)| x * y).collect();
                self.acc(grads, *a, Tensor::new(c.shape(), d).unwrap());
            }
            Op::Scale { a, c } => {
                self.acc(grads, *a, g.map(|x| x * c));
            }
            Op::ScaleBy { a, s } => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if self.rg(*a) {
                    let k = sv.item();
                    self.acc(grads, *a, g.map(|x| x * k));
                }
                if self.rg(*s) {
                    let ds: f64 = gd.iter().zip(av.data()).map(|(x, y)| x * y).sum();
                    self.acc(grads, *s, Tensor::new(sv.shape(), vec![ds]).unwrap());
                }
            }
            Op::ScaleAxis { a, s, inner } => {
                let (av, sv) = (self.value(*a), self.value(*s));
                let m = sv.len();
                if self.rg(*a) {
                    let mut da = gd.to_vec();
                    for (i, chunk) in da.chunks_mut(*inner).enumerate() {
                        let k = sv.data()[i % m];
                        chunk.iter_mut().for_each(|x| *x *= k);
                    }
                    self.acc(grads, *a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.rg(*s) {
                    let mut ds = vec![0.0; m];
                    for (i, (gc, ac)) in gd.chunks(*inner).zip(av.data().chunks(*inner)).enumerate() {
                        ds[i % m] += gc.iter().zip(ac).map(|(x, y)| x * y).sum::<f64>();
                    }
                    self.acc(grads, *s, Tensor::new(sv.shape(), ds).unwrap());
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = gv.len();
                let rows = xhat.len() / d;
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += gd[r * d + c] * xhat[r * d + c];
                        }
                    }
                    self.acc(grads, *gain, Tensor::new(gv.shape(), dg).unwrap());
                }
                if self.rg(*shift) {
                    let mut ds = vec![0.0; d];
                    for chunk in gd.chunks(d) {
                        for (s, x) in ds.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    let sv = self.value(*shift);
                    self.acc(grads, *shift, Tensor::new(sv.shape(), ds).unwrap());
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let base = r * d;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gd[base + c] * gv.data()[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + c];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for c in 0..d {
                            let dh = gd[base + c] * gv.data()[c];
                            dx[base + c] = inv_std[r] * (dh - mean_dh - xhat[base + c] * mean_dh_h);
                        }
                    }
                    let xv = self.value(*x);
                    self.acc(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
            }
            Op::Softmax { x } => {
                let d = out.last_dim();
                let mut dx = vec![0.0; out.len()];
                for ((dr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(gd.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..d {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape(), dx).unwrap());
            }
            Op::Elu { x } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, g)| if v > 0.0 { *g } else { g * v.exp() })
                    .collect();
                self.acc(grads, *x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Exp { x } => {
                let d = out.data().iter().zip(gd).map(|(y, g)| y * g).collect();
                self.acc(grads, *x, Tensor::new(out.shape(), d).unwrap());
            }
            Op::Square { x } => {
                let xv = self.value(*x);
                let d = xv.data().iter().zip(gd).map(|(v, g)| 2.0 * v * g).collect();
                self.acc(grads, *x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(v, g)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Min { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = av.data().iter().zip(bv.data()).map(|(x, y)| x <= y).collect();
                if self.rg(*a) {
                    let d = gd.iter().zip(&pick_a).map(|(g, p)| if *p { *g } else { 0.0 }).collect();
                    self.acc(grads, *a, Tensor::new(av.shape(), d).unwrap());
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(&pick_a).map(|(g, p)| if *p { 0.0 } else { *g }).collect();
                    self.acc(grads, *b, Tensor::new(bv.shape(), d).unwrap());
                }
            }
            Op::Sum { x } => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::full(xv.shape(), gd[0]));
            }
            Op::Mean { x } => {
                let xv = self.value(*x);
                let k = gd[0] / xv.len().max(1) as f64;
                self.acc(grads, *x, Tensor::full(xv.shape(), k));
            }
            Op::Gather { src, idx, src_block } => {
                let sv = self.value(*src);
                let mut ds = vec![0.0; sv.len()];
                for (o, gchunk) in gd.chunks(idx.len().max(1)).enumerate() {
                    let block = &mut ds[o * src_block..(o + 1) * src_block];
                    for (&i, gv) in idx.iter().zip(gchunk) {
                        if i != GATHER_ZERO {
                            block[i] += gv;
                        }
                    }
                }
                self.acc(grads, *src, Tensor::new(sv.shape(), ds).unwrap());
            }
            Op::Assemble { parts, rows, width } => {
                let batch = out.len() / (rows * width).max(1);
                for p in parts {
                    if !self.rg(p.var) {
                        continue;
                    }
                    let pv = self.value(p.var);
                    let n = p.rows.len();
                    let mut dp = vec![0.0; pv.len()];
                    for b in 0..batch {
                        for (j, &r) in p.rows.iter().enumerate() {
                            let dst = if p.broadcast { j * width } else { (b * n + j) * width };
                            let src = (b * rows + r) * width;
                            for c in 0..*width {
                                dp[dst + c] += gd[src + c];
                            }
                        }
                    }
                    self.acc(grads, p.var, Tensor::new(pv.shape(), dp).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                bias_shared,
                heads,
                probs,
            } => self.backward_attention(*q, *k, *v, *bias, *bias_shared, *heads, probs, g, grads),
            Op::GaussianLogProb { mu, log_std, actions } => {
                let (mv, lv) = (self.value(*mu), self.value(*log_std));
                let a = lv.len();
                let batch = mv.len() / a.max(1);
                let mut dmu = vec![0.0; mv.len()];
                let mut dls = vec![0.0; a];
                for bi in 0..batch {
                    for j in 0..a {
                        let ls = lv.data()[j].clamp(LOG_STD_MIN, LOG_STD_MAX);
                        let inv_var = (-2.0 * ls).exp();
                        let diff = actions.data()[bi * a + j] - mv.data()[bi * a + j];
                        dmu[bi * a + j] = gd[bi] * diff * inv_var;
                        dls[j] += gd[bi] * (diff * diff * inv_var - 1.0);
                    }
                }
                for (j, d) in dls.iter_mut().enumerate() {
                    let raw = lv.data()[j];
                    if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                        *d = 0.0;
                    }
                }
                if self.rg(*mu) {
                    self.acc(grads, *mu, Tensor::new(mv.shape(), dmu).unwrap());
                }
                if self.rg(*log_std) {
                    self.acc(grads, *log_std, Tensor::new(lv.shape(), dls).unwrap());
                }
            }
            Op::GaussianEntropy { log_std } => {
                let lv = self.value(*log_std);
                let d = lv
                    .data()
                    .iter()
                    .map(|v| {
                        if (LOG_STD_MIN..=LOG_STD_MAX).contains(v) {
                            gd[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(grads, *log_std, Tensor::new(lv.shape(), d).unwrap());
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.rg(*v)).collect();
                let gs = op.backward(&vals, out, g, &needs);
                for ((v, gi), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        self.acc(grads, *v, gi);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        bias_shared: bool,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, t, dm) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let want_bias = bias.is_some_and(|bv| self.rg(bv));
        let mut dbias = if want_bias {
            vec![0.0; self.value(bias.unwrap()).len()]
        } else {
            Vec::new()
        };
        let mut ds = vec![0.0; t];
        for bi in 0..b {
            for h in 0..heads {
                let pbase = (bi * heads + h) * t * t;
                for i in 0..t {
                    let prow = &probs[pbase + i * t..pbase + (i + 1) * t];
                    let grow = &gd[(bi * t + i) * dm + h * dh..][..dh];
                    let mut dot = 0.0;
                    for j in 0..t {
                        let vrow = &vd[(bi * t + j) * dm + h * dh..][..dh];
                        let dp: f64 = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        ds[j] = dp;
                        dot += prow[j] * dp;
                        let dvrow = &mut dv[(bi * t + j) * dm + h * dh..][..dh];
                        for (d, x) in dvrow.iter_mut().zip(grow) {
                            *d += prow[j] * x;
                        }
                    }
                    for j in 0..t {
                        ds[j] = prow[j] * (ds[j] - dot);
                    }
                    if want_bias {
                        let bbase = if bias_shared { h * t * t } else { pbase };
                        for j in 0..t {
                            dbias[bbase + i * t + j] += ds[j];
                        }
                    }
                    let qoff = (bi * t + i) * dm + h * dh;
                    for j in 0..t {
                        let s = ds[j] * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let koff = (bi * t + j) * dm + h * dh;
                        for c in 0..dh {
                            dq[qoff + c] += s * kd[koff + c];
                            dk[koff + c] += s * qd[qoff + c];
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        if self.rg(q) {
            self.acc(grads, q, Tensor::new(&shape, dq).unwrap());
        }
        if self.rg(k) {
            self.acc(grads, k, Tensor::new(&shape, dk).unwrap());
        }
        if self.rg(v) {
            self.acc(grads, v, Tensor::new(&shape, dv).unwrap());
        }
        if want_bias {
            let bv = bias.unwrap();
            let bshape = self.value(bv).shape().to_vec();
            self.acc(grads, bv, Tensor::new(&bshape, dbias).unwrap());
        }
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}
