//! Define-by-run tape for reverse-mode differentiation.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::array::{is_portable, broadcast_shape, broadcast_strides, for_each_index, gemm, reduce_to, Array, Float};
use super::conv::{self, ConvGeom, PadMode};
use crate::error::{shape_err, Error, Result};
use crate::fmath;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Stable identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Gelu,
    Abs,
    Sqrt,
    Square,
    NormalCdf,
    /// Rounds half away from zero; gradient passes straight through.
    RoundSte,
}

enum Op<T> {
    Leaf,
    Binary(BinOp, Var, Var),
    Scale(Var, T),
    Shift(Var),
    Unary(Unary, Var),
    LowerBound(Var, T),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Conv { x: Var, w: Var, geom: ConvGeom, cout: usize },
    ConvT { x: Var, w: Var, geom: ConvGeom, cin: usize },
    Gdn { x: Var, beta: Var, gamma: Var, inverse: bool },
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, index: Rc<[usize]> },
    Sum(Var),
    SumAxis(Var, usize),
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Array<T>>,
    leaves: HashMap<Var, Array<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Array<T>> {
        self.params.get(&id)
    }

    pub fn wrt(&self, v: Var) -> Option<&Array<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Array<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut Array<T>)> {
        self.params.iter_mut()
    }

    pub fn global_norm(&self) -> f64 {
        self.params.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
    }

    /// Multiplies every parameter gradient by `s`.
    pub fn scale(&mut self, s: f64) {
        let s = T::of(s);
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

/// Records operations and replays them backwards.
///
/// A tape is single-writer; build one per forward pass.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu_with(x: f64, tanh: fn(f64) -> f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044_715 * x * x * x)))
}

fn gelu_grad_with(x: f64, tanh: fn(f64) -> f64) -> f64 {
    let t = tanh(GELU_C * (x + 0.044_715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Transcendentals for one op: the in-crate versions under [`portable`],
/// the platform library otherwise.
struct Fns {
    exp: fn(f64) -> f64,
    ln: fn(f64) -> f64,
    tanh: fn(f64) -> f64,
    sigmoid: fn(f64) -> f64,
    softplus: fn(f64) -> f64,
}

fn fns() -> Fns {
    if is_portable() {
        Fns { exp: fmath::exp, ln: fmath::ln, tanh: fmath::tanh, sigmoid: fmath::sigmoid, softplus: fmath::softplus }
    } else {
        Fns {
            exp: f64::exp,
            ln: f64::ln,
            tanh: |x| 1.0 - 2.0 / (1.0 + (2.0 * x).exp()),
            sigmoid: |x| if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) },
            softplus: |x| if x > 30.0 { x } else { x.exp().ln_1p() },
        }
    }
}

pub(crate) fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds half away from zero
    x.round()
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, a: Array<T>) -> Var {
        self.push(a, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, a: Array<T>) -> Var {
        self.push(a, Op::Leaf, true)
    }

    /// Leaf bound to a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId, value: &Array<T>, trainable: bool) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, trainable);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let a = self.value(v).clone();
        self.constant(a)
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err("broadcast", format!("{sa:?} vs {sb:?} in {op:?}")))?;
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n: usize = out_shape.iter().product();
            let sta = broadcast_strides(&sa, &out_shape);
            let stb = broadcast_strides(&sb, &out_shape);
            let mut offa = vec![0usize; n];
            for_each_index(&out_shape, |p, o| offa[p] = o, &sta);
            let mut out = vec![T::zero(); n];
            for_each_index(&out_shape, |p, o| out[p] = f(da[offa[p]], db[o]), &stb);
            out
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::new(&out_shape, data)?, Op::Binary(op, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::Shift(a), ng)
    }

    pub fn unary(&mut self, u: Unary, a: Var) -> Var {
        let fs = fns();
        let tanh = fs.tanh;
        let v = match u {
            Unary::Gelu => self.value(a).map(|x| T::of(gelu_with(x.f64(), tanh))),
            _ => {
                let f = self.unary_fn(u, &fs);
                self.value(a).map(|x| T::of(f(x.f64())))
            }
        };
        let ng = self.ng(a);
        self.push(v, Op::Unary(u, a), ng)
    }

    fn unary_fn(&self, u: Unary, fs: &Fns) -> fn(f64) -> f64 {
        match u {
            Unary::Neg => |x| -x,
            Unary::Exp => fs.exp,
            Unary::Log => fs.ln,
            Unary::Tanh => fs.tanh,
            Unary::Sigmoid => fs.sigmoid,
            Unary::Softplus => fs.softplus,
            Unary::Gelu => unreachable!("handled by the caller"),
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::NormalCdf => fmath::normal_cdf,
            Unary::RoundSte => round_half_away,
        }
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    /// `max(x, bound)`; the gradient still flows below the bound when it
    /// points upward, so floored likelihoods can recover.
    pub fn lower_bound(&mut self, a: Var, bound: f64) -> Var {
        let b = T::of(bound);
        let v = self.value(a).map(|x| if x < b { b } else { x });
        let ng = self.ng(a);
        self.push(v, Op::LowerBound(a, b), ng)
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul inner", format!("{sa:?} x {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), false, &mut out);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::new(&shape, out)?, Op::MatMul(a, b), ng))
    }

    /// Batched `a[B, m, k] x b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(m, k, n, &da[i * m * k..], (k, 1), &db[i * k * n..], (n, 1), false, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Array::new(&[bs, m, n], out)?, Op::Bmm(a, b), ng))
    }

    // ---------------------------------------------------------------- convolution

    /// x [N, Cin, H, W], w [Cout, Cin, k, k].
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, mode: PadMode) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(shape_err("conv rank", format!("input {sx:?}, weight {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(shape_err("channel", format!("input has {} channels, kernel expects {}", sx[1], sw[1])));
        }
        for (name, ext) in [("height", sx[2]), ("width", sx[3])] {
            if stride > 1 && ext % stride != 0 {
                return Err(shape_err(name, format!("{ext} not divisible by stride {stride}")));
            }
        }
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], stride, pad, mode)
            .ok_or_else(|| shape_err("height", format!("kernel {} too large for {sx:?}", sw[2])))?;
        let cout = sw[0];
        let mut out = vec![T::zero(); sx[0] * cout * geom.cols()];
        conv::conv_forward(&geom, sx[0], cout, self.value(x).data(), self.value(w).data(), &mut out);
        let ng = self.ng(x) || self.ng(w);
        let arr = Array::new(&[sx[0], cout, geom.ho, geom.wo], out)?;
        Ok(self.push(arr, Op::Conv { x, w, geom, cout }, ng))
    }

    /// x [N, Cin, H, W], w [Cin, Cout, k, k]; output extent `(H-1)s - 2p + k + op`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(shape_err("conv rank", format!("input {sx:?}, weight {sw:?}")));
        }
        if sx[1] != sw[0] {
            return Err(shape_err("channel", format!("input has {} channels, kernel expects {}", sx[1], sw[0])));
        }
        let k = sw[2];
        let oh = ((sx[2] - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("height", "negative output extent"))?;
        let ow = ((sx[3] - 1) * stride + k + out_pad)
            .checked_sub(2 * pad)
            .ok_or_else(|| shape_err("width", "negative output extent"))?;
        let cout = sw[1];
        let geom = ConvGeom::new(cout, oh, ow, k, stride, pad, PadMode::Zero)
            .filter(|g| g.ho == sx[2] && g.wo == sx[3])
            .ok_or_else(|| shape_err("height", format!("inconsistent transposed geometry for {sx:?}")))?;
        let mut out = vec![T::zero(); sx[0] * cout * oh * ow];
        conv::convt_forward(&geom, sx[0], sx[1], self.value(x).data(), self.value(w).data(), &mut out);
        let ng = self.ng(x) || self.ng(w);
        let arr = Array::new(&[sx[0], cout, oh, ow], out)?;
        Ok(self.push(arr, Op::ConvT { x, w, geom, cin: sx[1] }, ng))
    }

    /// Generalized divisive normalization over axis 1 of `x` [N, C, ...].
    /// `y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`; the inverse multiplies.
    pub fn gdn(&mut self, x: Var, beta: Var, gamma: Var, inverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err("gdn rank", format!("{sx:?}")));
        }
        let c = sx[1];
        if self.shape(beta) != [c] || self.shape(gamma) != [c, c] {
            return Err(shape_err(
                "channel",
                format!("gdn over {c} channels with beta {:?}, gamma {:?}", self.shape(beta), self.shape(gamma)),
            ));
        }
        let (n, hw) = (sx[0], sx[2..].iter().product::<usize>());
        let xd = self.value(x).data();
        let sq: Vec<T> = xd.iter().map(|&v| v * v).collect();
        let mut norm = vec![T::zero(); xd.len()];
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        for i in 0..n {
            let o = i * c * hw;
            gemm(c, c, hw, gd, (c, 1), &sq[o..], (hw, 1), false, &mut norm[o..o + c * hw]);
        }
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * hw;
                for p in o..o + hw {
                    let s = (norm[p] + bd[ch]).sqrt();
                    out[p] = if inverse { xd[p] * s } else { xd[p] / s };
                }
            }
        }
        let ng = self.ng(x) || self.ng(beta) || self.ng(gamma);
        Ok(self.push(Array::new(&sx, out)?, Op::Gdn { x, beta, gamma, inverse }, ng))
    }

    // ---------------------------------------------------------------- normalization / attention

    /// Normalizes over the last axis (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let a = self.value(x);
        let d = *a.shape().last().unwrap();
        let mut out = vec![T::zero(); a.len()];
        let mut rstd = Vec::with_capacity(a.len() / d);
        for (row, o) in a.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = T::of((v.f64() - mean) * r);
            }
            rstd.push(T::of(r));
        }
        let shape = a.shape().to_vec();
        let ng = self.ng(x);
        self.push(Array::new(&shape, out).unwrap(), Op::LayerNorm { x, rstd }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let a = self.value(x);
        let d = *a.shape().last().unwrap();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let shape = a.shape().to_vec();
        let ng = self.ng(x);
        self.push(Array::new(&shape, out).unwrap(), Op::Softmax(x), ng)
    }

    /// Scaled dot-product attention with `heads` heads.
    /// q [B, L, D], k/v [B, S, D]; `causal` masks keys with index > query index.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || self.shape(v) != sk.as_slice() || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(shape_err("attention", format!("q {sq:?}, k {sk:?}, v {:?}", self.shape(v))));
        }
        let (bs, l, d, s) = (sq[0], sq[1], sq[2], sk[1]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("heads", format!("width {d} not divisible by {heads} heads")));
        }
        if causal && l != s {
            return Err(shape_err("attention length", "causal attention needs equal query/key lengths"));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); bs * heads * l * s];
        let mut out = vec![T::zero(); bs * l * d];
        let mut tmp = vec![T::zero(); l * dh];
        for b in 0..bs {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * l * s..(b * heads + h + 1) * l * s];
                gemm(l, dh, s, &qd[b * l * d + h * dh..], (d, 1), &kd[b * s * d + h * dh..], (1, d), false, p);
                for (i, row) in p.chunks_mut(s).enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if causal && j > i { T::neg_infinity() } else { *v * scale };
                    }
                    softmax_row(row);
                }
                gemm(l, s, dh, p, (s, 1), &vd[b * s * d + h * dh..], (d, 1), false, &mut tmp);
                for i in 0..l {
                    out[b * l * d + i * d + h * dh..b * l * d + i * d + (h + 1) * dh].copy_from_slice(&tmp[i * dh..(i + 1) * dh]);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(Array::new(&[bs, l, d], out)?, Op::Attention { q, k, v, heads, probs }, ng))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let a = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(a, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let nd = self.shape(x).len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} for rank {nd}")));
        }
        let a = self.value(x).permuted(perm);
        let ng = self.ng(x);
        Ok(self.push(a, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat axis", format!("{axis} for {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i]) {
                return Err(shape_err(format!("concat axis {axis}"), format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Array::new(&shape, out)?, Op::Concat(xs.to_vec(), axis), ng))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(format!("narrow axis {axis}"), format!("[{start}, {}) of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Array::new(&shape, out)?, Op::Narrow { x, axis, start }, ng))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let d = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= d.len()) {
            return Err(shape_err("gather", format!("index {bad} out of {}", d.len())));
        }
        let out: Vec<T> = index.iter().map(|&i| d[i]).collect();
        let a = Array::new(shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(a, Op::Gather { x, index }, ng))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Array::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum axis", format!("{axis} for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..s[axis] {
                let base = (o * s[axis] + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Array::new(&shape, out)?, Op::SumAxis(x, axis), ng))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Does not mutate the tape, so calling
    /// it twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss), T::one()));
        let mut result = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads, &mut result);
        }
        for (&id, &v) in &self.param_vars {
            if self.ng(v) {
                result.params.entry(id).or_insert_with(|| Array::zeros(self.shape(v)));
            }
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => a.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: Array<T>, grads: &mut [Option<Array<T>>], result: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {
                match node.param {
                    Some(id) => result.params.insert(id, g),
                    None => result.leaves.insert(Var(i), g),
                };
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let same = va.shape() == vb.shape();
                // expand operands to the output shape when broadcasting
                let ex = |v: &Array<T>| -> Vec<T> {
                    if v.shape() == y.shape() {
                        return v.data().to_vec();
                    }
                    let st = broadcast_strides(v.shape(), y.shape());
                    let mut out = vec![T::zero(); y.len()];
                    for_each_index(y.shape(), |p, o| out[p] = v.data()[o], &st);
                    out
                };
                let gd = g.data();
                let (ga, gb): (Vec<T>, Vec<T>) = match op {
                    BinOp::Add => (gd.to_vec(), gd.to_vec()),
                    BinOp::Sub => (gd.to_vec(), gd.iter().map(|&v| -v).collect()),
                    BinOp::Mul => {
                        let (ea, eb) = if same { (va.data().to_vec(), vb.data().to_vec()) } else { (ex(va), ex(vb)) };
                        (
                            gd.iter().zip(&eb).map(|(&g, &b)| g * b).collect(),
                            gd.iter().zip(&ea).map(|(&g, &a)| g * a).collect(),
                        )
                    }
                    BinOp::Div => {
                        let eb = if same { vb.data().to_vec() } else { ex(vb) };
                        (
                            gd.iter().zip(&eb).map(|(&g, &b)| g / b).collect(),
                            gd.iter().zip(y.data()).zip(&eb).map(|((&g, &q), &b)| -g * q / b).collect(),
                        )
                    }
                };
                let shape = y.shape();
                if self.ng(*a) {
                    let full = Array::new(shape, ga).unwrap();
                    self.acc(grads, *a, reduce_to(&full, va.shape()));
                }
                if self.ng(*b) {
                    let full = Array::new(shape, gb).unwrap();
                    self.acc(grads, *b, reduce_to(&full, vb.shape()));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|v| v * s));
            }
            Op::Shift(a) => self.acc(grads, *a, g),
            Op::Unary(u, a) => {
                let fs = fns();
                let x = self.value(*a);
                let gx: Vec<T> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&g, &x), &y)| {
                        let d = match u {
                            Unary::Neg => -T::one(),
                            Unary::Exp => y,
                            Unary::Log => T::one() / x,
                            Unary::Tanh => T::one() - y * y,
                            Unary::Sigmoid => y * (T::one() - y),
                            Unary::Softplus => T::of((fs.sigmoid)(x.f64())),
                            Unary::Gelu => T::of(gelu_grad_with(x.f64(), fs.tanh)),
                            Unary::Abs => {
                                if x > T::zero() {
                                    T::one()
                                } else if x < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sqrt => T::one() / (y + y),
                            Unary::Square => x + x,
                            Unary::NormalCdf => T::of(fmath::normal_pdf(x.f64())),
                            Unary::RoundSte => T::one(),
                        };
                        g * d
                    })
                    .collect();
                self.acc(grads, *a, Array::new(x.shape(), gx).unwrap());
            }
            Op::LowerBound(a, b) => {
                let x = self.value(*a);
                let gx: Vec<T> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| if x >= *b || g < T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, *a, Array::new(x.shape(), gx).unwrap());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k.max(1);
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), (n, 1), vb.data(), (1, n), false, &mut ga);
                    self.acc(grads, *a, Array::new(va.shape(), ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, va.data(), (1, k), g.data(), (n, 1), false, &mut gb);
                    self.acc(grads, *b, Array::new(vb.shape(), gb).unwrap());
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                let gd = g.data();
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        gemm(m, n, k, &gd[i * m * n..], (n, 1), &vb.data()[i * k * n..], (1, n), false, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                    self.acc(grads, *a, Array::new(va.shape(), ga).unwrap());
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        gemm(k, m, n, &va.data()[i * m * k..], (1, k), &gd[i * m * n..], (n, 1), false, &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                    self.acc(grads, *b, Array::new(vb.shape(), gb).unwrap());
                }
            }
            Op::Conv { x, w, geom, cout } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut gx = self.ng(*x).then(|| vec![T::zero(); vx.len()]);
                let mut gw = self.ng(*w).then(|| vec![T::zero(); vw.len()]);
                conv::conv_backward(geom, vx.shape()[0], *cout, vx.data(), vw.data(), g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    self.acc(grads, *x, Array::new(vx.shape(), gx).unwrap());
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, Array::new(vw.shape(), gw).unwrap());
                }
            }
            Op::ConvT { x, w, geom, cin } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut gx = self.ng(*x).then(|| vec![T::zero(); vx.len()]);
                let mut gw = self.ng(*w).then(|| vec![T::zero(); vw.len()]);
                conv::convt_backward(geom, vx.shape()[0], *cin, vx.data(), vw.data(), g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    self.acc(grads, *x, Array::new(vx.shape(), gx).unwrap());
                }
                if let Some(gw) = gw {
                    self.acc(grads, *w, Array::new(vw.shape(), gw).unwrap());
                }
            }
            Op::Gdn { x, beta, gamma, inverse } => self.gdn_backward(*x, *beta, *gamma, *inverse, &g, grads),
            Op::LayerNorm { x, rstd } => {
                let d = *y.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for (r, ((gy, yh), o)) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mg = gy.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
                    let mgy = gy.iter().zip(yh).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / d as f64;
                    let rs = rstd[r].f64();
                    for j in 0..d {
                        o[j] = T::of(rs * (gy[j].f64() - mg - yh[j].f64() * mgy));
                    }
                }
                self.acc(grads, *x, Array::new(y.shape(), gx).unwrap());
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap();
                let mut gx = vec![T::zero(); y.len()];
                for ((gy, p), o) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gy.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        o[j] = p[j] * (gy[j] - dot);
                    }
                }
                self.acc(grads, *x, Array::new(y.shape(), gx).unwrap());
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(*q, *k, *v, *heads, probs, &g, grads),
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, g.reshaped(&s).unwrap());
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, g.permuted(&inv));
            }
            Op::Concat(xs, axis) => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.ng(x) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * shape[*axis] + offset) * inner;
                            part.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        let s = self.shape(x).to_vec();
                        self.acc(grads, x, Array::new(&s, part).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let len = y.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = Array::zeros(&s);
                let d = gx.data_mut();
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Gather { x, index } => {
                let s = self.shape(*x).to_vec();
                let mut gx = Array::zeros(&s);
                let d = gx.data_mut();
                for (&i, &gv) in index.iter().zip(g.data()) {
                    d[i] = d[i] + gv;
                }
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, Array::full(&s, g.item()));
            }
            Op::SumAxis(x, axis) => {
                let s = self.shape(*x).to_vec();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = Array::zeros(&s);
                let d = gx.data_mut();
                for o in 0..outer {
                    for a in 0..s[*axis] {
                        let base = (o * s[*axis] + a) * inner;
                        d[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
    }

    fn gdn_backward(&self, x: Var, beta: Var, gamma: Var, inverse: bool, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let vx = self.value(x);
        let (bd, gd) = (self.value(beta).data(), self.value(gamma).data());
        let s = vx.shape();
        let (n, c, hw) = (s[0], s[1], s[2..].iter().product::<usize>());
        let xd = vx.data();
        let sq: Vec<T> = xd.iter().map(|&v| v * v).collect();
        let mut norm = vec![T::zero(); xd.len()];
        for i in 0..n {
            let o = i * c * hw;
            gemm(c, c, hw, gd, (c, 1), &sq[o..], (hw, 1), false, &mut norm[o..o + c * hw]);
        }
        let half = T::of(0.5);
        let mut gx = vec![T::zero(); xd.len()];
        let mut dnorm = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * hw;
                for p in o..o + hw {
                    let nv = norm[p] + bd[ch];
                    let sv = nv.sqrt();
                    let gy = g.data()[p];
                    if inverse {
                        gx[p] = gy * sv;
                        dnorm[p] = gy * xd[p] * half / sv;
                    } else {
                        gx[p] = gy / sv;
                        dnorm[p] = -gy * xd[p] * half / (nv * sv);
                    }
                }
            }
        }
        if self.ng(beta) {
            let mut gb = vec![T::zero(); c];
            for i in 0..n {
                for ch in 0..c {
                    let o = (i * c + ch) * hw;
                    gb[ch] = gb[ch] + dnorm[o..o + hw].iter().copied().sum::<T>();
                }
            }
            self.acc(grads, beta, Array::new(&[c], gb).unwrap());
        }
        if self.ng(gamma) {
            let mut gg = vec![T::zero(); c * c];
            for i in 0..n {
                let o = i * c * hw;
                gemm(c, hw, c, &dnorm[o..], (hw, 1), &sq[o..], (1, hw), true, &mut gg);
            }
            self.acc(grads, gamma, Array::new(&[c, c], gg).unwrap());
        }
        if self.ng(x) {
            let mut dsq = vec![T::zero(); c * hw];
            for i in 0..n {
                let o = i * c * hw;
                gemm(c, c, hw, gd, (1, c), &dnorm[o..], (hw, 1), false, &mut dsq);
                for p in 0..c * hw {
                    gx[o + p] = gx[o + p] + T::of(2.0) * xd[o + p] * dsq[p];
                }
            }
            self.acc(grads, x, Array::new(s, gx).unwrap());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (bs, l, d, s) = (vq.shape()[0], vq.shape()[1], vq.shape()[2], vk.shape()[1]);
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut gq = vec![T::zero(); vq.len()];
        let mut gk = vec![T::zero(); vk.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); l * s];
        let mut tq = vec![T::zero(); l * dh];
        let mut tk = vec![T::zero(); s * dh];
        let gd = g.data();
        for b in 0..bs {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * l * s..(b * heads + h + 1) * l * s];
                let go = &gd[b * l * d + h * dh..];
                // dV = P^T dO
                gemm(s, l, dh, p, (1, s), go, (d, 1), false, &mut tk);
                for j in 0..s {
                    let o = b * s * d + j * d + h * dh;
                    for t in 0..dh {
                        gv[o + t] = gv[o + t] + tk[j * dh + t];
                    }
                }
                // dP = dO V^T
                gemm(l, dh, s, go, (d, 1), &vv.data()[b * s * d + h * dh..], (1, d), false, &mut dp);
                for i in 0..l {
                    let row = &mut dp[i * s..(i + 1) * s];
                    let pr = &p[i * s..(i + 1) * s];
                    let dot: T = row.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for j in 0..s {
                        row[j] = pr[j] * (row[j] - dot) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                gemm(l, s, dh, &dp, (s, 1), &vk.data()[b * s * d + h * dh..], (d, 1), false, &mut tq);
                for i in 0..l {
                    let o = b * l * d + i * d + h * dh;
                    for t in 0..dh {
                        gq[o + t] = gq[o + t] + tq[i * dh + t];
                    }
                }
                gemm(s, l, dh, &dp, (1, s), &vq.data()[b * l * d + h * dh..], (d, 1), false, &mut tk);
                for j in 0..s {
                    let o = b * s * d + j * d + h * dh;
                    for t in 0..dh {
                        gk[o + t] = gk[o + t] + tk[j * dh + t];
                    }
                }
            }
        }
        let shapes = [vq.shape().to_vec(), vk.shape().to_vec(), vv.shape().to_vec()];
        for ((var, gr), sh) in [(q, gq), (k, gk), (v, gv)].into_iter().zip(shapes) {
            self.acc(grads, var, Array::new(&sh, gr).unwrap());
        }
    }
}

fn softmax_row<T: Float>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = if v.is_infinite() && *v < T::zero() { T::zero() } else { (*v - m).pexp() };
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}
