//! Layer catalogue built on the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::{Array, Float};
use super::conv::PadMode;
use super::params::{fan_in_uniform, Group, ParamStore};
use super::tape::{ParamId, Tape, Unary, Var};
use crate::error::{shape_err, Result};
use crate::fmath;

/// Positivity floor for GDN coefficients.
pub const GDN_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { cin: usize, cout: usize, k: usize, stride: usize, pad: usize, mode: PadMode },
    ConvTranspose2d { cin: usize, cout: usize, k: usize, stride: usize, pad: usize, out_pad: usize },
    Linear { din: usize, dout: usize },
    Gdn { channels: usize },
    Igdn { channels: usize },
    Gelu,
    LayerNorm { width: usize },
    MultiheadAttention { width: usize, heads: usize, causal: bool },
    Softmax,
    ResidualAdd(Vec<LayerSpec>),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "transposed-conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Gdn { .. } => "gdn",
            LayerSpec::Igdn { .. } => "igdn",
            LayerSpec::Gelu => "gelu",
            LayerSpec::LayerNorm { .. } => "layernorm",
            LayerSpec::MultiheadAttention { .. } => "multihead-attention",
            LayerSpec::Softmax => "softmax",
            LayerSpec::ResidualAdd(_) => "residual-add",
        }
    }

    /// Standard `k x k` conv with "same"-style zero padding `k/2`.
    pub fn conv(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        LayerSpec::Conv2d { cin, cout, k, stride, pad: k / 2, mode: PadMode::Zero }
    }

    /// Transposed conv that exactly inverts [`LayerSpec::conv`]'s downsampling.
    pub fn deconv(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        LayerSpec::ConvTranspose2d { cin, cout, k, stride, pad: k / 2, out_pad: stride - 1 }
    }
}

/// A layer with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Layer {
    pub spec: LayerSpec,
    params: Vec<ParamId>,
    children: Vec<Layer>,
}

impl Layer {
    pub fn new<T: Float>(spec: LayerSpec, store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        let mut children = Vec::new();
        let mut add = |store: &mut ParamStore<T>, p: &str, v: Array<T>| params.push(store.add(format!("{name}.{p}"), v, Group::Main));
        match &spec {
            LayerSpec::Conv2d { cin, cout, k, .. } => {
                let fan = cin * k * k;
                add(store, "w", fan_in_uniform(rng, &[*cout, *cin, *k, *k], fan));
                add(store, "b", fan_in_uniform(rng, &[*cout], fan));
            }
            LayerSpec::ConvTranspose2d { cin, cout, k, stride, .. } => {
                let fan = (cin * k * k / (stride * stride)).max(1);
                add(store, "w", fan_in_uniform(rng, &[*cin, *cout, *k, *k], fan));
                add(store, "b", fan_in_uniform(rng, &[*cout], fan));
            }
            LayerSpec::Linear { din, dout } => {
                add(store, "w", fan_in_uniform(rng, &[*din, *dout], *din));
                add(store, "b", fan_in_uniform(rng, &[*dout], *din));
            }
            LayerSpec::Gdn { channels: c } | LayerSpec::Igdn { channels: c } => {
                let c = *c;
                add(store, "beta", Array::full(&[c], T::of(fmath::softplus_inv(1.0 - GDN_FLOOR))));
                let off = T::of(fmath::softplus_inv(1e-5));
                let diag = T::of(fmath::softplus_inv(0.1));
                let g = (0..c * c).map(|i| if i / c == i % c { diag } else { off }).collect();
                add(store, "gamma", Array::new(&[c, c], g).unwrap());
            }
            LayerSpec::LayerNorm { width } => {
                add(store, "g", Array::full(&[*width], T::one()));
                add(store, "b", Array::zeros(&[*width]));
            }
            LayerSpec::MultiheadAttention { width: d, .. } => {
                for p in ["q", "k", "v", "o"] {
                    add(store, &format!("w{p}"), fan_in_uniform(rng, &[*d, *d], *d));
                    add(store, &format!("b{p}"), Array::zeros(&[*d]));
                }
            }
            LayerSpec::ResidualAdd(inner) => {
                for (i, s) in inner.iter().enumerate() {
                    children.push(Layer::new(s.clone(), store, &format!("{name}.{i}"), rng));
                }
            }
            LayerSpec::Gelu | LayerSpec::Softmax => {}
        }
        Layer { spec, params, children }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.params.clone();
        for c in &self.children {
            out.extend(c.params());
        }
        out
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = |tape: &mut Tape<T>, i: usize| store.bind(tape, self.params[i]);
        match &self.spec {
            LayerSpec::Conv2d { cin, cout, stride, pad, mode, .. } => {
                check_channels(tape, x, *cin)?;
                let w = p(tape, 0);
                let b = p(tape, 1);
                let y = tape.conv2d(x, w, *stride, *pad, *mode)?;
                let b = tape.reshape(b, &[*cout, 1, 1])?;
                tape.add(y, b)
            }
            LayerSpec::ConvTranspose2d { cin, cout, stride, pad, out_pad, .. } => {
                check_channels(tape, x, *cin)?;
                let w = p(tape, 0);
                let b = p(tape, 1);
                let y = tape.conv_transpose2d(x, w, *stride, *pad, *out_pad)?;
                let b = tape.reshape(b, &[*cout, 1, 1])?;
                tape.add(y, b)
            }
            LayerSpec::Linear { din, .. } => {
                if tape.shape(x).last() != Some(din) {
                    return Err(shape_err("last", format!("linear expects width {din}, got {:?}", tape.shape(x))));
                }
                let w = p(tape, 0);
                let b = p(tape, 1);
                let y = tape.matmul(x, w)?;
                tape.add(y, b)
            }
            LayerSpec::Gdn { channels } | LayerSpec::Igdn { channels } => {
                check_channels(tape, x, *channels)?;
                let (rb, rg) = (p(tape, 0), p(tape, 1));
                let beta = gdn_coeff(tape, rb, GDN_FLOOR);
                let gamma = gdn_coeff(tape, rg, 0.0);
                tape.gdn(x, beta, gamma, matches!(self.spec, LayerSpec::Igdn { .. }))
            }
            LayerSpec::Gelu => Ok(tape.gelu(x)),
            LayerSpec::Softmax => Ok(tape.softmax(x)),
            LayerSpec::LayerNorm { width } => {
                if tape.shape(x).last() != Some(width) {
                    return Err(shape_err("last", format!("layernorm expects width {width}, got {:?}", tape.shape(x))));
                }
                let n = tape.layer_norm(x, 1e-5);
                let g = p(tape, 0);
                let b = p(tape, 1);
                let y = tape.mul(n, g)?;
                tape.add(y, b)
            }
            LayerSpec::MultiheadAttention { .. } => self.attend(tape, store, x, x),
            LayerSpec::ResidualAdd(_) => {
                let mut h = x;
                for c in &self.children {
                    h = c.forward(tape, store, h)?;
                }
                tape.add(x, h)
            }
        }
    }

    /// Attention with queries from `x` and keys/values from `ctx`.
    /// Both are [B, L, D]; causal masking requires equal lengths.
    pub fn attend<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Var) -> Result<Var> {
        let LayerSpec::MultiheadAttention { width, heads, causal } = self.spec else {
            return Err(shape_err("layer", format!("{} is not attention", self.spec.kind())));
        };
        for v in [x, ctx] {
            let s = tape.shape(v);
            if s.len() != 3 || s[2] != width {
                return Err(shape_err("last", format!("attention width {width}, got {s:?}")));
            }
        }
        let proj = |tape: &mut Tape<T>, src: Var, i: usize| -> Result<Var> {
            let w = store.bind(tape, self.params[2 * i]);
            let b = store.bind(tape, self.params[2 * i + 1]);
            let y = tape.matmul(src, w)?;
            tape.add(y, b)
        };
        let q = proj(tape, x, 0)?;
        let k = proj(tape, ctx, 1)?;
        let v = proj(tape, ctx, 2)?;
        let a = tape.attention(q, k, v, heads, causal)?;
        proj(tape, a, 3)
    }
}

fn check_channels<T: Float>(tape: &Tape<T>, x: Var, c: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() < 2 || s[1] != c {
        return Err(shape_err("channel", format!("expected {c} channels, input shape {s:?}")));
    }
    Ok(())
}

fn gdn_coeff<T: Float>(tape: &mut Tape<T>, raw: Var, floor: f64) -> Var {
    let s = tape.unary(Unary::Softplus, raw);
    if floor > 0.0 {
        tape.shift(s, floor)
    } else {
        s
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new<T: Float>(specs: &[LayerSpec], store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Self {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::new(s.clone(), store, &format!("{name}.{i}"), rng))
            .collect();
        Sequential { layers }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(tape, store, h))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}
