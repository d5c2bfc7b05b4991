//! Quantization surrogates, coding densities and ELIC's staged context model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coder::tables::{CdfTable, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::fmath;
use crate::grad::layers::{Layer, LayerSpec};
use crate::grad::params::{Group, ParamStore};
use crate::grad::tape::{ParamId, Tape, Unary, Var};
use crate::grad::{Array, Float};

/// Probability floor for rate estimates.
pub const TAIL_MASS: f64 = 1.0 / 65536.0;

/// `y + u`, `u ~ U(-0.5, 0.5)`.
pub fn quantize_train<T: Float>(y: &Array<T>, rng: &mut impl Rng) -> Array<T> {
    let d = y.data().iter().map(|&v| v + T::of(rng.gen_range(-0.5..0.5))).collect();
    Array::new(y.shape(), d).unwrap()
}

/// Uniform noise with the shape of `shape`.
pub fn uniform_noise<T: Float>(shape: &[usize], rng: &mut impl Rng) -> Array<T> {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect()).unwrap()
}

/// Round half away from zero.
pub fn quantize(v: f64) -> i32 {
    v.round() as i32
}

pub fn quantize_infer<T: Float>(y: &[T]) -> Vec<i32> {
    y.iter().map(|v| quantize(v.f64())).collect()
}

/// Per-element Gaussian coding parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorParams {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl PriorParams {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Discretized Gaussian mass of integer `y`; symmetric about `mu`.
pub fn gaussian_prob(y: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_MIN);
    let v = (y - mu).abs();
    fmath::normal_cdf((0.5 - v) / s) - fmath::normal_cdf((-0.5 - v) / s)
}

/// `-log2 max(p, tail)` per element and in total.
pub fn gaussian_bits(yhat: &[i32], prior: &PriorParams) -> Result<(f64, Vec<f64>)> {
    if yhat.len() != prior.len() {
        return Err(Error::Invalid(format!("{} symbols, {} priors", yhat.len(), prior.len())));
    }
    let mut per = Vec::with_capacity(yhat.len());
    for ((&y, &m), &s) in yhat.iter().zip(&prior.mu).zip(&prior.sigma) {
        if !m.is_finite() || !s.is_finite() {
            return Err(Error::NonFinite(format!("prior mu {m}, sigma {s}")));
        }
        per.push(-fmath::log2(gaussian_prob(y as f64, m as f64, s as f64).max(TAIL_MASS)));
    }
    Ok((per.iter().sum(), per))
}

/// `softplus(raw) + σ_min`.
pub fn sigma_from_raw<T: Float>(tape: &mut Tape<T>, raw: Var) -> Var {
    let s = tape.unary(Unary::Softplus, raw);
    tape.shift(s, SIGMA_MIN)
}

/// Per-element bits of `y` under `N(mu, sigma)` discretized to unit bins.
pub fn gaussian_bits_tape<T: Float>(tape: &mut Tape<T>, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let d = tape.sub(y, mu)?;
    let v = tape.unary(Unary::Abs, d);
    let nv = tape.unary(Unary::Neg, v);
    let hi = tape.shift(nv, 0.5);
    let lo = tape.shift(nv, -0.5);
    let hi = tape.div(hi, sigma)?;
    let lo = tape.div(lo, sigma)?;
    let hi = tape.unary(Unary::NormalCdf, hi);
    let lo = tape.unary(Unary::NormalCdf, lo);
    let p = tape.sub(hi, lo)?;
    Ok(neg_log2_floored(tape, p))
}

fn neg_log2_floored<T: Float>(tape: &mut Tape<T>, p: Var) -> Var {
    let p = tape.lower_bound(p, TAIL_MASS);
    let l = tape.unary(Unary::Log, p);
    tape.scale(l, -1.0 / std::f64::consts::LN_2)
}

// ------------------------------------------------------------------ factorized density

const FD_FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const FD_INIT_SCALE: f64 = 10.0;
/// Half-width of the symbol scan used to size factorized tables.
const FD_SCAN: i32 = 128;

/// Per-channel learned monotone CDF built from stacked 1-D transforms.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    pub channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

impl FactorizedDensity {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let stages = FD_FILTERS.len() - 1;
        let scale = FD_INIT_SCALE.powf(1.0 / stages as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..stages {
            let (fin, fout) = (FD_FILTERS[i], FD_FILTERS[i + 1]);
            let init = fmath::softplus_inv(1.0 / scale / fout as f64);
            matrices.push(store.add(format!("{name}.m{i}"), Array::full(&[channels, fout, fin], T::of(init)), Group::Aux));
            let b = (0..channels * fout).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect();
            biases.push(store.add(format!("{name}.b{i}"), Array::new(&[channels, fout, 1], b).unwrap(), Group::Aux));
            if i + 1 < stages {
                factors.push(store.add(format!("{name}.f{i}"), Array::zeros(&[channels, fout, 1]), Group::Aux));
            }
        }
        Self { channels, matrices, biases, factors }
    }

    /// Logits of the CDF for `x` shaped [C, 1, L].
    fn logits_tape<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.matrices.len() {
            let m = store.bind(tape, self.matrices[i]);
            let m = tape.unary(Unary::Softplus, m);
            h = tape.bmm(m, h)?;
            let b = store.bind(tape, self.biases[i]);
            h = tape.add(h, b)?;
            if let Some(&f) = self.factors.get(i) {
                let f = store.bind(tape, f);
                let f = tape.unary(Unary::Tanh, f);
                let t = tape.unary(Unary::Tanh, h);
                let ft = tape.mul(f, t)?;
                h = tape.add(h, ft)?;
            }
        }
        Ok(h)
    }

    /// Per-element bits of `y` [N, C, H, W] (same shape).
    pub fn bits_tape<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        let shape = tape.shape(y).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(crate::error::shape_err("channel", format!("density has {} channels, input {shape:?}", self.channels)));
        }
        let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let t = tape.reshape(y, &[n, c, hw])?;
        let t = tape.permute(t, &[1, 0, 2])?;
        let t = tape.reshape(t, &[c, 1, n * hw])?;
        let up = tape.shift(t, 0.5);
        let dn = tape.shift(t, -0.5);
        let lu = self.logits_tape(tape, store, up)?;
        let ld = self.logits_tape(tape, store, dn)?;
        // evaluate in the tail where the sigmoid is most accurate
        let sum: Vec<T> = tape.value(lu).data().iter().zip(tape.value(ld).data()).map(|(&a, &b)| a + b).collect();
        let sign = Array::new(tape.shape(lu), sum.iter().map(|&s| if s > T::zero() { -T::one() } else { T::one() }).collect())?;
        let sign = tape.constant(sign);
        let su = tape.mul(lu, sign)?;
        let sd = tape.mul(ld, sign)?;
        let pu = tape.unary(Unary::Sigmoid, su);
        let pd = tape.unary(Unary::Sigmoid, sd);
        let p = tape.sub(pu, pd)?;
        let p = tape.unary(Unary::Abs, p);
        let bits = neg_log2_floored(tape, p);
        let bits = tape.reshape(bits, &[c, n, hw])?;
        let bits = tape.permute(bits, &[1, 0, 2])?;
        tape.reshape(bits, &shape)
    }

    /// CDF logit of channel `ch` at `x`, in f64.
    pub fn logit<T: Float>(&self, store: &ParamStore<T>, ch: usize, x: f64) -> f64 {
        let mut h = vec![x];
        for i in 0..self.matrices.len() {
            let (fin, fout) = (FD_FILTERS[i], FD_FILTERS[i + 1]);
            let m = &store.value(self.matrices[i]).data()[ch * fout * fin..(ch + 1) * fout * fin];
            let b = &store.value(self.biases[i]).data()[ch * fout..(ch + 1) * fout];
            let mut out = vec![0.0; fout];
            for o in 0..fout {
                let mut acc = 0.0;
                for k in 0..fin {
                    acc += fmath::softplus(m[o * fin + k].f64()) * h[k];
                }
                out[o] = acc + b[o].f64();
            }
            if let Some(&f) = self.factors.get(i) {
                let fv = &store.value(f).data()[ch * fout..(ch + 1) * fout];
                for o in 0..fout {
                    out[o] += fmath::tanh(fv[o].f64()) * fmath::tanh(out[o]);
                }
            }
            h = out;
        }
        h[0]
    }

    pub fn cdf<T: Float>(&self, store: &ParamStore<T>, ch: usize, x: f64) -> f64 {
        fmath::sigmoid(self.logit(store, ch, x))
    }

    /// Integer-bin probability of `k` in channel `ch`.
    pub fn prob<T: Float>(&self, store: &ParamStore<T>, ch: usize, k: i32) -> f64 {
        let lu = self.logit(store, ch, k as f64 + 0.5);
        let ld = self.logit(store, ch, k as f64 - 0.5);
        let s = if lu + ld > 0.0 { -1.0 } else { 1.0 };
        (fmath::sigmoid(s * lu) - fmath::sigmoid(s * ld)).abs()
    }

    /// Coding tables per channel over the symbols carrying non-negligible mass.
    pub fn tables<T: Float>(&self, store: &ParamStore<T>) -> Result<Vec<CdfTable>> {
        (0..self.channels)
            .map(|ch| {
                let tail = TAIL_MASS / 2.0;
                let mut lo = -FD_SCAN;
                while lo < 0 && self.cdf(store, ch, lo as f64 + 0.5) < tail {
                    lo += 1;
                }
                let mut hi = FD_SCAN;
                while hi > lo && 1.0 - self.cdf(store, ch, hi as f64 - 0.5) < tail {
                    hi -= 1;
                }
                let probs: Vec<f64> = (lo..=hi).map(|k| self.prob(store, ch, k)).collect();
                CdfTable::from_probs(lo, &probs)
            })
            .collect()
    }

    /// Bits of `yhat` laid out [C][L] under the f64 density.
    pub fn bits<T: Float>(&self, store: &ParamStore<T>, yhat: &[i32]) -> f64 {
        let l = yhat.len() / self.channels.max(1);
        yhat.iter()
            .enumerate()
            .map(|(i, &k)| -fmath::log2(self.prob(store, i / l, k).max(TAIL_MASS)))
            .sum()
    }
}

// ------------------------------------------------------------------ channel groups

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec(pub Vec<usize>);

impl GroupSpec {
    pub fn new(sizes: Vec<usize>, m: usize) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) || sizes.iter().sum::<usize>() != m {
            return Err(Error::Invalid(format!("group sizes {sizes:?} must be positive and sum to {m}")));
        }
        Ok(Self(sizes))
    }

    /// `[16, 16, 32, 64, M-128]` for `M > 128`, otherwise the same
    /// doubling shape scaled down to `M/16` as the first size.
    pub fn default_for(m: usize) -> Self {
        if m > 128 {
            return Self(vec![16, 16, 32, 64, m - 128]);
        }
        let u = (m / 16).max(1);
        let mut s = vec![u, u, 2 * u, 4 * u];
        let used: usize = s.iter().sum();
        if m > used {
            s.push(m - used);
        }
        Self(s)
    }

    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.0
            .iter()
            .map(|&s| {
                let o = acc;
                acc += s;
                o
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Checkerboard anchor: `(h + w)` even.
pub fn is_anchor(h: usize, w: usize) -> bool {
    (h + w) % 2 == 0
}

/// Checkerboard indicator over [1, 1, H, W].
pub fn anchor_mask<T: Float>(h: usize, w: usize, anchor: bool) -> Array<T> {
    let d = (0..h * w)
        .map(|i| if is_anchor(i / w, i % w) == anchor { T::one() } else { T::zero() })
        .collect();
    Array::new(&[1, 1, h, w], d).unwrap()
}

/// Space–channel context: per group a 3×3 checkerboard conv over decoded
/// anchors and a two-layer 1×1 parameter network.
#[derive(Clone, Debug)]
pub struct ElicContext {
    pub groups: GroupSpec,
    pub hyper_channels: usize,
    spatial: Vec<Layer>,
    param_in: Vec<Layer>,
    param_out: Vec<Layer>,
}

impl ElicContext {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, groups: GroupSpec, hyper_channels: usize, rng: &mut impl Rng) -> Self {
        let offs = groups.offsets();
        let (mut spatial, mut param_in, mut param_out) = (Vec::new(), Vec::new(), Vec::new());
        for (g, &s) in groups.0.iter().enumerate() {
            spatial.push(Layer::new(LayerSpec::conv(s, 2 * s, 3, 1), store, &format!("{name}.sp{g}"), rng));
            let cin = hyper_channels + offs[g] + 2 * s;
            let hid = (4 * s).max(hyper_channels);
            param_in.push(Layer::new(LayerSpec::conv(cin, hid, 1, 1), store, &format!("{name}.p{g}a"), rng));
            param_out.push(Layer::new(LayerSpec::conv(hid, 2 * s, 1, 1), store, &format!("{name}.p{g}b"), rng));
        }
        Self { groups, hyper_channels, spatial, param_in, param_out }
    }

    /// Spatial context of group `g` from its latent slice; anchors read
    /// nothing and non-anchors read only anchors.
    fn spatial_ctx<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, g: usize, yg: Var) -> Result<Var> {
        let s = tape.shape(yg).to_vec();
        let am = tape.constant(anchor_mask(s[2], s[3], true));
        let nm = tape.constant(anchor_mask(s[2], s[3], false));
        let ya = tape.mul(yg, am)?;
        let c = self.spatial[g].forward(tape, store, ya)?;
        tape.mul(c, nm)
    }

    /// `(mu, sigma)` of group `g` from hyper features, previous groups and
    /// the spatial context (`None` = all zeros, the anchor pass).
    pub fn group_params<T: Float>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        g: usize,
        hyper: Var,
        prev: Option<Var>,
        ctx: Option<Var>,
    ) -> Result<(Var, Var)> {
        let s = tape.shape(hyper).to_vec();
        let size = self.groups.0[g];
        let ctx = match ctx {
            Some(c) => c,
            None => tape.constant(Array::zeros(&[s[0], 2 * size, s[2], s[3]])),
        };
        let mut parts = vec![hyper];
        parts.extend(prev);
        parts.push(ctx);
        let x = tape.concat(&parts, 1)?;
        let h = self.param_in[g].forward(tape, store, x)?;
        let h = tape.gelu(h);
        let p = self.param_out[g].forward(tape, store, h)?;
        let mu = tape.narrow(p, 1, 0, size)?;
        let raw = tape.narrow(p, 1, size, size)?;
        Ok((mu, sigma_from_raw(tape, raw)))
    }

    /// Training-time prediction for all groups in parallel; `y` is the
    /// (noisy) latent. Returns per-group `(mu, sigma)` concatenated to `y`'s shape.
    pub fn predict_parallel<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hyper: Var, y: Var) -> Result<(Var, Var)> {
        let offs = self.groups.offsets();
        let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
        for (g, &size) in self.groups.0.iter().enumerate() {
            let yg = tape.narrow(y, 1, offs[g], size)?;
            let prev = if g > 0 { Some(tape.narrow(y, 1, 0, offs[g])?) } else { None };
            let ctx = self.spatial_ctx(tape, store, g, yg)?;
            let (m, s) = self.group_params(tape, store, g, hyper, prev, Some(ctx))?;
            mus.push(m);
            sigmas.push(s);
        }
        Ok((tape.concat(&mus, 1)?, tape.concat(&sigmas, 1)?))
    }

    /// Staged prediction in decode order. `decode_group(g, anchor, mu, sigma)`
    /// returns the group's latent slice with that parity filled in (the other
    /// parity may hold anything); it is called anchors-first per group.
    /// Returns the full latent [1, M, H, W] as f32.
    pub fn staged<T: Float>(
        &self,
        store: &ParamStore<T>,
        hyper: &Array<T>,
        mut decode_group: impl FnMut(usize, bool, &Array<T>, &Array<T>) -> Result<Array<T>>,
    ) -> Result<Array<T>> {
        let s = hyper.shape().to_vec();
        let (h, w) = (s[2], s[3]);
        let mut decoded: Vec<Array<T>> = Vec::new();
        for g in 0..self.groups.len() {
            let size = self.groups.0[g];
            let mut tape = Tape::new();
            let hv = tape.constant(hyper.clone());
            let prev = if g > 0 {
                let parts: Vec<Var> = decoded.iter().map(|a| tape.constant(a.clone())).collect();
                Some(tape.concat(&parts, 1)?)
            } else {
                None
            };
            let (mu, sigma) = self.group_params(&mut tape, store, g, hv, prev, None)?;
            let anchors = decode_group(g, true, tape.value(mu), tape.value(sigma))?;
            let am: Array<T> = anchor_mask(h, w, true);
            let ya = mul_mask(&anchors, &am);
            let yv = tape.constant(ya.clone());
            let ctx = self.spatial_ctx(&mut tape, store, g, yv)?;
            let (mu2, sigma2) = self.group_params(&mut tape, store, g, hv, prev, Some(ctx))?;
            let rest = decode_group(g, false, tape.value(mu2), tape.value(sigma2))?;
            let nm: Array<T> = anchor_mask(h, w, false);
            let mut full = mul_mask(&rest, &nm);
            full.add_assign(&ya);
            debug_assert_eq!(full.shape(), &[1, size, h, w]);
            decoded.push(full);
        }
        let mut tape = Tape::<T>::new();
        let parts: Vec<Var> = decoded.into_iter().map(|a| tape.constant(a)).collect();
        let all = tape.concat(&parts, 1)?;
        Ok(tape.value(all).clone())
    }
}

fn mul_mask<T: Float>(x: &Array<T>, mask: &Array<T>) -> Array<T> {
    let hw = mask.len();
    let d = x.data().iter().enumerate().map(|(i, &v)| v * mask.data()[i % hw]).collect();
    Array::new(x.shape(), d).unwrap()
}
