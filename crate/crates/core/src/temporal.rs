//! Temporal-transformer prior: block tokenization, context encoders and the
//! causal token decoder.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::sigma_from_raw;
use crate::error::{shape_err, Error, Result};
use crate::grad::conv::reflect;
use crate::grad::layers::{Layer, LayerSpec};
use crate::grad::params::{fan_in_uniform, Group, ParamStore};
use crate::grad::tape::{ParamId, Tape, Var};
use crate::grad::{Array, Float};

/// Side of a current-frame block in latent cells.
pub const BLOCK: usize = 4;
/// Tokens per current block.
pub const TOKENS: usize = BLOCK * BLOCK;
/// Side of a past-frame context window.
pub const PAST_BLOCK: usize = 8;
pub const PAST_TOKENS: usize = PAST_BLOCK * PAST_BLOCK;

fn check_grid(h: usize, w: usize) -> Result<()> {
    for (axis, ext) in [("height", h), ("width", w)] {
        if ext == 0 || ext % BLOCK != 0 {
            return Err(shape_err(axis, format!("latent extent {ext} not divisible by {BLOCK}")));
        }
    }
    Ok(())
}

/// Blocks per latent of extent `h x w`.
pub fn num_blocks(h: usize, w: usize) -> usize {
    (h / BLOCK) * (w / BLOCK)
}

/// Source offsets (into [N, M, H, W]) of current tokens [N·B, 16, M];
/// blocks row-major, tokens `t = 4·dy + dx`.
pub fn current_index(n: usize, m: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    check_grid(h, w)?;
    let mut idx = Vec::with_capacity(n * m * h * w);
    for i in 0..n {
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                for t in 0..TOKENS {
                    let (y, x) = (by * BLOCK + t / BLOCK, bx * BLOCK + t % BLOCK);
                    for c in 0..m {
                        idx.push(((i * m + c) * h + y) * w + x);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Source offsets of past tokens [N·B, 64, M]: the 8×8 window centred on
/// each current block, reflect-padded at the borders.
pub fn past_index(n: usize, m: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    check_grid(h, w)?;
    let pad = (PAST_BLOCK - BLOCK) as isize / 2;
    let mut idx = Vec::with_capacity(n * num_blocks(h, w) * PAST_TOKENS * m);
    for i in 0..n {
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                for t in 0..PAST_TOKENS {
                    let y = reflect((by * BLOCK) as isize - pad + (t / PAST_BLOCK) as isize, h);
                    let x = reflect((bx * BLOCK) as isize - pad + (t % PAST_BLOCK) as isize, w);
                    for c in 0..m {
                        idx.push(((i * m + c) * h + y) * w + x);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Source offsets of repacked tokens [N·B, T, M]: token `u` holds channels
/// `[u·k, (u+1)·k)` of every block position, position-major.
pub fn repacked_index(n: usize, m: usize, h: usize, w: usize, t: usize) -> Result<Vec<usize>> {
    check_grid(h, w)?;
    if t == 0 || m % t != 0 {
        return Err(shape_err("channel", format!("d_lat {m} not divisible by {t} tokens")));
    }
    if (m / t) * TOKENS != m {
        return Err(shape_err("token", format!("{t} repacked tokens do not match {TOKENS} block positions")));
    }
    let k = m / t;
    let mut idx = Vec::with_capacity(n * m * h * w);
    for i in 0..n {
        for by in 0..h / BLOCK {
            for bx in 0..w / BLOCK {
                for u in 0..t {
                    for p in 0..TOKENS {
                        let (y, x) = (by * BLOCK + p / BLOCK, bx * BLOCK + p % BLOCK);
                        for j in 0..k {
                            idx.push(((i * m + u * k + j) * h + y) * w + x);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of a permutation index.
pub fn invert(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (i, &s) in idx.iter().enumerate() {
        inv[s] = i;
    }
    inv
}

pub fn gather<T: Float>(a: &Array<T>, idx: &[usize], shape: &[usize]) -> Array<T> {
    Array::new(shape, idx.iter().map(|&i| a.data()[i]).collect()).unwrap()
}

/// Tokens [N·B, 16, M] of latent [N, M, H, W].
pub fn tokenize_current<T: Float>(lat: &Array<T>) -> Result<Array<T>> {
    let (n, m, h, w) = dims4(lat)?;
    let idx = current_index(n, m, h, w)?;
    Ok(gather(lat, &idx, &[n * num_blocks(h, w), TOKENS, m]))
}

pub fn untokenize_current<T: Float>(tokens: &Array<T>, n: usize, h: usize, w: usize) -> Result<Array<T>> {
    let m = *tokens.shape().last().unwrap_or(&0);
    let idx = current_index(n, m, h, w)?;
    if idx.len() != tokens.len() {
        return Err(shape_err("token", format!("{} values for a {n}x{m}x{h}x{w} latent", tokens.len())));
    }
    Ok(gather(tokens, &invert(&idx), &[n, m, h, w]))
}

pub fn tokenize_past<T: Float>(lat: &Array<T>) -> Result<Array<T>> {
    let (n, m, h, w) = dims4(lat)?;
    let idx = past_index(n, m, h, w)?;
    Ok(gather(lat, &idx, &[n * num_blocks(h, w), PAST_TOKENS, m]))
}

pub(crate) fn dims4<T: Float>(a: &Array<T>) -> Result<(usize, usize, usize, usize)> {
    match *a.shape() {
        [n, m, h, w] => Ok((n, m, h, w)),
        ref s => Err(shape_err("rank", format!("expected [N, M, H, W], got {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TTConfig {
    pub d_lat: usize,
    pub d_tt: usize,
    pub heads: usize,
    pub sep_layers: usize,
    pub joint_layers: usize,
    pub dec_layers: usize,
    pub mlp_ratio: usize,
}

impl TTConfig {
    pub fn desk(d_lat: usize) -> Self {
        Self { d_lat, d_tt: 128, heads: 4, sep_layers: 3, joint_layers: 2, dec_layers: 3, mlp_ratio: 4 }
    }

    pub fn full(d_lat: usize) -> Self {
        Self { d_lat, d_tt: 768, heads: 16, sep_layers: 6, joint_layers: 4, dec_layers: 5, mlp_ratio: 4 }
    }

    /// Reduced width and depth for quick runs; keeps the 3-stage layout.
    pub fn small(d_lat: usize) -> Self {
        Self { d_lat, d_tt: 64, heads: 4, sep_layers: 1, joint_layers: 1, dec_layers: 2, mlp_ratio: 4 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_tt % self.heads != 0 {
            return Err(Error::Invalid(format!("d_tt {} not divisible by {} heads", self.d_tt, self.heads)));
        }
        if self.d_lat == 0 || self.mlp_ratio == 0 {
            return Err(Error::Invalid("transformer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: Layer,
    attn: Layer,
    ln2: Layer,
    fc1: Layer,
    fc2: Layer,
}

impl EncoderLayer {
    fn new<T: Float>(cfg: &TTConfig, store: &mut ParamStore<T>, name: &str, causal: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.d_tt;
        Self {
            ln1: Layer::new(LayerSpec::LayerNorm { width: d }, store, &format!("{name}.ln1"), rng),
            attn: Layer::new(LayerSpec::MultiheadAttention { width: d, heads: cfg.heads, causal }, store, &format!("{name}.attn"), rng),
            ln2: Layer::new(LayerSpec::LayerNorm { width: d }, store, &format!("{name}.ln2"), rng),
            fc1: Layer::new(LayerSpec::Linear { din: d, dout: d * cfg.mlp_ratio }, store, &format!("{name}.fc1"), rng),
            fc2: Layer::new(LayerSpec::Linear { din: d * cfg.mlp_ratio, dout: d }, store, &format!("{name}.fc2"), rng),
        }
    }

    fn mlp<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let h = self.attn.attend(tape, store, h, h)?;
        let x = tape.add(x, h)?;
        self.mlp(tape, store, x)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    inner: EncoderLayer,
    ln_x: Layer,
    cross: Layer,
}

impl DecoderLayer {
    fn new<T: Float>(cfg: &TTConfig, store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Self {
        let d = cfg.d_tt;
        Self {
            inner: EncoderLayer::new(cfg, store, name, true, rng),
            ln_x: Layer::new(LayerSpec::LayerNorm { width: d }, store, &format!("{name}.lnx"), rng),
            cross: Layer::new(LayerSpec::MultiheadAttention { width: d, heads: cfg.heads, causal: false }, store, &format!("{name}.cross"), rng),
        }
    }

    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, ctx: Var) -> Result<Var> {
        let h = self.inner.ln1.forward(tape, store, x)?;
        let h = self.inner.attn.attend(tape, store, h, h)?;
        let x = tape.add(x, h)?;
        let h = self.ln_x.forward(tape, store, x)?;
        let h = self.cross.attend(tape, store, h, ctx)?;
        let x = tape.add(x, h)?;
        self.inner.mlp(tape, store, x)
    }
}

/// Past frames handed to the prior, oldest first, as tokens [B, 64, d_lat].
#[derive(Clone, Copy, Debug)]
pub enum Past {
    /// No temporal context: the learned dummy context is used.
    None,
    Two(Var, Var),
}

/// Token-wise Gaussian prior conditioned on past frames.
#[derive(Clone, Debug)]
pub struct TemporalPrior {
    pub cfg: TTConfig,
    in_past: Layer,
    pos_past: ParamId,
    frame_emb: ParamId,
    sep: Vec<EncoderLayer>,
    joint: Vec<EncoderLayer>,
    joint_norm: Layer,
    dummy: ParamId,
    in_cur: Layer,
    sos: ParamId,
    pos_cur: ParamId,
    dec: Vec<DecoderLayer>,
    dec_norm: Layer,
    head: Vec<Layer>,
}

fn small_init<T: Float>(rng: &mut impl Rng, shape: &[usize]) -> Array<T> {
    fan_in_uniform::<T>(rng, shape, 1).map(|v| v * T::of(0.1))
}

impl TemporalPrior {
    pub fn new<T: Float>(cfg: TTConfig, store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, dl) = (cfg.d_tt, cfg.d_lat);
        let lin = |store: &mut ParamStore<T>, din, dout, n: &str, rng: &mut _| {
            Layer::new(LayerSpec::Linear { din, dout }, store, &format!("{name}.{n}"), rng)
        };
        let in_past = lin(store, dl, d, "in_past", rng);
        let pos_past = store.add(format!("{name}.pos_past"), small_init(rng, &[PAST_TOKENS, d]), Group::Main);
        let frame_emb = store.add(format!("{name}.frame_emb"), small_init(rng, &[2, 1, d]), Group::Main);
        let sep = (0..cfg.sep_layers).map(|i| EncoderLayer::new(&cfg, store, &format!("{name}.sep{i}"), false, rng)).collect();
        let joint = (0..cfg.joint_layers).map(|i| EncoderLayer::new(&cfg, store, &format!("{name}.joint{i}"), false, rng)).collect();
        let joint_norm = Layer::new(LayerSpec::LayerNorm { width: d }, store, &format!("{name}.joint_norm"), rng);
        let dummy = store.add(format!("{name}.dummy"), small_init(rng, &[1, 1, d]), Group::Main);
        let in_cur = lin(store, dl, d, "in_cur", rng);
        let sos = store.add(format!("{name}.sos"), small_init(rng, &[1, 1, d]), Group::Main);
        let pos_cur = store.add(format!("{name}.pos_cur"), small_init(rng, &[TOKENS, d]), Group::Main);
        let dec = (0..cfg.dec_layers).map(|i| DecoderLayer::new(&cfg, store, &format!("{name}.dec{i}"), rng)).collect();
        let dec_norm = Layer::new(LayerSpec::LayerNorm { width: d }, store, &format!("{name}.dec_norm"), rng);
        let head = vec![lin(store, d, d, "head0", rng), lin(store, d, d, "head1", rng), lin(store, d, 2 * dl, "head2", rng)];
        store.set_decay(&format!("{name}."), true);
        Ok(Self { cfg, in_past, pos_past, frame_emb, sep, joint, joint_norm, dummy, in_cur, sos, pos_cur, dec, dec_norm, head })
    }

    fn check_tokens<T: Float>(&self, tape: &Tape<T>, v: Var, len: usize) -> Result<usize> {
        let s = tape.shape(v);
        if s.len() != 3 || s[1] != len || s[2] != self.cfg.d_lat {
            return Err(shape_err("token", format!("expected [B, {len}, {}], got {s:?}", self.cfg.d_lat)));
        }
        Ok(s[0])
    }

    /// Context embedding [B, S, d_tt]: 128 fused tokens with past frames,
    /// a single learned token without.
    pub fn context<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, past: Past, blocks: usize) -> Result<Var> {
        let (p1, p2) = match past {
            Past::None => {
                let zeros = tape.constant(Array::zeros(&[blocks, 1, self.cfg.d_tt]));
                let dm = store.bind(tape, self.dummy);
                return tape.add(zeros, dm);
            }
            Past::Two(a, b) => (a, b),
        };
        let pos = store.bind(tape, self.pos_past);
        let fe = store.bind(tape, self.frame_emb);
        let mut enc = Vec::with_capacity(2);
        for (f, p) in [p1, p2].into_iter().enumerate() {
            let b = self.check_tokens(tape, p, PAST_TOKENS)?;
            if b != blocks {
                return Err(shape_err("block", format!("{b} past blocks for {blocks} current blocks")));
            }
            let mut h = self.in_past.forward(tape, store, p)?;
            h = tape.add(h, pos)?;
            let e = tape.narrow(fe, 0, f, 1)?;
            h = tape.add(h, e)?;
            for l in &self.sep {
                h = l.forward(tape, store, h)?;
            }
            enc.push(h);
        }
        let mut h = tape.concat(&enc, 1)?;
        for l in &self.joint {
            h = l.forward(tape, store, h)?;
        }
        self.joint_norm.forward(tape, store, h)
    }

    /// Prior parameters [B, 16, d_lat] for every position of `tokens`
    /// [B, 16, d_lat]; position `t` only sees tokens `< t` and the context.
    pub fn priors<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ctx: Var, tokens: Var) -> Result<(Var, Var)> {
        let b = self.check_tokens(tape, tokens, TOKENS)?;
        let d = self.cfg.d_tt;
        let prefix = tape.narrow(tokens, 1, 0, TOKENS - 1)?;
        let emb = self.in_cur.forward(tape, store, prefix)?;
        let zeros = tape.constant(Array::zeros(&[b, 1, d]));
        let sos = store.bind(tape, self.sos);
        let sos = tape.add(zeros, sos)?;
        let mut h = tape.concat(&[sos, emb], 1)?;
        let pos = store.bind(tape, self.pos_cur);
        h = tape.add(h, pos)?;
        for l in &self.dec {
            h = l.forward(tape, store, h, ctx)?;
        }
        h = self.dec_norm.forward(tape, store, h)?;
        for (i, l) in self.head.iter().enumerate() {
            h = l.forward(tape, store, h)?;
            if i + 1 < self.head.len() {
                h = tape.gelu(h);
            }
        }
        let dl = self.cfg.d_lat;
        let mu = tape.narrow(h, 2, 0, dl)?;
        let raw = tape.narrow(h, 2, dl, dl)?;
        Ok((mu, sigma_from_raw(tape, raw)))
    }
}

/// Past-frame tokens on a tape from latents [N, M, H, W].
pub fn past_tokens<T: Float>(tape: &mut Tape<T>, lat: Var) -> Result<Var> {
    let s = tape.shape(lat).to_vec();
    let [n, m, h, w] = s[..] else {
        return Err(shape_err("rank", format!("expected [N, M, H, W], got {s:?}")));
    };
    let idx: Rc<[usize]> = past_index(n, m, h, w)?.into();
    tape.gather(lat, idx, &[n * num_blocks(h, w), PAST_TOKENS, m])
}

/// Current-frame tokens on a tape; `repack` selects channel-slice tokens.
pub fn current_tokens<T: Float>(tape: &mut Tape<T>, lat: Var, repack: bool) -> Result<Var> {
    let s = tape.shape(lat).to_vec();
    let [n, m, h, w] = s[..] else {
        return Err(shape_err("rank", format!("expected [N, M, H, W], got {s:?}")));
    };
    let idx: Rc<[usize]> = if repack { repacked_index(n, m, h, w, TOKENS)? } else { current_index(n, m, h, w)? }.into();
    tape.gather(lat, idx, &[n * num_blocks(h, w), TOKENS, m])
}

/// Latent [N, M, H, W] from tokens produced by [`current_tokens`].
pub fn untokenize<T: Float>(tape: &mut Tape<T>, tokens: Var, n: usize, h: usize, w: usize, repack: bool) -> Result<Var> {
    let m = tape.shape(tokens)[2];
    let idx = if repack { repacked_index(n, m, h, w, TOKENS)? } else { current_index(n, m, h, w)? };
    let inv: Rc<[usize]> = invert(&idx).into();
    tape.gather(tokens, inv, &[n, m, h, w])
}
