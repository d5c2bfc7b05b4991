//! Latent repacking, budget masking and the flexible-rate loss.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::grad::params::{Group, ParamStore};
use crate::grad::tape::{ParamId, Tape, Var};
use crate::grad::{Array, Float};

/// Channel-slice tokens of one block: token `u` holds channels
/// `[u·k, (u+1)·k)` at every position, position-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RepackedTokens<T> {
    pub tokens: usize,
    pub k: usize,
    pub positions: usize,
    pub data: Vec<T>,
}

impl<T: Copy> RepackedTokens<T> {
    pub fn token(&self, u: usize) -> &[T] {
        let len = self.k * self.positions;
        &self.data[u * len..(u + 1) * len]
    }

    /// Inverse of [`repack`]: block values in H·W·C order.
    pub fn unpack(&self) -> Vec<T> {
        let d = self.k * self.tokens;
        let mut out = self.data.clone();
        for u in 0..self.tokens {
            for p in 0..self.positions {
                for j in 0..self.k {
                    out[p * d + u * self.k + j] = self.data[(u * self.positions + p) * self.k + j];
                }
            }
        }
        out
    }
}

/// Repacks a block stored as H·W·C (channel fastest) into `t` tokens.
pub fn repack<T: Copy>(block: &[T], positions: usize, d_lat: usize, t: usize) -> Result<RepackedTokens<T>> {
    if t == 0 || d_lat % t != 0 {
        return Err(shape_err("channel", format!("d_lat {d_lat} not divisible by {t} tokens")));
    }
    if block.len() != positions * d_lat {
        return Err(shape_err("block", format!("{} values for {positions} positions x {d_lat} channels", block.len())));
    }
    let k = d_lat / t;
    let mut data = Vec::with_capacity(block.len());
    for u in 0..t {
        for p in 0..positions {
            data.extend_from_slice(&block[p * d_lat + u * k..p * d_lat + (u + 1) * k]);
        }
    }
    Ok(RepackedTokens { tokens: t, k, positions, data })
}

/// Pr(K = k) for k = 1..=t, proportional to k.
pub fn budget_probs(t: usize) -> Vec<f64> {
    let z = (t * (t + 1)) as f64 / 2.0;
    (1..=t).map(|k| k as f64 / z).collect()
}

pub fn sample_budget(t: usize, rng: &mut impl Rng) -> usize {
    let total = t * (t + 1) / 2;
    let mut r = rng.gen_range(0..total.max(1));
    for k in 1..=t {
        if r < k {
            return k;
        }
        r -= k;
    }
    t.max(1)
}

fn check_budget(k: usize, t: usize) -> Result<()> {
    if k == 0 || k > t {
        return Err(Error::Invalid(format!("budget {k} outside [1, {t}]")));
    }
    Ok(())
}

/// Indicator over tokens: `true` for kept tokens.
pub fn budget_indicator(k: usize, t: usize) -> Vec<bool> {
    (0..t).map(|u| u < k).collect()
}

/// Replaces tokens `u >= k` of [B, T, D] by `m` (length D).
pub fn apply_mask<T: Float>(tokens: &Array<T>, k: usize, m: &[T]) -> Result<(Array<T>, Vec<bool>)> {
    let [b, t, d] = *tokens.shape() else {
        return Err(shape_err("rank", format!("expected [B, T, D], got {:?}", tokens.shape())));
    };
    check_budget(k, t)?;
    if m.len() != d {
        return Err(shape_err("token", format!("mask of length {} for tokens of width {d}", m.len())));
    }
    let mut out = tokens.clone();
    for bi in 0..b {
        for u in k..t {
            out.data_mut()[(bi * t + u) * d..(bi * t + u + 1) * d].copy_from_slice(m);
        }
    }
    Ok((out, budget_indicator(k, t)))
}

/// Tape form of [`apply_mask`]; `m` is a [D] variable.
pub fn apply_mask_tape<T: Float>(tape: &mut Tape<T>, tokens: Var, k: usize, m: Var) -> Result<Var> {
    let [b, t, d] = *tape.shape(tokens) else {
        return Err(shape_err("rank", format!("expected [B, T, D], got {:?}", tape.shape(tokens))));
    };
    check_budget(k, t)?;
    if k == t {
        return Ok(tokens);
    }
    let keep = tape.narrow(tokens, 1, 0, k)?;
    let zeros = tape.constant(Array::zeros(&[b, t - k, d]));
    let m = tape.reshape(m, &[1, 1, d])?;
    let fill = tape.add(zeros, m)?;
    tape.concat(&[keep, fill], 1)
}

/// Learned mask token, initialized uniformly in [-1, 1].
pub fn init_mask<T: Float>(store: &mut ParamStore<T>, name: &str, d_lat: usize, rng: &mut impl Rng) -> ParamId {
    let v = (0..d_lat).map(|_| T::of(rng.gen_range(-1.0..=1.0))).collect();
    store.add(name, Array::new(&[d_lat], v).unwrap(), Group::Main)
}

/// Bits of the kept tokens only.
pub fn masked_rate(token_bits: &[f64], kept: &[bool]) -> Result<f64> {
    if token_bits.len() != kept.len() {
        return Err(shape_err("token", format!("{} token rates for {} indicators", token_bits.len(), kept.len())));
    }
    Ok(token_bits.iter().zip(kept).filter(|(_, &k)| k).map(|(b, _)| b).sum())
}

/// `(T/K)·R + λ·D`.
pub fn flex_loss(rate: f64, distortion: f64, k: usize, t: usize, lambda: f64) -> Result<f64> {
    check_budget(k, t)?;
    Ok(t as f64 / k as f64 * rate + lambda * distortion)
}

/// Per-token rate on a tape: sums per-element bits [B, T, D] over the kept
/// tokens and scales by T/K.
pub fn flex_rate_tape<T: Float>(tape: &mut Tape<T>, bits: Var, k: usize) -> Result<Var> {
    let t = tape.shape(bits).get(1).copied().unwrap_or(0);
    check_budget(k, t)?;
    let kept = tape.narrow(bits, 1, 0, k)?;
    let s = tape.sum(kept);
    Ok(tape.scale(s, t as f64 / k as f64))
}
