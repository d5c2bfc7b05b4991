//! Integer CDF tables and the Gaussian table cache.

use std::collections::HashMap;
use std::sync::Arc;

use super::range::{Decoder, Encoder, TOTAL};
use crate::error::{Error, Result};
use crate::fmath;

/// Smallest coding scale.
pub const SIGMA_MIN: f64 = 0.11;
/// Largest entry of the scale table.
pub const SIGMA_MAX: f64 = 64.0;
pub const SCALE_LEVELS: usize = 64;
/// Means are snapped to this many steps per unit before table lookup.
pub const MU_STEPS: i64 = 64;
/// Bits spent on an escaped value after the escape symbol.
pub const ESCAPE_BITS: f64 = 32.0;
/// Largest regular alphabet a table may hold.
pub const MAX_SYMBOLS: usize = (TOTAL as usize) / 4;

/// Cumulative frequencies over `[offset, offset + n)` plus a trailing escape
/// symbol; out-of-range values are sent as escape + raw 32 bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    offset: i32,
    cdf: Vec<u32>,
}

impl CdfTable {
    /// Builds a table from regular-symbol probabilities; the escape symbol
    /// receives the leftover mass. Every symbol gets frequency ≥ 1.
    pub fn from_probs(offset: i32, probs: &[f64]) -> Result<Self> {
        let n = probs.len() + 1;
        if probs.is_empty() || n > MAX_SYMBOLS {
            return Err(Error::Invalid(format!("alphabet of {} symbols exceeds coder precision", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite("probability table".into()));
        }
        let spare = (TOTAL as usize - n) as f64;
        let mut freq: Vec<u32> = probs.iter().map(|&p| 1 + (p.min(1.0) * spare) as u32).collect();
        let used: u32 = freq.iter().sum();
        let esc_mass = (1.0 - probs.iter().sum::<f64>()).max(0.0);
        let esc = (1 + (esc_mass * spare) as u32).min(TOTAL - used);
        let left = TOTAL - used - esc;
        let mode = (0..freq.len()).fold(0, |m, i| if freq[i] > freq[m] { i } else { m });
        freq[mode] += left;
        freq.push(esc);
        let mut cdf = Vec::with_capacity(n + 1);
        let mut acc = 0;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        Ok(Self { offset, cdf })
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Regular symbols, excluding the escape.
    pub fn num_regular(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn range(&self) -> (i32, i32) {
        (self.offset, self.offset + self.num_regular() as i32 - 1)
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn freq(&self, idx: usize) -> u32 {
        self.cdf[idx + 1] - self.cdf[idx]
    }

    fn index(&self, v: i32) -> Option<usize> {
        let i = v as i64 - self.offset as i64;
        (0..self.num_regular() as i64).contains(&i).then_some(i as usize)
    }

    /// Exact code length in bits the coder's model assigns to `v`.
    pub fn bits(&self, v: i32) -> f64 {
        match self.index(v) {
            Some(i) => PRECISION_F - fmath::log2(self.freq(i) as f64),
            None => PRECISION_F - fmath::log2(self.freq(self.num_regular()) as f64) + ESCAPE_BITS,
        }
    }

    pub fn encode(&self, enc: &mut Encoder, v: i32) {
        match self.index(v) {
            Some(i) => enc.encode(self.cdf[i], self.freq(i)),
            None => {
                let e = self.num_regular();
                enc.encode(self.cdf[e], self.freq(e));
                let u = v as u32;
                enc.encode_bits16(u >> 16);
                enc.encode_bits16(u & 0xffff);
            }
        }
    }

    pub fn decode(&self, dec: &mut Decoder<'_>) -> Result<i32> {
        let target = dec.peek();
        // last index with cdf[i] <= target
        let i = self.cdf.partition_point(|&c| c <= target) - 1;
        dec.consume(self.cdf[i], self.freq(i))?;
        if i < self.num_regular() {
            return Ok(self.offset + i as i32);
        }
        let hi = dec.decode_bits16()?;
        let lo = dec.decode_bits16()?;
        Ok(((hi << 16) | lo) as i32)
    }
}

const PRECISION_F: f64 = super::range::PRECISION as f64;

/// 64 log-spaced scales from [`SIGMA_MIN`] to [`SIGMA_MAX`].
pub fn scale_table() -> Vec<f64> {
    let step = fmath::ln(SIGMA_MAX / SIGMA_MIN) / (SCALE_LEVELS - 1) as f64;
    (0..SCALE_LEVELS).map(|i| SIGMA_MIN * fmath::exp(step * i as f64)).collect()
}

/// Nearest scale-table entry in the log domain (comparison against
/// geometric midpoints, so no transcendental is evaluated per call).
pub fn scale_index(table: &[f64], sigma: f64) -> usize {
    let mut i = 0;
    while i + 1 < table.len() && sigma * sigma > table[i] * table[i + 1] {
        i += 1;
    }
    i
}

/// Snapped mean: integer part and a fraction index in `0..MU_STEPS`.
pub fn mu_split(mu: f64) -> (i32, usize) {
    let q = (mu * MU_STEPS as f64).round() as i64;
    (q.div_euclid(MU_STEPS) as i32, q.rem_euclid(MU_STEPS) as usize)
}

/// Discretized Gaussian over integers near `mu` for scale `sigma`.
pub fn cdf_from_gaussian(mu: f64, sigma: f64) -> Result<CdfTable> {
    if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::NonFinite(format!("mu {mu}, sigma {sigma}")));
    }
    let half = (6.0 * sigma).ceil() as i64 + 2;
    let center = mu.round() as i64;
    let (lo, hi) = (center - half, center + half);
    if (hi - lo + 2) as usize > MAX_SYMBOLS {
        return Err(Error::Invalid(format!("alphabet for sigma {sigma} exceeds coder precision")));
    }
    let probs: Vec<f64> = (lo..=hi)
        .map(|k| {
            let a = fmath::normal_cdf((k as f64 - 0.5 - mu) / sigma);
            let b = fmath::normal_cdf((k as f64 + 0.5 - mu) / sigma);
            (b - a).max(0.0)
        })
        .collect();
    CdfTable::from_probs(lo as i32, &probs)
}

/// Lazily built Gaussian tables keyed by (mean fraction, scale index).
#[derive(Debug)]
pub struct GaussianTables {
    scales: Vec<f64>,
    cache: HashMap<(usize, usize), Arc<CdfTable>>,
}

impl Default for GaussianTables {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianTables {
    pub fn new() -> Self {
        Self {
            scales: scale_table(),
            cache: HashMap::new(),
        }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Table for `(mu, sigma)` and the integer shift to apply to its symbols.
    pub fn lookup(&mut self, mu: f64, sigma: f64) -> Result<(Arc<CdfTable>, i32)> {
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(Error::NonFinite(format!("mu {mu}, sigma {sigma}")));
        }
        let si = scale_index(&self.scales, sigma);
        let (int, frac) = mu_split(mu);
        let table = self.by_index(frac, si)?;
        Ok((table, int))
    }

    pub fn by_index(&mut self, frac: usize, si: usize) -> Result<Arc<CdfTable>> {
        if let Some(t) = self.cache.get(&(frac, si)) {
            return Ok(t.clone());
        }
        let t = Arc::new(cdf_from_gaussian(frac as f64 / MU_STEPS as f64, self.scales[si])?);
        self.cache.insert((frac, si), t.clone());
        Ok(t)
    }

    pub fn encode(&mut self, enc: &mut Encoder, v: i32, mu: f64, sigma: f64) -> Result<f64> {
        let (t, shift) = self.lookup(mu, sigma)?;
        let r = v.wrapping_sub(shift);
        t.encode(enc, r);
        Ok(t.bits(r))
    }

    pub fn decode(&mut self, dec: &mut Decoder<'_>, mu: f64, sigma: f64) -> Result<i32> {
        let (t, shift) = self.lookup(mu, sigma)?;
        Ok(t.decode(dec)?.wrapping_add(shift))
    }
}

/// Encodes `symbols[i]` under `tables[i]`.
pub fn range_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Invalid(format!("{} symbols for {} tables", symbols.len(), tables.len())));
    }
    let mut enc = Encoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        t.encode(&mut enc, s);
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let mut dec = Decoder::new(bytes)?;
    tables.iter().map(|t| t.decode(&mut dec)).collect()
}
