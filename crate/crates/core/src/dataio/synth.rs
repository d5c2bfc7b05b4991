//! Procedural multiband sequences with drifting terrain and cloud blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageCube, Sequence};
use crate::fmath;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloudMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl CloudMask {
    pub fn clear(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    pub fn fraction(&self) -> f64 {
        self.data.iter().filter(|&&m| m).count() as f64 / self.data.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&m| m)
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for y in top..top + size {
            data.extend_from_slice(&self.data[y * self.w + left..y * self.w + left + size]);
        }
        Self { h: size, w: size, data }
    }
}

/// Generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub frames: usize,
    /// Probability that a frame carries clouds.
    pub cloud_prob: f64,
    /// Amplitude of the per-frame relative trend of each pixel.
    pub drift: f64,
    /// Sensor noise standard deviation in reflectance units.
    pub noise: f64,
    pub max_blobs: usize,
    /// Ellipse semi-axis range as a fraction of the image side.
    pub blob_radius: (f64, f64),
    /// Days between frames.
    pub revisit: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            c: 12,
            frames: 4,
            cloud_prob: 0.3,
            drift: 0.08,
            noise: 12.0,
            max_blobs: 3,
            blob_radius: (0.12, 0.38),
            revisit: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Synthetic {
    pub seq: Sequence,
    pub masks: Vec<CloudMask>,
    /// The same frames without clouds.
    pub clear: Vec<ImageCube>,
}

pub fn synth_sequence(seed: u64, h: usize, w: usize, c: usize, frames: usize, cloud_prob: f64) -> Synthetic {
    SynthConfig { h, w, c, frames, cloud_prob, ..Default::default() }.generate(seed)
}

/// Standard normal draw (Marsaglia polar method).
pub fn gauss(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * fmath::ln(s) / s).sqrt();
        }
    }
}

/// Cheap unit-variance noise: centred sum of four 16-bit uniforms taken
/// from one 64-bit draw.
fn noise(rng: &mut impl Rng) -> f64 {
    let r: u64 = rng.gen();
    let s: u64 = (0..4).map(|i| (r >> (16 * i)) & 0xffff).sum();
    (s as f64 + 2.0) / 65536.0 * 3f64.sqrt() - 2.0 * 3f64.sqrt()
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Smoothly interpolated lattice noise in roughly [-1, 1].
fn value_noise(rng: &mut impl Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let cell = cell.max(1);
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (oy, ox) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64 + oy;
        let (iy, ty) = (fy as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64 + ox;
            let (ix, tx) = (fx as usize, smoothstep(fx.fract()));
            let g = |a: usize, b: usize| grid[a * gw + b];
            let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
            let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn fractal(rng: &mut impl Rng, h: usize, w: usize, octaves: usize) -> Vec<f64> {
    let side = h.max(w);
    let mut out = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut total = 0.0;
    for o in 0..octaves {
        let n = value_noise(rng, h, w, (side >> (o + 1)).max(2));
        for (a, b) in out.iter_mut().zip(n) {
            *a += amp * b;
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

impl SynthConfig {
    pub fn generate(&self, seed: u64) -> Synthetic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7272_6173_796e);
        let (h, w, c) = (self.h, self.w, self.c);
        let hw = h * w;
        let soil = fractal(&mut rng, h, w, 4);
        let veg = fractal(&mut rng, h, w, 4);
        let detail = fractal(&mut rng, h, w, 2);
        let jitter = |rng: &mut ChaCha8Rng| 1.0 + 0.1 * rng.gen_range(-1.0..1.0);
        let profile: Vec<(f64, f64, f64, f64)> = (0..c)
            .map(|b| {
                let u = if c > 1 { b as f64 / (c - 1) as f64 } else { 0.5 };
                (
                    (900.0 + 2100.0 * u) * jitter(&mut rng),
                    (650.0 + 350.0 * u) * jitter(&mut rng),
                    (-350.0 + 1500.0 * u) * jitter(&mut rng),
                    120.0 * jitter(&mut rng),
                )
            })
            .collect();
        let base: Vec<f64> = (0..c * hw)
            .map(|i| {
                let (b, p) = (i / hw, i % hw);
                let (m, a, v, d) = profile[b];
                m + a * soil[p] + v * veg[p] + d * detail[p]
            })
            .collect();
        let cloud_tex = fractal(&mut rng, h, w, 3);
        // per-sequence velocity: each pixel and band trends monotonically
        let velocity: Vec<f64> = fractal(&mut rng, h, w, 2).iter().map(|e| self.drift * e).collect();
        let trend: Vec<f64> = (0..c).map(|_| 0.02 * gauss(&mut rng)).collect();
        let mut drift = vec![1.0; hw];
        let mut season = vec![1.0; c];
        let mut frames = Vec::with_capacity(self.frames);
        let mut masks = Vec::with_capacity(self.frames);
        let mut clear_frames = Vec::with_capacity(self.frames);
        for k in 0..self.frames {
            let t = k as f64;
            for (d, v) in drift.iter_mut().zip(&velocity) {
                *d = (1.0 + t * v).max(0.05);
            }
            for (s, r) in season.iter_mut().zip(&trend) {
                *s = (1.0 + t * r).max(0.05);
            }
            let alpha = if rng.gen_bool(self.cloud_prob.clamp(0.0, 1.0)) {
                self.clouds(&mut rng)
            } else {
                vec![0.0; hw]
            };
            let mut clear = Vec::with_capacity(c * hw);
            let data = (0..c * hw)
                .map(|i| {
                    let (b, p) = (i / hw, i % hw);
                    let u = if c > 1 { b as f64 / (c - 1) as f64 } else { 0.5 };
                    let mut v = base[i] * drift[p] * season[b] + self.noise * noise(&mut rng);
                    clear.push(v.round().clamp(0.0, 65535.0) as u16);
                    if alpha[p] > 0.0 {
                        let level = 7000.0 + 1500.0 * (1.0 - u) + 900.0 * cloud_tex[p];
                        v += alpha[p] * (level - v);
                    }
                    v.round().clamp(0.0, 65535.0) as u16
                })
                .collect();
            frames.push(ImageCube { h, w, c, data });
            clear_frames.push(ImageCube { h, w, c, data: clear });
            masks.push(CloudMask { h, w, data: alpha.iter().map(|&a| a > 0.0).collect() });
        }
        let timestamps = (0..self.frames as i64).map(|k| k * self.revisit).collect();
        Synthetic {
            seq: Sequence { frames, timestamps },
            masks,
            clear: clear_frames,
        }
    }

    /// Per-pixel cloud opacity: 1 inside each ellipse, Gaussian falloff outside,
    /// cut to exactly 0 below 0.02.
    fn clouds(&self, rng: &mut impl Rng) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let side = h.min(w) as f64;
        let mut alpha = vec![0.0f64; h * w];
        let blobs = rng.gen_range(1..=self.max_blobs.max(1));
        for _ in 0..blobs {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let ry = side * rng.gen_range(self.blob_radius.0..=self.blob_radius.1);
            let rx = side * rng.gen_range(self.blob_radius.0..=self.blob_radius.1);
            let shear = rng.gen_range(-0.8..0.8);
            for y in 0..h {
                let dy = (y as f64 + 0.5 - cy) / ry;
                for x in 0..w {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let r = (dx * dx + dy * dy + shear * dx * dy).sqrt();
                    let a = if r < 1.0 { 1.0 } else { fmath::exp(-8.0 * (r - 1.0) * (r - 1.0)) };
                    let a = if a < 0.02 { 0.0 } else { a };
                    let slot = &mut alpha[y * w + x];
                    *slot = slot.max(a);
                }
            }
        }
        alpha
    }
}
