//! Multiband cubes, standardization, cropping and the synthetic corpus.

mod io;
mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use io::{load_cube, load_stats, read_cube, save_cube, save_stats, stats_path, write_cube, HEADER_LEN};
pub use synth::{gauss, synth_sequence, CloudMask, SynthConfig, Synthetic};

/// Band-major unsigned 16-bit reflectance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageCube {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<u16>,
}

impl ImageCube {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(shape_err("data", format!("{} samples for {c}x{h}x{w}", data.len())));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0; h * w * c] }
    }

    pub fn band(&self, b: usize) -> &[u16] {
        &self.data[b * self.h * self.w..(b + 1) * self.h * self.w]
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u16 {
        self.data[(b * self.h + y) * self.w + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub frames: Vec<ImageCube>,
    pub timestamps: Vec<i64>,
}

impl Sequence {
    pub fn new(frames: Vec<ImageCube>, timestamps: Vec<i64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Invalid("sequence needs at least one frame".into()));
        }
        if timestamps.len() != frames.len() || timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("timestamps must be monotone, one per frame".into()));
        }
        let (h, w, c) = (frames[0].h, frames[0].w, frames[0].c);
        if let Some(f) = frames.iter().find(|f| (f.h, f.w, f.c) != (h, w, c)) {
            return Err(shape_err("frame", format!("{}x{}x{} differs from {h}x{w}x{c}", f.h, f.w, f.c)));
        }
        Ok(Self { frames, timestamps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let f = &self.frames[0];
        (f.h, f.w, f.c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(shape_err("band", format!("{} means, {} deviations", mean.len(), std.len())));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("band standard deviations must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(c: usize) -> Self {
        Self { mean: vec![0.0; c], std: vec![1.0; c] }
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// Population statistics over every frame of every sequence.
    pub fn compute<'a>(frames: impl IntoIterator<Item = &'a ImageCube>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for f in frames {
            if sum.is_empty() {
                sum = vec![0.0; f.c];
                sq = vec![0.0; f.c];
            }
            if f.c != sum.len() {
                return Err(shape_err("band", format!("{} bands vs {}", f.c, sum.len())));
            }
            for b in 0..f.c {
                for &v in f.band(b) {
                    let v = v as f64;
                    sum[b] += v;
                    sq[b] += v * v;
                }
            }
            n += f.h * f.w;
        }
        if n == 0 {
            return Err(Error::Invalid("no pixels to compute statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1.0)).collect();
        Self::new(mean, std)
    }
}

/// Standardized cube, band-major f32.
#[derive(Clone, Debug, PartialEq)]
pub struct StdCube {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl StdCube {
    pub fn band(&self, b: usize) -> &[f32] {
        &self.data[b * self.h * self.w..(b + 1) * self.h * self.w]
    }
}

fn check_bands(c: usize, stats: &BandStats) -> Result<()> {
    if stats.bands() != c {
        return Err(shape_err("band", format!("cube has {c} bands, stats have {}", stats.bands())));
    }
    Ok(())
}

pub fn standardize(cube: &ImageCube, stats: &BandStats) -> Result<StdCube> {
    check_bands(cube.c, stats)?;
    let hw = cube.h * cube.w;
    let data = cube
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = i / hw;
            ((v as f64 - stats.mean[b]) / stats.std[b]) as f32
        })
        .collect();
    Ok(StdCube { h: cube.h, w: cube.w, c: cube.c, data })
}

pub fn destandardize(cube: &StdCube, stats: &BandStats) -> Result<ImageCube> {
    check_bands(cube.c, stats)?;
    let hw = cube.h * cube.w;
    let data = cube
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = i / hw;
            (v as f64 * stats.std[b] + stats.mean[b]).round().clamp(0.0, 65535.0) as u16
        })
        .collect();
    Ok(ImageCube { h: cube.h, w: cube.w, c: cube.c, data })
}

/// Reflectance-valued (unclamped, unrounded) destandardization.
pub fn destandardize_f64(cube: &StdCube, stats: &BandStats) -> Result<Vec<f64>> {
    check_bands(cube.c, stats)?;
    let hw = cube.h * cube.w;
    Ok(cube
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 * stats.std[i / hw] + stats.mean[i / hw])
        .collect())
}

/// `out[i, j] = band[i / factor, j / factor]`.
pub fn nearest_upsample<T: Copy>(band: &[T], h: usize, w: usize, factor: usize) -> Result<Vec<T>> {
    if factor < 1 {
        return Err(Error::Invalid("upsampling factor must be at least 1".into()));
    }
    if band.len() != h * w {
        return Err(shape_err("band", format!("{} values for {h}x{w}", band.len())));
    }
    let (oh, ow) = (h * factor, w * factor);
    Ok((0..oh * ow).map(|i| band[(i / ow / factor) * w + (i % ow) / factor]).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

/// Top-left corner of a `size x size` window.
pub fn crop_window(h: usize, w: usize, size: usize, mode: CropMode, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if size == 0 || size % 16 != 0 {
        return Err(Error::Invalid(format!("crop size {size} is not a positive multiple of 16")));
    }
    if size > h.min(w) {
        return Err(Error::Invalid(format!("crop size {size} exceeds {h}x{w}")));
    }
    Ok(match mode {
        CropMode::Center => ((h - size) / 2, (w - size) / 2),
        CropMode::Random => (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)),
    })
}

pub fn crop_at(cube: &ImageCube, top: usize, left: usize, size: usize) -> ImageCube {
    let mut data = Vec::with_capacity(size * size * cube.c);
    for b in 0..cube.c {
        for y in top..top + size {
            let row = (b * cube.h + y) * cube.w;
            data.extend_from_slice(&cube.data[row + left..row + left + size]);
        }
    }
    ImageCube { h: size, w: size, c: cube.c, data }
}

pub fn crop(cube: &ImageCube, mode: CropMode, size: usize, rng: &mut impl Rng) -> Result<ImageCube> {
    let (t, l) = crop_window(cube.h, cube.w, size, mode, rng)?;
    Ok(crop_at(cube, t, l, size))
}

/// Crops every frame (and mask) with the same window.
pub fn crop_synthetic(s: &Synthetic, mode: CropMode, size: usize, rng: &mut impl Rng) -> Result<Synthetic> {
    let (h, w, _) = s.seq.dims();
    let (t, l) = crop_window(h, w, size, mode, rng)?;
    let frames = s.seq.frames.iter().map(|f| crop_at(f, t, l, size)).collect();
    let masks = s.masks.iter().map(|m| m.crop(t, l, size)).collect();
    Ok(Synthetic {
        seq: Sequence::new(frames, s.seq.timestamps.clone())?,
        masks,
        clear: s.clear.iter().map(|f| crop_at(f, t, l, size)).collect(),
    })
}
