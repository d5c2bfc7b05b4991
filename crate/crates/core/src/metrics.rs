//! Rate and distortion metrics and RD records.

use serde::{Serialize, Serializer};

use crate::codec::{CodingOptions, Model};
use crate::dataio::{destandardize, standardize, BandStats, ImageCube};
use crate::error::{shape_err, Error, Result};
use crate::fmath;

/// Bits per pixel-band-frame.
pub fn bppbf(total_bits: f64, h: usize, w: usize, c: usize, frames: usize) -> Result<f64> {
    if h == 0 || w == 0 || c == 0 || frames == 0 {
        return Err(Error::Invalid(format!("bppbf needs positive dims, got {h}x{w}x{c}x{frames}")));
    }
    Ok(total_bits / (h * w * c * frames) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsnrMode {
    /// Full 16-bit range.
    #[serde(rename = "65k")]
    Full,
    #[serde(rename = "10k")]
    TenK,
    /// Min–max range of each reference band.
    Auto,
}

impl PsnrMode {
    pub const ALL: [PsnrMode; 3] = [PsnrMode::Full, PsnrMode::TenK, PsnrMode::Auto];

    pub fn name(self) -> &'static str {
        match self {
            PsnrMode::Full => "65k",
            PsnrMode::TenK => "10k",
            PsnrMode::Auto => "auto",
        }
    }

    /// Dynamic range of a reference band; constant bands use 1.
    pub fn range(self, band: &[u16]) -> f64 {
        match self {
            PsnrMode::Full => 65535.0,
            PsnrMode::TenK => 10000.0,
            PsnrMode::Auto => {
                let (lo, hi) = band.iter().fold((u16::MAX, 0), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                (hi.saturating_sub(lo) as f64).max(1.0)
            }
        }
    }
}

impl std::str::FromStr for PsnrMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "65k" => Ok(PsnrMode::Full),
            "10k" => Ok(PsnrMode::TenK),
            "auto" => Ok(PsnrMode::Auto),
            _ => Err(Error::Invalid(format!("unknown PSNR mode {s:?} (65k, 10k, auto)"))),
        }
    }
}

fn check_pair(a: &ImageCube, b: &ImageCube) -> Result<()> {
    if (a.h, a.w, a.c) != (b.h, b.w, b.c) {
        return Err(shape_err("image", format!("{}x{}x{} vs {}x{}x{}", a.h, a.w, a.c, b.h, b.w, b.c)));
    }
    Ok(())
}

/// Mean of per-band values, summed in sorted order so band order cannot
/// change the result.
fn band_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mse_band(a: &[u16], b: &[u16]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(&x, &y)| {
        let d = x as f64 - y as f64;
        d * d
    }).sum();
    s / a.len() as f64
}

/// Mean squared error in sensor units, per band then averaged.
pub fn mse(reference: &ImageCube, rec: &ImageCube) -> Result<f64> {
    check_pair(reference, rec)?;
    Ok(band_mean((0..reference.c).map(|b| mse_band(reference.band(b), rec.band(b))).collect()))
}

pub fn psnr_from(range: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * fmath::log2(range * range / mse) / fmath::log2(10.0)
    }
}

/// Per-band PSNR averaged over bands; identical images give `+inf`.
pub fn psnr(reference: &ImageCube, rec: &ImageCube, mode: PsnrMode) -> Result<f64> {
    check_pair(reference, rec)?;
    Ok(band_mean(
        (0..reference.c)
            .map(|b| psnr_from(mode.range(reference.band(b)), mse_band(reference.band(b), rec.band(b))))
            .collect(),
    ))
}

const WIN: usize = 11;
const WIN_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn window() -> [f64; WIN] {
    let mut w = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = fmath::exp(-d * d / (2.0 * WIN_SIGMA * WIN_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filter.
fn filter(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let g = window();
    let ow = w + 1 - WIN;
    let oh = h + 1 - WIN;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            tmp[y * ow + xo] = (0..WIN).map(|k| g[k] * x[y * w + xo + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..WIN).map(|k| g[k] * tmp[(yo + k) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one band.
fn check_window(h: usize, w: usize) -> Result<()> {
    if h < WIN || w < WIN {
        return Err(shape_err(if h < WIN { "height" } else { "width" }, format!("{h}x{w} is smaller than the {WIN}x{WIN} window")));
    }
    Ok(())
}

fn ssim_parts(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<(f64, f64)> {
    check_window(h, w)?;
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (ma, mb) = (filter(a, h, w), filter(b, h, w));
    let (saa, sbb, sab) = (filter(&prod(a, a), h, w), filter(&prod(b, b), h, w), filter(&prod(a, b), h, w));
    let n = ma.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ma.len() {
        let (mx, my) = (ma[i], mb[i]);
        let vx = saa[i] - mx * mx;
        let vy = sbb[i] - my * my;
        let cov = sab[i] - mx * my;
        let csi = (2.0 * cov + c2) / (vx + vy + c2);
        cs += csi;
        ssim += (2.0 * mx * my + c1) / (mx * mx + my * my + c1) * csi;
    }
    Ok((ssim / n, cs / n))
}

fn band_f64(c: &ImageCube, b: usize) -> Vec<f64> {
    c.band(b).iter().map(|&v| v as f64).collect()
}

fn ssim_range(mode: PsnrMode, band: &[u16]) -> f64 {
    mode.range(band)
}

pub fn ssim_band(a: &[u16], b: &[u16], h: usize, w: usize, range: f64) -> Result<f64> {
    check_window(h, w)?;
    if a == b {
        return Ok(1.0);
    }
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    Ok(ssim_parts(&fa, &fb, h, w, range)?.0)
}

/// Per-band SSIM averaged over bands, dynamic range from `mode`.
pub fn ssim(reference: &ImageCube, rec: &ImageCube, mode: PsnrMode) -> Result<f64> {
    check_pair(reference, rec)?;
    let v = (0..reference.c)
        .map(|b| ssim_band(reference.band(b), rec.band(b), reference.h, reference.w, ssim_range(mode, reference.band(b))))
        .collect::<Result<Vec<_>>>()?;
    Ok(band_mean(v))
}

/// Levels of MS-SSIM that fit an `h x w` image (at most 5).
pub fn ms_ssim_levels(h: usize, w: usize) -> usize {
    let mut levels = 0;
    let (mut hh, mut ww) = (h, w);
    while levels < MS_SSIM_WEIGHTS.len() && hh >= WIN && ww >= WIN {
        levels += 1;
        hh /= 2;
        ww /= 2;
    }
    levels
}

fn downsample(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            let i = 2 * y * w + 2 * xx;
            out[y * ow + xx] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    out
}

/// MS-SSIM of one band with weights renormalized over the levels that fit.
pub fn ms_ssim_band(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    let levels = ms_ssim_levels(h, w);
    if levels == 0 {
        return Err(shape_err("image", format!("{h}x{w} is smaller than the {WIN}x{WIN} window")));
    }
    if a == b {
        return Ok(1.0);
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..levels].iter().sum();
    let (mut a, mut b, mut hh, mut ww) = (a.to_vec(), b.to_vec(), h, w);
    let mut out = 1.0;
    for l in 0..levels {
        let (s, cs) = ssim_parts(&a, &b, hh, ww, range)?;
        let wl = MS_SSIM_WEIGHTS[l] / wsum;
        let term = if l + 1 == levels { s } else { cs };
        out *= term.max(0.0).powf(wl);
        if l + 1 < levels {
            a = downsample(&a, hh, ww);
            b = downsample(&b, hh, ww);
            hh /= 2;
            ww /= 2;
        }
    }
    Ok(out)
}

pub fn ms_ssim(reference: &ImageCube, rec: &ImageCube, mode: PsnrMode) -> Result<f64> {
    check_pair(reference, rec)?;
    let v = (0..reference.c)
        .map(|b| {
            ms_ssim_band(&band_f64(reference, b), &band_f64(rec, b), reference.h, reference.w, ssim_range(mode, reference.band(b)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(band_mean(v))
}

/// Serializes non-finite values as strings ("inf", "-inf", "nan").
pub fn ser_f64<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&fmt_f64(*v))
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameClass {
    All,
    PFrames,
    Bootstrap,
}

impl FrameClass {
    pub fn name(self) -> &'static str {
        match self {
            FrameClass::All => "all",
            FrameClass::PFrames => "p-frames",
            FrameClass::Bootstrap => "bootstrap",
        }
    }

    /// Frames with full two-frame context are P-frames.
    pub fn contains(self, frame: usize) -> bool {
        match self {
            FrameClass::All => true,
            FrameClass::PFrames => frame >= 2,
            FrameClass::Bootstrap => frame < 2,
        }
    }
}

/// Metrics of one decoded frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub bits: f64,
    pub est_bits: f64,
    #[serde(serialize_with = "ser_f64")]
    pub psnr_65k: f64,
    #[serde(serialize_with = "ser_f64")]
    pub psnr_10k: f64,
    #[serde(serialize_with = "ser_f64")]
    pub psnr_auto: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub mse: f64,
}

impl FrameMetrics {
    pub fn compute(frame: usize, bits: f64, est_bits: f64, reference: &ImageCube, rec: &ImageCube, ssim_mode: PsnrMode) -> Result<Self> {
        Ok(Self {
            frame,
            bits,
            est_bits,
            psnr_65k: psnr(reference, rec, PsnrMode::Full)?,
            psnr_10k: psnr(reference, rec, PsnrMode::TenK)?,
            psnr_auto: psnr(reference, rec, PsnrMode::Auto)?,
            ssim: ssim(reference, rec, ssim_mode)?,
            ms_ssim: ms_ssim(reference, rec, ssim_mode)?,
            mse: mse(reference, rec)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RDRecord {
    pub model: String,
    /// λ preset or token budget.
    pub setting: String,
    pub class: FrameClass,
    pub frames: usize,
    pub bppbf: f64,
    pub est_bppbf: f64,
    pub bits: f64,
    pub est_bits: f64,
    #[serde(serialize_with = "ser_f64")]
    pub psnr_65k: f64,
    #[serde(serialize_with = "ser_f64")]
    pub psnr_10k: f64,
    #[serde(serialize_with = "ser_f64")]
    pub psnr_auto: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub ms_ssim_levels: usize,
    pub mse: f64,
}

pub const CSV_HEADER: &str =
    "model,setting,class,frames,bppbf,est_bppbf,bits,est_bits,psnr_65k,psnr_10k,psnr_auto,ssim,ms_ssim,ms_ssim_levels,mse";

impl RDRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.setting,
            self.class.name(),
            self.frames,
            fmt_f64(self.bppbf),
            fmt_f64(self.est_bppbf),
            fmt_f64(self.bits),
            fmt_f64(self.est_bits),
            fmt_f64(self.psnr_65k),
            fmt_f64(self.psnr_10k),
            fmt_f64(self.psnr_auto),
            fmt_f64(self.ssim),
            fmt_f64(self.ms_ssim),
            self.ms_ssim_levels,
            fmt_f64(self.mse)
        )
    }

    /// Aggregates frame metrics of one class: rates from summed bits,
    /// distortions averaged over frames. `None` if the class is empty.
    pub fn aggregate(model: &str, setting: &str, class: FrameClass, dims: (usize, usize, usize), frames: &[FrameMetrics]) -> Result<Option<Self>> {
        let sel: Vec<&FrameMetrics> = frames.iter().filter(|f| class.contains(f.frame)).collect();
        if sel.is_empty() {
            return Ok(None);
        }
        let (h, w, c) = dims;
        let n = sel.len();
        let bits: f64 = sel.iter().map(|f| f.bits).sum();
        let est: f64 = sel.iter().map(|f| f.est_bits).sum();
        let mean = |g: fn(&FrameMetrics) -> f64| sel.iter().map(|f| g(f)).sum::<f64>() / n as f64;
        Ok(Some(Self {
            model: model.into(),
            setting: setting.into(),
            class,
            frames: n,
            bppbf: bppbf(bits, h, w, c, n)?,
            est_bppbf: bppbf(est, h, w, c, n)?,
            bits,
            est_bits: est,
            psnr_65k: mean(|f| f.psnr_65k),
            psnr_10k: mean(|f| f.psnr_10k),
            psnr_auto: mean(|f| f.psnr_auto),
            ssim: mean(|f| f.ssim),
            ms_ssim: mean(|f| f.ms_ssim),
            ms_ssim_levels: ms_ssim_levels(h, w),
            mse: mean(|f| f.mse),
        }))
    }
}

/// Codes a sequence and scores every frame against the original.
pub fn evaluate_frames(model: &Model, frames: &[ImageCube], stats: &BandStats, opts: &CodingOptions) -> Result<Vec<FrameMetrics>> {
    let std: Vec<_> = frames.iter().map(|f| standardize(f, stats)).collect::<Result<_>>()?;
    let enc = model.encode_sequence(&std, opts)?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let rec = destandardize(&enc.recon[i], stats)?;
            let bits = enc.container.segments[i].len() as f64 * 8.0;
            FrameMetrics::compute(i, bits, enc.est_bits[i], f, &rec, PsnrMode::Full)
        })
        .collect()
}

/// RD records for classes all and P-frames (P-frames only when present).
pub fn evaluate_sequence(
    model: &Model,
    name: &str,
    setting: &str,
    frames: &[ImageCube],
    stats: &BandStats,
    opts: &CodingOptions,
) -> Result<Vec<RDRecord>> {
    let f = frames.first().ok_or_else(|| Error::Invalid("empty sequence".into()))?;
    let metrics = evaluate_frames(model, frames, stats, opts)?;
    let mut out = Vec::new();
    for class in [FrameClass::All, FrameClass::PFrames] {
        out.extend(RDRecord::aggregate(name, setting, class, (f.h, f.w, f.c), &metrics)?);
    }
    Ok(out)
}
