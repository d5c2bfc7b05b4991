//! Cloud-aware decoding with the temporal prior: mask pooling, context
//! selection and the interleave / propagate / forecast policies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Model, PastLatents};
use crate::coder::Family;
use crate::dataio::gauss;
use crate::dataio::{destandardize, standardize, BandStats, CloudMask, ImageCube};
use crate::error::{shape_err, Error, Result};
use crate::grad::Array;
use crate::metrics::{psnr_from, PsnrMode};
use crate::temporal::{self, BLOCK, TOKENS};
use crate::transforms::{array_to_cube, DOWNSAMPLE};

/// Per-pixel cloud weights in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl SoftMask {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(shape_err("mask", format!("{} values for {h}x{w}", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { h, w, data })
    }

    /// Single-band cube scaled by 1/65535.
    pub fn from_cube(c: &ImageCube) -> Result<Self> {
        if c.c != 1 {
            return Err(shape_err("channel", format!("mask cubes have 1 band, got {}", c.c)));
        }
        Self::new(c.h, c.w, c.data.iter().map(|&v| v as f32 / 65535.0).collect())
    }

    pub fn to_cube(&self) -> ImageCube {
        let d = self.data.iter().map(|&v| (v as f64 * 65535.0).round() as u16).collect();
        ImageCube { h: self.h, w: self.w, c: 1, data: d }
    }

    pub fn fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Binary view: cloudy iff the weight exceeds `tau`.
    pub fn binarize(&self, tau: f64) -> Vec<bool> {
        self.data.iter().map(|&v| v as f64 > tau).collect()
    }
}

impl From<&CloudMask> for SoftMask {
    fn from(m: &CloudMask) -> Self {
        Self { h: m.h, w: m.w, data: m.data.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect() }
    }
}

/// Cloud fractions at latent resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMask {
    pub h: usize,
    pub w: usize,
    pub fraction: Vec<f64>,
}

impl LatentMask {
    pub fn cloudy(&self, tau: f64) -> Vec<bool> {
        self.fraction.iter().map(|&f| f > tau).collect()
    }

    /// Cloud flags [B][16] in block-token order.
    pub fn token_flags(&self, tau: f64) -> Result<Vec<[bool; TOKENS]>> {
        if self.h % BLOCK != 0 || self.w % BLOCK != 0 {
            return Err(shape_err(if self.h % BLOCK != 0 { "height" } else { "width" }, "latent grid not divisible by 4"));
        }
        let mut out = Vec::with_capacity(temporal::num_blocks(self.h, self.w));
        for by in 0..self.h / BLOCK {
            for bx in 0..self.w / BLOCK {
                let mut f = [false; TOKENS];
                for (t, slot) in f.iter_mut().enumerate() {
                    let (y, x) = (by * BLOCK + t / BLOCK, bx * BLOCK + t % BLOCK);
                    *slot = self.fraction[y * self.w + x] > tau;
                }
                out.push(f);
            }
        }
        Ok(out)
    }
}

/// Average-pools a pixel mask over 16×16 windows.
pub fn pool_mask(mask: &SoftMask) -> Result<LatentMask> {
    for (axis, e) in [("height", mask.h), ("width", mask.w)] {
        if e == 0 || e % DOWNSAMPLE != 0 {
            return Err(shape_err(axis, format!("{e} is not divisible by {DOWNSAMPLE}")));
        }
    }
    let (h, w) = (mask.h / DOWNSAMPLE, mask.w / DOWNSAMPLE);
    let mut fraction = vec![0.0; h * w];
    for y in 0..mask.h {
        for x in 0..mask.w {
            fraction[(y / DOWNSAMPLE) * w + x / DOWNSAMPLE] += mask.data[y * mask.w + x] as f64;
        }
    }
    let area = (DOWNSAMPLE * DOWNSAMPLE) as f64;
    fraction.iter_mut().for_each(|f| *f /= area);
    Ok(LatentMask { h, w, fraction })
}

/// Frames below this cloud fraction count as usable context.
pub const USABLE_FRACTION: f64 = 0.5;

/// Picks two context frames for `target` from per-frame cloud fractions:
/// least cloudy first (ties by index), the best one duplicated when fewer
/// than two are usable, returned in temporal order.
pub fn reorder_context(fractions: &[f64], target: usize) -> Result<(usize, usize)> {
    if target >= fractions.len() {
        return Err(Error::Invalid(format!("target {target} outside {} frames", fractions.len())));
    }
    let mut cand: Vec<usize> = (0..fractions.len()).filter(|&i| i != target).collect();
    if cand.is_empty() {
        return Err(Error::Invalid("no context frames besides the target".into()));
    }
    cand.sort_by(|&a, &b| fractions[a].total_cmp(&fractions[b]).then(a.cmp(&b)));
    let usable = cand.iter().filter(|&&i| fractions[i] < USABLE_FRACTION).count();
    if usable < 2 {
        return Ok((cand[0], cand[0]));
    }
    Ok((cand[0].min(cand[1]), cand[0].max(cand[1])))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Interleave,
    Propagate,
    Forecast,
}

impl std::str::FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleave" => Ok(Policy::Interleave),
            "propagate" => Ok(Policy::Propagate),
            "forecast" => Ok(Policy::Forecast),
            _ => Err(Error::Invalid(format!("unknown policy {s:?} (interleave, propagate, forecast)"))),
        }
    }
}

fn check_model(model: &Model) -> Result<()> {
    if model.family() != Family::Tt {
        return Err(Error::Invalid(format!("inpainting needs a TT model, got {}", model.family())));
    }
    Ok(())
}

/// Which tokens keep their transmitted value, per block.
pub fn kept_tokens(flags: &[[bool; TOKENS]], policy: Policy) -> Vec<[bool; TOKENS]> {
    flags
        .iter()
        .map(|f| {
            let mut keep = [false; TOKENS];
            match policy {
                Policy::Interleave => {
                    for t in 0..TOKENS {
                        keep[t] = !f[t];
                    }
                }
                Policy::Propagate => {
                    let first = f.iter().position(|&c| c).unwrap_or(TOKENS);
                    keep[..first].iter_mut().for_each(|k| *k = true);
                }
                Policy::Forecast => {}
            }
            keep
        })
        .collect()
}

/// Token-sequential pass: kept tokens take their value from `target`,
/// the rest the predicted mean (or a draw from the prior when `sample` is
/// set). Later tokens condition on whatever earlier tokens became.
pub fn predict_latent(
    model: &Model,
    target: Option<&Array<f32>>,
    keep: &[[bool; TOKENS]],
    ctx: (&Array<f32>, &Array<f32>),
    sample: Option<u64>,
) -> Result<Array<f32>> {
    check_model(model)?;
    let m = model.d_lat();
    let [_, _, h, w] = *ctx.0.shape() else {
        return Err(shape_err("latent", "context latents must be [1, M, h, w]"));
    };
    let blocks = temporal::num_blocks(h, w);
    if keep.len() != blocks {
        return Err(shape_err("block", format!("{} mask blocks for {blocks} latent blocks", keep.len())));
    }
    let truth = match target {
        Some(t) => {
            if t.shape() != ctx.0.shape() {
                return Err(shape_err("latent", format!("target {:?} vs context {:?}", t.shape(), ctx.0.shape())));
            }
            Some(model.tokens_of(t)?)
        }
        None => None,
    };
    let context = model.context(PastLatents::Two(ctx.0, ctx.1), h, w)?;
    let mut tokens = Array::zeros(&[blocks, TOKENS, m]);
    let mut rng = sample.map(ChaCha8Rng::seed_from_u64);
    for t in 0..TOKENS {
        let all_kept = keep.iter().all(|k| k[t]);
        let (mu, sigma) = if all_kept { (Array::zeros(&[0]), Array::zeros(&[0])) } else { model.token_priors(&context, &tokens)? };
        for (b, k) in keep.iter().enumerate() {
            let r = (b * TOKENS + t) * m..(b * TOKENS + t + 1) * m;
            if k[t] {
                let src = truth.as_ref().ok_or_else(|| Error::Invalid("kept tokens need a target latent".into()))?;
                tokens.data_mut()[r.clone()].copy_from_slice(&src.data()[r]);
            } else {
                for i in r {
                    tokens.data_mut()[i] = match rng.as_mut() {
                        Some(g) => mu.data()[i] + sigma.data()[i] * gauss(g) as f32,
                        None => mu.data()[i],
                    };
                }
            }
        }
    }
    model.latent_of(&tokens, h, w)
}

pub fn interleave_decode(model: &Model, target: &Array<f32>, mask: &LatentMask, tau: f64, ctx: (&Array<f32>, &Array<f32>)) -> Result<Array<f32>> {
    let keep = kept_tokens(&mask.token_flags(tau)?, Policy::Interleave);
    predict_latent(model, Some(target), &keep, ctx, None)
}

pub fn propagate_decode(model: &Model, target: &Array<f32>, mask: &LatentMask, tau: f64, ctx: (&Array<f32>, &Array<f32>)) -> Result<Array<f32>> {
    let keep = kept_tokens(&mask.token_flags(tau)?, Policy::Propagate);
    predict_latent(model, Some(target), &keep, ctx, None)
}

/// Every token from the prior alone; `sample` draws instead of taking μ.
pub fn mu_forecast(model: &Model, ctx: (&Array<f32>, &Array<f32>), sample: Option<u64>) -> Result<Array<f32>> {
    let [_, _, h, w] = *ctx.0.shape() else {
        return Err(shape_err("latent", "context latents must be [1, M, h, w]"));
    };
    let keep = vec![[false; TOKENS]; temporal::num_blocks(h, w)];
    predict_latent(model, None, &keep, ctx, sample)
}

/// PSNR over pixels where `region` is set, per band then averaged.
pub fn masked_psnr(reference: &ImageCube, rec: &ImageCube, region: &[bool], mode: PsnrMode) -> Result<f64> {
    if (reference.h, reference.w, reference.c) != (rec.h, rec.w, rec.c) || region.len() != reference.h * reference.w {
        return Err(shape_err("image", "reference, reconstruction and region differ in shape"));
    }
    let n = region.iter().filter(|&&r| r).count();
    if n == 0 {
        return Err(Error::Invalid("empty region".into()));
    }
    let mut v: Vec<f64> = (0..reference.c)
        .map(|b| {
            let (a, r) = (reference.band(b), rec.band(b));
            let se: f64 = (0..a.len())
                .filter(|&i| region[i])
                .map(|i| {
                    let d = a[i] as f64 - r[i] as f64;
                    d * d
                })
                .sum();
            let sel: Vec<u16> = (0..a.len()).filter(|&i| region[i]).map(|i| a[i]).collect();
            psnr_from(mode.range(&sel), se / n as f64)
        })
        .collect();
    v.sort_by(f64::total_cmp);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Outcome of inpainting one target frame.
#[derive(Clone, Debug)]
pub struct Inpainted {
    pub latent: Array<f32>,
    pub context: (usize, usize),
    /// Tokens predicted instead of taken from the observation.
    pub predicted_tokens: usize,
}

/// Inpaints frame `target` of `latents` (quantized analysis of each
/// observation) using pixel masks for context selection and token flags.
pub fn inpaint_frame(model: &Model, latents: &[Array<f32>], masks: &[SoftMask], target: usize, tau: f64, policy: Policy) -> Result<Inpainted> {
    if latents.len() != masks.len() {
        return Err(shape_err("frame", format!("{} latents for {} masks", latents.len(), masks.len())));
    }
    let fractions: Vec<f64> = masks.iter().map(SoftMask::fraction).collect();
    let (a, b) = reorder_context(&fractions, target)?;
    let lm = pool_mask(&masks[target])?;
    let keep = kept_tokens(&lm.token_flags(tau)?, policy);
    let predicted = keep.iter().map(|k| k.iter().filter(|&&x| !x).count()).sum();
    let latent = predict_latent(model, Some(&latents[target]), &keep, (&latents[a], &latents[b]), None)?;
    Ok(Inpainted { latent, context: (a, b), predicted_tokens: predicted })
}

/// Copy of the least cloudy frame other than `target` (ties by index).
pub fn copy_least_cloudy(frames: &[ImageCube], masks: &[SoftMask], target: usize) -> Result<ImageCube> {
    let fractions: Vec<f64> = masks.iter().map(SoftMask::fraction).collect();
    let best = (0..frames.len())
        .filter(|&i| i != target)
        .min_by(|&a, &b| fractions[a].total_cmp(&fractions[b]).then(a.cmp(&b)))
        .ok_or_else(|| Error::Invalid("no frame to copy besides the target".into()))?;
    Ok(frames[best].clone())
}

/// Pixel-level result of [`inpaint_cube`].
#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub recon: ImageCube,
    pub context: (usize, usize),
    pub predicted_tokens: usize,
    pub total_tokens: usize,
}

/// Inpaints observation `target` of a sequence: frames are standardized,
/// analyzed and quantized, the latent is completed under `policy`, then
/// synthesized back to reflectance.
pub fn inpaint_cube(
    model: &Model,
    frames: &[ImageCube],
    masks: &[SoftMask],
    stats: &BandStats,
    target: usize,
    tau: f64,
    policy: Policy,
) -> Result<InpaintResult> {
    check_model(model)?;
    if frames.len() != masks.len() {
        return Err(shape_err("frame", format!("{} frames for {} masks", frames.len(), masks.len())));
    }
    for (f, m) in frames.iter().zip(masks) {
        if (f.h, f.w) != (m.h, m.w) {
            return Err(shape_err("mask", format!("mask {}x{} for frame {}x{}", m.h, m.w, f.h, f.w)));
        }
    }
    let latents: Vec<Array<f32>> = frames.iter().map(|f| model.quantized_latent(&standardize(f, stats)?)).collect::<Result<_>>()?;
    let out = inpaint_frame(model, &latents, masks, target, tau, policy)?;
    let recon = destandardize(&array_to_cube(&model.synthesize(&out.latent)?)?, stats)?;
    let total_tokens = temporal::num_blocks(out.latent.shape()[2], out.latent.shape()[3]) * TOKENS;
    Ok(InpaintResult { recon, context: out.context, predicted_tokens: out.predicted_tokens, total_tokens })
}
