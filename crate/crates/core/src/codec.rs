//! Model families: parameters, training forwards and frame/sequence coding.

use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coder::container::{Container, Family, FillMode, Flags, Header, K_ALL};
use crate::coder::range::{Decoder, Encoder};
use crate::coder::tables::{CdfTable, GaussianTables};
use crate::dataio::StdCube;
use crate::entropy::{
    gaussian_bits_tape, quantize, uniform_noise, ElicContext, FactorizedDensity, GroupSpec,
};
use crate::error::{shape_err, Error, Result};
use crate::flexrate::{apply_mask_tape, flex_rate_tape, init_mask};
use crate::grad::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::grad::tape::{ParamId, Tape, Unary, Var};
use crate::grad::{portable, Array};
use crate::temporal::{self, Past, TTConfig, TemporalPrior, TOKENS};
use crate::transforms::{array_to_cube, cube_to_array, Backbone, CodecConfig, Hyperprior, Transforms};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub codec: CodecConfig,
    #[serde(default)]
    pub tt: Option<TTConfig>,
    #[serde(default)]
    pub groups: Option<GroupSpec>,
    #[serde(default)]
    pub lambda_preset: u8,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    fn with(family: Family, codec: CodecConfig, tt: impl Fn(usize) -> TTConfig) -> Self {
        let m = codec.m;
        Self {
            family,
            tt: matches!(family, Family::Tt | Family::Flex).then(|| tt(m)),
            groups: (family == Family::Elic).then(|| GroupSpec::default_for(m)),
            codec,
            lambda_preset: 0,
            seed: 0,
        }
    }

    fn backbone(family: Family) -> Backbone {
        if family == Family::Fp {
            Backbone::Fp
        } else {
            Backbone::Elic
        }
    }

    pub fn desk(family: Family, c: usize) -> Self {
        Self::with(family, CodecConfig::desk(Self::backbone(family), c), TTConfig::desk)
    }

    pub fn full(family: Family, c: usize) -> Self {
        Self::with(family, CodecConfig::full(Self::backbone(family), c), TTConfig::full)
    }

    /// Desk transforms with the reduced transformer.
    pub fn small(family: Family, c: usize) -> Self {
        Self::with(family, CodecConfig::desk(Self::backbone(family), c), TTConfig::small)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        if (self.family == Family::Fp) != (self.codec.backbone == Backbone::Fp) {
            return Err(Error::Invalid(format!("family {} cannot use the {:?} backbone", self.family, self.codec.backbone)));
        }
        match (self.family, &self.tt) {
            (Family::Tt | Family::Flex, Some(tt)) => {
                tt.validate()?;
                if tt.d_lat != self.codec.m {
                    return Err(Error::Invalid(format!("transformer d_lat {} differs from latent width {}", tt.d_lat, self.codec.m)));
                }
                if self.family == Family::Flex && self.codec.m % TOKENS != 0 {
                    return Err(Error::Invalid(format!("repacking needs d_lat divisible by {TOKENS}, got {}", self.codec.m)));
                }
            }
            (Family::Tt | Family::Flex, None) => return Err(Error::Invalid("temporal family without transformer config".into())),
            _ => {}
        }
        if self.family == Family::Elic && self.groups.is_none() {
            return Err(Error::Invalid("ELIC family without channel groups".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum EntropyModel {
    Factorized(FactorizedDensity),
    Elic {
        hyper: Hyperprior,
        z_density: FactorizedDensity,
        ctx: ElicContext,
    },
    /// `stage1` is only used while pretraining the backbone.
    Temporal {
        prior: TemporalPrior,
        stage1: FactorizedDensity,
        mask: Option<ParamId>,
    },
}

/// Past latents feeding the temporal prior, oldest first.
#[derive(Clone, Copy, Debug)]
pub enum PastLatents<'a> {
    None,
    Two(&'a Array<f32>, &'a Array<f32>),
}

/// One coded frame.
#[derive(Clone, Debug)]
pub struct FrameCode {
    pub bytes: Vec<u8>,
    /// Ideal bits under the coding tables.
    pub est_bits: f64,
    /// Latent seen by the decoder (dropped tokens filled for FLEX).
    pub latent: Array<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodingOptions {
    /// Past frames used as context (0, 1 or 2).
    pub context: u8,
    /// Token budget for FLEX; `None` keeps every token.
    pub budget: Option<usize>,
    pub fill: FillMode,
}

impl Default for CodingOptions {
    fn default() -> Self {
        Self { context: 2, budget: None, fill: FillMode::Mean }
    }
}

#[derive(Clone, Debug)]
pub struct EncodedSequence {
    pub container: Container,
    pub est_bits: Vec<f64>,
    pub latents: Vec<Array<f32>>,
    pub recon: Vec<StdCube>,
}

/// Indices of the past frames used for frame `i` under `context`.
pub fn past_pair(i: usize, context: u8) -> Option<(usize, usize)> {
    match (context as usize).min(i) {
        0 => None,
        1 => Some((i - 1, i - 1)),
        _ => Some((i - 2, i - 1)),
    }
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub transforms: Transforms,
    pub entropy: EntropyModel,
    tables: Mutex<GaussianTables>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            transforms: self.transforms.clone(),
            entropy: self.entropy.clone(),
            tables: Mutex::new(GaussianTables::new()),
        }
    }
}

fn check_latent(a: &Array<f32>, m: usize) -> Result<(usize, usize)> {
    match *a.shape() {
        [1, c, h, w] if c == m => Ok((h, w)),
        ref s => Err(shape_err("latent", format!("expected [1, {m}, h, w], got {s:?}"))),
    }
}

fn rounded(a: &Array<f32>) -> Array<f32> {
    a.map(|v| quantize(v as f64) as f32)
}

/// Runs a single-input tape computation and returns its value.
fn eval(x: &Array<f32>, f: impl FnOnce(&mut Tape<f32>, Var) -> Result<Var>) -> Result<Array<f32>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn encode_factorized(enc: &mut Encoder, tables: &[CdfTable], sym: &[f32]) -> f64 {
    let l = sym.len() / tables.len();
    let mut bits = 0.0;
    for (i, &v) in sym.iter().enumerate() {
        let t = &tables[i / l];
        t.encode(enc, v as i32);
        bits += t.bits(v as i32);
    }
    bits
}

fn decode_factorized(dec: &mut Decoder<'_>, tables: &[CdfTable], len: usize) -> Result<Vec<f32>> {
    let l = len / tables.len();
    (0..len).map(|i| tables[i / l].decode(dec).map(|v| v as f32)).collect()
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let transforms = Transforms::new(cfg.codec.clone(), &mut store, &mut rng)?;
        let m = cfg.codec.m;
        let entropy = match cfg.family {
            Family::Fp => EntropyModel::Factorized(FactorizedDensity::new(&mut store, "fd", m, &mut rng)),
            Family::Elic => {
                let hyper = Hyperprior::new(&cfg.codec, &mut store, &mut rng)?;
                let z_density = FactorizedDensity::new(&mut store, "fd_z", hyper.channels, &mut rng);
                let groups = cfg.groups.clone().expect("validated");
                let ctx = ElicContext::new(&mut store, "ctx", groups, m, &mut rng);
                EntropyModel::Elic { hyper, z_density, ctx }
            }
            Family::Tt | Family::Flex => {
                let tt = cfg.tt.clone().expect("validated");
                let prior = TemporalPrior::new(tt, &mut store, "tt", &mut rng)?;
                let stage1 = FactorizedDensity::new(&mut store, "fd", m, &mut rng);
                let mask = (cfg.family == Family::Flex).then(|| init_mask(&mut store, "mask", m, &mut rng));
                EntropyModel::Temporal { prior, stage1, mask }
            }
        };
        Ok(Self { cfg, store, transforms, entropy, tables: Mutex::new(GaussianTables::new()) })
    }

    pub fn family(&self) -> Family {
        self.cfg.family
    }

    pub fn d_lat(&self) -> usize {
        self.cfg.codec.m
    }

    pub fn save(&self, stem: &Path, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({ "config": self.cfg });
        if let (Some(obj), serde_json::Value::Object(more)) = (meta.as_object_mut(), extra) {
            obj.extend(more);
        }
        save_checkpoint(&self.store, stem, meta)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(stem.with_extension("json"))?;
        let manifest: serde_json::Value = serde_json::from_str(&text)?;
        let cfg: ModelConfig = serde_json::from_value(
            manifest
                .pointer("/extra/config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("manifest lacks a model config".into()))?,
        )?;
        let mut model = Self::new(cfg)?;
        load_checkpoint(&mut model.store, stem)?;
        Ok(model)
    }

    fn prior(&self) -> Result<&TemporalPrior> {
        match &self.entropy {
            EntropyModel::Temporal { prior, .. } => Ok(prior),
            _ => Err(Error::Invalid(format!("family {} has no temporal prior", self.family()))),
        }
    }

    fn repack(&self) -> bool {
        self.family() == Family::Flex
    }

    // ------------------------------------------------------------ training forwards

    /// Rate (total bits, scalar) and reconstruction for an image batch under
    /// the uniform-noise surrogate. Temporal families use their backbone
    /// pretraining density.
    pub fn image_forward(&self, tape: &mut Tape<f32>, x: Var, rng: &mut impl Rng) -> Result<(Var, Var)> {
        let store = &self.store;
        let y = self.transforms.analysis(tape, store, x)?;
        let noise = tape.constant(uniform_noise(tape.shape(y), rng));
        let yt = tape.add(y, noise)?;
        let bits = match &self.entropy {
            EntropyModel::Factorized(fd) | EntropyModel::Temporal { stage1: fd, .. } => {
                let b = fd.bits_tape(tape, store, yt)?;
                tape.sum(b)
            }
            EntropyModel::Elic { hyper, z_density, ctx } => {
                let z = hyper.analysis(tape, store, y)?;
                let zn = tape.constant(uniform_noise(tape.shape(z), rng));
                let zt = tape.add(z, zn)?;
                let bz = z_density.bits_tape(tape, store, zt)?;
                let hf = hyper.synthesis(tape, store, zt)?;
                let (mu, sigma) = ctx.predict_parallel(tape, store, hf, yt)?;
                let by = gaussian_bits_tape(tape, yt, mu, sigma)?;
                let (bz, by) = (tape.sum(bz), tape.sum(by));
                tape.add(bz, by)?
            }
        };
        let xhat = self.transforms.synthesis(tape, store, yt)?;
        Ok((bits, xhat))
    }

    /// Quantized latents [N, M, h, w] of an image batch.
    pub fn latents(&self, x: &Array<f32>) -> Result<Array<f32>> {
        let y = eval(x, |t, v| self.transforms.analysis(t, &self.store, v))?;
        Ok(rounded(&y))
    }

    /// Context tokens on a tape from past latents [N, M, h, w].
    pub fn context_tape(&self, tape: &mut Tape<f32>, past: Option<(Var, Var)>, blocks: usize) -> Result<Var> {
        let prior = self.prior()?;
        let past = match past {
            Some((a, b)) => Past::Two(temporal::past_tokens(tape, a)?, temporal::past_tokens(tape, b)?),
            None => Past::None,
        };
        prior.context(tape, &self.store, past, blocks)
    }

    /// Per-element bits [N·B, 16, M] of current tokens given context.
    pub fn token_bits_tape(&self, tape: &mut Tape<f32>, ctx: Var, tokens: Var) -> Result<Var> {
        let (mu, sigma) = self.prior()?.priors(tape, &self.store, ctx, tokens)?;
        gaussian_bits_tape(tape, tokens, mu, sigma)
    }

    /// Flexible-rate forward on one frame given constant past latents:
    /// returns the T/K-scaled rate of the kept tokens and the reconstruction
    /// from the masked latent. `masked = false` keeps every token in the
    /// synthesis path while still scoring the rate of the first `k`.
    pub fn flex_forward(
        &self,
        tape: &mut Tape<f32>,
        past: Option<(&Array<f32>, &Array<f32>)>,
        x: Var,
        k: usize,
        masked: bool,
    ) -> Result<(Var, Var)> {
        let store = &self.store;
        let y = self.transforms.analysis(tape, store, x)?;
        let [n, _, h, w] = *tape.shape(y) else { unreachable!() };
        let yq = tape.unary(Unary::RoundSte, y);
        let tokens = temporal::current_tokens(tape, yq, true)?;
        let past = past.map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())));
        let ctx = self.context_tape(tape, past, n * temporal::num_blocks(h, w))?;
        let bits = self.token_bits_tape(tape, ctx, tokens)?;
        let rate = flex_rate_tape(tape, bits, k)?;
        let lat = if masked && k < TOKENS {
            let EntropyModel::Temporal { mask: Some(m), .. } = &self.entropy else {
                return Err(Error::Invalid("masked training needs the FLEX mask token".into()));
            };
            let m = store.bind(tape, *m);
            let mt = apply_mask_tape(tape, tokens, k, m)?;
            temporal::untokenize(tape, mt, n, h, w, true)?
        } else {
            yq
        };
        let xhat = self.transforms.synthesis(tape, store, lat)?;
        Ok((rate, xhat))
    }

    // ------------------------------------------------------------ deterministic inference

    pub fn analyze(&self, x: &Array<f32>) -> Result<Array<f32>> {
        portable(|| eval(x, |t, v| self.transforms.analysis(t, &self.store, v)))
    }

    pub fn synthesize(&self, latent: &Array<f32>) -> Result<Array<f32>> {
        portable(|| eval(latent, |t, v| self.transforms.synthesis(t, &self.store, v)))
    }

    /// Rounded analysis of one standardized frame, as the encoder sees it.
    pub fn quantized_latent(&self, frame: &StdCube) -> Result<Array<f32>> {
        Ok(rounded(&self.analyze(&cube_to_array(frame))?))
    }

    /// Context embedding for one frame's blocks.
    pub fn context(&self, past: PastLatents<'_>, h: usize, w: usize) -> Result<Array<f32>> {
        portable(|| {
            let mut tape = Tape::new();
            let past = match past {
                PastLatents::Two(a, b) => {
                    check_latent(a, self.d_lat())?;
                    check_latent(b, self.d_lat())?;
                    if a.shape() != b.shape() || a.shape()[2..] != [h, w] {
                        return Err(shape_err("latent", "past frames differ from the current grid"));
                    }
                    Some((tape.constant(a.clone()), tape.constant(b.clone())))
                }
                PastLatents::None => None,
            };
            let ctx = self.context_tape(&mut tape, past, temporal::num_blocks(h, w))?;
            Ok(tape.value(ctx).clone())
        })
    }

    /// `(mu, sigma)` [B, 16, M] for every token position of `tokens`.
    pub fn token_priors(&self, ctx: &Array<f32>, tokens: &Array<f32>) -> Result<(Array<f32>, Array<f32>)> {
        portable(|| {
            let mut tape = Tape::new();
            let c = tape.constant(ctx.clone());
            let t = tape.constant(tokens.clone());
            let (mu, sigma) = self.prior()?.priors(&mut tape, &self.store, c, t)?;
            Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
        })
    }

    /// Token layout of a latent [1, M, h, w] for this family.
    pub fn tokens_of(&self, latent: &Array<f32>) -> Result<Array<f32>> {
        let (h, w) = check_latent(latent, self.d_lat())?;
        let m = self.d_lat();
        let idx = if self.repack() {
            temporal::repacked_index(1, m, h, w, TOKENS)?
        } else {
            temporal::current_index(1, m, h, w)?
        };
        Ok(temporal::gather(latent, &idx, &[temporal::num_blocks(h, w), TOKENS, m]))
    }

    pub fn latent_of(&self, tokens: &Array<f32>, h: usize, w: usize) -> Result<Array<f32>> {
        let m = self.d_lat();
        let idx = if self.repack() {
            temporal::repacked_index(1, m, h, w, TOKENS)?
        } else {
            temporal::current_index(1, m, h, w)?
        };
        if idx.len() != tokens.len() {
            return Err(shape_err("token", format!("{} token values for a {m}x{h}x{w} latent", tokens.len())));
        }
        Ok(temporal::gather(tokens, &temporal::invert(&idx), &[1, m, h, w]))
    }

    /// Fills tokens `from..16` of every block one position at a time, with
    /// the predicted mean or the mask vector.
    pub fn fill_tokens(&self, ctx: &Array<f32>, tokens: &mut Array<f32>, from: usize, fill: FillMode) -> Result<()> {
        let m = self.d_lat();
        let blocks = tokens.shape()[0];
        let zero_from = |a: &mut Array<f32>, t0: usize| {
            for b in 0..blocks {
                a.data_mut()[(b * TOKENS + t0) * m..(b + 1) * TOKENS * m].iter_mut().for_each(|v| *v = 0.0);
            }
        };
        if from >= TOKENS {
            return Ok(());
        }
        zero_from(tokens, from);
        match fill {
            FillMode::Mask => {
                let EntropyModel::Temporal { mask: Some(id), .. } = &self.entropy else {
                    return Err(Error::Invalid(format!("family {} has no mask token", self.family())));
                };
                let mv = self.store.value(*id).data().to_vec();
                for b in 0..blocks {
                    for t in from..TOKENS {
                        tokens.data_mut()[(b * TOKENS + t) * m..(b * TOKENS + t + 1) * m].copy_from_slice(&mv);
                    }
                }
            }
            FillMode::Mean => {
                for t in from..TOKENS {
                    let (mu, _) = self.token_priors(ctx, tokens)?;
                    for b in 0..blocks {
                        let r = (b * TOKENS + t) * m..(b * TOKENS + t + 1) * m;
                        tokens.data_mut()[r.clone()].copy_from_slice(&mu.data()[r]);
                    }
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------ latent coding

    /// Entropy-codes the latent `y` [1, M, h, w] (rounded here). `past` and
    /// `budget` only apply to temporal families.
    pub fn encode_latent(&self, y: &Array<f32>, past: PastLatents<'_>, budget: Option<usize>, fill: FillMode) -> Result<FrameCode> {
        let (h, w) = check_latent(y, self.d_lat())?;
        let yhat = rounded(y);
        let mut enc = Encoder::new();
        let store = &self.store;
        let (est_bits, latent) = match &self.entropy {
            EntropyModel::Factorized(fd) => {
                let tables = fd.tables(store)?;
                (encode_factorized(&mut enc, &tables, yhat.data()), yhat)
            }
            EntropyModel::Elic { hyper, z_density, ctx } => {
                let z = portable(|| eval(y, |t, v| hyper.analysis(t, store, v)))?;
                let zhat = rounded(&z);
                let mut bits = encode_factorized(&mut enc, &z_density.tables(store)?, zhat.data());
                let hf = portable(|| eval(&zhat, |t, v| hyper.synthesis(t, store, v)))?;
                let offs = ctx.groups.offsets();
                let mut gt = self.tables.lock().unwrap();
                let out = portable(|| {
                    ctx.staged(store, &hf, |g, anchor, mu, sigma| {
                        let size = ctx.groups.0[g];
                        let slice = &yhat.data()[offs[g] * h * w..(offs[g] + size) * h * w];
                        for c in 0..size {
                            for p in 0..h * w {
                                if crate::entropy::is_anchor(p / w, p % w) == anchor {
                                    let i = c * h * w + p;
                                    bits += gt.encode(&mut enc, slice[i] as i32, mu.data()[i] as f64, sigma.data()[i] as f64)?;
                                }
                            }
                        }
                        Array::new(&[1, size, h, w], slice.to_vec())
                    })
                })?;
                debug_assert_eq!(out, yhat);
                (bits, yhat)
            }
            EntropyModel::Temporal { .. } => {
                let k = self.budget(budget)?;
                let ctx = self.context(past, h, w)?;
                let mut tokens = self.tokens_of(&yhat)?;
                let (mu, sigma) = self.token_priors(&ctx, &tokens)?;
                let m = self.d_lat();
                let blocks = tokens.shape()[0];
                let mut bits = 0.0;
                let mut gt = self.tables.lock().unwrap();
                for t in 0..k {
                    for b in 0..blocks {
                        for c in 0..m {
                            let i = (b * TOKENS + t) * m + c;
                            bits += gt.encode(&mut enc, tokens.data()[i] as i32, mu.data()[i] as f64, sigma.data()[i] as f64)?;
                        }
                    }
                }
                drop(gt);
                self.fill_tokens(&ctx, &mut tokens, k, fill)?;
                (bits, self.latent_of(&tokens, h, w)?)
            }
        };
        Ok(FrameCode { bytes: enc.finish(), est_bits, latent })
    }

    fn budget(&self, budget: Option<usize>) -> Result<usize> {
        match budget {
            None => Ok(TOKENS),
            Some(k) if k <= TOKENS && (k == TOKENS || self.repack()) => Ok(k),
            Some(k) => Err(Error::Invalid(format!("budget {k} not available for family {}", self.family()))),
        }
    }

    /// Inverse of [`Self::encode_latent`] for a latent grid `h x w`.
    pub fn decode_latent(&self, bytes: &[u8], h: usize, w: usize, past: PastLatents<'_>, budget: Option<usize>, fill: FillMode) -> Result<Array<f32>> {
        let m = self.d_lat();
        let mut dec = Decoder::new(bytes)?;
        let store = &self.store;
        match &self.entropy {
            EntropyModel::Factorized(fd) => {
                let v = decode_factorized(&mut dec, &fd.tables(store)?, m * h * w)?;
                Array::new(&[1, m, h, w], v)
            }
            EntropyModel::Elic { hyper, z_density, ctx } => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(shape_err(if h % 4 != 0 { "height" } else { "width" }, "latent extent not divisible by 4"));
                }
                let nz = hyper.channels;
                let zv = decode_factorized(&mut dec, &z_density.tables(store)?, nz * (h / 4) * (w / 4))?;
                let zhat = Array::new(&[1, nz, h / 4, w / 4], zv)?;
                let hf = portable(|| eval(&zhat, |t, v| hyper.synthesis(t, store, v)))?;
                let mut gt = self.tables.lock().unwrap();
                portable(|| {
                    ctx.staged(store, &hf, |g, anchor, mu, sigma| {
                        let size = ctx.groups.0[g];
                        let mut out = vec![0.0f32; size * h * w];
                        for c in 0..size {
                            for p in 0..h * w {
                                if crate::entropy::is_anchor(p / w, p % w) == anchor {
                                    let i = c * h * w + p;
                                    out[i] = gt.decode(&mut dec, mu.data()[i] as f64, sigma.data()[i] as f64)? as f32;
                                }
                            }
                        }
                        Array::new(&[1, size, h, w], out)
                    })
                })
            }
            EntropyModel::Temporal { .. } => {
                let k = self.budget(budget)?;
                let ctx = self.context(past, h, w)?;
                let blocks = temporal::num_blocks(h, w);
                let mut tokens = Array::zeros(&[blocks, TOKENS, m]);
                for t in 0..k {
                    let (mu, sigma) = self.token_priors(&ctx, &tokens)?;
                    let mut gt = self.tables.lock().unwrap();
                    for b in 0..blocks {
                        for c in 0..m {
                            let i = (b * TOKENS + t) * m + c;
                            tokens.data_mut()[i] = gt.decode(&mut dec, mu.data()[i] as f64, sigma.data()[i] as f64)? as f32;
                        }
                    }
                }
                self.fill_tokens(&ctx, &mut tokens, k, fill)?;
                self.latent_of(&tokens, h, w)
            }
        }
    }

    // ------------------------------------------------------------ sequences

    fn header(&self, h: usize, w: usize, frames: usize, opts: &CodingOptions) -> Result<Header> {
        let temporal = matches!(self.family(), Family::Tt | Family::Flex);
        let budget = match opts.budget {
            Some(k) if self.family() == Family::Flex => {
                self.budget(Some(k))?;
                k as u8
            }
            Some(k) if k != TOKENS => return Err(Error::Invalid(format!("budget only applies to FLEX, got {k} for {}", self.family()))),
            _ => K_ALL,
        };
        if opts.context > 2 {
            return Err(Error::Invalid(format!("context count {} exceeds 2", opts.context)));
        }
        let narrow = |v: usize, what: &str, max: usize| {
            if v > max {
                Err(Error::Invalid(format!("{what} {v} exceeds the container limit {max}")))
            } else {
                Ok(v)
            }
        };
        Ok(Header {
            family: self.family(),
            flags: Flags { context: if temporal { opts.context } else { 0 }, fill: opts.fill, repeat_single: true },
            budget,
            h: narrow(h, "height", u16::MAX as usize)? as u16,
            w: narrow(w, "width", u16::MAX as usize)? as u16,
            c: narrow(self.cfg.codec.c, "bands", u8::MAX as usize)? as u8,
            frames: narrow(frames, "frames", u8::MAX as usize)? as u8,
            d_lat: narrow(self.d_lat(), "d_lat", u16::MAX as usize)? as u16,
            lambda_preset: self.cfg.lambda_preset,
        })
    }

    pub fn encode_sequence(&self, frames: &[StdCube], opts: &CodingOptions) -> Result<EncodedSequence> {
        let first = frames.first().ok_or_else(|| Error::Invalid("empty sequence".into()))?;
        let header = self.header(first.h, first.w, frames.len(), opts)?;
        let budget = (header.budget != K_ALL).then_some(header.budget as usize);
        let mut out = EncodedSequence { container: Container { header, segments: Vec::new() }, est_bits: Vec::new(), latents: Vec::new(), recon: Vec::new() };
        for (i, f) in frames.iter().enumerate() {
            if (f.h, f.w, f.c) != (first.h, first.w, first.c) {
                return Err(shape_err("frame", format!("frame {i} is {}x{}x{}, frame 0 is {}x{}x{}", f.h, f.w, f.c, first.h, first.w, first.c)));
            }
            let y = self.analyze(&cube_to_array(f))?;
            let past = match past_pair(i, header.flags.context) {
                Some((a, b)) => PastLatents::Two(&out.latents[a], &out.latents[b]),
                None => PastLatents::None,
            };
            let code = self.encode_latent(&y, past, budget, header.flags.fill)?;
            out.recon.push(array_to_cube(&self.synthesize(&code.latent)?)?);
            out.container.segments.push(code.bytes);
            out.est_bits.push(code.est_bits);
            out.latents.push(code.latent);
        }
        Ok(out)
    }

    /// Decoded latents and reconstructions of every frame.
    pub fn decode_sequence(&self, c: &Container) -> Result<(Vec<Array<f32>>, Vec<StdCube>)> {
        let h = &c.header;
        if h.family != self.family() || h.c as usize != self.cfg.codec.c || h.d_lat as usize != self.d_lat() {
            return Err(Error::Checkpoint(format!(
                "bitstream is {} with {} bands and d_lat {}, model is {} with {} bands and d_lat {}",
                h.family,
                h.c,
                h.d_lat,
                self.family(),
                self.cfg.codec.c,
                self.d_lat()
            )));
        }
        let (hh, ww) = (h.h as usize, h.w as usize);
        for (axis, e) in [("height", hh), ("width", ww)] {
            if e == 0 || e % crate::transforms::DOWNSAMPLE != 0 {
                return Err(shape_err(axis, format!("{e} is not divisible by {}", crate::transforms::DOWNSAMPLE)));
            }
        }
        let (lh, lw) = (hh / crate::transforms::DOWNSAMPLE, ww / crate::transforms::DOWNSAMPLE);
        let budget = (h.budget != K_ALL).then_some(h.tokens_kept(TOKENS)?);
        let mut latents: Vec<Array<f32>> = Vec::new();
        let mut recon = Vec::new();
        for (i, seg) in c.segments.iter().enumerate() {
            let past = match past_pair(i, h.flags.context) {
                Some((a, b)) => PastLatents::Two(&latents[a], &latents[b]),
                None => PastLatents::None,
            };
            let lat = self.decode_latent(seg, lh, lw, past, budget, h.flags.fill)?;
            recon.push(array_to_cube(&self.synthesize(&lat)?)?);
            latents.push(lat);
        }
        Ok((latents, recon))
    }
}
