//! Rate–distortion training: losses, schedules, the optimizer and the loop.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{past_pair, Model};
use crate::coder::Family;
use crate::dataio::{SynthConfig, Synthetic};
use crate::dataio::{crop_synthetic, standardize, BandStats, CropMode, StdCube};
use crate::error::{Error, Result};
use crate::flexrate::{flex_loss, sample_budget};
use crate::grad::params::{load_checkpoint, save_checkpoint, Group, ParamStore};
use crate::grad::tape::{Gradients, Tape, Var};
use crate::grad::Array;
use crate::temporal::{self, TOKENS};
use crate::transforms::batch_array;

/// λ at or below which the early 10λ phase is used.
pub const LOW_RATE_LAMBDA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDLossParts {
    /// Bits of the batch.
    pub rate_bits: f64,
    /// Bits per pixel-band.
    pub rate: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn rd_loss(rate_bits: f64, distortion: f64, lambda: f64, normalizer: f64) -> RDLossParts {
    let rate = rate_bits / normalizer;
    RDLossParts { rate_bits, rate, distortion, lambda, total: rate + lambda * distortion }
}

/// 10λ for the first 15% of steps, linear back to λ by 30%, then λ.
/// Only active for λ at or below `threshold`.
pub fn lambda_schedule(step: usize, steps: usize, lambda: f64, threshold: f64) -> f64 {
    if lambda > threshold || steps == 0 {
        return lambda;
    }
    let p = step as f64 / steps as f64;
    if p < 0.15 {
        10.0 * lambda
    } else if p < 0.30 {
        let a = (p - 0.15) / 0.15;
        10.0 * lambda + a * (lambda - 10.0 * lambda)
    } else {
        lambda
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear warmup then cosine to zero.
    Cosine,
    /// Linear warmup then a quarter-period cosine to zero.
    HalfCosine,
    Constant,
}

/// What a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Transforms plus an image entropy model, single frames.
    Image,
    /// Temporal prior only, on frozen quantized latents of consecutive frames.
    Temporal,
    /// End-to-end flexible rate with sampled budgets; `masked = false` is the
    /// no-masking ablation.
    Flex { masked: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub family: Family,
    pub mode: TrainMode,
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub aux_lr: f64,
    pub clip: f64,
    pub warmup: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub synth: SynthConfig,
    /// Sequences used to fit band statistics.
    pub stats_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: Family::Fp,
            mode: TrainMode::Image,
            lambda: 4.0,
            steps: 2000,
            batch: 8,
            crop: 64,
            lr: 1e-3,
            aux_lr: 5e-3,
            clip: 1.0,
            warmup: 0.05,
            schedule: Schedule::Cosine,
            weight_decay: 1e-2,
            seed: 0,
            synth: SynthConfig::default(),
            stats_sequences: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.steps == 0 || !(self.clip > 0.0) || self.batch == 0 {
            return Err(Error::Invalid(format!(
                "need lambda > 0, steps >= 1, clip > 0, batch >= 1 (got {}, {}, {}, {})",
                self.lambda, self.steps, self.clip, self.batch
            )));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Invalid(format!("warmup fraction {} outside [0, 1)", self.warmup)));
        }
        let temporal = matches!(self.family, Family::Tt | Family::Flex);
        match self.mode {
            TrainMode::Temporal if !temporal => return Err(Error::Invalid(format!("temporal training needs TT or FLEX, got {}", self.family))),
            TrainMode::Flex { .. } if self.family != Family::Flex => return Err(Error::Invalid("flexible-rate training needs FLEX".into())),
            _ => {}
        }
        if self.synth.frames < 3 && self.mode != TrainMode::Image {
            return Err(Error::Invalid("temporal training needs at least 3 frames per sequence".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        let warm = (self.warmup * self.steps as f64).round() as usize;
        if step < warm {
            return self.lr * step as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let p = ((step - warm) as f64 / span).min(1.0);
        match self.schedule {
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (PI * p).cos()),
            Schedule::HalfCosine => self.lr * (0.5 * PI * p).cos(),
            Schedule::Constant => self.lr,
        }
    }
}

/// Seed-addressed synthetic training and evaluation data.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub synth: SynthConfig,
    pub stats: BandStats,
    seed: u64,
}

/// Offset separating held-out sequence seeds from training seeds.
pub const HELD_OUT: u64 = 1 << 40;

impl Corpus {
    pub fn new(synth: SynthConfig, seed: u64, stats_sequences: usize) -> Result<Self> {
        let mut c = Self { stats: BandStats::identity(synth.c), synth, seed };
        let seqs: Vec<Synthetic> = (0..stats_sequences.max(1) as u64).map(|i| c.train_sequence(i)).collect();
        c.stats = BandStats::compute(seqs.iter().flat_map(|s| s.seq.frames.iter()))?;
        Ok(c)
    }

    pub fn with_stats(synth: SynthConfig, seed: u64, stats: BandStats) -> Self {
        Self { synth, stats, seed }
    }

    fn mix(&self, i: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i
    }

    pub fn train_sequence(&self, i: u64) -> Synthetic {
        self.synth.generate(self.mix(i))
    }

    pub fn held_out_sequence(&self, i: u64) -> Synthetic {
        self.synth.generate(self.mix(HELD_OUT + i))
    }

    pub fn standardize(&self, s: &Synthetic) -> Result<Vec<StdCube>> {
        s.seq.frames.iter().map(|f| standardize(f, &self.stats)).collect()
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<u32, Vec<f32>>,
    v: HashMap<u32, Vec<f32>>,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, ..Default::default() }
    }

    /// One update; `lr_main` and `lr_aux` apply to the two parameter groups.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr_main: f64, lr_aux: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (id, g) in grads.params() {
            let e = store.entry_mut(*id);
            if e.frozen {
                continue;
            }
            let lr = if e.group == Group::Aux { lr_aux } else { lr_main };
            let decay = if e.decay { weight_decay } else { 0.0 };
            let n = g.len();
            let m = self.m.entry(id.0).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id.0).or_insert_with(|| vec![0.0; n]);
            for (i, p) in e.value.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                let x = *p as f64;
                *p = (x - lr * (step + decay * x)) as f32;
            }
        }
    }

    fn to_stores(&self, like: &ParamStore<f32>) -> (ParamStore<f32>, ParamStore<f32>) {
        let fill = |src: &HashMap<u32, Vec<f32>>| {
            let mut s = like.clone();
            for id in like.ids().collect::<Vec<_>>() {
                let e = s.entry_mut(id);
                let shape = e.value.shape().to_vec();
                e.value = match src.get(&id.0) {
                    Some(d) => Array::new(&shape, d.clone()).unwrap(),
                    None => Array::zeros(&shape),
                };
            }
            s
        };
        (fill(&self.m), fill(&self.v))
    }

    fn from_stores(&mut self, m: &ParamStore<f32>, v: &ParamStore<f32>, t: u64) {
        self.t = t;
        self.m = m.ids().map(|id| (id.0, m.value(id).data().to_vec())).collect();
        self.v = v.ids().map(|id| (id.0, v.value(id).data().to_vec())).collect();
    }
}

/// Scales gradients to global norm at most `clip`; returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients<f32>, clip: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip {
        grads.scale(clip / norm);
    }
    norm
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub rate: f64,
    pub distortion: f64,
    pub lambda: f64,
    pub lr: f64,
    pub total: f64,
    pub budget: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub corpus: Corpus,
    pub opt: Adam,
    pub step: usize,
    pub log: Vec<LogRow>,
}

fn mse(tape: &mut Tape<f32>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.unary(crate::grad::Unary::Square, d);
    Ok(tape.mean(sq))
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model) -> Result<Self> {
        cfg.validate()?;
        if model.family() != cfg.family {
            return Err(Error::Invalid(format!("config family {} but model is {}", cfg.family, model.family())));
        }
        if cfg.synth.c != model.cfg.codec.c {
            return Err(Error::Invalid(format!("corpus has {} bands, model expects {}", cfg.synth.c, model.cfg.codec.c)));
        }
        let corpus = Corpus::new(cfg.synth.clone(), cfg.seed, cfg.stats_sequences)?;
        let mut t = Self { cfg, model, corpus, opt: Adam::new(), step: 0, log: Vec::new() };
        t.apply_freezing();
        Ok(t)
    }

    /// Reuses a trained corpus's statistics, e.g. when fine-tuning.
    pub fn with_corpus(cfg: TrainConfig, model: Model, corpus: Corpus) -> Result<Self> {
        cfg.validate()?;
        let mut t = Self { cfg, model, corpus, opt: Adam::new(), step: 0, log: Vec::new() };
        t.apply_freezing();
        Ok(t)
    }

    fn apply_freezing(&mut self) {
        let s = &mut self.model.store;
        let temporal_mode = self.cfg.mode == TrainMode::Temporal;
        for p in ["g_a.", "g_s."] {
            s.set_frozen(p, temporal_mode);
        }
        // the backbone-pretraining density is idle outside image mode
        s.set_frozen("fd.", matches!(self.cfg.mode, TrainMode::Temporal | TrainMode::Flex { .. }) && self.cfg.family != Family::Fp);
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x7374_6570)
    }

    fn sample_sequences(&self, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<StdCube>>> {
        (0..self.cfg.batch)
            .map(|_| {
                let s = self.corpus.train_sequence(rng.gen_range(0..1u64 << 32));
                let s = if s.seq.dims().0 > self.cfg.crop || s.seq.dims().1 > self.cfg.crop {
                    crop_synthetic(&s, CropMode::Random, self.cfg.crop, rng)?
                } else {
                    s
                };
                self.corpus.standardize(&s)
            })
            .collect()
    }

    /// Builds the loss for `step` on a fresh tape: (loss var, parts, budget).
    pub fn loss_at(&self, tape: &mut Tape<f32>, step: usize) -> Result<(Var, RDLossParts, usize)> {
        let mut rng = self.step_rng(step);
        let seqs = self.sample_sequences(&mut rng)?;
        let lambda = lambda_schedule(step, self.cfg.steps, self.cfg.lambda, LOW_RATE_LAMBDA);
        let (n, c, h, w) = (seqs.len(), self.corpus.synth.c, seqs[0][0].h, seqs[0][0].w);
        let pixels = (n * c * h * w) as f64;
        let m = &self.model;
        match self.cfg.mode {
            TrainMode::Image => {
                let frames: Vec<&StdCube> = seqs.iter().map(|s| &s[rng.gen_range(0..s.len())]).collect();
                let x = tape.constant(batch_array(&frames)?);
                let (bits, xhat) = m.image_forward(tape, x, &mut rng)?;
                let d = mse(tape, xhat, x)?;
                let r = tape.scale(bits, 1.0 / pixels);
                let dl = tape.scale(d, lambda);
                let loss = tape.add(r, dl)?;
                let parts = rd_loss(tape.value(bits).item() as f64, tape.value(d).item() as f64, lambda, pixels);
                Ok((loss, parts, TOKENS))
            }
            TrainMode::Temporal => {
                // every frame of each sequence, context as at coding time
                let frames = seqs[0].len();
                let mut lat = Vec::with_capacity(frames);
                for f in 0..frames {
                    let xs: Vec<&StdCube> = seqs.iter().map(|s| &s[f]).collect();
                    lat.push(m.latents(&batch_array(&xs)?)?);
                }
                let shape = lat[0].shape().to_vec();
                let blocks = n * temporal::num_blocks(shape[2], shape[3]);
                let mut total = None;
                for (i, cur) in lat.iter().enumerate() {
                    let past = past_pair(i, 2).map(|(a, b)| (tape.constant(lat[a].clone()), tape.constant(lat[b].clone())));
                    let ctx = m.context_tape(tape, past, blocks)?;
                    let cv = tape.constant(cur.clone());
                    let tokens = temporal::current_tokens(tape, cv, m.family() == Family::Flex)?;
                    let bits = m.token_bits_tape(tape, ctx, tokens)?;
                    let b = tape.sum(bits);
                    total = Some(match total {
                        None => b,
                        Some(t) => tape.add(t, b)?,
                    });
                }
                let bits = total.expect("at least one frame");
                let norm = pixels * frames as f64;
                let loss = tape.scale(bits, 1.0 / norm);
                Ok((loss, rd_loss(tape.value(bits).item() as f64, 0.0, 0.0, norm), TOKENS))
            }
            TrainMode::Flex { masked } => {
                let k = sample_budget(TOKENS, &mut rng);
                let frames = seqs[0].len();
                let i = rng.gen_range(0..frames);
                let past = match past_pair(i, 2) {
                    Some((a, b)) => {
                        let pa: Vec<&StdCube> = seqs.iter().map(|s| &s[a]).collect();
                        let pb: Vec<&StdCube> = seqs.iter().map(|s| &s[b]).collect();
                        Some((m.latents(&batch_array(&pa)?)?, m.latents(&batch_array(&pb)?)?))
                    }
                    None => None,
                };
                let xs: Vec<&StdCube> = seqs.iter().map(|s| &s[i]).collect();
                let x = tape.constant(batch_array(&xs)?);
                let (rate, xhat) = m.flex_forward(tape, past.as_ref().map(|(a, b)| (a, b)), x, k, masked)?;
                let d = mse(tape, xhat, x)?;
                let r = tape.scale(rate, 1.0 / pixels);
                let dl = tape.scale(d, lambda);
                let loss = tape.add(r, dl)?;
                let scaled = tape.value(rate).item() as f64;
                let raw = scaled * k as f64 / TOKENS as f64;
                let dv = tape.value(d).item() as f64;
                let total = flex_loss(raw / pixels, dv, k, TOKENS, lambda)?;
                Ok((loss, RDLossParts { rate_bits: raw, rate: raw / pixels, distortion: dv, lambda, total }, k))
            }
        }
    }

    /// One optimizer step. A non-finite loss leaves parameters untouched.
    pub fn train_step(&mut self) -> Result<RDLossParts> {
        let step = self.step;
        let mut tape = Tape::new();
        let (loss, parts, budget) = self.loss_at(&mut tape, step)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss {lv} at step {step}")));
        }
        let mut grads = tape.backward(loss)?;
        drop(tape);
        let gn = clip_gradients(&mut grads, self.cfg.clip);
        if !gn.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {gn} at step {step}")));
        }
        let lr = self.cfg.learning_rate(step);
        let aux = self.cfg.aux_lr * if self.cfg.lr > 0.0 { lr / self.cfg.lr } else { 1.0 };
        self.opt.update(&mut self.model.store, &grads, lr, aux, self.cfg.weight_decay);
        self.log.push(LogRow { step, rate: parts.rate, distortion: parts.distortion, lambda: parts.lambda, lr, total: parts.total, budget });
        self.step += 1;
        Ok(parts)
    }

    /// Runs until `cfg.steps`, calling `on_step` after each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&LogRow)) -> Result<()> {
        while self.step < self.cfg.steps {
            self.train_step()?;
            on_step(self.log.last().expect("logged"));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,rate,distortion,lambda,lr,total,budget")?;
        for r in &self.log {
            writeln!(f, "{},{},{},{},{},{},{}", r.step, r.rate, r.distortion, r.lambda, r.lr, r.total, r.budget)?;
        }
        Ok(())
    }

    /// Model checkpoint at `stem` plus optimizer moments at `<stem>-opt-m` and `<stem>-opt-v`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let extra = serde_json::json!({
            "train": self.cfg,
            "step": self.step,
            "stats": self.corpus.stats,
            "sigma_scales": crate::coder::tables::scale_table(),
            "version": env!("CARGO_PKG_VERSION"),
        });
        self.model.save(stem, extra)?;
        let (m, v) = self.opt.to_stores(&self.model.store);
        save_checkpoint(&m, &opt_stem(stem, "m"), serde_json::json!({ "t": self.opt.t }))?;
        save_checkpoint(&v, &opt_stem(stem, "v"), serde_json::json!({}))?;
        Ok(())
    }

    pub fn resume(stem: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(stem.with_extension("json"))?;
        let manifest: serde_json::Value = serde_json::from_str(&text)?;
        let get = |p: &str| manifest.pointer(p).cloned().ok_or_else(|| Error::Checkpoint(format!("manifest lacks {p}")));
        let cfg: TrainConfig = serde_json::from_value(get("/extra/train")?)?;
        let step: usize = serde_json::from_value(get("/extra/step")?)?;
        let stats: BandStats = serde_json::from_value(get("/extra/stats")?)?;
        let model = Model::load(stem)?;
        let corpus = Corpus::with_stats(cfg.synth.clone(), cfg.seed, stats);
        let mut t = Self::with_corpus(cfg, model, corpus)?;
        let (mut m, mut v) = t.opt.to_stores(&t.model.store);
        let mm = load_checkpoint(&mut m, &opt_stem(stem, "m"))?;
        load_checkpoint(&mut v, &opt_stem(stem, "v"))?;
        let steps: u64 = serde_json::from_value(mm.extra.get("t").cloned().unwrap_or_default()).unwrap_or(0);
        t.opt.from_stores(&m, &v, steps);
        t.step = step;
        Ok(t)
    }
}

fn opt_stem(stem: &Path, which: &str) -> std::path::PathBuf {
    let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}-opt-{which}"))
}

/// RD loss of an image model on `n` held-out frames with fixed noise, at
/// the target λ (no schedule).
pub fn validation_loss(model: &Model, corpus: &Corpus, lambda: f64, n: usize, seed: u64) -> Result<RDLossParts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<StdCube> = (0..n as u64)
        .map(|i| {
            let s = corpus.held_out_sequence(i);
            let k = rng.gen_range(0..s.seq.len());
            standardize(&s.seq.frames[k], &corpus.stats)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&StdCube> = frames.iter().collect();
    let mut tape = Tape::new();
    let x = tape.constant(batch_array(&refs)?);
    let (bits, xhat) = model.image_forward(&mut tape, x, &mut rng)?;
    let d = mse(&mut tape, xhat, x)?;
    let f = &frames[0];
    let pixels = (n * f.c * f.h * f.w) as f64;
    Ok(rd_loss(tape.value(bits).item() as f64, tape.value(d).item() as f64, lambda, pixels))
}
