//! The `tec` command line: corpus synthesis, training, coding, evaluation
//! and inpainting on top of the `terracodec` crate.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use terracodec::codec::{CodingOptions, Model, ModelConfig};
use terracodec::coder::{pack_container, unpack_container, Family, FillMode};
use terracodec::dataio::{destandardize, load_cube, load_stats, save_cube, save_stats, BandStats, ImageCube, Sequence, SynthConfig};
use terracodec::inpaint::{copy_least_cloudy, inpaint_cube, masked_psnr, Policy, SoftMask};
use terracodec::metrics::{evaluate_frames, FrameClass, FrameMetrics, PsnrMode, RDRecord, CSV_HEADER};
use terracodec::trainer::{Corpus, Schedule, TrainConfig, TrainMode, Trainer};

pub mod selftest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

/// Budgets swept by `curve` for flexible-rate checkpoints.
pub const DEFAULT_BUDGETS: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 12, 16];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] terracodec::Error),
    #[error("invariant failed: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Invariant(_) => EXIT_INVARIANT,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Small,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Image,
    Temporal,
    Flex,
    /// Flexible-rate training without the mask token (ablation).
    FlexNomask,
}

/// Training knobs not fixed by the model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub mode: Mode,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub aux_lr: f64,
    pub clip: f64,
    /// Defaults to 0.05 for image training, 0.15 otherwise.
    pub warmup: Option<f64>,
    /// Defaults to cosine for image training, half-cosine otherwise.
    pub schedule: Option<Schedule>,
    pub weight_decay: f64,
    pub stats_sequences: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: Mode::Image,
            steps: t.steps,
            batch: t.batch,
            crop: t.crop,
            lr: t.lr,
            aux_lr: t.aux_lr,
            clip: t.clip,
            warmup: None,
            schedule: None,
            weight_decay: t.weight_decay,
            stats_sequences: t.stats_sequences,
        }
    }
}

/// Everything a command can be configured with. Loaded from `--config`,
/// then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub family: Family,
    pub preset: Preset,
    pub lambda: f64,
    /// Token budget for FLEX coding; `None` keeps all tokens.
    pub budget: Option<usize>,
    pub budgets: Vec<usize>,
    pub context: u8,
    pub fill: FillMode,
    pub psnr_mode: PsnrMode,
    pub tau: f64,
    pub policy: Policy,
    pub seed: u64,
    pub synth: SynthConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            family: Family::Fp,
            preset: Preset::Desk,
            lambda: TrainConfig::default().lambda,
            budget: None,
            budgets: DEFAULT_BUDGETS.to_vec(),
            context: 2,
            fill: FillMode::Mean,
            psnr_mode: PsnrMode::Full,
            tau: 0.0,
            policy: Policy::Interleave,
            seed: 0,
            synth: SynthConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.budget.is_some() && self.family != Family::Flex {
            return Err(CliError::Usage(format!("--budget needs the FLEX family, config has {}", self.family)));
        }
        if let Some(k) = self.budget {
            check_budget(k)?;
        }
        for &k in &self.budgets {
            check_budget(k)?;
        }
        if self.context > 2 {
            return Err(CliError::Usage(format!("--context must be 0, 1 or 2, got {}", self.context)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(CliError::Usage(format!("--tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(self.lambda > 0.0) {
            return Err(CliError::Usage(format!("--lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(self.family, self.synth.c),
            Preset::Small => ModelConfig::small(self.family, self.synth.c),
            Preset::Full => ModelConfig::full(self.family, self.synth.c),
        };
        cfg.lambda_preset = self.lambda.round().clamp(0.0, 255.0) as u8;
        cfg.seed = self.seed;
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let image = t.mode == Mode::Image;
        TrainConfig {
            family: self.family,
            mode: match t.mode {
                Mode::Image => TrainMode::Image,
                Mode::Temporal => TrainMode::Temporal,
                Mode::Flex => TrainMode::Flex { masked: true },
                Mode::FlexNomask => TrainMode::Flex { masked: false },
            },
            lambda: self.lambda,
            steps: t.steps,
            batch: t.batch,
            crop: t.crop,
            lr: t.lr,
            aux_lr: t.aux_lr,
            clip: t.clip,
            warmup: t.warmup.unwrap_or(if image { 0.05 } else { 0.15 }),
            schedule: t.schedule.unwrap_or(if image { Schedule::Cosine } else { Schedule::HalfCosine }),
            weight_decay: t.weight_decay,
            seed: self.seed,
            synth: self.synth.clone(),
            stats_sequences: t.stats_sequences,
        }
    }

    pub fn coding_options(&self) -> CodingOptions {
        CodingOptions { context: self.context, budget: self.budget, fill: self.fill }
    }
}

fn check_budget(k: usize) -> CliResult<()> {
    if !(1..=16).contains(&k) {
        return Err(CliError::Usage(format!("budgets must lie in 1..=16, got {k}")));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "tec", version, about = "Learned compression of multispectral image sequences")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub show_config: bool,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub family: Option<Family>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// FLEX token budget K (1..=16).
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Comma-separated budgets for `curve`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    /// Past frames used as context (0, 1 or 2).
    #[arg(long, global = true)]
    pub context: Option<u8>,
    /// Dropped-token fill: mean or mask.
    #[arg(long, global = true, value_parser = parse_fill)]
    pub fill: Option<FillMode>,
    /// PSNR range mode: 65k, 10k or auto.
    #[arg(long, global = true)]
    pub psnr_mode: Option<PsnrMode>,
    /// Cloud threshold for inpainting.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Inpainting policy: interleave, propagate or forecast.
    #[arg(long, global = true)]
    pub policy: Option<Policy>,
    /// Synthetic frame height (also sets training data).
    #[arg(long, global = true)]
    pub height: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    /// Spectral bands; also the model's input channels.
    #[arg(long, global = true)]
    pub bands: Option<usize>,
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    #[arg(long, global = true)]
    pub cloud_prob: Option<f64>,
}

fn parse_fill(s: &str) -> std::result::Result<FillMode, String> {
    match s {
        "mean" => Ok(FillMode::Mean),
        "mask" => Ok(FillMode::Mask),
        _ => Err(format!("unknown fill {s:?} (mean, mask)")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic sequences with their cloud masks and clear truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
    },
    /// Fit per-band statistics over a corpus directory.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the synthetic corpus.
    Train {
        /// Checkpoint stem to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Copy matching parameters and band statistics from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from its checkpoint.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Per-step CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode a TECR sequence into a TECB bitstream.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Band statistics; defaults to those stored with the checkpoint.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Decode a TECB bitstream into a TECR sequence.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// RD records of a checkpoint over a corpus, as JSON lines.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// RD table over checkpoints (and budgets for FLEX) as CSV.
    Curve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Fill clouded regions of one frame from its temporal context.
    Inpaint {
        #[arg(long)]
        input: PathBuf,
        /// Single-band TECR masks scaled by 1/65535, one frame per input frame.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSON report of masked-region metrics.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Cloud-free frames to score against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Run the fast invariant suite.
    Selftest {
        /// Also verify this checkpoint's manifest hash.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Resolves the configuration: defaults, then the file, then flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let o = &cli.overrides;
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = o.$f.clone() { cfg.$f = v; })*};
    }
    set!(seed, family, preset, lambda, budgets, context, fill, psnr_mode, tau, policy);
    let s = &mut cfg.synth;
    s.h = o.height.unwrap_or(s.h);
    s.w = o.width.unwrap_or(s.w);
    s.c = o.bands.unwrap_or(s.c);
    s.frames = o.frames.unwrap_or(s.frames);
    s.cloud_prob = o.cloud_prob.unwrap_or(s.cloud_prob);
    if o.budget.is_some() {
        cfg.budget = o.budget;
    }
    match &cli.command {
        Command::Train { mode, steps, lr, .. } => {
            let t = &mut cfg.train;
            t.mode = mode.unwrap_or(t.mode);
            t.steps = steps.unwrap_or(t.steps);
            t.lr = lr.unwrap_or(t.lr);
        }
        _ => {}
    }
    Ok(cfg)
}

/// Parses arguments, runs the command, and returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    if cli.show_config {
        writeln!(out, "{}", serde_json::to_string_pretty(&cfg)?)?;
        return Ok(());
    }
    cfg.validate()?;
    match &cli.command {
        Command::Synth { out: dir, sequences, .. } => cmd_synth(&cfg, dir, *sequences, out),
        Command::Stats { corpus, out: path } => cmd_stats(corpus, path, out),
        Command::Train { out: stem, init, resume, log, .. } => cmd_train(&cfg, stem, init.as_deref(), resume.as_deref(), log.as_deref(), out),
        Command::Encode { input, checkpoint, out: path, stats } => cmd_encode(&cfg, input, checkpoint, path, stats.as_deref(), out),
        Command::Decode { input, checkpoint, out: path, stats } => cmd_decode(input, checkpoint, path, stats.as_deref(), out),
        Command::Eval { corpus, checkpoint, out: path, stats } => cmd_eval(&cfg, corpus, checkpoint, path.as_deref(), stats.as_deref(), out),
        Command::Curve { corpus, checkpoint, out: path, stats } => cmd_curve(&cfg, corpus, checkpoint, path, stats.as_deref(), out),
        Command::Inpaint { input, masks, checkpoint, target, out: path, report, truth, stats } => cmd_inpaint(
            &cfg,
            InpaintArgs { input, masks, checkpoint, target: *target, out: path, report: report.as_deref(), truth: truth.as_deref(), stats: stats.as_deref() },
            out,
        ),
        Command::Selftest { checkpoint } => {
            let report = selftest::run(checkpoint.as_deref(), out)?;
            if report.iter().all(|r| r.passed) {
                Ok(())
            } else {
                let failed: Vec<&str> = report.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
                Err(CliError::Invariant(failed.join(", ")))
            }
        }
    }
}

// ---------------------------------------------------------------- corpus files

/// Sequence files of a corpus directory, sorted by name. Mask and truth
/// files written by `synth` are skipped.
pub fn corpus_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".tecr") && !name.starts_with("mask_") && !name.starts_with("clear_")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(terracodec::Error::Invalid(format!("no .tecr sequences in {}", dir.display()))));
    }
    Ok(files)
}

fn cmd_synth(cfg: &RunConfig, dir: &Path, sequences: usize, out: &mut dyn Write) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..sequences {
        let s = cfg.synth.generate(cfg.seed.wrapping_add(i as u64));
        save_cube(&dir.join(format!("seq_{i:04}.tecr")), &s.seq)?;
        let masks: Vec<ImageCube> = s.masks.iter().map(|m| SoftMask::from(m).to_cube()).collect();
        save_cube(&dir.join(format!("mask_{i:04}.tecr")), &Sequence::new(masks, s.seq.timestamps.clone())?)?;
        save_cube(&dir.join(format!("clear_{i:04}.tecr")), &Sequence::new(s.clear, s.seq.timestamps.clone())?)?;
    }
    writeln!(out, "wrote {sequences} sequences of {}x{}x{}x{} to {}", cfg.synth.frames, cfg.synth.c, cfg.synth.h, cfg.synth.w, dir.display())?;
    Ok(())
}

fn cmd_stats(corpus: &Path, path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let seqs: Vec<Sequence> = corpus_files(corpus)?.iter().map(|p| load_cube(p)).collect::<terracodec::Result<_>>()?;
    let stats = BandStats::compute(seqs.iter().flat_map(|s| &s.frames))?;
    save_stats(path, &stats)?;
    writeln!(out, "{}", serde_json::to_string(&stats)?)?;
    Ok(())
}

// ---------------------------------------------------------------- checkpoints

fn manifest(stem: &Path) -> CliResult<serde_json::Value> {
    let p = stem.with_extension("json");
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::Data(terracodec::Error::Checkpoint(format!("cannot read {}: {e}", p.display()))))?;
    Ok(serde_json::from_str(&text)?)
}

/// Band statistics: an explicit file wins over those stored with the checkpoint.
pub fn stats_for(stem: &Path, explicit: Option<&Path>) -> CliResult<BandStats> {
    if let Some(p) = explicit {
        return Ok(load_stats(p)?);
    }
    let m = manifest(stem)?;
    let v = m.pointer("/extra/stats").cloned().ok_or_else(|| {
        CliError::Usage(format!("checkpoint {} carries no band statistics; pass --stats", stem.display()))
    })?;
    let s: BandStats = serde_json::from_value(v)?;
    Ok(BandStats::new(s.mean, s.std)?)
}

fn load_model(stem: &Path) -> CliResult<Model> {
    Ok(Model::load(stem)?)
}

fn cmd_train(cfg: &RunConfig, stem: &Path, init: Option<&Path>, resume: Option<&Path>, log: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let mut trainer = match (resume, init) {
        (Some(r), _) => {
            let mut t = Trainer::resume(r)?;
            t.cfg.steps = cfg.train.steps.max(t.step);
            t
        }
        (None, Some(i)) => {
            let src = Trainer::resume(i).map(|t| (t.model, t.corpus)).or_else(|_| -> CliResult<_> {
                let m = load_model(i)?;
                let stats = stats_for(i, None)?;
                Ok((m, Corpus::with_stats(cfg.synth.clone(), cfg.seed, stats)))
            })?;
            let mut model = Model::new(cfg.model_config())?;
            let copied = model.store.load_matching(&src.0.store);
            writeln!(out, "initialized {copied} parameters from {}", i.display())?;
            let corpus = Corpus::with_stats(cfg.synth.clone(), cfg.seed, src.1.stats);
            Trainer::with_corpus(cfg.train_config(), model, corpus)?
        }
        (None, None) => Trainer::new(cfg.train_config(), Model::new(cfg.model_config())?)?,
    };
    let t0 = Instant::now();
    let every = (trainer.cfg.steps / 20).max(1);
    trainer.run(|r| {
        if r.step % every == 0 || r.step + 1 == cfg.train.steps {
            let _ = writeln!(out, "step {:>6}  rate {:.5}  dist {:.5}  lambda {:.2}  lr {:.2e}  loss {:.5}  K {}", r.step, r.rate, r.distortion, r.lambda, r.lr, r.total, r.budget);
        }
    })?;
    trainer.save(stem)?;
    if let Some(p) = log {
        trainer.write_csv(p)?;
    }
    writeln!(out, "saved {} after {} steps in {:.1}s", stem.display(), trainer.step, t0.elapsed().as_secs_f64())?;
    Ok(())
}

// ---------------------------------------------------------------- coding

fn standardize_all(seq: &Sequence, stats: &BandStats) -> CliResult<Vec<terracodec::dataio::StdCube>> {
    Ok(seq.frames.iter().map(|f| terracodec::dataio::standardize(f, stats)).collect::<terracodec::Result<_>>()?)
}

fn check_family_options(model: &Model, cfg: &RunConfig) -> CliResult<()> {
    if cfg.budget.is_some() && model.family() != Family::Flex {
        return Err(CliError::Usage(format!("--budget needs a FLEX checkpoint, got {}", model.family())));
    }
    Ok(())
}

fn cmd_encode(cfg: &RunConfig, input: &Path, stem: &Path, path: &Path, stats: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(stem)?;
    check_family_options(&model, cfg)?;
    let stats = stats_for(stem, stats)?;
    let seq = load_cube(input)?;
    let (h, w, c) = seq.dims();
    let enc = model.encode_sequence(&standardize_all(&seq, &stats)?, &cfg.coding_options())?;
    std::fs::write(path, pack_container(&enc.container)?)?;
    let bits = enc.container.payload_bits() as f64;
    let rate = terracodec::metrics::bppbf(bits, h, w, c, seq.len())?;
    writeln!(out, "{} frames, {} payload bits, {rate:.5} bppbf", seq.len(), bits)?;
    for (i, s) in enc.container.segments.iter().enumerate() {
        writeln!(out, "frame {i}: {} bits (estimated {:.1})", s.len() * 8, enc.est_bits[i])?;
    }
    Ok(())
}

fn cmd_decode(input: &Path, stem: &Path, path: &Path, stats: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(stem)?;
    let stats = stats_for(stem, stats)?;
    let container = unpack_container(&std::fs::read(input)?)?;
    let (_, recon) = model.decode_sequence(&container)?;
    let frames: Vec<ImageCube> = recon.iter().map(|r| destandardize(r, &stats)).collect::<terracodec::Result<_>>()?;
    let n = frames.len();
    save_cube(path, &Sequence::new(frames, (0..n as i64).collect())?)?;
    writeln!(out, "decoded {n} frames to {}", path.display())?;
    Ok(())
}

fn model_name(stem: &Path) -> String {
    stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Frame metrics of every corpus sequence under `opts`, with bits checked
/// against the estimate.
fn corpus_metrics(model: &Model, files: &[PathBuf], stats: &BandStats, opts: &CodingOptions) -> CliResult<(Vec<FrameMetrics>, (usize, usize, usize))> {
    let mut all = Vec::new();
    let mut dims = None;
    for p in files {
        let seq = load_cube(p)?;
        if *dims.get_or_insert(seq.dims()) != seq.dims() {
            return Err(CliError::Data(terracodec::Error::Invalid(format!("{} differs in shape from the first sequence", p.display()))));
        }
        for f in evaluate_frames(model, &seq.frames, stats, opts)? {
            if f.bits > 1.01 * f.est_bits + 64.0 {
                return Err(CliError::Invariant(format!("{} frame {}: {} bits against {:.1} estimated", p.display(), f.frame, f.bits, f.est_bits)));
            }
            all.push(f);
        }
    }
    Ok((all, dims.expect("non-empty corpus")))
}

fn records(name: &str, setting: &str, dims: (usize, usize, usize), frames: &[FrameMetrics]) -> CliResult<Vec<RDRecord>> {
    let mut out = Vec::new();
    for class in [FrameClass::All, FrameClass::PFrames] {
        out.extend(RDRecord::aggregate(name, setting, class, dims, frames)?);
    }
    Ok(out)
}

fn setting_name(model: &Model, opts: &CodingOptions) -> String {
    match (model.family(), opts.budget) {
        (Family::Flex, Some(k)) => format!("K={k}"),
        (Family::Tt | Family::Flex, _) => format!("c={}", opts.context),
        _ => format!("lambda={}", model.cfg.lambda_preset),
    }
}

fn cmd_eval(cfg: &RunConfig, corpus: &Path, stem: &Path, path: Option<&Path>, stats: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(stem)?;
    check_family_options(&model, cfg)?;
    let stats = stats_for(stem, stats)?;
    let files = corpus_files(corpus)?;
    let opts = cfg.coding_options();
    let (frames, dims) = corpus_metrics(&model, &files, &stats, &opts)?;
    let mut text = String::new();
    for r in records(&model_name(stem), &setting_name(&model, &opts), dims, &frames)? {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    match path {
        Some(p) => std::fs::write(p, &text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_curve(cfg: &RunConfig, corpus: &Path, stems: &[PathBuf], path: &Path, stats: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let files = corpus_files(corpus)?;
    let mut rows = Vec::new();
    for stem in stems {
        let model = load_model(stem)?;
        let stats = stats_for(stem, stats)?;
        let settings: Vec<CodingOptions> = if model.family() == Family::Flex {
            cfg.budgets.iter().map(|&k| CodingOptions { budget: Some(k), ..cfg.coding_options() }).collect()
        } else {
            vec![CodingOptions { budget: None, ..cfg.coding_options() }]
        };
        for opts in settings {
            let (frames, dims) = corpus_metrics(&model, &files, &stats, &opts)?;
            rows.extend(records(&model_name(stem), &setting_name(&model, &opts), dims, &frames)?);
        }
    }
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    writeln!(out, "wrote {} rows to {}", rows.len(), path.display())?;
    Ok(())
}

// ---------------------------------------------------------------- inpainting

struct InpaintArgs<'a> {
    input: &'a Path,
    masks: &'a Path,
    checkpoint: &'a Path,
    target: usize,
    out: &'a Path,
    report: Option<&'a Path>,
    truth: Option<&'a Path>,
    stats: Option<&'a Path>,
}

#[derive(Debug, Serialize)]
struct InpaintReport {
    target: usize,
    context: (usize, usize),
    policy: Policy,
    tau: f64,
    cloud_fraction: f64,
    predicted_tokens: usize,
    total_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "opt_f64")]
    masked_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "opt_f64")]
    copy_least_cloudy_psnr: Option<f64>,
}

fn opt_f64<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => terracodec::metrics::ser_f64(x, s),
        None => s.serialize_none(),
    }
}

fn cmd_inpaint(cfg: &RunConfig, a: InpaintArgs<'_>, out: &mut dyn Write) -> CliResult<()> {
    let model = load_model(a.checkpoint)?;
    let stats = stats_for(a.checkpoint, a.stats)?;
    let seq = load_cube(a.input)?;
    let masks: Vec<SoftMask> = load_cube(a.masks)?.frames.iter().map(SoftMask::from_cube).collect::<terracodec::Result<_>>()?;
    if a.target >= seq.len() {
        return Err(CliError::Usage(format!("--target {} outside {} frames", a.target, seq.len())));
    }
    let r = inpaint_cube(&model, &seq.frames, &masks, &stats, a.target, cfg.tau, cfg.policy)?;
    save_cube(a.out, &Sequence::new(vec![r.recon.clone()], vec![seq.timestamps[a.target]])?)?;
    let region = masks[a.target].binarize(cfg.tau);
    let (mut mp, mut cp) = (None, None);
    if let Some(t) = a.truth {
        let truth = load_cube(t)?;
        let reference = truth.frames.get(a.target).ok_or_else(|| CliError::Usage("truth has fewer frames than the input".into()))?;
        if region.iter().any(|&c| c) {
            mp = Some(masked_psnr(reference, &r.recon, &region, cfg.psnr_mode)?);
            cp = Some(masked_psnr(reference, &copy_least_cloudy(&seq.frames, &masks, a.target)?, &region, cfg.psnr_mode)?);
        }
    }
    let report = InpaintReport {
        target: a.target,
        context: r.context,
        policy: cfg.policy,
        tau: cfg.tau,
        cloud_fraction: masks[a.target].fraction(),
        predicted_tokens: r.predicted_tokens,
        total_tokens: r.total_tokens,
        masked_psnr: mp,
        copy_least_cloudy_psnr: cp,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match a.report {
        Some(p) => std::fs::write(p, &json)?,
        None => writeln!(out, "{json}")?,
    }
    Ok(())
}
