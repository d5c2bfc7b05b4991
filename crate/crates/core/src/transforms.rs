//! Analysis/synthesis transforms and the hyperprior pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::StdCube;
use crate::error::{shape_err, Error, Result};
use crate::grad::layers::{Layer, LayerSpec};
use crate::grad::params::ParamStore;
use crate::grad::tape::{Tape, Var};
use crate::grad::{Array, Float};

/// Spatial downsampling of every backbone.
pub const DOWNSAMPLE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Fp,
    Elic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub backbone: Backbone,
    /// Backbone width.
    pub n: usize,
    /// Latent channels (d_lat).
    pub m: usize,
    /// Input bands.
    pub c: usize,
}

impl CodecConfig {
    pub fn desk(backbone: Backbone, c: usize) -> Self {
        Self { backbone, n: 32, m: 32, c }
    }

    pub fn full(backbone: Backbone, c: usize) -> Self {
        match backbone {
            Backbone::Fp => Self { backbone, n: 128, m: 128, c },
            Backbone::Elic => Self { backbone, n: 192, m: 192, c },
        }
    }

    pub fn hyper_channels(&self) -> usize {
        (self.m / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.c == 0 {
            return Err(Error::Invalid(format!("codec widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn residual_block(n: usize) -> LayerSpec {
    let h = (n / 2).max(1);
    LayerSpec::ResidualAdd(vec![
        LayerSpec::conv(n, h, 1, 1),
        LayerSpec::Gelu,
        LayerSpec::conv(h, h, 3, 1),
        LayerSpec::Gelu,
        LayerSpec::conv(h, n, 1, 1),
    ])
}

pub fn analysis_specs(cfg: &CodecConfig) -> Vec<LayerSpec> {
    let (n, m, c) = (cfg.n, cfg.m, cfg.c);
    match cfg.backbone {
        Backbone::Fp => vec![
            LayerSpec::conv(c, n, 5, 2),
            LayerSpec::Gdn { channels: n },
            LayerSpec::conv(n, n, 5, 2),
            LayerSpec::Gdn { channels: n },
            LayerSpec::conv(n, n, 5, 2),
            LayerSpec::Gdn { channels: n },
            LayerSpec::conv(n, m, 5, 2),
        ],
        Backbone::Elic => vec![
            LayerSpec::conv(c, n, 5, 2),
            residual_block(n),
            LayerSpec::conv(n, n, 5, 2),
            residual_block(n),
            LayerSpec::conv(n, n, 5, 2),
            residual_block(n),
            LayerSpec::conv(n, m, 5, 2),
        ],
    }
}

pub fn synthesis_specs(cfg: &CodecConfig) -> Vec<LayerSpec> {
    let (n, m, c) = (cfg.n, cfg.m, cfg.c);
    match cfg.backbone {
        Backbone::Fp => vec![
            LayerSpec::deconv(m, n, 5, 2),
            LayerSpec::Igdn { channels: n },
            LayerSpec::deconv(n, n, 5, 2),
            LayerSpec::Igdn { channels: n },
            LayerSpec::deconv(n, n, 5, 2),
            LayerSpec::Igdn { channels: n },
            LayerSpec::deconv(n, c, 5, 2),
        ],
        Backbone::Elic => vec![
            LayerSpec::deconv(m, n, 5, 2),
            residual_block(n),
            LayerSpec::deconv(n, n, 5, 2),
            residual_block(n),
            LayerSpec::deconv(n, n, 5, 2),
            residual_block(n),
            LayerSpec::deconv(n, c, 5, 2),
        ],
    }
}

/// Analysis and synthesis networks.
#[derive(Clone, Debug)]
pub struct Transforms {
    pub cfg: CodecConfig,
    analysis: Vec<Layer>,
    synthesis: Vec<Layer>,
}

fn build<T: Float>(specs: Vec<LayerSpec>, store: &mut ParamStore<T>, name: &str, rng: &mut impl Rng) -> Vec<Layer> {
    specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| Layer::new(s, store, &format!("{name}.{i}"), rng))
        .collect()
}

fn run<T: Float>(layers: &[Layer], tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    layers.iter().try_fold(x, |h, l| l.forward(tape, store, h))
}

impl Transforms {
    pub fn new<T: Float>(cfg: CodecConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let analysis = build(analysis_specs(&cfg), store, "g_a", rng);
        let synthesis = build(synthesis_specs(&cfg), store, "g_s", rng);
        Ok(Self { cfg, analysis, synthesis })
    }

    /// x [N, C, H, W] → y [N, M, H/16, W/16].
    pub fn analysis<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.c {
            return Err(shape_err("channel", format!("analysis expects {} bands, got {s:?}", self.cfg.c)));
        }
        for (axis, ext) in [("height", s[2]), ("width", s[3])] {
            if ext == 0 || ext % DOWNSAMPLE != 0 {
                return Err(shape_err(axis, format!("{ext} is not divisible by {DOWNSAMPLE}")));
            }
        }
        run(&self.analysis, tape, store, x)
    }

    /// y [N, M, h, w] → x̂ [N, C, 16h, 16w].
    pub fn synthesis<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        let s = tape.shape(y);
        if s.len() != 4 || s[1] != self.cfg.m {
            return Err(shape_err("channel", format!("synthesis expects {} latent channels, got {s:?}", self.cfg.m)));
        }
        run(&self.synthesis, tape, store, y)
    }
}

/// Hyper analysis (two stride-2 convs) and hyper synthesis (two transposed convs).
#[derive(Clone, Debug)]
pub struct Hyperprior {
    pub channels: usize,
    h_a: Vec<Layer>,
    h_s: Vec<Layer>,
}

impl Hyperprior {
    pub fn new<T: Float>(cfg: &CodecConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if cfg.backbone == Backbone::Fp {
            return Err(Error::NoHyperprior("FP".into()));
        }
        let (m, nh) = (cfg.m, cfg.hyper_channels());
        let h_a = build(
            vec![LayerSpec::conv(m, nh, 3, 2), LayerSpec::Gelu, LayerSpec::conv(nh, nh, 3, 2)],
            store,
            "h_a",
            rng,
        );
        let h_s = build(
            vec![LayerSpec::deconv(nh, nh, 3, 2), LayerSpec::Gelu, LayerSpec::deconv(nh, m, 3, 2)],
            store,
            "h_s",
            rng,
        );
        Ok(Self { channels: nh, h_a, h_s })
    }

    /// y [N, M, h, w] → z [N, M/2, h/4, w/4].
    pub fn analysis<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, y: Var) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        for (axis, ext) in [("height", s[2]), ("width", s[3])] {
            if ext % 4 != 0 {
                return Err(shape_err(axis, format!("latent extent {ext} not divisible by 4")));
            }
        }
        run(&self.h_a, tape, store, y)
    }

    /// ẑ → per-position features [N, M, h, w].
    pub fn synthesis<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        run(&self.h_s, tape, store, z)
    }
}

pub fn cube_to_array(c: &StdCube) -> Array<f32> {
    Array::new(&[1, c.c, c.h, c.w], c.data.clone()).unwrap()
}

/// Stacks cubes into a batch [N, C, H, W].
pub fn batch_array(cubes: &[&StdCube]) -> Result<Array<f32>> {
    let f = cubes.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mut data = Vec::with_capacity(cubes.len() * f.data.len());
    for c in cubes {
        if (c.c, c.h, c.w) != (f.c, f.h, f.w) {
            return Err(shape_err("batch", "cubes differ in shape"));
        }
        data.extend_from_slice(&c.data);
    }
    Array::new(&[cubes.len(), f.c, f.h, f.w], data)
}

pub fn array_to_cube(a: &Array<f32>) -> Result<StdCube> {
    let s = a.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(shape_err("batch", format!("expected a single image, got {s:?}")));
    }
    Ok(StdCube { c: s[1], h: s[2], w: s[3], data: a.data().to_vec() })
}
