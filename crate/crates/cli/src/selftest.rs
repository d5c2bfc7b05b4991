//! Fast invariant checks run by `tec selftest`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use terracodec::codec::{Model, ModelConfig, PastLatents};
use terracodec::coder::{cdf_from_gaussian, range_decode, range_encode, CdfTable, Family, FillMode};
use terracodec::entropy::quantize;
use terracodec::flexrate::repack;
use terracodec::grad::{check_gradients, Array, LayerSpec, ParamStore, Sequential};
use terracodec::metrics::bppbf;

use crate::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, r: Result<String, String>) -> Check {
    match r {
        Ok(detail) => Check { name: name.into(), passed: true, detail },
        Err(detail) => Check { name: name.into(), passed: false, detail },
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Rounding must send halves away from zero; a quantizer that truncates or
/// rounds half to even fails here.
pub fn tie_rule(q: impl Fn(f64) -> i32) -> Result<String, String> {
    let cases = [(0.5, 1), (-0.5, -1), (1.5, 2), (2.5, 3), (-2.5, -3), (0.49, 0), (-0.51, -1)];
    for (v, want) in cases {
        let got = q(v);
        if got != want {
            return Err(format!("quantize({v}) = {got}, expected {want}"));
        }
    }
    Ok(format!("{} cases", cases.len()))
}

fn coder_round_trip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 20_000;
    let tables: Vec<CdfTable> = (0..64)
        .map(|_| cdf_from_gaussian(rng.gen_range(-4.0..4.0), rng.gen_range(0.11..30.0)))
        .collect::<terracodec::Result<_>>()
        .map_err(err)?;
    let pick: Vec<&CdfTable> = (0..n).map(|_| &tables[rng.gen_range(0..tables.len())]).collect();
    let symbols: Vec<i32> = pick
        .iter()
        .map(|t| {
            let (lo, hi) = t.range();
            rng.gen_range(lo - 2..=hi + 2)
        })
        .collect();
    let bytes = range_encode(&symbols, &pick).map_err(err)?;
    let back = range_decode(&bytes, &pick).map_err(err)?;
    if back != symbols {
        return Err("decoded symbols differ".into());
    }
    let ideal: f64 = symbols.iter().zip(&pick).map(|(&s, t)| t.bits(s)).sum();
    let actual = bytes.len() as f64 * 8.0;
    if actual > 1.01 * ideal + 64.0 {
        return Err(format!("{actual} bits against {ideal:.1} ideal"));
    }
    Ok(format!("{n} symbols, {actual} bits, {ideal:.1} ideal"))
}

fn repack_identity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for positions in [1, 4, 16] {
        for (d, t) in [(16, 16), (32, 16), (12, 4)] {
            let block: Vec<u32> = (0..positions * d).map(|_| rng.gen()).collect();
            let r = repack(&block, positions, d, t).map_err(err)?;
            if r.unpack() != block {
                return Err(format!("unpack differs at {positions} positions, d {d}, T {t}"));
            }
        }
    }
    Ok("9 shapes".into())
}

fn gradient_spot_check() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let specs = [
        LayerSpec::conv(2, 3, 3, 1),
        LayerSpec::Gdn { channels: 3 },
        LayerSpec::conv(3, 2, 3, 2),
        LayerSpec::Gelu,
    ];
    let net = Sequential::new(&specs, &mut store, "spot", &mut rng);
    let x = Array::new(&[1, 2, 6, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(err)?;
    let report = check_gradients(&net, &store, &x, 1e-5).map_err(err)?;
    if report.max() >= 1e-4 {
        return Err(format!("relative error {:.2e}", report.max()));
    }
    Ok(format!("max relative error {:.2e}", report.max()))
}

fn bppbf_arithmetic() -> Result<String, String> {
    let (h, w, c, t) = (64, 48, 12, 3);
    let one = bppbf((h * w * c * t) as f64, h, w, c, t).map_err(err)?;
    let half = bppbf((h * w * c * t / 2) as f64, h, w, c, t).map_err(err)?;
    if one != 1.0 || half != 0.5 {
        return Err(format!("got {one} and {half}"));
    }
    Ok("exact".into())
}

fn latent_round_trips() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for family in [Family::Fp, Family::Elic, Family::Tt, Family::Flex] {
        let model = Model::new(ModelConfig::small(family, 4)).map_err(err)?;
        let m = model.d_lat();
        let mut latent = |spread: i32| Array::new(&[1, m, 4, 4], (0..m * 16).map(|_| rng.gen_range(-spread..=spread) as f32).collect());
        let (y, a, b) = (latent(6).map_err(err)?, latent(3).map_err(err)?, latent(3).map_err(err)?);
        let past = PastLatents::Two(&a, &b);
        let code = model.encode_latent(&y, past, None, FillMode::Mean).map_err(err)?;
        let back = model.decode_latent(&code.bytes, 4, 4, past, None, FillMode::Mean).map_err(err)?;
        if back != y {
            return Err(format!("{family} latent differs after decoding"));
        }
    }
    Ok("fp, elic, tt, flex".into())
}

fn checkpoint_hash(stem: &Path) -> Result<String, String> {
    Model::load(stem).map(|m| format!("{} model verified", m.family())).map_err(err)
}

/// Runs every check, printing one line each.
pub fn run(checkpoint: Option<&Path>, out: &mut dyn Write) -> CliResult<Vec<Check>> {
    let mut checks = vec![
        check("coder-round-trip", coder_round_trip()),
        check("repack-identity", repack_identity()),
        check("gradient-spot-check", gradient_spot_check()),
        check("bppbf-arithmetic", bppbf_arithmetic()),
        check("latent-round-trips", latent_round_trips()),
        check("quantizer-tie-rule", tie_rule(quantize)),
    ];
    if let Some(stem) = checkpoint {
        checks.push(check("checkpoint-hash", checkpoint_hash(stem)));
    }
    for c in &checks {
        writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail).map_err(|e| CliError::Data(e.into()))?;
    }
    Ok(checks)
}
