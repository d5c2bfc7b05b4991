//! Finite-difference verification of the tape's backward rules.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::layers::Sequential;
use super::params::ParamStore;
use super::tape::{ParamId, Tape, Var};
use crate::error::Result;

/// Entries checked per tensor; larger tensors are sampled at even spacing.
const MAX_ENTRIES: usize = 96;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

/// Max relative error per layer kind.
#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub per_kind: BTreeMap<String, f64>,
}

impl GradReport {
    pub fn max(&self) -> f64 {
        self.per_kind.values().copied().fold(0.0, f64::max)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn sample(n: usize) -> Vec<usize> {
    if n <= MAX_ENTRIES {
        (0..n).collect()
    } else {
        (0..MAX_ENTRIES).map(|i| i * (n - 1) / (MAX_ENTRIES - 1)).collect()
    }
}

/// For each layer, checks gradients with respect to its input activation and
/// its parameters against central differences with step `h`.
///
/// The scalar objective is `sum(out * R)` for a fixed random `R`.
pub fn check_gradients(net: &Sequential, store: &ParamStore<f64>, input: &Array<f64>, h: f64) -> Result<GradReport> {
    let mut report = GradReport::default();
    let mut act = input.clone();
    let weights = {
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let y = net.forward(&mut t, store, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let n = t.value(y).len();
        Array::new(t.shape(y), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?
    };
    for (li, layer) in net.layers.iter().enumerate() {
        let tail = &net.layers[li..];
        let objective = |store: &ParamStore<f64>, a: &Array<f64>, track: bool| -> Result<(f64, Tape<f64>, Var, Var)> {
            let mut t = Tape::new();
            let x = if track { t.input(a.clone()) } else { t.constant(a.clone()) };
            let y = tail.iter().try_fold(x, |h, l| l.forward(&mut t, store, h))?;
            let w = t.constant(weights.clone());
            let p = t.mul(y, w)?;
            let s = t.sum(p);
            Ok((t.value(s).item(), t, x, s))
        };
        let (_, tape, xv, loss) = objective(store, &act, true)?;
        let grads = tape.backward(loss)?;
        let mut worst: f64 = 0.0;

        let gx = grads.wrt(xv).cloned().unwrap_or_else(|| Array::zeros(act.shape()));
        for i in sample(act.len()) {
            let mut a = act.clone();
            let base = a.data()[i];
            a.data_mut()[i] = base + h;
            let fp = objective(store, &a, false)?.0;
            a.data_mut()[i] = base - h;
            let fm = objective(store, &a, false)?.0;
            worst = worst.max(rel_err(gx.data()[i], (fp - fm) / (2.0 * h)));
        }

        let ids: Vec<ParamId> = layer.params();
        let mut probe = store.clone();
        for id in ids {
            let shape = store.value(id).shape().to_vec();
            let gp = grads.param(id).cloned().unwrap_or_else(|| Array::zeros(&shape));
            for i in sample(store.value(id).len()) {
                let base = store.value(id).data()[i];
                probe.entry_mut(id).value.data_mut()[i] = base + h;
                let fp = objective(&probe, &act, false)?.0;
                probe.entry_mut(id).value.data_mut()[i] = base - h;
                let fm = objective(&probe, &act, false)?.0;
                probe.entry_mut(id).value.data_mut()[i] = base;
                worst = worst.max(rel_err(gp.data()[i], (fp - fm) / (2.0 * h)));
            }
        }
        let slot = report.per_kind.entry(layer.spec.kind().to_string()).or_insert(0.0);
        *slot = slot.max(worst);

        let mut t = Tape::new();
        let x = t.constant(act.clone());
        let y = layer.forward(&mut t, store, x)?;
        act = t.value(y).clone();
    }
    Ok(report)
}
