//! Central-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences at `at`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<F>(f: F, at: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", at.clone());
    check_params(&store, &[id], eps, None, |tape, store| {
        let x = tape.param(store, id);
        f(tape, x)
    })
}

/// Gradient check over parameters of a store.
///
/// When `max_coords` is set, at most that many coordinates per parameter are
/// probed, chosen by a fixed-seed draw.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], eps: f64, max_coords: Option<usize>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(Error::Contract(format!(
            "finite-difference eps {eps} outside (1e-8, 1e-2)"
        )));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.gradients(loss)?;
    let mut probe_store = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut worst = 0.0f64;
    for &id in ids {
        let pv = tape.param(store, id);
        let n = store.get(id).len();
        let analytic: Vec<f64> = match grads.wrt(pv) {
            Some(g) => g.to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let x0 = store.get(id).data()[i];
            let plus = (x0 as f64 + eps) as f32;
            let minus = (x0 as f64 - eps) as f32;
            probe_store.get_mut(id).data_mut()[i] = plus;
            let fp = eval(&probe_store, &f)?;
            probe_store.get_mut(id).data_mut()[i] = minus;
            let fm = eval(&probe_store, &f)?;
            probe_store.get_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = f(&mut tape, store)?;
    let out = tape.item(v);
    if !out.is_finite() {
        return Err(Error::NonFinite {
            term: "finite-difference probe".into(),
        });
    }
    Ok(out)
}
