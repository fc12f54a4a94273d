//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_per_param: None,
            seed: 0,
        }
    }
}

/// Maximum over checked elements of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    grad_check_with(
        store,
        params,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
        f,
    )
}

pub fn grad_check_with<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    opts: GradCheckOptions,
    f: F,
) -> Result<f64>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "eps must be in (0, 1e-2], got {}",
            opts.eps
        )));
    }
    let saved: Vec<bool> = params.iter().map(|&id| store.get(id).requires_grad).collect();
    for &id in params {
        store.set_requires_grad(id, true);
    }
    let tape = Tape::new();
    let root = f(&tape, store)?;
    let grads = tape.gradients(root)?;
    drop(tape);

    let eval = |store: &ParamStore, id: ParamId, index: usize| -> Result<f64> {
        let tape = Tape::no_grad();
        let v = f(&tape, store)?;
        let value = tape.item(v);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                param: store.get(id).name.clone(),
                index,
                value,
            });
        }
        Ok(value)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut result = Ok(());
    'outer: for &id in params {
        let n = store.value(id).len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(store, id, i);
            store.value_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(store, id, i);
            store.value_mut(id).data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    result = Err(e);
                    break 'outer;
                }
            };
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    for (&id, flag) in params.iter().zip(saved) {
        store.set_requires_grad(id, flag);
    }
    result.map(|_| worst)
}
