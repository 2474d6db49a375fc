use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients with central finite differences.
///
/// `build` receives a fresh tape and one input var per point and must return
/// a scalar. The result is `max |analytic - numeric| / max(1, |analytic|)`
/// over every input coordinate.
pub fn grad_check<F>(points: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    check_step(h)?;
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.input(p.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.input(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let back = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; points[pi].len()];
        let analytic = back.wrt(*var).map_or(zeros.as_slice(), |g| g).to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            worst = worst.max(relative_error(a, plus, minus, h)?);
        }
    }
    Ok(worst)
}

/// Which parameter coordinates [`grad_check_params`] perturbs.
#[derive(Debug, Clone, Copy)]
pub struct ParamCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Perturb at most this many coordinates per parameter tensor, sampled
    /// with `seed`. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for ParamCheckOptions {
    fn default() -> Self {
        ParamCheckOptions {
            h: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Finite-difference check of a loss over the trainable parameters of a
/// store. Frozen parameters are skipped.
pub fn grad_check_params<F>(store: &ParamStore, opts: ParamCheckOptions, build: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    check_step(opts.h)?;
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = build(&mut tape)?;
        let back = tape.backward(loss)?;
        tape.param_grads(&back)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let out = build(&mut tape)?;
        Ok(tape.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let orig = work.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + opts.h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - opts.h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            worst = worst.max(relative_error(a, plus, minus, opts.h)?);
        }
    }
    Ok(worst)
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Precondition(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    Ok(())
}

fn relative_error(analytic: f64, plus: f64, minus: f64, h: f64) -> Result<f64> {
    let numeric = (plus - minus) / (2.0 * h);
    if !numeric.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((analytic - numeric).abs() / analytic.abs().max(1.0))
}
