use super::{NumericsError, ParamStore, Tape, Tensor, Var};

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `eps`, returning the worst coordinate's relative error.
///
/// `f` receives a fresh tape and the leaf holding `x`; it must return a
/// scalar node.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let eval = |data: &[f64]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let leaf = tape.variable(x.shape().to_vec(), data.to_vec())?;
        let out = f(&mut tape, leaf)?;
        Ok(tape.scalar(out))
    };
    let mut tape = Tape::new();
    let leaf = tape.variable(x.shape().to_vec(), x.data().to_vec())?;
    let out = f(&mut tape, leaf)?;
    let analytic = if tape.needs_grad(out) {
        tape.backward(out)?.get_or_zeros(leaf, x.numel())
    } else {
        vec![0.0; x.numel()]
    };
    grad_check_fn(eval, x.data(),
        &analytic,
        eps,
    )
}

/// Finite-difference check for an arbitrary scalar function whose
/// analytic gradient at `x` is supplied by the caller.
pub fn grad_check_fn<F>(f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&[f64]) -> Result<f64, NumericsError>,
{
    if analytic.len() != x.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check",
            lhs: vec![x.len()],
            rhs: vec![analytic.len()],
        });
    }
    let v0 = f(x)?;
    if !v0.is_finite() {
        return Err(NumericsError::NonFinite(v0));
    }
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe)?;
        probe[i] = x[i] - eps;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite(if up.is_finite() { down } else { up }));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Finite-difference check of selected parameter coordinates
/// `(name, flat index)`. `f` evaluates the scalar objective on a store;
/// `analytic[i]` is the claimed derivative for `coords[i]`. Returns the
/// worst relative error.
pub fn grad_check_params<F, E>(
    store: &ParamStore,
    coords: &[(String, usize)],
    analytic: &[f64],
    eps: f64,
    f: F,
) -> Result<f64, E>
where
    F: Fn(&ParamStore) -> Result<f64, E>,
    E: From<NumericsError>,
{
    if analytic.len() != coords.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check_params",
            lhs: vec![coords.len()],
            rhs: vec![analytic.len()],
        }
        .into());
    }
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for ((name, i), &a) in coords.iter().zip(analytic) {
        let x0 = store.get(name)?.data()[*i];
        probe.get_mut(name)?.data_mut()[*i] = x0 + eps;
        let up = f(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = x0 - eps;
        let down = f(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = x0;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite(if up.is_finite() { down } else { up }).into());
        }
        worst = worst.max(relative_error(a, (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

/// `n` distinct `(name, flat index)` coordinates drawn uniformly over all
/// entries of the parameters accepted by `keep`.
pub fn sample_coords(store: &ParamStore, n: usize, seed: u64, keep: impl Fn(&str) -> bool) -> Vec<(String, usize)> {
    use rand::SeedableRng;
    let all: Vec<(&str, usize)> = store
        .iter()
        .filter(|(name, _)| keep(name))
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name, i)))
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, all.len(), n.min(all.len()))
        .into_iter()
        .map(|k| (all[k].0.to_string(), all[k].1))
        .collect()
}
