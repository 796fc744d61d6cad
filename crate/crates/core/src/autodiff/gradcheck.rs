use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Clone)]
pub struct GroupError {
    pub name: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GroupError {
    /// Coordinates where `|a - n| > atol + rtol · max(|a|, |n|)`.
    pub fn violations(&self, rtol: f64, atol: f64) -> usize {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .filter(|(a, n)| !((*a - *n).abs() <= atol + rtol * a.abs().max(n.abs())))
            .count()
    }

    /// Largest `|a - n|` over the group.
    pub fn max_abs_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
    }
}

impl std::fmt::Debug for GroupError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroupError")
            .field("name", &self.name)
            .field("max_relative_error", &self.max_relative_error)
            .field("max_abs_error", &self.max_abs_error())
            .field("coordinates", &self.coordinates)
            .finish()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn failing(&self, threshold: f64) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| !(g.max_relative_error < threshold))
            .collect()
    }

    /// Groups with a coordinate outside `atol + rtol · max(|a|, |n|)`.
    pub fn failing_with_tolerance(&self, rtol: f64, atol: f64) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| g.violations(rtol, atol) > 0)
            .collect()
    }
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    tape.value(loss).item()
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε`, coordinate by coordinate, for
/// each parameter in `params`.
///
/// `f` must be deterministic; two evaluations at the same point that
/// differ are reported as a contract violation. The store is restored to
/// its original values before returning.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        let base = tape.value(loss).item()?;
        tape.backward(loss)?;
        let again = evaluate(store, &f)?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::Contract(format!(
                "function is not deterministic: {base} vs {again}"
            )));
        }
        params
            .iter()
            .map(|&id| {
                tape.param_grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.value(id).len()])
            })
            .collect()
    };

    let mut groups = Vec::with_capacity(params.len());
    for (&id, grad) in params.iter().zip(&analytic) {
        let mut worst: f64 = 0.0;
        let mut numerics = Vec::with_capacity(grad.len());
        for c in 0..grad.len() {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + eps;
            let plus = evaluate(store, &f);
            store.value_mut(id).data_mut()[c] = orig - eps;
            let minus = evaluate(store, &f);
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(grad[c], numeric));
            numerics.push(numeric);
        }
        groups.push(GroupError {
            name: store.get(id).name.clone(),
            max_relative_error: worst,
            coordinates: grad.len(),
            analytic: grad.clone(),
            numeric: numerics,
        });
    }
    let max_relative_error = groups
        .iter()
        .map(|g| g.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_relative_error,
    })
}
