use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

/// Adamax moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl AdamaxState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self::with_betas(store, lr, 0.9, 0.999)
    }

    pub fn with_betas(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamaxState {
            beta1,
            beta2,
            lr,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            u: zeros(),
        }
    }
}

/// One Adamax update of every trainable parameter. Nothing is modified if
/// any gradient is non-finite.
///
/// The step is `lr_t / (1 - β1^t) · m / u`, taken as zero where `u = 0`
/// (which forces `m = 0`).
pub fn adamax_step(
    state: &mut AdamaxState,
    store: &mut ParamStore,
    grads: &Gradients,
    lr_t: f64,
    batch: u64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        if let Some(i) = grads.get(id).iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}[{i}]", p.name),
                context: format!("batch {batch}"),
            });
        }
    }
    state.t += 1;
    let step = lr_t / (1.0 - state.beta1.powi(state.t as i32));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let (m, u) = (&mut state.m[id.index()], &mut state.u[id.index()]);
        let g = grads.get(id);
        let theta = store.value_mut(id).data_mut();
        for k in 0..theta.len() {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            u[k] = (state.beta2 * u[k]).max(g[k].abs());
            if u[k] > 0.0 {
                theta[k] -= step * m[k] / u[k];
            }
        }
    }
    Ok(())
}

/// `base · decay^epoch`, rounded to 15 significant digits so decimal
/// inputs give decimal outputs (0.002 · 0.9 is 0.0018, not
/// 0.0018000000000000002).
pub fn lr_schedule(base: f64, decay: f64, epoch: usize) -> f64 {
    let raw = base * decay.powi(epoch as i32);
    format!("{raw:.14e}").parse().unwrap_or(raw)
}
