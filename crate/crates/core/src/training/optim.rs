use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::Real;

use super::config::TrainConfig;

/// Linear warmup from the floor to the peak over the warmup steps, then
/// cosine decay back to the floor at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (floor, peak) = (cfg.floor_lr, cfg.peak_lr);
    let warm = cfg.warmup_steps().min(cfg.steps);
    if step <= warm {
        return floor + (peak - floor) * step as f64 / warm as f64;
    }
    if step >= cfg.steps {
        return floor;
    }
    let progress = (step - warm) as f64 / (cfg.steps - warm) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (PI * progress).cos())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_gradients<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> Result<f64> {
    let sq: f64 =
        store.iter().filter_map(|p| p.value.grad()).flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64())).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite { op: "gradient norm" });
    }
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.value.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

/// Moment estimates, one buffer per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|p| vec![F::zero(); p.value.len()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update with bias correction; decay is decoupled and only
/// touches weight matrices.
pub fn adamw_step<F: Real>(store: &mut ParamStore<F>, state: &mut AdamState<F>, lr: f64, hp: &AdamHyper) -> Result<()> {
    if store.iter().any(|p| p.value.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
        return Err(Error::NonFinite { op: "adamw gradient" });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let decay = if p.kind.decays() { hp.weight_decay } else { 0.0 };
        let grad: Vec<f64> = match p.value.grad() {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.value.len()],
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            let mj = hp.beta1 * m[j].as_f64() + (1.0 - hp.beta1) * g;
            let vj = hp.beta2 * v[j].as_f64() + (1.0 - hp.beta2) * g * g;
            m[j] = F::lit(mj);
            v[j] = F::lit(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + hp.eps) + decay * w.as_f64();
            *w = F::lit(w.as_f64() - lr * update);
        }
    }
    Ok(())
}
