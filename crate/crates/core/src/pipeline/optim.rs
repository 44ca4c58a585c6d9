use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, WeightStore};
use crate::tensor::{for_each_box_run, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Lamb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    /// Updates applied to each element so far; bias correction is per element
    /// because subnet steps touch different boxes of one tensor.
    t: Vec<u32>,
}

/// Adaptive-moment optimizer with decoupled weight decay, optionally with the
/// LAMB per-tensor trust ratio. Only the box each gradient covers is updated.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub cfg: OptimConfig,
    state: BTreeMap<String, Moments<T>>,
}

/// LAMB scale `‖w‖ / ‖u‖`, or 1 when either norm is zero.
pub fn trust_ratio(w_norm: f64, u_norm: f64) -> f64 {
    if w_norm > 0.0 && u_norm > 0.0 {
        w_norm / u_norm
    } else {
        1.0
    }
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer { cfg, state: BTreeMap::new() }
    }

    /// One update at learning rate `lr`. Every gradient is checked before any
    /// parameter moves.
    pub fn step(&mut self, store: &mut WeightStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.grad.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}` at element {i}")));
            }
            let p = store.tensor(name)?;
            if p.numel() != g.grad.len() {
                return Err(Error::shape("optimizer_step", format!("`{name}` gradient has {} elements, parameter {}", g.grad.len(), p.numel())));
            }
        }
        let OptimConfig { kind, weight_decay, beta1, beta2, eps } = self.cfg.clone();
        for (name, g) in grads {
            let p = store.get_mut(name).expect("checked above");
            let shape = p.shape().to_vec();
            let decay = if shape.len() >= 2 { weight_decay } else { 0.0 };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); g.grad.len()],
                v: vec![T::zero(); g.grad.len()],
                t: vec![0; g.grad.len()],
            });
            let w = p.data_mut();
            let mut update = Vec::new();
            let mut offsets = Vec::new();
            for_each_box_run(&shape, &g.extents, |off, _, len| {
                for i in off..off + len {
                    let gi = g.grad[i].to_f64_lossy();
                    let m = beta1 * st.m[i].to_f64_lossy() + (1.0 - beta1) * gi;
                    let v = beta2 * st.v[i].to_f64_lossy() + (1.0 - beta2) * gi * gi;
                    st.m[i] = T::lit(m);
                    st.v[i] = T::lit(v);
                    st.t[i] += 1;
                    let t = st.t[i] as i32;
                    let mh = m / (1.0 - beta1.powi(t));
                    let vh = v / (1.0 - beta2.powi(t));
                    update.push(mh / (vh.sqrt() + eps) + decay * w[i].to_f64_lossy());
                    offsets.push(i);
                }
            });
            let scale = match kind {
                OptimizerKind::Adam => lr,
                OptimizerKind::Lamb => {
                    let wn = offsets.iter().map(|&i| w[i].to_f64_lossy().powi(2)).sum::<f64>().sqrt();
                    let un = update.iter().map(|u| u * u).sum::<f64>().sqrt();
                    lr * trust_ratio(wn, un)
                }
            };
            for (&i, u) in offsets.iter().zip(&update) {
                w[i] -= T::lit(scale * u);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup` iterations, then cosine
/// decay reaching 0 at `horizon`.
pub fn lr_schedule(iter: usize, warmup: usize, horizon: usize, base_lr: f64) -> f64 {
    if iter < warmup {
        return base_lr * iter as f64 / warmup as f64;
    }
    if iter >= horizon {
        return 0.0;
    }
    let progress = (iter - warmup) as f64 / (horizon - warmup) as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
