use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_tensor, param_layout, ArchSpec, ModelView, WeightStore};
use crate::tensor::{for_each_box_run, Real, Tensor};

const LOGIT_SCALE: &str = "logit_scale";

/// Blend coefficients of parameter inheriting with momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PimConfig {
    /// Weight on the extended old parameters.
    pub beta: f64,
    /// Weight on the fresh random parameters.
    pub gamma: f64,
    pub rand_seed: u64,
}

impl Default for PimConfig {
    fn default() -> Self {
        PimConfig { beta: 0.3, gamma: 0.001, rand_seed: 0 }
    }
}

impl PimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!("pim beta {} and gamma {} must be >= 0", self.beta, self.gamma)));
        }
        Ok(())
    }
}

/// Where the inherited value of a target tensor comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    /// Old tensor of this name; its box is blended, the rest is fresh.
    Old(String),
    /// No counterpart in the old model: entirely fresh.
    Fresh,
}

fn indexed(name: &str, stack: &str) -> Option<(usize, String)> {
    let rest = name.strip_prefix(stack)?.strip_prefix('.')?;
    let (idx, tail) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tail.to_string()))
}

/// Maps a target parameter to its source in a model of spec `old`. Appended
/// blocks and stem convolutions copy the last old one.
pub fn inherit_source(name: &str, old: &ArchSpec) -> Source {
    let stacks = [
        ("img.block", old.blocks_img),
        ("txt.block", old.blocks_txt),
        ("shared.block", old.blocks_shared),
        ("img.stem", old.conv_layers_img - 1),
    ];
    for (stack, have) in stacks {
        if let Some((i, tail)) = indexed(name, stack) {
            return match have {
                0 => Source::Fresh,
                _ => Source::Old(format!("{stack}.{}.{tail}", i.min(have - 1))),
            };
        }
    }
    if name == "txt.adapter" && old.blocks_shared == 0 {
        return Source::Fresh;
    }
    Source::Old(name.to_string())
}

/// Initializes a model of spec `target` from `old`:
/// `beta·ω_old + gamma·ω_rand` wherever an old value exists, and the fresh
/// value `ω_rand` on new head/width positions and brand-new modules.
///
/// `logit_scale` is copied as is: it lives in log space, so blending it
/// would reset the temperature rather than shrink a weight.
pub fn pim_init<T: Real>(old: &WeightStore<T>, target: &ArchSpec, cfg: &PimConfig) -> Result<WeightStore<T>> {
    cfg.validate()?;
    target.validate()?;
    let old_spec = old.spec();
    if !old_spec.fits_within(target) {
        return Err(Error::GrowthDirection(format!(
            "cannot inherit {} into smaller or incompatible {}",
            old_spec.label(),
            target.label()
        )));
    }
    let (beta, gamma) = (T::lit(cfg.beta), T::lit(cfg.gamma));
    let mut tensors = BTreeMap::new();
    for p in param_layout(target) {
        let fresh: Tensor<T> = init_tensor(&p, cfg.rand_seed);
        let mut out = fresh.clone();
        if p.name == LOGIT_SCALE {
            out = old.tensor(LOGIT_SCALE)?.clone();
        } else if let Source::Old(src) = inherit_source(&p.name, old_spec) {
            let o = old.tensor(&src)?;
            if o.shape().len() != p.shape.len() || o.shape().iter().zip(&p.shape).any(|(a, b)| a > b) {
                return Err(Error::shape("pim_init", format!("`{src}` {:?} does not fit `{}` {:?}", o.shape(), p.name, p.shape)));
            }
            let (od, fd) = (o.data(), fresh.data());
            let data = out.data_mut();
            for_each_box_run(&p.shape, o.shape(), |full, boxed, len| {
                for j in 0..len {
                    data[full + j] = beta * od[boxed + j] + gamma * fd[full + j];
                }
            });
        }
        tensors.insert(p.name, out);
    }
    WeightStore::from_tensors(target.clone(), tensors)
}

/// A candidate's slice of the supernet. Shares storage: updates to the
/// supernet are visible through every view.
pub fn extract_subnet<'w, T: Real>(supernet: &'w WeightStore<T>, candidate: &'w ArchSpec) -> Result<ModelView<'w, T>> {
    ModelView::new(supernet, candidate)
}
