//! Growth space, parameter inheriting with momentum, supernet training and
//! architecture selection, composed into one growth step.

mod pim;
mod select;
mod space;
mod train;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use pim::{extract_subnet, inherit_source, pim_init, PimConfig, Source};
pub use select::{
    composite_score, pick_winner, replay_selection, select_architecture, EvalData, SelectionConfig,
};
pub use space::{enumerate_growth_space, sample_candidates, GrowthSpace};
pub use train::{
    batch_loss, supernet_finetune, supernet_train, train_epochs, train_plain, train_step, TrainContext,
    TrainStats,
};

use crate::error::Result;
use crate::model::{ArchSpec, GrowthFactor, WeightStore};
use crate::pipeline::log::{MetricRecord, Phase};

/// Epochs of the three phases of a growth step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochSplit {
    pub finetune: usize,
    pub supernet: usize,
    pub selected: usize,
}

impl EpochSplit {
    pub fn total(&self) -> usize {
        self.finetune + self.supernet + self.selected
    }
}

impl Default for EpochSplit {
    fn default() -> Self {
        EpochSplit { finetune: 2, supernet: 2, selected: 26 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrowConfig {
    pub frozen: Vec<GrowthFactor>,
    pub pim: PimConfig,
    pub epochs: EpochSplit,
    /// Seed of the phase-2 candidate draws.
    pub sample_seed: u64,
}

/// Result of one growth step.
#[derive(Clone, Debug)]
pub struct GrowOutcome {
    pub spec: ArchSpec,
    pub weights: WeightStore<f32>,
    pub records: Vec<MetricRecord>,
}

/// One `loss` record per epoch; the last carries the phase's wall time.
pub(crate) fn loss_records(step: usize, phase: Phase, spec: &ArchSpec, stats: &TrainStats, start: Instant) -> Vec<MetricRecord> {
    let n = stats.epoch_losses.len();
    stats
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, &l)| {
            let mut r = MetricRecord::new(step, phase, spec, "loss", l);
            if e + 1 == n {
                r.wall_seconds = start.elapsed().as_secs_f64();
            }
            r
        })
        .collect()
}

/// Phase 1 inherits the old model into the supernet and fine-tunes it; phase 2
/// trains sampled subnets and selects a candidate; phase 3 inherits the
/// candidate's slice into a standalone model and trains it.
pub fn grow_step(
    old: &WeightStore<f32>,
    ctx: &mut TrainContext<'_>,
    cfg: &GrowConfig,
    selection: &SelectionConfig,
    eval: &EvalData,
    step: usize,
) -> Result<GrowOutcome> {
    let mut records = Vec::new();
    let space = enumerate_growth_space(old.spec(), &cfg.frozen)?;

    let t = Instant::now();
    let mut supernet = pim_init(old, &space.supernet_spec, &cfg.pim)?;
    let stats = supernet_finetune(ctx, &mut supernet, cfg.epochs.finetune)?;
    records.extend(loss_records(step, Phase::SupernetFinetune, &space.supernet_spec, &stats, t));

    let t = Instant::now();
    let (stats, _) = supernet_train(ctx, &mut supernet, &space, cfg.epochs.supernet, cfg.sample_seed)?;
    records.extend(loss_records(step, Phase::SupernetTrain, &space.supernet_spec, &stats, t));
    let (winner, sel) = select_architecture(&space, &supernet, selection, eval, ctx.forward, step)?;
    records.extend(sel);

    let t = Instant::now();
    let slice = extract_subnet(&supernet, &winner)?.materialize()?;
    let phase3 = PimConfig { rand_seed: cfg.pim.rand_seed ^ 0x9E37_79B9, ..cfg.pim.clone() };
    let mut weights = pim_init(&slice, &winner, &phase3)?;
    let stats = train_plain(ctx, &mut weights, cfg.epochs.selected)?;
    records.extend(loss_records(step, Phase::SelectedTrain, &winner, &stats, t));
    Ok(GrowOutcome { spec: winner, weights, records })
}
