use crate::data::{batch_stream, Batch, Corpus, Manifest};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, ForwardOptions, ModelView, Session, WeightStore};
use crate::objective::contrastive_loss;
use crate::pipeline::optim::{lr_schedule, OptimConfig, Optimizer};

use super::space::{sample_candidates, GrowthSpace};

/// Everything a training phase needs, plus the step-local iteration and
/// epoch counters that one learning-rate schedule runs over.
#[derive(Clone, Debug)]
pub struct TrainContext<'a> {
    pub corpus: &'a Corpus,
    pub manifest: &'a Manifest,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup: usize,
    /// Iteration at which the cosine schedule reaches zero.
    pub horizon: usize,
    pub optim: OptimConfig,
    pub forward: ForwardOptions,
    pub seed: u64,
    pub iter: usize,
    pub epoch: u64,
}

impl TrainContext<'_> {
    pub fn batches_per_epoch(&self) -> usize {
        self.manifest.ids.len() / self.batch_size.max(1)
    }

    fn epoch_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ self.epoch
    }
}

/// Mean loss of each epoch run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub epoch_losses: Vec<f64>,
}

/// Forward, backward and one optimizer step through `spec`'s slice of `store`.
pub fn train_step(
    store: &mut WeightStore<f32>,
    spec: &ArchSpec,
    batch: &Batch,
    forward: ForwardOptions,
    opt: &mut Optimizer<f32>,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let view = ModelView::new(store, spec)?;
        let mut s = Session::new(view, forward, true);
        let img = s.encode_image(&batch.images)?;
        let txt = s.encode_text(&batch.tokens)?;
        let sim = s.similarity(img, txt)?;
        let loss = contrastive_loss(&mut s.graph, sim)?;
        s.graph.backward(loss)?;
        (s.graph.value(loss).item() as f64, s.gradients())
    };
    opt.step(store, &grads, lr)?;
    Ok(loss)
}

/// Contrastive loss of one batch without updating anything.
pub fn batch_loss(view: ModelView<'_, f32>, forward: ForwardOptions, batch: &Batch) -> Result<f64> {
    let mut s = Session::new(view, forward, false);
    let img = s.encode_image(&batch.images)?;
    let txt = s.encode_text(&batch.tokens)?;
    let sim = s.similarity(img, txt)?;
    let loss = contrastive_loss(&mut s.graph, sim)?;
    Ok(s.graph.value(loss).item() as f64)
}

/// Runs `epochs` epochs with a fresh optimizer state. `spec_for(k)` names the
/// architecture trained on the `k`-th batch of this call.
pub fn train_epochs(
    ctx: &mut TrainContext<'_>,
    store: &mut WeightStore<f32>,
    epochs: usize,
    mut spec_for: impl FnMut(usize) -> ArchSpec,
) -> Result<TrainStats> {
    if epochs > 0 && ctx.batches_per_epoch() == 0 {
        return Err(Error::Input(format!(
            "manifest of {} pairs yields no batch of {}",
            ctx.manifest.ids.len(),
            ctx.batch_size
        )));
    }
    let mut opt = Optimizer::new(ctx.optim.clone());
    let mut stats = TrainStats::default();
    let mut k = 0;
    for _ in 0..epochs {
        let stream = batch_stream(ctx.corpus, ctx.manifest, ctx.batch_size, ctx.epoch_seed())?;
        let mut total = 0.0;
        let mut n = 0;
        for batch in stream {
            let batch = batch?;
            let lr = lr_schedule(ctx.iter, ctx.warmup, ctx.horizon, ctx.base_lr);
            let spec = spec_for(k);
            total += train_step(store, &spec, &batch, ctx.forward, &mut opt, lr)?;
            n += 1;
            k += 1;
            ctx.iter += 1;
        }
        ctx.epoch += 1;
        stats.epoch_losses.push(total / n as f64);
    }
    Ok(stats)
}

/// Trains the store's own architecture.
pub fn train_plain(ctx: &mut TrainContext<'_>, store: &mut WeightStore<f32>, epochs: usize) -> Result<TrainStats> {
    let spec = store.spec().clone();
    train_epochs(ctx, store, epochs, |_| spec.clone())
}

/// Phase 1: trains the maximal architecture only.
pub fn supernet_finetune(ctx: &mut TrainContext<'_>, supernet: &mut WeightStore<f32>, epochs: usize) -> Result<TrainStats> {
    train_plain(ctx, supernet, epochs)
}

/// Phase 2: each batch trains one uniformly drawn candidate's slice.
/// Returns the draws along with the loss statistics.
pub fn supernet_train(
    ctx: &mut TrainContext<'_>,
    supernet: &mut WeightStore<f32>,
    space: &GrowthSpace,
    epochs: usize,
    seed: u64,
) -> Result<(TrainStats, Vec<usize>)> {
    if supernet.spec() != &space.supernet_spec {
        return Err(Error::Contract(format!(
            "supernet is {}, growth space expects {}",
            supernet.spec().label(),
            space.supernet_spec.label()
        )));
    }
    let draws = sample_candidates(epochs * ctx.batches_per_epoch(), space.len(), seed);
    let stats = train_epochs(ctx, supernet, epochs, |k| space.candidates[draws[k]].clone())?;
    Ok((stats, draws))
}
