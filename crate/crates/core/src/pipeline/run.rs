use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{build_schedule, class_prompts, Batch, Corpus, GrowthSchedule};
use crate::error::{Error, Result};
use crate::growth::loss_records;
use crate::growth::{
    enumerate_growth_space, grow_step, pim_init, select_architecture, supernet_train, train_plain, EvalData,
    GrowConfig, PimConfig, SelectionConfig, TrainContext,
};
use crate::model::checkpoint::{self, Checkpoint};
use crate::model::{build_model, ArchSpec, ForwardOptions, ModelView, WeightStore};
use crate::objective::{
    embed_images_chunked, embed_texts_chunked, retrieval_recall, zero_shot_accuracy_from_embeddings, class_embeddings,
    Direction,
};

use super::config::{Mode, RunConfig};
use super::log::{content_hash, read_log, truncate_log, MetricLog, MetricRecord, Phase};

/// Files of one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn schedule(&self) -> PathBuf {
        self.root.join("schedule.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step}.ckpt"))
    }
}

/// Held-out evaluation of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub zero_shot: f64,
    pub recall_i2t: [f64; 2],
    pub recall_t2i: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepSummary {
    pub step: usize,
    pub spec: ArchSpec,
    pub eval: EvalReport,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: Vec<StepSummary>,
    pub final_weights: WeightStore<f32>,
    pub log_hash: String,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of purpose `tag` at `step`.
fn step_seed(cfg: &RunConfig, step: usize, tag: u64) -> u64 {
    mix(mix(cfg.seed, step as u64), tag)
}

/// The schedule implied by the data section of `cfg`.
pub fn schedule_for(cfg: &RunConfig) -> Result<GrowthSchedule> {
    let d = &cfg.data;
    build_schedule(d.total_pairs, d.steps, d.corpus_seed, d.permutation_seed, d.selection_size, d.test_size)
}

/// Zero-shot accuracy and recall@{1,5} in both directions on `set`.
pub fn evaluate(weights: &WeightStore<f32>, set: &Batch, prompts: &[Vec<Vec<usize>>]) -> Result<EvalReport> {
    let view = ModelView::full(weights);
    let opts = ForwardOptions::default();
    let img = embed_images_chunked(view, opts, &set.images, 256)?;
    let txt = embed_texts_chunked(view, opts, &set.tokens, 256)?;
    let classes = class_embeddings(view, opts, prompts)?;
    let n = set.len();
    let r = |k: usize, d| retrieval_recall(&img, &txt, k.min(n), d);
    Ok(EvalReport {
        zero_shot: zero_shot_accuracy_from_embeddings(&img, &classes, &set.labels)?,
        recall_i2t: [r(1, Direction::ImageToText)?, r(5, Direction::ImageToText)?],
        recall_t2i: [r(1, Direction::TextToImage)?, r(5, Direction::TextToImage)?],
    })
}

fn eval_records(step: usize, spec: &ArchSpec, e: &EvalReport, start: Instant) -> Vec<MetricRecord> {
    let mut out: Vec<MetricRecord> = [
        ("zeroshot_top1", e.zero_shot),
        ("recall@1_i2t", e.recall_i2t[0]),
        ("recall@5_i2t", e.recall_i2t[1]),
        ("recall@1_t2i", e.recall_t2i[0]),
        ("recall@5_t2i", e.recall_t2i[1]),
    ]
    .into_iter()
    .map(|(m, v)| MetricRecord::new(step, Phase::Eval, spec, m, v))
    .collect();
    if let Some(last) = out.last_mut() {
        last.wall_seconds = start.elapsed().as_secs_f64();
    }
    out
}

/// Everything a run needs besides the weights.
struct Runner<'a> {
    cfg: &'a RunConfig,
    paths: RunPaths,
    corpus: Corpus,
    schedule: GrowthSchedule,
    selection: EvalData,
    test: Batch,
    prompts: Vec<Vec<Vec<usize>>>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a RunConfig, root: &Path) -> Result<Self> {
        cfg.validate()?;
        let corpus = Corpus::new(cfg.data.corpus_seed, cfg.base.image_size);
        let schedule = schedule_for(cfg)?;
        let prompts = class_prompts(corpus.vocab())?;
        let sel = corpus.eval_set(schedule.selection_ids.clone())?;
        let test = corpus.eval_set(schedule.test_ids.clone())?;
        Ok(Runner {
            cfg,
            paths: RunPaths::new(root),
            selection: EvalData { images: sel.images, labels: sel.labels, class_prompts: prompts.clone() },
            corpus,
            schedule,
            test,
            prompts,
        })
    }

    fn meta(&self, step: usize) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("step".to_string(), step.to_string()),
            ("mode".to_string(), format!("{:?}", self.cfg.mode).to_lowercase()),
            ("config".to_string(), self.cfg.fingerprint()),
        ])
    }

    /// Trains step `step` given the previous step's weights.
    fn step(&self, step: usize, prev: Option<&WeightStore<f32>>) -> Result<(WeightStore<f32>, Vec<MetricRecord>, EvalReport)> {
        let cfg = self.cfg;
        let manifest = self.schedule.manifest(step)?;
        let budget = cfg.epoch_budget();
        let search_from_scratch = cfg.mode == Mode::Nas && step > 1;
        let bpe = manifest.ids.len() / cfg.train.batch_size;
        let horizon = bpe * budget * if search_from_scratch { 2 } else { 1 };
        let mut ctx = TrainContext {
            corpus: &self.corpus,
            manifest: &manifest,
            batch_size: cfg.train.batch_size,
            base_lr: cfg.train.lr,
            warmup: cfg.train.warmup.min(horizon.saturating_sub(1)),
            horizon,
            optim: cfg.train.optimizer.clone(),
            forward: ForwardOptions::default(),
            seed: step_seed(cfg, step, 1),
            iter: 0,
            epoch: 0,
        };
        let pim = PimConfig { rand_seed: step_seed(cfg, step, 2), ..cfg.pim.clone() };
        let mut records = Vec::new();
        let plain = |mut w: WeightStore<f32>, ctx: &mut TrainContext<'_>, records: &mut Vec<MetricRecord>| {
            let t = Instant::now();
            let stats = train_plain(ctx, &mut w, budget)?;
            records.extend(loss_records(step, Phase::Train, w.spec(), &stats, t));
            Ok::<_, Error>(w)
        };
        let weights = match (prev, cfg.mode) {
            (None, _) | (Some(_), Mode::Tfs) => {
                let w = build_model(&cfg.base, step_seed(cfg, step, 3))?;
                plain(w, &mut ctx, &mut records)?
            }
            (Some(p), Mode::Twp) => plain(p.clone(), &mut ctx, &mut records)?,
            (Some(p), Mode::Sap) => plain(pim_init(p, p.spec(), &pim)?, &mut ctx, &mut records)?,
            (Some(p), Mode::Growclip) => {
                let grow = GrowConfig {
                    frozen: cfg.selection.frozen.clone(),
                    pim,
                    epochs: cfg.train.epochs,
                    sample_seed: step_seed(cfg, step, 4),
                };
                let out = grow_step(p, &mut ctx, &grow, &self.selection_config(step), &self.selection, step)?;
                records.extend(out.records);
                out.weights
            }
            (Some(p), Mode::Nas) => {
                let space = enumerate_growth_space(p.spec(), &cfg.selection.frozen)?;
                let mut supernet = build_model(&space.supernet_spec, step_seed(cfg, step, 5))?;
                let t = Instant::now();
                let (stats, _) = supernet_train(&mut ctx, &mut supernet, &space, budget, step_seed(cfg, step, 4))?;
                records.extend(loss_records(step, Phase::SupernetTrain, &space.supernet_spec, &stats, t));
                let (winner, sel) =
                    select_architecture(&space, &supernet, &self.selection_config(step), &self.selection, ctx.forward, step)?;
                records.extend(sel);
                drop(supernet);
                let w = build_model(&winner, step_seed(cfg, step, 3))?;
                plain(w, &mut ctx, &mut records)?
            }
        };
        let t = Instant::now();
        let report = evaluate(&weights, &self.test, &self.prompts)?;
        records.extend(eval_records(step, weights.spec(), &report, t));
        Ok((weights, records, report))
    }

    fn selection_config(&self, step: usize) -> SelectionConfig {
        SelectionConfig {
            alpha: self.cfg.selection.alpha,
            data_prev: self.schedule.counts[step - 2],
            data_now: self.schedule.counts[step - 1],
        }
    }

    /// Runs steps `from..=until`, continuing from `prev`.
    fn run(&self, from: usize, until: usize, mut prev: Option<WeightStore<f32>>) -> Result<Vec<StepSummary>> {
        let mut log = MetricLog::open(&self.paths.metrics())?;
        let mut summaries = Vec::new();
        for step in from..=until {
            let (weights, records, eval) = self.step(step, prev.as_ref())?;
            for r in records {
                log.append(r)?;
            }
            checkpoint::save(&self.paths.checkpoint(step), &weights, &self.meta(step))?;
            summaries.push(StepSummary { step, spec: weights.spec().clone(), eval });
            prev = Some(weights);
        }
        Ok(summaries)
    }
}

fn finish(paths: &RunPaths, steps: Vec<StepSummary>, last: usize) -> Result<RunSummary> {
    let final_weights = checkpoint::load(&paths.checkpoint(last))?.weights;
    let log_hash = content_hash(&read_log(&paths.metrics())?);
    Ok(RunSummary { steps, final_weights, log_hash })
}

/// Runs a fresh pipeline into `root`, stopping after step `until` (default:
/// the last). An existing metric log in `root` is replaced.
pub fn run_pipeline(cfg: &RunConfig, root: &Path, until: Option<usize>) -> Result<RunSummary> {
    let runner = Runner::new(cfg, root)?;
    let until = until.unwrap_or(cfg.data.steps).min(cfg.data.steps);
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    checkpoint::write_atomic(&runner.paths.config(), cfg.to_toml().as_bytes())?;
    runner.schedule.save(&runner.paths.schedule())?;
    let metrics = runner.paths.metrics();
    if metrics.exists() {
        std::fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let steps = runner.run(1, until, None)?;
    finish(&runner.paths, steps, until)
}

/// Continues a run from the checkpoint of `step`: later log records are
/// dropped and steps `step + 1..` are recomputed.
pub fn resume_pipeline(cfg: &RunConfig, root: &Path, step: usize) -> Result<RunSummary> {
    let runner = Runner::new(cfg, root)?;
    if step == 0 || step > cfg.data.steps {
        return Err(Error::Config(format!("resume step {step} is outside 1..={}", cfg.data.steps)));
    }
    let ckpt: Checkpoint = checkpoint::load(&runner.paths.checkpoint(step))?;
    let want = runner.meta(step);
    for key in ["step", "mode", "config"] {
        if ckpt.meta.get(key) != want.get(key) {
            return Err(Error::ResumeMismatch(format!(
                "checkpoint {key} is {:?}, the config implies {:?}",
                ckpt.meta.get(key),
                want.get(key)
            )));
        }
    }
    if !ckpt.weights.spec().same_family(&cfg.base) {
        return Err(Error::ResumeMismatch(format!(
            "checkpoint architecture {} does not belong to the configured base family",
            ckpt.weights.spec().label()
        )));
    }
    truncate_log(&runner.paths.metrics(), step)?;
    let steps = runner.run(step + 1, cfg.data.steps, Some(ckpt.weights))?;
    finish(&runner.paths, steps, cfg.data.steps)
}
