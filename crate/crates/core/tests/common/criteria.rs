//! The acceptance checks. Each returns an [`Outcome`]; integration tests assert
//! on the cheap ones and the `acceptance` target prints all of them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use growclip::data::{build_schedule, class_prompts, Corpus};
use growclip::growth::{
    enumerate_growth_space, extract_subnet, pim_init, replay_selection, sample_candidates, select_architecture,
    train_plain, EvalData, PimConfig, SelectionConfig, TrainContext,
};
use growclip::model::{
    build_model, checkpoint, embed_images, embed_texts, init_tensor, param_count, param_layout, ArchSpec,
    ForwardOptions, GrowthFactor, ModelView, WeightStore,
};
use growclip::objective::contrastive_loss_value;
use growclip::pipeline::{
    evaluate, read_log, resume_pipeline, run_pipeline, schedule_for, MetricRecord, Mode, Phase, RunConfig,
    ScoreInputs,
};
use growclip::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{model_gradient_error, op_instance, probe_images, probe_tokens, tiny_spec, FD_TOLERANCE, OPS};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Every differentiable op (20 random instances each) and two full models.
pub fn gradients() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, String::new());
    for op in OPS {
        for i in 0..20 {
            let e = op_instance(op, 1000 * i + 11);
            if !(e <= worst.0) {
                worst = (e, format!("{op}#{i}"));
            }
        }
    }
    for (shared, seed) in [(0, 21), (2, 22)] {
        let (e, name) = model_gradient_error(&tiny_spec(shared), seed);
        if !(e <= worst.0) {
            worst = (e, format!("model(bS={shared}) {name}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome::new(
        worst.0 <= FD_TOLERANCE && secs < 300.0,
        format!("{} ops x 20 + 2 models; worst rel err {:.2e} at {}; {secs:.1}s", OPS.len(), worst.0, worst.1),
    )
}

pub fn loss_values() -> Outcome {
    let uniform = contrastive_loss_value(&Tensor::<f64>::full(&[4, 4], 0.3)).unwrap();
    let single = contrastive_loss_value(&Tensor::<f64>::full(&[1, 1], 2.5)).unwrap();
    let diag = contrastive_loss_value(&Tensor::new(vec![2, 2], vec![10.0f64, 0.0, 0.0, 10.0]).unwrap()).unwrap();
    let want = (1.0 + (-10.0f64).exp()).ln();
    let e = [(uniform - 4f64.ln()).abs(), single.abs(), (diag - want).abs()];
    Outcome::new(
        e[0] <= 1e-6 && single == 0.0 && e[2] <= 1e-9,
        format!("|L-ln4|={:.1e}, L(n=1)={single}, |L-ln(1+e^-10)|={:.1e}", e[0], e[2]),
    )
}

fn embeddings(w: &WeightStore<f32>, seed: u64, n: usize) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = w.spec();
    let images = probe_images(&mut rng, n, spec.image_size).cast::<f32>();
    let tokens = probe_tokens(&mut rng, n, spec);
    let view = ModelView::full(w);
    let opts = ForwardOptions::default();
    (embed_images(view, opts, &images).unwrap(), embed_texts(view, opts, &tokens).unwrap())
}

/// beta = 1, gamma = 0 into the same spec leaves every output unchanged.
pub fn pim_identity() -> Outcome {
    let mut worst = 0.0f32;
    for shared in [0, 2] {
        let old = build_model::<f32>(&tiny_spec(shared), 5).unwrap();
        let new = pim_init(&old, old.spec(), &PimConfig { beta: 1.0, gamma: 0.0, rand_seed: 9 }).unwrap();
        let (a, b) = (embeddings(&old, 1, 100), embeddings(&new, 1, 100));
        worst = worst.max(a.0.max_abs_diff(&b.0)).max(a.1.max_abs_diff(&b.1));
    }
    Outcome::new(worst < 1e-6, format!("max |Δ| over 100 probes x 2 specs = {worst:.1e}"))
}

/// Blocks 6 -> 10 with beta 0.3, gamma 0.001: residuals after removing
/// `0.3·source` must look like `0.001·fresh init`.
pub fn pim_blend() -> Outcome {
    let mut old_spec = tiny_spec(0);
    (old_spec.blocks_img, old_spec.heads_img, old_spec.head_dim_img) = (6, 2, 8);
    let target = old_spec.clone().with_factor(GrowthFactor::BlocksImg, 10);
    let cfg = PimConfig { beta: 0.3, gamma: 0.001, rand_seed: 77 };
    let old = build_model::<f64>(&old_spec, 1).unwrap();
    let new = pim_init(&old, &target, &cfg).unwrap();
    let (mut ratios, mut exact_err, mut checked) = (Vec::new(), 0.0f64, 0);
    for p in param_layout(&target) {
        let Some(rest) = p.name.strip_prefix("img.block.") else { continue };
        let (idx, tail) = rest.split_once('.').unwrap();
        let idx: usize = idx.parse().unwrap();
        let src = format!("img.block.{}.{tail}", idx.min(5));
        let (o, n) = (old.tensor(&src).unwrap().data(), new.tensor(&p.name).unwrap().data());
        let residual: Vec<f64> = o.iter().zip(n).map(|(o, n)| n - 0.3 * o).collect();
        // Independent draw of the same init, for its spread.
        let reference: Tensor<f64> = init_tensor(&p, 12345);
        checked += 1;
        if p.init.is_random() {
            ratios.push(std_dev(&residual) / (0.001 * std_dev(reference.data())));
        } else {
            for (r, f) in residual.iter().zip(reference.data()) {
                exact_err = exact_err.max((r - 0.001 * f).abs());
            }
        }
    }
    let (lo, hi) = ratios.iter().fold((f64::MAX, f64::MIN), |(l, h), &r| (l.min(r), h.max(r)));
    Outcome::new(
        lo >= 0.8 && hi <= 1.2 && exact_err < 1e-12 && checked > 0,
        format!("{checked} block tensors; noise std / (0.001·init std) in [{lo:.3}, {hi:.3}]; constant-init error {exact_err:.1e}"),
    )
}

/// Copies the leading box of every supernet tensor into a fresh `candidate` model.
pub fn copy_standalone(supernet: &WeightStore<f32>, candidate: &ArchSpec) -> WeightStore<f32> {
    let mut tensors = BTreeMap::new();
    for p in param_layout(candidate) {
        let src = supernet.tensor(&p.name).unwrap();
        let mut out = Tensor::<f32>::zeros(&p.shape);
        let strides = |shape: &[usize]| -> Vec<usize> {
            let mut s = vec![1; shape.len()];
            for k in (0..shape.len().saturating_sub(1)).rev() {
                s[k] = s[k + 1] * shape[k + 1];
            }
            s
        };
        let (so, ss) = (strides(&p.shape), strides(src.shape()));
        for i in 0..out.numel() {
            let j: usize = so.iter().zip(&ss).zip(&p.shape).map(|((o, s), d)| (i / o) % d * s).sum();
            out.data_mut()[i] = src.data()[j];
        }
        tensors.insert(p.name, out);
    }
    WeightStore::from_tensors(candidate.clone(), tensors).unwrap()
}

pub fn subnet_soundness() -> Outcome {
    let mut base = tiny_spec(0);
    (base.blocks_img, base.blocks_txt, base.conv_layers_img) = (1, 1, 1);
    let space = enumerate_growth_space(&base, &[]).unwrap();
    let supernet = build_model::<f32>(&space.supernet_spec, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = probe_images(&mut rng, 8, base.image_size).cast::<f32>();
    let tokens = probe_tokens(&mut rng, 8, &base);
    let opts = ForwardOptions::default();
    let mut worst = 0.0f32;
    for cand in &space.candidates {
        let view = extract_subnet(&supernet, cand).unwrap();
        let copy = copy_standalone(&supernet, cand);
        let full = ModelView::full(&copy);
        worst = worst
            .max(embed_images(view, opts, &images).unwrap().max_abs_diff(&embed_images(full, opts, &images).unwrap()))
            .max(embed_texts(view, opts, &tokens).unwrap().max_abs_diff(&embed_texts(full, opts, &tokens).unwrap()));
    }
    Outcome::new(
        worst <= 1e-6 && space.len() == 64,
        format!("{} candidates; max |view − copy| = {worst:.1e}", space.len()),
    )
}

/// Brute force: the highest score, then the smallest P, then the smallest factors.
fn brute_force_winner(fixture: &[(ScoreInputs, ArchSpec)]) -> usize {
    let score = |s: &ScoreInputs| {
        s.accuracy + s.alpha * (s.data_prev as f64 / s.data_now as f64) * (s.supernet_params as f64 / s.params as f64)
    };
    let mut best = 0;
    for i in 1..fixture.len() {
        let (a, b) = (&fixture[i], &fixture[best]);
        let (sa, sb) = (score(&a.0), score(&b.0));
        let better = sa > sb
            || (sa == sb && a.0.params < b.0.params)
            || (sa == sb && a.0.params == b.0.params && a.1.factors() < b.1.factors());
        if better {
            best = i;
        }
    }
    best
}

/// 50 random fixtures of accuracies and sizes drawn from small sets, so that
/// ties on score and on parameter count occur.
pub fn selection_oracle() -> Outcome {
    let space = enumerate_growth_space(&tiny_spec(0), &[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut agree, mut ties) = (0, 0);
    for f in 0..50 {
        let alpha = [0.0, 0.5, 1.0][f % 3];
        let fixture: Vec<(ScoreInputs, ArchSpec)> = space
            .candidates
            .iter()
            .map(|c| {
                let inputs = ScoreInputs {
                    accuracy: [0.25, 0.5, 0.75][rng.random_range(0..3)],
                    params: [100, 200, 400][rng.random_range(0..3)],
                    supernet_params: 400,
                    data_prev: 2,
                    data_now: 4,
                    alpha,
                };
                (inputs, c.clone())
            })
            .collect();
        let records: Vec<MetricRecord> = fixture
            .iter()
            .enumerate()
            .map(|(i, (inp, spec))| {
                let mut r = MetricRecord::new(2, Phase::Selection, spec, "score", inp.score());
                r.candidate = Some(i);
                r.spec = Some(spec.clone());
                r.score_inputs = Some(inp.clone());
                r
            })
            .collect();
        let want = brute_force_winner(&fixture);
        let top = records.iter().map(|r| r.value).fold(f64::MIN, f64::max);
        ties += usize::from(records.iter().filter(|r| r.value == top).count() > 1);
        let (got, spec) = replay_selection(&records).unwrap();
        agree += usize::from(got == want && spec == fixture[want].1);
    }
    Outcome::new(agree == 50, format!("{agree}/50 fixtures agree; {ties} with tied top scores"))
}

/// The winner `select_architecture` reports matches brute force over its own records.
pub fn selection_end_to_end() -> Outcome {
    let mut base = tiny_spec(0);
    (base.blocks_img, base.blocks_txt, base.conv_layers_img, base.max_text_len) = (1, 1, 1, 16);
    let space = enumerate_growth_space(&base, &[]).unwrap();
    let supernet = build_model::<f32>(&space.supernet_spec, 8).unwrap();
    let corpus = Corpus::new(0, base.image_size);
    let set = corpus.eval_set(0..48).unwrap();
    let eval = EvalData { images: set.images, labels: set.labels, class_prompts: class_prompts(corpus.vocab()).unwrap() };
    let cfg = SelectionConfig { alpha: 0.5, data_prev: 1, data_now: 2 };
    let (winner, records) = select_architecture(&space, &supernet, &cfg, &eval, ForwardOptions::default(), 2).unwrap();
    let fixture: Vec<(ScoreInputs, ArchSpec)> = records
        .iter()
        .filter(|r| r.phase == Phase::Selection)
        .map(|r| (r.score_inputs.clone().unwrap(), r.spec.clone().unwrap()))
        .collect();
    let want = brute_force_winner(&fixture);
    let params_ok = fixture.iter().all(|(i, s)| i.params == param_count(s));
    Outcome::new(
        fixture[want].1 == winner && params_ok && fixture.len() == 64,
        format!("winner {} (candidate {want})", winner.label()),
    )
}

pub fn growth_cardinality() -> Outcome {
    let base = tiny_spec(0);
    let mut bad = Vec::new();
    for mask in 0u32..64 {
        let frozen: Vec<GrowthFactor> =
            GrowthFactor::ALL.iter().enumerate().filter(|(j, _)| mask >> j & 1 == 1).map(|(_, f)| *f).collect();
        let space = enumerate_growth_space(&base, &frozen).unwrap();
        let k = 6 - frozen.len();
        let distinct: BTreeSet<[usize; 6]> = space.candidates.iter().map(ArchSpec::factors).collect();
        let ok = space.len() == 1 << k
            && distinct.len() == space.len()
            && space.candidates.contains(&base)
            && space.candidates.contains(&space.supernet_spec);
        if !ok {
            bad.push(mask);
        }
    }
    Outcome::new(bad.is_empty(), format!("64 frozen subsets checked; failures {bad:?}"))
}

pub fn sampling_uniformity() -> Outcome {
    let draws = sample_candidates(6400, 64, 31337);
    let mut counts = [0usize; 64];
    for d in draws {
        counts[d] += 1;
    }
    let expected = 100.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new(63.0).unwrap().inverse_cdf(0.999);
    Outcome::new(chi2 < critical, format!("chi2 = {chi2:.1} (critical {critical:.1} at p = 0.001, 63 dof)"))
}

pub fn data_nesting() -> Outcome {
    let s = build_schedule(8000, 4, 0, 1, 1024, 1024).unwrap();
    let sets: Vec<BTreeSet<u64>> = (1..=4).map(|t| s.manifest(t).unwrap().ids.into_iter().collect()).collect();
    let sizes: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    let nested = sets.windows(2).all(|w| w[0].is_subset(&w[1]));
    let eval: BTreeSet<u64> = s.selection_ids.clone().chain(s.test_ids.clone()).collect();
    let disjoint = eval.len() == 2048 && sets[3].is_disjoint(&eval) && s.selection_ids.end <= s.test_ids.start;
    Outcome::new(
        nested && sizes == [2000, 4000, 6000, 8000] && disjoint,
        format!("sizes {sizes:?}; nested {nested}; eval splits disjoint {disjoint}"),
    )
}

fn seeded(mut cfg: RunConfig, seed: u64) -> RunConfig {
    cfg.seed = seed;
    cfg.data.corpus_seed = seed;
    cfg.data.permutation_seed = seed + 100;
    cfg
}

fn final_accuracy(cfg: &RunConfig, dir: &Path) -> (f64, Vec<String>, Duration) {
    let t = Instant::now();
    let s = run_pipeline(cfg, dir, None).unwrap();
    let specs = s.steps.iter().map(|x| x.spec.label()).collect();
    (s.steps.last().unwrap().eval.zero_shot, specs, t.elapsed())
}

/// Four growth steps on the 8000-pair corpus for seeds 0..3, GrowCLIP against
/// continued training of the fixed base under the same epoch budget.
pub fn end_to_end(progress: &dyn Fn(&str)) -> Outcome {
    let mut lines = Vec::new();
    let (mut above, mut beats, mut slowest) = (0, 0, Duration::ZERO);
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let grow = seeded(RunConfig::tiny(), seed);
        let mut twp = grow.clone();
        twp.mode = Mode::Twp;
        let (ga, specs, gt) = final_accuracy(&grow, &dir.path().join("growclip"));
        let (ta, _, _) = final_accuracy(&twp, &dir.path().join("twp"));
        slowest = slowest.max(gt);
        above += usize::from(ga >= 0.1875);
        beats += usize::from(ga >= ta);
        let line = format!("seed {seed}: growclip {ga:.4} ({}, {:.0}s) vs twp {ta:.4}", specs.join(" > "), gt.as_secs_f64());
        progress(&line);
        lines.push(line);
    }
    Outcome::new(
        above == 3 && beats >= 2 && slowest <= Duration::from_secs(45 * 60),
        format!("{above}/3 seeds >= 0.1875, growclip >= twp in {beats}/3; {}", lines.join("; ")),
    )
}

/// Trains `spec` from scratch on step `step`'s manifest with the desk budget
/// and returns its test zero-shot accuracy.
fn train_fixed(cfg: &RunConfig, spec: &ArchSpec, step: usize) -> f64 {
    let corpus = Corpus::new(cfg.data.corpus_seed, spec.image_size);
    let schedule = schedule_for(cfg).unwrap();
    let manifest = schedule.manifest(step).unwrap();
    let budget = cfg.epoch_budget();
    let horizon = manifest.ids.len() / cfg.train.batch_size * budget;
    let mut ctx = TrainContext {
        corpus: &corpus,
        manifest: &manifest,
        batch_size: cfg.train.batch_size,
        base_lr: cfg.train.lr,
        warmup: cfg.train.warmup.min(horizon - 1),
        horizon,
        optim: cfg.train.optimizer.clone(),
        forward: ForwardOptions::default(),
        seed: cfg.seed + 1,
        iter: 0,
        epoch: 0,
    };
    let mut w = build_model::<f32>(spec, cfg.seed).unwrap();
    train_plain(&mut ctx, &mut w, budget).unwrap();
    let test = corpus.eval_set(schedule.test_ids.clone()).unwrap();
    evaluate(&w, &test, &class_prompts(corpus.vocab()).unwrap()).unwrap().zero_shot
}

/// The base and a spec with twice its heads and blocks, trained identically
/// at 25% and 100% of the data.
pub fn capacity_direction(progress: &dyn Fn(&str)) -> Outcome {
    let small = RunConfig::tiny().base;
    let mut big = small.clone();
    (big.heads_img, big.heads_txt, big.blocks_img, big.blocks_txt) =
        (2 * small.heads_img, 2 * small.heads_txt, 2 * small.blocks_img, 2 * small.blocks_txt);
    let (mut gap25, mut wins100, mut lines) = (0.0, 0, Vec::new());
    for seed in 0..3 {
        let cfg = seeded(RunConfig::tiny(), seed);
        let r: Vec<f64> = [(&small, 1), (&big, 1), (&small, 4), (&big, 4)]
            .iter()
            .map(|(s, step)| train_fixed(&cfg, s, *step))
            .collect();
        gap25 += (r[1] - r[0]) / 3.0;
        wins100 += usize::from(r[3] > r[2]);
        let line = format!("seed {seed}: 25% small {:.4} big {:.4}; 100% small {:.4} big {:.4}", r[0], r[1], r[2], r[3]);
        progress(&line);
        lines.push(line);
    }
    Outcome::new(
        gap25.abs() <= 0.02 && wins100 >= 2,
        format!("mean 25% gap (big − small) {gap25:+.4}; big wins at 100% in {wins100}/3; {}", lines.join("; ")),
    )
}

/// A three-step growclip run small enough to repeat.
pub fn micro_config() -> RunConfig {
    let mut c = RunConfig::tiny();
    c.data.total_pairs = 384;
    c.data.steps = 3;
    c.data.selection_size = 64;
    c.data.test_size = 64;
    c.train.batch_size = 32;
    c.train.warmup = 10;
    c.train.epochs.finetune = 1;
    c.train.epochs.supernet = 1;
    c.train.epochs.selected = 1;
    c
}

pub fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let w = build_model::<f32>(&tiny_spec(2), 4).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &w, &BTreeMap::new()).unwrap();
    let back = checkpoint::load(&path).unwrap().weights;
    let (a, b) = (embeddings(&w, 2, 16), embeddings(&back, 2, 16));
    let round_trip = a.0.data() == b.0.data() && a.1.data() == b.1.data() && w.max_abs_diff(&back) == Some(0.0);

    let cfg = micro_config();
    let first = run_pipeline(&cfg, &dir.path().join("a"), None).unwrap().log_hash;
    let second = run_pipeline(&cfg, &dir.path().join("b"), None).unwrap().log_hash;
    let c = dir.path().join("c");
    run_pipeline(&cfg, &c, Some(2)).unwrap();
    let resumed = resume_pipeline(&cfg, &c, 2).unwrap().log_hash;
    let steps: BTreeSet<usize> = read_log(&c.join("metrics.jsonl")).unwrap().iter().map(|r| r.step).collect();
    Outcome::new(
        round_trip && first == second && first == resumed && steps.len() == 3,
        format!(
            "checkpoint bit-exact {round_trip}; repeat hash equal {}; resumed hash equal {}",
            first == second,
            first == resumed
        ),
    )
}
