use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use growclip::data::{class_prompts, Corpus};
use growclip::growth::replay_selection;
use growclip::model::checkpoint;
use growclip::model::{build_model, param_count};
use growclip::pipeline::{
    evaluate, read_log, resume_pipeline, run_pipeline, schedule_for, Phase, RunConfig, RunPaths,
};
use growclip::{Error, Result};

const OUT_DIR_ENV: &str = "GROWCLIP_OUT_DIR";

#[derive(Parser)]
#[command(name = "growclip", version, about = "Grow a contrastive image-text model as its data grows")]
struct Cli {
    /// Run directory [env: GROWCLIP_OUT_DIR, default: runs/growclip]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// TOML run configuration; defaults to the run directory's config.toml, then the profile
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is found
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Scalar overrides such as `train.lr=0.001` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Zeroshot,
    Retrieval,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the config and an untrained step-1 checkpoint
    Init {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the growth schedule (and optionally a sample of rendered pairs)
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also dump the first N training pairs as PPM images plus captions
        #[arg(long, default_value_t = 0)]
        dump: usize,
    },
    /// Run the pipeline from step 1
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Stop after this step
        #[arg(long)]
        until: Option<usize>,
    },
    /// Continue a run from the checkpoint of a step
    Resume {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        step: usize,
    },
    /// Evaluate a checkpoint on the held-out test split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
    },
    /// Print a checkpoint's architecture and parameter count
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recompute every step's architecture selection from a metric log
    SelectDryRun {
        /// Metric log; defaults to the run directory's metrics.jsonl
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn out_dir(cli: &Option<PathBuf>) -> PathBuf {
    cli.clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/growclip"))
}

fn load_config(args: &ConfigArgs, paths: &RunPaths) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None if paths.config().exists() => RunConfig::load(&paths.config())?,
        None => RunConfig::profile(&args.profile)?,
    };
    for s in &args.set {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn write_ppm(path: &Path, pixels: &[f32], size: usize) -> Result<()> {
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    let plane = size * size;
    for i in 0..plane {
        for c in 0..3 {
            let v = (pixels[c * plane + i] + 1.0) / 2.0;
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn execute(cli: Cli) -> Result<()> {
    let paths = RunPaths::new(out_dir(&cli.out));
    let root = paths.root.clone();
    match cli.verb {
        Verb::Init { cfg } => {
            let cfg = load_config(&cfg, &paths)?;
            cfg.validate()?;
            std::fs::create_dir_all(&root).map_err(|e| Error::Io { path: root.clone(), source: e })?;
            std::fs::write(paths.config(), cfg.to_toml()).map_err(|e| Error::Io { path: paths.config(), source: e })?;
            let weights = build_model::<f32>(&cfg.base, cfg.seed)?;
            let meta = [("step".to_string(), "0".to_string()), ("config".to_string(), cfg.fingerprint())].into();
            let path = root.join("checkpoints").join("init.ckpt");
            checkpoint::save(&path, &weights, &meta)?;
            print(json!({ "checkpoint": path, "params": param_count(&cfg.base) }));
        }
        Verb::GenData { cfg, dump } => {
            let cfg = load_config(&cfg, &paths)?;
            let schedule = schedule_for(&cfg)?;
            schedule.save(&paths.schedule())?;
            if dump > 0 {
                let corpus = Corpus::new(cfg.data.corpus_seed, cfg.base.image_size);
                let dir = root.join("samples");
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let mut captions = String::new();
                for &id in schedule.manifest(schedule.steps())?.ids.iter().take(dump) {
                    let ex = corpus.example(id)?;
                    write_ppm(&dir.join(format!("{id}.ppm")), &ex.image, cfg.base.image_size)?;
                    captions.push_str(&format!("{}\n", json!({ "id": id, "label": ex.label, "caption": ex.caption })));
                }
                let p = dir.join("captions.jsonl");
                std::fs::write(&p, captions).map_err(|e| Error::Io { path: p, source: e })?;
            }
            print(json!({ "schedule": paths.schedule(), "counts": schedule.counts, "hashes": schedule.hashes }));
        }
        Verb::Run { cfg, until } => {
            let cfg = load_config(&cfg, &paths)?;
            let summary = run_pipeline(&cfg, &root, until)?;
            report(&summary);
        }
        Verb::Resume { cfg, step } => {
            let cfg = load_config(&cfg, &paths)?;
            let summary = resume_pipeline(&cfg, &root, step)?;
            report(&summary);
        }
        Verb::Eval { cfg, checkpoint: ckpt, task } => {
            let cfg = load_config(&cfg, &paths)?;
            let weights = checkpoint::load(&ckpt)?.weights;
            let corpus = Corpus::new(cfg.data.corpus_seed, weights.spec().image_size);
            let schedule = schedule_for(&cfg)?;
            let test = corpus.eval_set(schedule.test_ids.clone())?;
            let e = evaluate(&weights, &test, &class_prompts(corpus.vocab())?)?;
            match task {
                Task::Zeroshot => print(json!({ "task": "zeroshot", "images": test.len(), "top1": e.zero_shot })),
                Task::Retrieval => print(json!({
                    "task": "retrieval",
                    "pairs": test.len(),
                    "image_to_text": { "r@1": e.recall_i2t[0], "r@5": e.recall_i2t[1] },
                    "text_to_image": { "r@1": e.recall_t2i[0], "r@5": e.recall_t2i[1] },
                })),
            }
        }
        Verb::Inspect { checkpoint: ckpt } => {
            let c = checkpoint::load(&ckpt)?;
            let spec = c.weights.spec();
            println!("{spec}");
            println!("parameters:     {}", param_count(spec));
            for (k, v) in &c.meta {
                println!("{k}: {v}");
            }
        }
        Verb::SelectDryRun { log } => {
            let path = log.unwrap_or_else(|| paths.metrics());
            let records = read_log(&path)?;
            let mut steps: Vec<usize> = records.iter().filter(|r| r.phase == Phase::Selection).map(|r| r.step).collect();
            steps.dedup();
            let mut all_match = true;
            let mut out = Vec::new();
            for step in steps {
                let these: Vec<_> = records.iter().filter(|r| r.step == step).cloned().collect();
                let (idx, spec) = replay_selection(&these)?;
                let recorded = these.iter().find(|r| r.phase == Phase::Selected).and_then(|r| r.candidate);
                all_match &= recorded == Some(idx);
                out.push(json!({ "step": step, "winner": idx, "spec": spec.label(), "recorded": recorded }));
            }
            print(json!({ "steps": out, "all_match": all_match }));
            if !all_match {
                return Err(Error::Contract("replayed selection disagrees with the log".into()));
            }
        }
    }
    Ok(())
}

fn report(summary: &growclip::pipeline::RunSummary) {
    let steps: Vec<_> = summary
        .steps
        .iter()
        .map(|s| {
            json!({
                "step": s.step,
                "spec": s.spec.label(),
                "params": param_count(&s.spec),
                "zeroshot_top1": s.eval.zero_shot,
                "recall@1_i2t": s.eval.recall_i2t[0],
                "recall@1_t2i": s.eval.recall_t2i[0],
            })
        })
        .collect();
    print(json!({ "steps": steps, "log_hash": summary.log_hash }));
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
