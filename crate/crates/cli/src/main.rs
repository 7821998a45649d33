use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use kramt_core::data::{file_sha256, generate_synthetic, load_checkpoint_expecting, save_checkpoint, Corpus, Split, SynthSpec};
use kramt_core::eval::{self, EvalMode, EvalOptions, FeatureCache};
use kramt_core::model::{Kramt, ModelConfig};
use kramt_core::text::pad_truncate;
use kramt_core::train::{run_schedule, KnowledgeMode, RetrievalMetrics, Tokenized, TrainSchedule};
use kramt_core::verify::{run_suite, VerifyOptions};

#[derive(Parser, Debug)]
#[command(name = "kramt", version, about = "Knowledge-augmented multimodal image retrieval")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set schedule.negative_ratio=2`.
    #[arg(long = "set", value_name = "K=V", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for gallery evaluation (default: every core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "kramt-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus into the output directory.
    GenData,
    /// Train a model on the corpus's training split.
    Train {
        #[arg(long)]
        mode: Option<EvalMode>,
    },
    /// Rank a gallery split and report retrieval metrics.
    Eval {
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Rank a gallery for one query text and print the top k.
    Retrieve {
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Report fused entity-linking accuracy.
    LinkEntities {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Finite-difference check of every op and the full training loss.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    seed: u64,
    /// `vocab_size` 0 takes the corpus vocabulary size.
    model: ModelConfig,
    schedule: TrainSchedule,
    eval: EvalOptions,
    split: Split,
    synth: SynthSpec,
    /// Evaluate on `split` after every training epoch.
    validate_each_epoch: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            checkpoint: None,
            seed: 0,
            model: ModelConfig::desk(0),
            schedule: TrainSchedule::desk(),
            eval: EvalOptions::default(),
            split: Split::GallerySmall,
            synth: SynthSpec::default(),
            validate_each_epoch: false,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn apply_override(root: &mut Value, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override {key}: {part} is not inside an object"))?;
        if !obj.contains_key(*part) {
            bail!("unknown configuration key {key}");
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    Ok(())
}

fn resolve(global: &Global) -> anyhow::Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = &global.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut value, patch);
    }
    for o in &global.overrides {
        apply_override(&mut value, o)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.schedule.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(t) = global.threads {
        cfg.eval.threads = t;
    }
    Ok(cfg)
}

struct Run {
    out: PathBuf,
    cfg: RunConfig,
}

impl Run {
    fn write_json(&self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let path = self.out.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    /// Records the resolved configuration, seed and manifest hash.
    fn record(&self, command: &str, manifest: Option<&Path>) -> anyhow::Result<()> {
        self.write_json("config.json", &self.cfg)?;
        let hash = match manifest {
            Some(m) => Some(file_sha256(m)?),
            None => None,
        };
        self.write_json(
            "run.json",
            &json!({
                "command": command,
                "seed": self.cfg.seed,
                "manifest": manifest,
                "manifest_sha256": hash,
                "version": env!("CARGO_PKG_VERSION"),
            }),
        )
    }

    fn manifest(&self) -> anyhow::Result<PathBuf> {
        self.cfg
            .manifest
            .clone()
            .context("no corpus manifest configured (use --set manifest=PATH)")
    }

    fn corpus(&self) -> anyhow::Result<(Corpus, PathBuf)> {
        let manifest = self.manifest()?;
        let corpus = Corpus::load(&manifest, Some(self.cfg.model.appearance_dim))?;
        Ok((corpus, manifest))
    }

    fn model_config(&self, corpus: &Corpus) -> anyhow::Result<ModelConfig> {
        let mut c = self.cfg.model.clone();
        if c.vocab_size == 0 {
            c.vocab_size = corpus.vocab.len();
        } else if c.vocab_size != corpus.vocab.len() {
            bail!("model.vocab_size {} but the corpus vocabulary has {} entries", c.vocab_size, corpus.vocab.len());
        }
        c.validate()?;
        Ok(c)
    }

    fn load_model(&self, corpus: &Corpus, checkpoint: Option<PathBuf>) -> anyhow::Result<Kramt> {
        let path = checkpoint
            .or_else(|| self.cfg.checkpoint.clone())
            .context("no checkpoint given (use --checkpoint PATH)")?;
        let expected = self.model_config(corpus)?;
        Ok(load_checkpoint_expecting(&path, &expected).with_context(|| format!("loading {}", path.display()))?)
    }
}

fn print_metrics(label: &str, m: &RetrievalMetrics, n: usize) {
    println!("{label:<16} R@1 {:.3}  R@5 {:.3}  R@10 {:.3}  MdR {:>4}  ({n} queries)", m.r1, m.r5, m.r10, m.mdr);
}

fn train_knowledge(mode: EvalMode) -> anyhow::Result<KnowledgeMode> {
    Ok(match mode {
        EvalMode::Full | EvalMode::NoVision => KnowledgeMode::Selected,
        EvalMode::NoKnowledge => KnowledgeMode::Absent,
        EvalMode::Oracle => KnowledgeMode::GroundTruth,
        EvalMode::KnowledgeOnly => bail!("knowledge_only is a ranking baseline and has no training mode"),
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut run = Run {
        out: cli.global.out.clone(),
        cfg: resolve(&cli.global)?,
    };
    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    match cli.command {
        Command::GenData => {
            let manifest = generate_synthetic(&run.cfg.synth, &run.out)?;
            run.cfg.manifest = Some(manifest.clone());
            run.record("gen-data", Some(&manifest))?;
            let corpus = Corpus::load(&manifest, Some(run.cfg.synth.d_app))?;
            run.write_json("metrics.json", &corpus.stats())?;
            println!("wrote {}", manifest.display());
        }
        Command::Train { mode } => {
            if let Some(m) = mode {
                run.cfg.schedule.knowledge = train_knowledge(m)?;
                run.cfg.schedule.no_vision = m == EvalMode::NoVision;
            }
            let (corpus, manifest) = run.corpus()?;
            run.record("train", Some(&manifest))?;
            let config = run.model_config(&corpus)?;
            let mut model = Kramt::new(config, run.cfg.seed)?;
            let opts = EvalOptions {
                mode: mode.unwrap_or(EvalMode::Full),
                ..run.cfg.eval.clone()
            };
            let split = run.cfg.split;
            let mut validate = |m: &Kramt| -> kramt_core::Result<RetrievalMetrics> {
                let e = eval::evaluate(m, &corpus, split, &opts)?;
                Ok(RetrievalMetrics {
                    r1: e.report.r1,
                    r5: e.report.r5,
                    r10: e.report.r10,
                    mdr: e.report.mdr,
                })
            };
            let hook: Option<&mut dyn FnMut(&Kramt) -> kramt_core::Result<RetrievalMetrics>> =
                if run.cfg.validate_each_epoch { Some(&mut validate) } else { None };
            let log = run_schedule(&mut model, &corpus, &run.cfg.schedule, Some(&run.out), hook)?;
            save_checkpoint(&model, &run.out.join("final.krmt"))?;
            let last = log.last().map(|e| {
                json!({"epoch": e.epoch, "phase": e.phase, "itm_loss": e.losses.itm, "mlm_loss": e.losses.mlm,
                       "link_loss": e.losses.link, "metrics": e.metrics})
            });
            run.write_json("metrics.json", &json!({"epochs": log.len(), "last": last}))?;
            println!("trained {} epochs; checkpoint {}", log.len(), run.out.join("final.krmt").display());
        }
        Command::Eval { mode, checkpoint, split } => {
            if let Some(m) = mode {
                run.cfg.eval.mode = m;
            }
            if let Some(s) = split {
                run.cfg.split = s;
            }
            let (corpus, manifest) = run.corpus()?;
            run.record("eval", Some(&manifest))?;
            let model = run.load_model(&corpus, checkpoint)?;
            let e = eval::evaluate(&model, &corpus, run.cfg.split, &run.cfg.eval)?;
            run.write_json("report.json", &e.report)?;
            eval::write_per_query_csv(&run.out.join("per_query.csv"), &e.queries)?;
            let r = &e.report;
            let m = RetrievalMetrics {
                r1: r.r1,
                r5: r.r5,
                r10: r.r10,
                mdr: r.mdr,
            };
            print_metrics(r.mode.name(), &m, r.n_queries);
            for (tag, s) in &r.by_tag {
                let m = RetrievalMetrics {
                    r1: s.r1,
                    r5: s.r5,
                    r10: s.r10,
                    mdr: s.mdr,
                };
                print_metrics(&format!("  {tag}"), &m, s.n_queries);
            }
            println!("wikification top-1 {:.3}  top-{} {:.3}", r.wikification_top1, r.top_k, r.wikification_topk);
        }
        Command::Retrieve {
            query,
            k,
            mode,
            checkpoint,
            split,
        } => {
            if let Some(m) = mode {
                run.cfg.eval.mode = m;
            }
            if let Some(s) = split {
                run.cfg.split = s;
            }
            let (corpus, manifest) = run.corpus()?;
            run.record("retrieve", Some(&manifest))?;
            let model = run.load_model(&corpus, checkpoint)?;
            let gallery = corpus.split_images(run.cfg.split);
            if gallery.is_empty() {
                bail!("split {} has no images", run.cfg.split);
            }
            let k = if k == 0 || k > gallery.len() {
                let clamped = k.clamp(1, gallery.len());
                log::warn!("k = {k} clamped to {clamped} for a gallery of {}", gallery.len());
                clamped
            } else {
                k
            };
            let tokens = Tokenized::new(&corpus, &model.config)?;
            let mut cache = FeatureCache::build(&model, &corpus, &tokens, &[], &gallery)?;
            let seq = pad_truncate(&corpus.vocab.encode(&query), model.config.query_len)?;
            let key = usize::MAX;
            cache.insert_query(&model, key, &seq)?;
            let scores = eval::score_gallery(&model, &corpus, &cache, key, &gallery, &run.cfg.eval)?;
            let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
            let ids: Vec<&str> = gallery.iter().map(|&i| corpus.images[i].image_id.as_str()).collect();
            let order = eval::order_by_score(&values, &ids);
            println!("{:>4}  {:<12} {:>10}  knowledge", "rank", "image", "score");
            let mut rows = Vec::new();
            for (rank, &i) in order.iter().take(k).enumerate() {
                let entity = scores[i].selected.map(|e| corpus.entities[e].entity_id.as_str()).unwrap_or("-");
                println!("{:>4}  {:<12} {:>10.4}  {entity}", rank + 1, ids[i], values[i]);
                rows.push(json!({"rank": rank + 1, "image_id": ids[i], "score": values[i], "knowledge": entity}));
            }
            run.write_json("metrics.json", &json!({"query": query, "k": k, "results": rows}))?;
        }
        Command::LinkEntities { checkpoint, split } => {
            if let Some(s) = split {
                run.cfg.split = s;
            }
            let (corpus, manifest) = run.corpus()?;
            run.record("link-entities", Some(&manifest))?;
            let model = run.load_model(&corpus, checkpoint)?;
            let report = eval::link_entities(&model, &corpus, run.cfg.split, &run.cfg.eval.fusion)?;
            run.write_json("metrics.json", &report)?;
            let line = |name: &str, m: &eval::LinkMetrics| {
                println!(
                    "{name:<12} top-1 {:.3}  top-{} {:.3}  likelihood-only top-1 {:.3}  ({} pairs)",
                    m.top1, report.top_k, m.topk, m.likelihood_top1, m.n_pairs
                )
            };
            line("all", &report.overall);
            for (tag, m) in &report.by_tag {
                line(tag, m);
            }
        }
        Command::GradCheck { seeds } => {
            run.record("grad-check", None)?;
            let report = run_suite(&VerifyOptions {
                seeds,
                ..VerifyOptions::default()
            })?;
            run.write_json("metrics.json", &report)?;
            for c in &report.cases {
                println!(
                    "{:<18} seed {:>2}  max rel error {:.2e}  ({} checked, {} kinks, {} below noise) {}",
                    c.name,
                    c.seed,
                    c.max_rel_error,
                    c.checked,
                    c.skipped_kinks,
                    c.below_noise,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "max relative error {:.2e} (tolerance {:.0e}) in {:.1}s: {}",
                report.max_rel_error,
                report.tolerance,
                report.seconds,
                if report.passed { "PASS" } else { "FAIL" }
            );
            if !report.passed {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
