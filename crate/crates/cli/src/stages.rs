//! Pipeline stages. Each stage reads its inputs through a [`StageRun`],
//! which records digests, writes outputs atomically and stores the manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context as _, Result};
use serde_json::{json, Value};

use discourse_core::cluster::{self, tsne_embed, PointRow, TsneConfig};
use discourse_core::corpus::{extract_windows, parse_corpus, Corpus, CorpusFormat, ParticleInventory};
use discourse_core::encoder::checkpoint::Checkpoint;
use discourse_core::encoder::tensor::Matrix;
use discourse_core::encoder::train::{accuracy_on, predict};
use discourse_core::encoder::{
    build_vocabulary, pack_nsp_input, pack_ppred_input, pack_sequence, train, ArchiveRecord, ClassifierHead,
    EmbeddingArchive, Encoder, EncoderConfig, Hyperparameters, PackedInput, TrainingExample,
};
use discourse_core::lir::{self, ArchiveProvider, LirManifest, Method, ReferenceProvider};
use discourse_core::metrics::{
    adjusted_rand_index, bleu, default_functions, permutation_test_ari, read_function_labels, recall_at_k,
    sentiment_match_accuracy, NgramLogistic, RankedGroup, Sentiment,
};
use discourse_core::rng;
use discourse_core::synth;
use discourse_core::taskgen::{
    build_nsp_on_ppred_test, build_nsp_test, build_nsp_train, build_ppred, from_jsonl, to_jsonl, NspExample,
    NspLabel, PPredExample, SubstitutionGroup,
};
use discourse_core::translate::{
    backtranslate_loop, load_monolingual, load_parallel, parallel_to_tsv, split_words, train_alignment,
    translate_corpus, ExternalTranslator, LexicalTable, LoopConfig, PhraseTable, Translator, WordTranslator,
};

use crate::config::Config;
use crate::exemplars::cluster_exemplars;
use crate::manifest::{self, RunManifest};
use crate::plot::{scatter_svg, ColorKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Task {
    Ppred,
    Nsp,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Ppred => "ppred",
            Task::Nsp => "nsp",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppred" => Ok(Task::Ppred),
            "nsp" => Ok(Task::Nsp),
            other => bail!("unknown task `{other}`"),
        }
    }
}

/// Shared state for one invocation.
pub struct Ctx {
    pub config: Config,
    pub out: PathBuf,
}

impl Ctx {
    pub fn seed(&self) -> u64 {
        self.config.u64("seed").expect("validated")
    }

    pub fn derived_seed(&self, key: &str) -> u64 {
        rng::derive(self.seed(), key)
    }

    fn usize(&self, key: &str) -> usize {
        self.config.usize(key).expect("validated")
    }

    fn f64(&self, key: &str) -> f64 {
        self.config.f64(key).expect("validated")
    }

    fn bool(&self, key: &str) -> bool {
        self.config.bool(key).expect("validated")
    }

    pub fn methods(&self) -> Vec<Method> {
        self.config
            .list("methods")
            .iter()
            .map(|m| m.parse().expect("validated"))
            .collect()
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.config
            .list("tasks")
            .iter()
            .map(|t| t.parse().expect("validated"))
            .collect()
    }

    pub fn particles(&self) -> Vec<String> {
        self.config.list("particles")
    }

    fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.config
            .path(key)
            .ok_or_else(|| anyhow!("config key `{key}` must name an input file"))
    }
}

/// Bookkeeping for one stage invocation.
pub struct StageRun<'a> {
    ctx: &'a Ctx,
    manifest: RunManifest,
    previous: BTreeMap<String, RunManifest>,
}

impl<'a> StageRun<'a> {
    pub fn new(ctx: &'a Ctx, stage: &str, name: &str) -> Result<Self> {
        Ok(Self {
            ctx,
            manifest: RunManifest {
                name: name.to_string(),
                stage: stage.to_string(),
                seed: ctx.seed(),
                config: ctx.config.snapshot().clone(),
                versions: manifest::versions(),
                metrics: Value::Null,
                ..Default::default()
            },
            previous: manifest::latest(&ctx.out)?,
        })
    }

    /// Path as recorded in manifests: relative to the output root when inside it.
    fn label(&self, path: &Path) -> String {
        path.strip_prefix(&self.ctx.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        if !path.exists() {
            bail!("missing input: {}", path.display());
        }
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let digest = manifest::sha256_hex(&bytes);
        let label = self.label(path);
        let producer = self
            .previous
            .values()
            .filter_map(|m| m.outputs.get(&label).map(|d| (m, d)))
            .find(|(_, d)| **d == digest);
        let produced_elsewhere = self.previous.values().any(|m| m.outputs.contains_key(&label));
        if producer.is_none() && produced_elsewhere {
            log::warn!("{label} differs from the version recorded by its producing stage; it may be stale");
        }
        self.manifest.inputs.insert(label, digest);
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        manifest::write_atomic(path, bytes)?;
        let label = self.label(path);
        self.manifest.outputs.insert(label, manifest::sha256_hex(bytes));
        Ok(())
    }

    pub fn write_rel(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.ctx.out.join(rel);
        self.write(&path, bytes)
    }

    /// Stores `metrics` as `metrics/<name>.json` and in the manifest.
    pub fn finish(mut self, metrics: Value) -> Result<PathBuf> {
        let rel = format!("metrics/{}.json", self.manifest.name);
        self.write_rel(&rel, &manifest::to_json_bytes(&metrics)?)?;
        self.manifest.metrics = metrics;
        let path = manifest::store(&self.ctx.out, &self.manifest)?;
        log::info!("{}: manifest {}", self.manifest.name, path.display());
        Ok(path)
    }
}

fn inventory(ctx: &Ctx, run: &mut StageRun<'_>) -> Result<ParticleInventory> {
    let mut inv = ParticleInventory::new(ctx.particles())?;
    if let Some(path) = ctx.config.path("particle_aliases") {
        run.read(&path)?;
        inv.load_aliases(&path)?;
    }
    Ok(inv)
}

fn load_corpus(ctx: &Ctx, run: &mut StageRun<'_>) -> Result<Corpus> {
    let text = run.read_text(&ctx.out.join("corpus.jsonl"))?;
    Ok(parse_corpus(&text, CorpusFormat::JsonlDialogue)?)
}

fn load_jsonl<T: serde::de::DeserializeOwned>(run: &mut StageRun<'_>, path: &Path) -> Result<Vec<T>> {
    let text = run.read_text(path)?;
    from_jsonl(&text).with_context(|| format!("parsing {}", path.display()))
}

fn task_paths(ctx: &Ctx) -> [PathBuf; 4] {
    let t = ctx.out.join("tasks");
    [
        t.join("ppred.jsonl"),
        t.join("nsp_train.jsonl"),
        t.join("nsp_test.jsonl"),
        t.join("nsp_substitution.jsonl"),
    ]
}

fn model_path(ctx: &Ctx, task: Task) -> PathBuf {
    ctx.out.join("models").join(format!("{task}.ckpt"))
}

fn load_checkpoint(run: &mut StageRun<'_>, path: &Path) -> Result<Checkpoint> {
    let text = run.read_text(path)?;
    Checkpoint::parse(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

// ---------------------------------------------------------------- synth

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    Dialogues,
    Language,
}

/// Writes the bundled synthetic data sets into `dir`.
pub fn synth(ctx: &Ctx, kind: SynthKind, dir: &Path, size: Option<usize>) -> Result<()> {
    let mut run = StageRun::new(ctx, "synth", &format!("synth-{}", format!("{kind:?}").to_lowercase()))?;
    let metrics = match kind {
        SynthKind::Dialogues => {
            let cfg = synth::DialogueConfig {
                dialogues: size.unwrap_or(synth::DialogueConfig::default().dialogues),
                ..Default::default()
            };
            let syn = synth::dialogues(&cfg)?;
            run.write(&dir.join("dialogues.jsonl"), syn.corpus.to_jsonl().as_bytes())?;
            let mut csv = Vec::new();
            discourse_core::metrics::write_function_labels(&mut csv, &syn.functions)?;
            run.write(&dir.join("function_labels.csv"), &csv)?;
            json!({
                "dialogues": syn.corpus.dialogue_count(),
                "utterances": syn.corpus.len(),
                "labelled_turns": syn.functions.len(),
            })
        }
        SynthKind::Language => {
            let mut cfg = synth::LanguageConfig::default();
            if let Some(n) = size {
                cfg.seed_pairs = n;
            }
            let eval = 50;
            cfg.seed_pairs += eval;
            let lang = synth::dictionary_language(&cfg)?;
            let (train, test) = lang.seed_pairs.split_at(lang.seed_pairs.len() - eval);
            run.write(&dir.join("seed_pairs.tsv"), parallel_to_tsv(train).as_bytes())?;
            run.write(&dir.join("eval.tsv"), parallel_to_tsv(test).as_bytes())?;
            let lines = |v: &[String]| v.iter().map(|l| format!("{l}\n")).collect::<String>();
            run.write(&dir.join("monolingual.txt"), lines(&lang.monolingual_source).as_bytes())?;
            run.write(&dir.join("monolingual_target.txt"), lines(&lang.monolingual_target).as_bytes())?;
            let dict: String = lang.dictionary.iter().map(|(s, t)| format!("{s}\t{t}\n")).collect();
            run.write(&dir.join("dictionary.tsv"), dict.as_bytes())?;
            json!({
                "vocabulary": lang.dictionary.len(),
                "seed_pairs": train.len(),
                "eval_pairs": test.len(),
                "monolingual": lang.monolingual_source.len(),
            })
        }
    };
    run.finish(metrics)?;
    Ok(())
}

// ---------------------------------------------------------------- ingest

pub fn ingest(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::new(ctx, "ingest", "ingest")?;
    let inv = inventory(ctx, &mut run)?;
    let path = ctx.required_path("corpus")?;
    let format: CorpusFormat = ctx.config.str("corpus_format").parse()?;
    let text = run.read_text(&path)?;
    let corpus = parse_corpus(&text, format).with_context(|| format!("parsing {}", path.display()))?;
    if corpus.is_empty() {
        bail!("{} contains no utterances", path.display());
    }
    let windows = extract_windows(&corpus, &inv);
    run.write_rel("corpus.jsonl", corpus.to_jsonl().as_bytes())?;
    let counts: BTreeMap<String, usize> = discourse_core::corpus::particle_counts(&windows, &inv)
        .into_iter()
        .collect();
    run.finish(json!({
        "utterances": corpus.len(),
        "dialogues": corpus.dialogue_count(),
        "windows": windows.len(),
        "windows_per_particle": counts,
    }))?;
    Ok(())
}

// ---------------------------------------------------------------- make-tasks

pub fn make_tasks(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::new(ctx, "make-tasks", "make-tasks")?;
    let inv = inventory(ctx, &mut run)?;
    let corpus = load_corpus(ctx, &mut run)?;
    let ppred = build_ppred(&corpus, &inv, ctx.derived_seed("tasks/ppred"))?;
    let train = build_nsp_train(&corpus, &inv, ctx.derived_seed("tasks/nsp-train"))?;
    let test = build_nsp_test(&corpus, &inv, ctx.derived_seed("tasks/nsp-test"))?;
    let subs = build_nsp_on_ppred_test(&test.items, &inv);
    let [p_ppred, p_train, p_test, p_subs] = task_paths(ctx);
    run.write(&p_ppred, to_jsonl(&ppred).as_bytes())?;
    run.write(&p_train, to_jsonl(&train.items).as_bytes())?;
    run.write(&p_test, to_jsonl(&test.items).as_bytes())?;
    run.write(&p_subs, to_jsonl(&subs.items).as_bytes())?;

    let labels = |xs: &[NspExample]| -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for x in xs {
            *m.entry(x.label.to_string()).or_insert(0) += 1;
        }
        m
    };
    let mut gold: BTreeMap<String, usize> = BTreeMap::new();
    for e in &ppred {
        *gold.entry(e.gold.clone()).or_insert(0) += 1;
    }
    run.finish(json!({
        "ppred": {"examples": ppred.len(), "per_particle": gold},
        "nsp_train": {"examples": train.items.len(), "skipped": train.skipped, "labels": labels(&train.items)},
        "nsp_test": {
            "groups": test.items.len() / discourse_core::taskgen::TEST_CANDIDATES,
            "skipped": test.skipped,
            "labels": labels(&test.items),
        },
        "nsp_substitution": {"groups": subs.items.len(), "skipped": subs.skipped},
    }))?;
    Ok(())
}

// ---------------------------------------------------------------- train

fn encoder_config(ctx: &Ctx, vocab_size: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: ctx.usize("d_model"),
        layers: ctx.usize("layers"),
        heads: ctx.usize("heads"),
        ffn_dim: ctx.usize("ffn_dim"),
        max_len: ctx.usize("max_len"),
        dropout: ctx.f64("dropout"),
        seed,
        ..Default::default()
    }
}

fn nsp_labels() -> Vec<String> {
    NspLabel::ALL.iter().map(|l| l.to_string()).collect()
}

/// Packs the examples of a task for the given vocabulary.
fn ppred_examples(
    data: &[PPredExample],
    inv: &ParticleInventory,
    vocab: &discourse_core::encoder::Vocabulary,
    max_len: usize,
) -> Result<Vec<TrainingExample>> {
    data.iter()
        .map(|e| {
            Ok(TrainingExample {
                input: pack_ppred_input(e, vocab, max_len)?,
                label: inv
                    .index_of(&e.gold)
                    .ok_or_else(|| anyhow!("gold particle `{}` is not in the inventory", e.gold))?,
            })
        })
        .collect()
}

fn nsp_examples(
    data: &[NspExample],
    vocab: &discourse_core::encoder::Vocabulary,
    max_len: usize,
) -> Result<Vec<TrainingExample>> {
    data.iter()
        .map(|e| {
            Ok(TrainingExample {
                input: pack_nsp_input(e, vocab, max_len)?,
                label: e.label.class_index(),
            })
        })
        .collect()
}

pub fn train_task(ctx: &Ctx, task: Task) -> Result<()> {
    let mut run = StageRun::new(ctx, "train", &format!("train-{task}"))?;
    let inv = inventory(ctx, &mut run)?;
    let corpus = load_corpus(ctx, &mut run)?;
    let vocab = build_vocabulary(&corpus, ctx.usize("min_frequency"))?;
    let max_len = ctx.usize("max_len");
    let [p_ppred, p_train, ..] = task_paths(ctx);
    let (data, labels) = match task {
        Task::Ppred => {
            let raw: Vec<PPredExample> = load_jsonl(&mut run, &p_ppred)?;
            (ppred_examples(&raw, &inv, &vocab, max_len)?, inv.particles().to_vec())
        }
        Task::Nsp => {
            let raw: Vec<NspExample> = load_jsonl(&mut run, &p_train)?;
            (nsp_examples(&raw, &vocab, max_len)?, nsp_labels())
        }
    };
    let seed = ctx.derived_seed(&format!("train/{task}"));
    let mut encoder = Encoder::new(encoder_config(ctx, vocab.len(), rng::derive(seed, "encoder")))?;
    let mut head = ClassifierHead::new(
        ctx.usize("d_model"),
        ctx.usize("head_hidden"),
        labels,
        rng::derive(seed, "head"),
    )?;
    let hp = Hyperparameters {
        learning_rate: ctx.f64("learning_rate"),
        batch_size: ctx.usize("batch_size"),
        epochs: ctx.usize("epochs"),
        seed: rng::derive(seed, "batches"),
    };
    let report = train(&mut encoder, &mut head, &data, &hp)?;
    let train_accuracy = accuracy_on(&encoder, &head, &data)?;
    let ckpt = Checkpoint { encoder, head, vocab };
    run.write(&model_path(ctx, task), ckpt.to_text().as_bytes())?;
    run.finish(json!({
        "task": task.to_string(),
        "examples": data.len(),
        "parameters": ckpt.encoder.parameter_count(),
        "hyperparameters": hp,
        "epoch_losses": report.epoch_losses,
        "train_accuracy": train_accuracy,
    }))?;
    Ok(())
}

// ---------------------------------------------------------------- embed

/// Token-level archive of every particle window, original and masked, as
/// `[CLS] utterance [SEP]` without context.
pub fn embed(ctx: &Ctx, task: Task) -> Result<()> {
    let mut run = StageRun::new(ctx, "embed", &format!("embed-{task}"))?;
    let inv = inventory(ctx, &mut run)?;
    let corpus = load_corpus(ctx, &mut run)?;
    let ckpt = load_checkpoint(&mut run, &model_path(ctx, task))?;
    let windows = extract_windows(&corpus, &inv);
    let tag = format!("{task}-encoder");
    let mut archive = EmbeddingArchive::new(ckpt.encoder.dim(), Some(tag.clone()))?;
    for w in &windows {
        let masked = discourse_core::corpus::mask_particle(w.last(), &w.occurrence)?;
        for (u, is_masked) in [(w.last(), false), (&masked, true)] {
            let input = pack_sequence(&[], &u.tokens, &ckpt.vocab, ckpt.encoder.config.max_len)?;
            let enc = ckpt.encoder.encode(&input)?;
            archive.insert(
                ArchiveProvider::record_id(&w.key(), is_masked),
                ArchiveRecord::Tokens(enc.vectors),
            )?;
        }
    }
    run.write_rel(&format!("embeddings/{task}.emb"), archive.to_text().as_bytes())?;
    run.finish(json!({
        "model_tag": tag,
        "records": archive.len(),
        "dim": archive.dim(),
        "windows": windows.len(),
    }))?;
    Ok(())
}

// ---------------------------------------------------------------- lir

fn lir_dir(ctx: &Ctx, task: Task) -> PathBuf {
    ctx.out.join("lir").join(task.to_string())
}

/// Representations for every window. With `archive`, vectors come from that
/// embedding archive instead of the trained model.
pub fn lir_stage(ctx: &Ctx, task: Task, archive: Option<&Path>) -> Result<()> {
    let mut run = StageRun::new(ctx, "lir", &format!("lir-{task}"))?;
    let inv = inventory(ctx, &mut run)?;
    let corpus = load_corpus(ctx, &mut run)?;
    let windows = extract_windows(&corpus, &inv);
    if windows.is_empty() {
        bail!("the corpus has no particle-final windows");
    }
    let methods = ctx.methods();
    let (reps, manifest) = match archive {
        Some(path) => {
            let text = run.read_text(path)?;
            let archive = EmbeddingArchive::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
            let tag = archive
                .model_tag
                .clone()
                .unwrap_or_else(|| format!("archive:{}", path.file_name().unwrap_or_default().to_string_lossy()));
            let provider = ArchiveProvider { archive: &archive, tag };
            lir::extract_all(&provider, &windows, &methods, &inv)?
        }
        None => {
            let ckpt = load_checkpoint(&mut run, &model_path(ctx, task))?;
            let provider = ReferenceProvider {
                encoder: &ckpt.encoder,
                vocab: &ckpt.vocab,
                tag: format!("{task}-encoder"),
                with_context: ctx.bool("lir_context"),
            };
            lir::extract_all(&provider, &windows, &methods, &inv)?
        }
    };
    let dir = lir_dir(ctx, task);
    let archive = lir::to_archive(&reps, manifest.dim, &manifest.provider)?;
    run.write(&dir.join("representations.emb"), archive.to_text().as_bytes())?;
    run.write(&dir.join("manifest.json"), &manifest::to_json_bytes(&manifest)?)?;
    run.finish(json!({
        "provider": manifest.provider,
        "dim": manifest.dim,
        "windows": windows.len(),
        "counts": manifest.counts,
    }))?;
    Ok(())
}

// ---------------------------------------------------------------- cluster

pub fn cluster_dir(ctx: &Ctx, task: Task, method: Method, scope: &str) -> PathBuf {
    ctx.out
        .join("cluster")
        .join(task.to_string())
        .join(method.to_string())
        .join(scope)
}

/// Perplexity used for `n` points: the configured value, lowered to
/// `(n − 1) / 3` when the input is too small for it.
pub fn effective_perplexity(configured: f64, n: usize) -> f64 {
    let cap = (n.saturating_sub(1)) as f64 / 3.0;
    if configured > cap {
        cap.max(1.0)
    } else {
        configured
    }
}

fn cluster_scope(
    ctx: &Ctx,
    run: &mut StageRun<'_>,
    task: Task,
    method: Method,
    scope: &str,
    reps: &[lir::ParticleRepresentation],
    texts: &BTreeMap<String, String>,
) -> Result<Value> {
    let n = reps.len();
    let min_clusters = if scope == "all" {
        ctx.usize("min_clusters")
    } else {
        ctx.usize("particle_min_clusters")
    };
    if n < 4 {
        bail!("{n} representation(s) is too few to embed");
    }
    let x = lir::to_matrix(reps);
    let perplexity = effective_perplexity(ctx.f64("tsne_perplexity"), n);
    if perplexity != ctx.f64("tsne_perplexity") {
        log::warn!("{task}/{method}/{scope}: perplexity lowered to {perplexity:.3} for {n} points");
    }
    let tsne_cfg = TsneConfig {
        perplexity,
        iterations: ctx.usize("tsne_iterations"),
        learning_rate: ctx.f64("tsne_learning_rate"),
        exaggeration_iterations: TsneConfig::default().exaggeration_iterations.min(ctx.usize("tsne_iterations")),
        seed: ctx.derived_seed(&format!("tsne/{task}/{method}/{scope}")),
        ..TsneConfig::default()
    };
    let emb = tsne_embed(&x, &tsne_cfg)?;
    let y: &Matrix = &emb.points;
    let ids: Vec<String> = reps.iter().map(|r| r.key.to_string()).collect();
    let points: Vec<(f64, f64)> = (0..n).map(|i| (y.at(i, 0), y.at(i, 1))).collect();
    let dir = cluster_dir(ctx, task, method, scope);

    let rows: Vec<PointRow> = reps
        .iter()
        .zip(&points)
        .map(|(r, &(px, py))| PointRow {
            id: r.key.to_string(),
            x: px,
            y: py,
            particle: r.particle.clone(),
        })
        .collect();
    let mut buf = Vec::new();
    cluster::write_points(&mut buf, &rows)?;
    run.write(&dir.join("points.csv"), &buf)?;
    let particles: Vec<String> = reps.iter().map(|r| r.particle.clone()).collect();
    let title = format!("{task} {method} {scope}");
    run.write(
        &dir.join("particles.svg"),
        scatter_svg(&points, &particles, ColorKey::Particle, &title)?.as_bytes(),
    )?;

    let grid = cluster::default_eps_grid(y, ctx.usize("eps_steps"));
    let min_pts = ctx.config.usize_list("min_pts")?;
    let base = json!({
        "points": n,
        "perplexity": perplexity,
        "kl_after_exaggeration": emb.kl_after_exaggeration,
        "kl_final": emb.kl_final,
        "silhouette_space": "tsne-2d",
        "min_clusters": min_clusters,
        "max_noise_fraction": ctx.f64("max_noise_fraction"),
    });
    let sweep = match cluster::sweep_dbscan_capped(y, &grid, &min_pts, min_clusters, ctx.f64("max_noise_fraction")) {
        Ok(s) => s,
        Err(e @ discourse_core::Error::NoFeasibleCell(_)) => {
            let mut v = base;
            v["silhouette"] = Value::Null;
            v["error"] = json!(e.to_string());
            // Stale cluster outputs from earlier runs must not be mistaken for this one.
            let _ = std::fs::remove_file(dir.join("assignment.csv"));
            return Ok(v);
        }
        Err(e) => return Err(e.into()),
    };
    let mut buf = Vec::new();
    cluster::write_assignment(&mut buf, &ids, &sweep.assignment)?;
    run.write(&dir.join("assignment.csv"), &buf)?;
    run.write(&dir.join("sweep.json"), &manifest::to_json_bytes(&sweep)?)?;
    let cluster_keys: Vec<String> = sweep
        .assignment
        .labels
        .iter()
        .map(|l| l.map_or("noise".to_string(), |c| c.to_string()))
        .collect();
    run.write(
        &dir.join("clusters.svg"),
        scatter_svg(&points, &cluster_keys, ColorKey::Cluster, &title)?.as_bytes(),
    )?;
    let ex = cluster_exemplars(&ids, &points, &sweep.assignment.labels, texts, ctx.usize("exemplars"))?;
    run.write(&dir.join("exemplars.json"), &manifest::to_json_bytes(&ex)?)?;

    let mut v = base;
    v["silhouette"] = json!(sweep.score);
    v["eps"] = json!(sweep.params.eps);
    v["min_pts"] = json!(sweep.params.min_pts);
    v["clusters"] = json!(sweep.assignment.cluster_count());
    v["noise"] = json!(sweep.assignment.noise_count());
    v["cluster_sizes"] = json!(sweep.assignment.cluster_sizes());
    Ok(v)
}

pub struct ClusterInput<'p> {
    pub archive: Option<&'p Path>,
    pub lir_manifest: Option<&'p Path>,
}

/// Embeds and clusters one method's representations, combined and per particle.
pub fn cluster_stage(ctx: &Ctx, task: Task, method: Method, scopes: &[String], input: &ClusterInput<'_>) -> Result<()> {
    let mut run = StageRun::new(ctx, "cluster", &format!("cluster-{task}-{method}"))?;
    let corpus = load_corpus(ctx, &mut run)?;
    let dir = lir_dir(ctx, task);
    let archive_path = input.archive.map_or_else(|| dir.join("representations.emb"), Path::to_path_buf);
    let manifest_path = input.lir_manifest.map_or_else(|| dir.join("manifest.json"), Path::to_path_buf);
    let manifest_text = run.read_text(&manifest_path)?;
    let lir_manifest: LirManifest =
        serde_json::from_str(&manifest_text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    let archive_text = run.read_text(&archive_path)?;
    let archive = EmbeddingArchive::parse(&archive_text).with_context(|| format!("parsing {}", archive_path.display()))?;
    let reps = lir::from_archive(&archive, &lir_manifest, method)
        .with_context(|| format!("reading {method} representations from {}", archive_path.display()))?;
    let texts: BTreeMap<String, String> = corpus
        .utterances()
        .iter()
        .map(|u| (u.key().to_string(), u.text.clone()))
        .collect();

    let mut results = BTreeMap::new();
    for scope in scopes {
        let subset: Vec<_> = if scope == "all" {
            reps.clone()
        } else {
            reps.iter().filter(|r| &r.particle == scope).cloned().collect()
        };
        let v = match cluster_scope(ctx, &mut run, task, method, scope, &subset, &texts) {
            Ok(v) => v,
            Err(e) if scope != "all" => {
                log::warn!("{task}/{method}/{scope}: {e:#}");
                json!({"points": subset.len(), "silhouette": null, "error": format!("{e:#}")})
            }
            Err(e) => return Err(e.context(format!("clustering {task}/{method}/{scope}"))),
        };
        results.insert(scope.clone(), v);
    }
    if results.get("all").is_some_and(|v| v["silhouette"].is_null()) {
        let msg = results["all"]["error"].as_str().unwrap_or("no feasible cell").to_string();
        run.finish(json!({"task": task.to_string(), "method": method.to_string(), "model_tag": lir_manifest.provider, "scopes": results}))?;
        bail!("clustering {task}/{method}/all: {msg}");
    }
    run.finish(json!({
        "task": task.to_string(),
        "method": method.to_string(),
        "model_tag": lir_manifest.provider,
        "scopes": results,
    }))?;
    Ok(())
}

// ---------------------------------------------------------------- eval-rank

fn grouped<T, K: Ord + Clone>(items: &[T], key: impl Fn(&T) -> K) -> Vec<(K, Vec<&T>)> {
    let mut out: Vec<(K, Vec<&T>)> = Vec::new();
    for it in items {
        let k = key(it);
        match out.last_mut() {
            Some((last, v)) if *last == k => v.push(it),
            _ => out.push((k, vec![it])),
        }
    }
    out
}

fn next_score(ckpt: &Checkpoint, input: &PackedInput) -> Result<f64> {
    Ok(predict(&ckpt.encoder, &ckpt.head, input)?[NspLabel::Next.class_index()])
}

fn nsp_groups(ckpt: &Checkpoint, data: &[NspExample]) -> Result<Vec<RankedGroup>> {
    let max_len = ckpt.encoder.config.max_len;
    grouped(data, |e| e.group_id.clone())
        .into_iter()
        .map(|(id, members)| {
            let scores = members
                .iter()
                .map(|e| next_score(ckpt, &pack_nsp_input(e, &ckpt.vocab, max_len)?))
                .collect::<Result<Vec<_>>>()?;
            let gold = members
                .iter()
                .position(|e| e.label == NspLabel::Next)
                .ok_or_else(|| anyhow!("group {id} has no positive"))?;
            Ok(RankedGroup { group_id: id, scores, gold })
        })
        .collect()
}

fn substitution_groups(ckpt: &Checkpoint, data: &[SubstitutionGroup]) -> Result<Vec<RankedGroup>> {
    let max_len = ckpt.encoder.config.max_len;
    data.iter()
        .map(|g| {
            let scores = g
                .candidates
                .iter()
                .map(|c| {
                    let ex = NspExample {
                        group_id: g.group_id.clone(),
                        context: g.context.clone(),
                        candidate: c.clone(),
                        label: NspLabel::Next,
                    };
                    next_score(ckpt, &pack_nsp_input(&ex, &ckpt.vocab, max_len)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RankedGroup {
                group_id: g.group_id.clone(),
                scores,
                gold: g.gold,
            })
        })
        .collect()
}

fn recall_entry(groups: &[RankedGroup]) -> Result<Value> {
    if groups.is_empty() {
        return Ok(json!({"groups": 0, "recall_at_1": null}));
    }
    Ok(json!({"groups": groups.len(), "recall_at_1": recall_at_k(groups, 1)?}))
}

pub fn eval_rank(ctx: &Ctx, task: Task) -> Result<()> {
    let mut run = StageRun::new(ctx, "eval-rank", &format!("eval-rank-{task}"))?;
    let inv = inventory(ctx, &mut run)?;
    let ckpt = load_checkpoint(&mut run, &model_path(ctx, task))?;
    let [p_ppred, p_train, p_test, p_subs] = task_paths(ctx);
    let metrics = match task {
        Task::Ppred => {
            let raw: Vec<PPredExample> = load_jsonl(&mut run, &p_ppred)?;
            let data = ppred_examples(&raw, &inv, &ckpt.vocab, ckpt.encoder.config.max_len)?;
            json!({"task": "ppred", "ppred_accuracy": accuracy_on(&ckpt.encoder, &ckpt.head, &data)?, "examples": data.len()})
        }
        Task::Nsp => {
            let train: Vec<NspExample> = load_jsonl(&mut run, &p_train)?;
            let test: Vec<NspExample> = load_jsonl(&mut run, &p_test)?;
            let subs: Vec<SubstitutionGroup> = load_jsonl(&mut run, &p_subs)?;
            json!({
                "task": "nsp",
                "r2_at_1": recall_entry(&nsp_groups(&ckpt, &train)?)?,
                "r10_at_1": recall_entry(&nsp_groups(&ckpt, &test)?)?,
                "r3_at_1_substitution": recall_entry(&substitution_groups(&ckpt, &subs)?)?,
            })
        }
    };
    run.finish(metrics)?;
    Ok(())
}

// ---------------------------------------------------------------- eval-ari

pub fn eval_ari(ctx: &Ctx, task: Task, method: Method) -> Result<()> {
    let mut run = StageRun::new(ctx, "eval-ari", &format!("eval-ari-{task}-{method}"))?;
    let labels_path = ctx.required_path("function_labels")?;
    let bytes = run.read(&labels_path)?;
    let labels = read_function_labels(bytes.as_slice(), &default_functions())
        .with_context(|| format!("reading {}", labels_path.display()))?;
    let by_key: BTreeMap<String, &str> = labels
        .iter()
        .map(|l| (l.utterance_key.to_string(), l.function_label.as_str()))
        .collect();
    let m = ctx.usize("permutations");
    let mut per = BTreeMap::new();
    for particle in ctx.particles() {
        let path = cluster_dir(ctx, task, method, &particle).join("assignment.csv");
        if !path.exists() {
            per.insert(particle.clone(), json!({"ari": null, "note": format!("no clustering at {}", path.display())}));
            continue;
        }
        let bytes = run.read(&path)?;
        let (ids, assignment) = cluster::read_assignment(bytes.as_slice())?;
        let mut clusters = Vec::new();
        let mut functions = Vec::new();
        let mut unlabelled = 0;
        for (id, l) in ids.iter().zip(&assignment.labels) {
            match (l, by_key.get(id)) {
                (Some(c), Some(f)) => {
                    clusters.push(*c);
                    functions.push(*f);
                }
                (Some(_), None) => unlabelled += 1,
                (None, _) => {}
            }
        }
        let base = json!({
            "clusters": assignment.cluster_count(),
            "noise": assignment.noise_count(),
            "labelled_points": clusters.len(),
            "unlabelled_points": unlabelled,
        });
        let mut v = base;
        if clusters.len() < 2 {
            v["ari"] = Value::Null;
            v["note"] = json!("fewer than two labelled, clustered points");
        } else {
            let ari = adjusted_rand_index(&clusters, &functions)?;
            v["ari"] = json!(ari);
            match permutation_test_ari(&clusters, &functions, m, ctx.derived_seed(&format!("ari/{task}/{method}/{particle}"))) {
                Ok(t) => {
                    v["p_value"] = json!(t.p_value);
                    v["permutations"] = json!(t.permutations);
                    v["at_least_observed"] = json!(t.at_least_observed);
                }
                Err(e) => v["note"] = json!(e.to_string()),
            }
        }
        per.insert(particle, v);
    }
    run.finish(json!({
        "task": task.to_string(),
        "method": method.to_string(),
        "noise_policy": "excluded",
        "particles": per,
    }))?;
    Ok(())
}

// ---------------------------------------------------------------- translation

fn builtin_translator(ctx: &Ctx, run: &mut StageRun<'_>) -> Result<(WordTranslator, Value)> {
    let aliases = match ctx.config.path("mt_aliases") {
        Some(p) => PhraseTable::parse_tsv(&run.read_text(&p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => PhraseTable::default(),
    };
    let (table, info) = match ctx.config.path("mt_table") {
        Some(p) => {
            let table = LexicalTable::parse_tsv(&run.read_text(&p)?).with_context(|| format!("parsing {}", p.display()))?;
            (table, json!({"table": run.label(&p)}))
        }
        None => {
            let p = ctx.required_path("mt_seed_pairs")?;
            let pairs = discourse_core::translate::parse_parallel(&run.read_text(&p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            let a = train_alignment(&pairs, ctx.usize("em_iterations"))?;
            let ll = a.log_likelihood.last().copied();
            (a.table, json!({"trained_on": run.label(&p), "pairs": pairs.len(), "log_likelihood": ll}))
        }
    };
    Ok((WordTranslator { table, aliases }, info))
}

fn translator(ctx: &Ctx, run: &mut StageRun<'_>) -> Result<(Box<dyn Translator>, Value)> {
    let command = ctx.config.str("translator");
    if command.trim().is_empty() {
        let (t, info) = builtin_translator(ctx, run)?;
        return Ok((Box::new(t), json!({"kind": "builtin", "model": info})));
    }
    let mut parts = command.split_whitespace().map(String::from);
    let program = parts.next().expect("non-empty command");
    Ok((
        Box::new(ExternalTranslator {
            program: program.clone(),
            args: parts.collect(),
        }),
        json!({"kind": "external", "command": command}),
    ))
}

pub fn translate_stage(ctx: &Ctx, input: &Path, output: Option<&Path>) -> Result<()> {
    let mut run = StageRun::new(ctx, "translate", "translate")?;
    let lines: Vec<String> = run.read_text(input)?.lines().map(String::from).collect();
    let (t, info) = translator(ctx, &mut run)?;
    let out = translate_corpus(t.as_ref(), &lines)?;
    let text: String = out.iter().map(|l| format!("{l}\n")).collect();
    let out_path = output.map_or_else(|| ctx.out.join("mt/translations.txt"), Path::to_path_buf);
    run.write(&out_path, text.as_bytes())?;
    run.finish(json!({"lines": lines.len(), "translator": info}))?;
    Ok(())
}

pub fn backtranslate(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::new(ctx, "backtranslate", "backtranslate")?;
    let seed_path = ctx.required_path("mt_seed_pairs")?;
    let mono_path = ctx.required_path("mt_monolingual")?;
    run.read(&seed_path)?;
    run.read(&mono_path)?;
    let seeds = load_parallel(&seed_path)?;
    let mono = load_monolingual(&mono_path)?;
    let cfg = LoopConfig {
        iterations: ctx.usize("bt_iterations"),
        em_iterations: ctx.usize("em_iterations"),
        max_length_ratio: ctx.f64("max_length_ratio"),
        min_source_length: ctx.usize("min_source_length"),
        heldout_fraction: ctx.f64("heldout_fraction"),
        reverse: ctx.bool("bt_reverse"),
        seed: ctx.derived_seed("backtranslate"),
    };
    let out = backtranslate_loop(&seeds, &mono, &cfg)?;
    run.write_rel("mt/augmented.tsv", parallel_to_tsv(&out.pairs).as_bytes())?;
    run.write_rel("mt/heldout.tsv", parallel_to_tsv(&out.heldout).as_bytes())?;
    run.write_rel("mt/table.tsv", out.table.to_tsv().as_bytes())?;
    let iterations: Vec<Value> = out
        .iterations
        .iter()
        .map(|r| {
            json!({
                "iteration": r.iteration,
                "pairs": r.pairs,
                "synthetic_generated": r.synthetic_generated,
                "synthetic_added": r.synthetic_added,
                "heldout_bleu": r.heldout_bleu.score,
                "log_likelihood": r.log_likelihood,
            })
        })
        .collect();
    run.finish(json!({
        "loop": cfg,
        "seed_pairs": seeds.len(),
        "heldout_pairs": out.heldout.len(),
        "final_pairs": out.pairs.len(),
        "bleu_trace": out.bleu_trace(),
        "iterations": iterations,
    }))?;
    Ok(())
}

fn parse_sentiment(text: &str, path: &Path) -> Result<Vec<(String, Sentiment)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (t, label) = l
                .rsplit_once('\t')
                .ok_or_else(|| anyhow!("{}:{}: expected `text<TAB>label`", path.display(), i + 1))?;
            let s = match label.trim() {
                "positive" | "pos" | "1" => Sentiment::Positive,
                "negative" | "neg" | "0" => Sentiment::Negative,
                other => bail!("{}:{}: unknown sentiment `{other}`", path.display(), i + 1),
            };
            Ok((t.to_string(), s))
        })
        .collect()
}

pub fn eval_mt(ctx: &Ctx) -> Result<()> {
    let mut run = StageRun::new(ctx, "eval-mt", "eval-mt")?;
    let eval_path = ctx.required_path("mt_eval")?;
    let pairs = discourse_core::translate::parse_parallel(&run.read_text(&eval_path)?)
        .with_context(|| format!("parsing {}", eval_path.display()))?;
    if pairs.is_empty() {
        bail!("{} has no evaluation pairs", eval_path.display());
    }
    let (t, info) = translator(ctx, &mut run)?;
    let sources: Vec<String> = pairs.iter().map(|p| p.source.join(" ")).collect();
    let manual: Vec<String> = pairs.iter().map(|p| p.target.join(" ")).collect();
    let machine = translate_corpus(t.as_ref(), &sources)?;
    let hyp: Vec<Vec<String>> = machine.iter().map(|l| split_words(l)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
    let score = bleu(&hyp, &refs, 4)?;
    let text: String = machine.iter().map(|l| format!("{l}\n")).collect();
    run.write_rel("mt/eval_translations.txt", text.as_bytes())?;
    let sentiment = match ctx.config.path("sentiment_train") {
        Some(p) => {
            let examples = parse_sentiment(&run.read_text(&p)?, &p)?;
            let clf = NgramLogistic::train(&examples, 200, 0.5, 1e-3)?;
            let m = sentiment_match_accuracy(&manual, &machine, &clf)?;
            json!({"classifier": "ngram-logistic", "training_examples": examples.len(), "match": m})
        }
        None => Value::Null,
    };
    run.finish(json!({
        "pairs": pairs.len(),
        "bleu": score.score * 100.0,
        "bleu_detail": score,
        "sentiment": sentiment,
        "translator": info,
    }))?;
    Ok(())
}
