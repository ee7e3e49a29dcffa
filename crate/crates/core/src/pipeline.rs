//! The build, sample, train, eval, answer and synth commands as library
//! functions. Each writes its artifacts under an output directory and
//! records the [`RunConfig`] next to them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::dsl::{parse, BoundQuery, GeneralQueryType};
use crate::encoding::{EncodingKind, EncodingSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, random_expected_report, write_rank_dump, Report, Timing};
use crate::kg::{
    load_triples, save_triples, split_edges, GraphFile, GraphStats, KnowledgeGraph, SplitGraphs, SyntheticConfig,
    Vocab, DEFAULT_EDGE_CAP,
};
use crate::model::{candidates, Checkpoint, Model, ModelConfig, ModelKind, Scorer, StepRecord, TrainConfig, TrainSet, Trainer};
use crate::sampler::{
    answer_query, read_records, sample_dataset, write_records, SampleConfig, ShapeStats, Split, SplitCounts,
    MAX_RETRIES, NUMERIC_FRACTION,
};

pub const RELATIONS_FILE: &str = "relations.tsv";
pub const ATTRIBUTES_FILE: &str = "attributes.tsv";
pub const TYPES_FILE: &str = "types.tsv";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLE_STATS_FILE: &str = "sample_stats.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const TRAIN_TIMING_FILE: &str = "train_timing.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const RANKS_FILE: &str = "ranks.tsv";
pub const BASELINE_FILE: &str = "random_baseline.json";
pub const TIMING_JSON: &str = "timing.json";
pub const TIMING_TEXT: &str = "timing.txt";

pub fn graph_file(split: Split) -> String {
    format!("graph_{}.json", split.name())
}

pub fn queries_file(split: Split) -> String {
    format!("queries_{}.jsonl", split.name())
}

/// Settings shared by all commands. Loaded from JSON; missing fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Entity steps and numeric steps per training cycle.
    pub alternation: (usize, usize),
    /// Global gradient norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub steps: u64,
    pub shape_counts: BTreeMap<GeneralQueryType, SplitCounts>,
    pub numeric_fraction: f64,
    pub encoding: EncodingKind,
    pub model: ModelKind,
    /// Train the per-type prior of value densities.
    pub learn_prior: bool,
    /// Cap on sampled numerical edges per comparison relation.
    pub edge_cap: usize,
    /// Input paths as given on the command line.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub paths: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: 0,
            dim: 16,
            lr: t.lr,
            batch_size: t.batch_size,
            alternation: (t.entity_steps, t.numeric_steps),
            clip_norm: t.clip_norm,
            steps: 5000,
            shape_counts: GeneralQueryType::ALL
                .iter()
                .map(|&s| {
                    (
                        s,
                        SplitCounts {
                            train: 500,
                            val: 50,
                            test: 50,
                        },
                    )
                })
                .collect(),
            numeric_fraction: NUMERIC_FRACTION,
            encoding: EncodingKind::Sinusoidal,
            model: ModelKind::Nrn,
            learn_prior: false,
            edge_cap: DEFAULT_EDGE_CAP,
            paths: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            entity_steps: self.alternation.0,
            numeric_steps: self.alternation.1,
            clip_norm: self.clip_norm,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            counts: self.shape_counts.clone(),
            numeric_fraction: self.numeric_fraction,
            max_retries: MAX_RETRIES,
            attempts_per_query: 20,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Sizes of the synthetic graph written by [`cmd_synth`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub entities: usize,
    pub relations: usize,
    pub attribute_types: usize,
    pub values: usize,
    pub density: f64,
    pub communities: usize,
    pub affinity: f64,
    pub attribute_coverage: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            entities: 200,
            relations: 4,
            attribute_types: 3,
            values: 60,
            density: 0.02,
            communities: 4,
            affinity: 0.8,
            attribute_coverage: 0.5,
        }
    }
}

impl SynthOptions {
    pub fn generate(&self, seed: u64) -> KnowledgeGraph {
        SyntheticConfig {
            communities: self.communities,
            affinity: self.affinity,
            attribute_coverage: self.attribute_coverage,
            ..SyntheticConfig::new(
                self.entities,
                self.relations,
                self.attribute_types,
                self.values,
                self.density,
                seed,
            )
        }
        .generate()
    }
}

/// Writes a synthetic graph as triple files.
pub fn cmd_synth(out_dir: &Path, opts: &SynthOptions, seed: u64) -> Result<GraphStats> {
    create_dir(out_dir)?;
    let g = opts.generate(seed);
    save_triples(
        &g,
        &out_dir.join(RELATIONS_FILE),
        &out_dir.join(ATTRIBUTES_FILE),
        &out_dir.join(TYPES_FILE),
    )?;
    Ok(g.stats())
}

/// Input triple files of [`cmd_build`].
#[derive(Debug, Clone)]
pub struct TripleFiles {
    pub relations: PathBuf,
    pub attributes: PathBuf,
    pub types: PathBuf,
}

impl TripleFiles {
    /// The three files under `dir` with their default names.
    pub fn in_dir(dir: &Path) -> Self {
        TripleFiles {
            relations: dir.join(RELATIONS_FILE),
            attributes: dir.join(ATTRIBUTES_FILE),
            types: dir.join(TYPES_FILE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub seed: u64,
    pub edge_cap: usize,
    pub stats: BTreeMap<Split, GraphStats>,
}

/// Loads triples, splits edges 8:1:1, adds sampled numerical edges and
/// writes the three cumulative graphs.
pub fn cmd_build(inputs: &TripleFiles, out_dir: &Path, cfg: &RunConfig) -> Result<BuildManifest> {
    let g = load_triples(&inputs.relations, &inputs.attributes, &inputs.types)?;
    let splits = split_edges(&g, cfg.seed)?.augment_numerical(cfg.edge_cap, cfg.seed)?;
    create_dir(out_dir)?;
    let mut stats = BTreeMap::new();
    for (split, graph) in Split::ALL.into_iter().zip([&splits.train, &splits.val, &splits.test]) {
        graph.save(&out_dir.join(graph_file(split)))?;
        stats.insert(split, graph.stats());
    }
    let manifest = BuildManifest {
        seed: cfg.seed,
        edge_cap: cfg.edge_cap,
        stats,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    info!("built graphs in {}", out_dir.display());
    Ok(manifest)
}

/// Reads the graphs written by [`cmd_build`], sharing one vocabulary.
pub fn load_splits(dir: &Path) -> Result<SplitGraphs> {
    let files = Split::ALL
        .into_iter()
        .map(|s| {
            let p = dir.join(graph_file(s));
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            GraphFile::from_json(&text)
        })
        .collect::<Result<Vec<_>>>()?;
    let vocab = Arc::new(files[0].vocab()?);
    let mut graphs = Vec::with_capacity(3);
    for f in files {
        if f.vocab()?.entity_names() != vocab.entity_names() || f.values.len() != vocab.num_values() {
            return Err(Error::InvalidGraph("split graphs do not share a vocabulary".into()));
        }
        graphs.push(f.into_graph_with(vocab.clone())?);
    }
    let test = graphs.pop().expect("three graphs");
    let val = graphs.pop().expect("three graphs");
    let train = graphs.pop().expect("three graphs");
    Ok(SplitGraphs { train, val, test })
}

pub type SampleStats = BTreeMap<Split, BTreeMap<GeneralQueryType, ShapeStats>>;

/// Samples train, validation and test queries from built graphs.
pub fn cmd_sample(graph_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<SampleStats> {
    let splits = load_splits(graph_dir)?;
    let data = sample_dataset(&splits, &cfg.sample_config(), cfg.seed)?;
    create_dir(out_dir)?;
    for split in Split::ALL {
        write_records(&out_dir.join(queries_file(split)), &data.records(split))?;
    }
    write_json(&out_dir.join(SAMPLE_STATS_FILE), &data.stats)?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    for (split, per_shape) in &data.stats {
        let emitted: usize = per_shape.values().map(|s| s.emitted).sum();
        let filtered: usize = per_shape.values().map(|s| s.filtered).sum();
        info!("{}: {emitted} queries, {filtered} dropped by the answer filter", split.name());
    }
    Ok(data.stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub steps: u64,
    /// Query-answer pairs processed.
    pub examples: u64,
    pub total_ms: f64,
    pub ms_per_query: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<StepRecord>,
    pub timing: TrainTiming,
    pub checkpoint: Checkpoint,
}

/// A fresh model for the training graph of `splits`.
pub fn init_model(cfg: &RunConfig, train: &KnowledgeGraph) -> Result<Model> {
    let encoding = EncodingSpec::from_graph(cfg.encoding, cfg.dim, train)?;
    let config = ModelConfig {
        learn_prior: cfg.learn_prior,
        ..ModelConfig::new(cfg.model, cfg.dim)
    };
    Model::new(config, train.vocab(), encoding, cfg.seed)
}

/// Trains for `cfg.steps` steps, or continues from `resume` until the
/// checkpoint's step count reaches `cfg.steps`.
pub fn cmd_train(
    graph_dir: &Path,
    data_dir: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let splits = load_splits(graph_dir)?;
    let vocab = splits.train.vocab();
    let records = read_records(&data_dir.join(queries_file(Split::Train)))?;
    let data = TrainSet::from_records(&records, vocab)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Checkpoint::load(p)?.trainer()?;
            t.model.check_vocab(vocab)?;
            t
        }
        None => Trainer::new(init_model(cfg, &splits.train)?, cfg.train_config(), cfg.seed)?,
    };
    create_dir(out_dir)?;
    let trace_path = out_dir.join(TRACE_FILE);
    let trace_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&trace_path)
        .map_err(|e| Error::io(&trace_path, e))?;
    let mut trace_out = std::io::BufWriter::new(trace_file);
    let remaining = cfg.steps.saturating_sub(trainer.step);
    let started = Instant::now();
    let mut write_err = None;
    let trace = trainer.train(&data, vocab, remaining, |r| {
        if r.step % 500 == 0 {
            info!("step {} {} loss {:.5}", r.step, r.kind.name(), r.loss);
        }
        let line = serde_json::to_string(r).expect("step record serializes");
        if let Err(e) = writeln!(trace_out, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    let total_ms = started.elapsed().as_secs_f64() * 1e3;
    if let Some(e) = write_err {
        return Err(Error::io(&trace_path, e));
    }
    trace_out.flush().map_err(|e| Error::io(&trace_path, e))?;
    let examples = remaining * trainer.config.batch_size as u64;
    let timing = TrainTiming {
        steps: remaining,
        examples,
        total_ms,
        ms_per_query: if examples > 0 { total_ms / examples as f64 } else { 0.0 },
    };
    let checkpoint = Checkpoint::from_trainer(&trainer, serde_json::to_value(cfg)?).with_vocab(vocab);
    checkpoint.save(&out_dir.join(CHECKPOINT_FILE))?;
    write_json(&out_dir.join(TRAIN_TIMING_FILE), &timing)?;
    write_json(&out_dir.join(CONFIG_FILE), cfg)?;
    Ok(TrainOutcome {
        trace,
        timing,
        checkpoint,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: Report,
    pub baseline: Report,
    pub timing: Timing,
}

/// Ranks the hard answers of `split` and writes the report, rank dump,
/// random-ranking baseline and timing.
pub fn cmd_eval(checkpoint: &Path, graph_dir: &Path, data_dir: &Path, split: Split, out_dir: &Path) -> Result<EvalOutcome> {
    if split == Split::Train {
        return Err(Error::Config("evaluation needs the val or test split".into()));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let splits = load_splits(graph_dir)?;
    let vocab = splits.train.vocab();
    model.check_vocab(vocab)?;
    let records = read_records(&data_dir.join(queries_file(split)))?;
    let started = Instant::now();
    let (ranked, report) = evaluate(&model, &records, split, vocab)?;
    let infer_ms = started.elapsed().as_secs_f64() * 1e3;
    let baseline = random_expected_report(&records, split, vocab)?;
    create_dir(out_dir)?;
    write_json(&out_dir.join(REPORT_JSON), &report)?;
    write_text(&out_dir.join(REPORT_TEXT), &report.to_text())?;
    write_rank_dump(&out_dir.join(RANKS_FILE), &ranked)?;
    write_json(&out_dir.join(BASELINE_FILE), &baseline)?;
    let train_timing = checkpoint
        .parent()
        .map(|d| d.join(TRAIN_TIMING_FILE))
        .filter(|p| p.exists())
        .map(|p| read_json::<TrainTiming>(&p))
        .transpose()?;
    let evaluated = report.queries + report.excluded;
    let timing = Timing {
        train_ms_per_query: train_timing.map(|t| t.ms_per_query),
        inference_ms_per_query: (evaluated > 0).then(|| infer_ms / evaluated as f64),
        train_queries: train_timing.map_or(0, |t| t.examples as usize),
        inference_queries: evaluated,
    };
    write_json(&out_dir.join(TIMING_JSON), &timing)?;
    write_text(&out_dir.join(TIMING_TEXT), &timing.to_text())?;
    Ok(EvalOutcome {
        report,
        baseline,
        timing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub id: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutput {
    pub query: String,
    pub top: Vec<ScoredAnswer>,
    /// Exact answers by graph search, when a graph was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Vec<String>>,
}

fn answer_name(q: &BoundQuery, vocab: &Vocab, id: usize) -> String {
    match q.root_phase() {
        crate::dsl::Phase::Entity => vocab.entity_name(crate::kg::EntityId(id)).to_owned(),
        crate::dsl::Phase::Numeric => {
            let v = vocab.value(crate::kg::ValueId(id));
            format!("{:?}@{}", v.value, vocab.value_type_name(v.value_type))
        }
    }
}

/// Top-`k` neural answers of `query`, plus the exact answers in `graph`.
pub fn cmd_answer(checkpoint: &Path, query: &str, graph: Option<&Path>, k: usize) -> Result<AnswerOutput> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let g = graph.map(KnowledgeGraph::load).transpose()?;
    let vocab = match (&g, ck.vocab()?) {
        (Some(g), _) => {
            model.check_vocab(g.vocab())?;
            g.vocab().clone()
        }
        (None, Some(v)) => v,
        (None, None) => return Err(Error::Config("checkpoint has no vocabulary; pass a graph".into())),
    };
    let parsed = parse(query)?;
    let q = BoundQuery::bind(&parsed, &vocab)?;
    let state = model.encode_query(&q)?;
    let ids = candidates(&q, &vocab);
    let scores = Scorer::new(&model, &vocab)?.score(&state, &ids)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    let top = order
        .into_iter()
        .take(k)
        .map(|i| ScoredAnswer {
            id: ids[i],
            name: answer_name(&q, &vocab, ids[i]),
            score: scores[i],
        })
        .collect();
    let oracle = g
        .as_ref()
        .map(|g| -> Result<Vec<String>> {
            Ok(answer_query(&parsed, g)?
                .into_iter()
                .map(|id| answer_name(&q, &vocab, id))
                .collect())
        })
        .transpose()?;
    Ok(AnswerOutput {
        query: parsed.to_string(),
        top,
        oracle,
    })
}
