use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use numcqa::dsl::GeneralQueryType;
use numcqa::encoding::EncodingKind;
use numcqa::model::ModelKind;
use numcqa::pipeline::{self, RunConfig, SynthOptions, TripleFiles};
use numcqa::sampler::{Split, SplitCounts};

/// Numerical complex query answering over knowledge graphs.
#[derive(Parser)]
#[command(name = "numcqa", version)]
struct Cli {
    /// Base directory for inputs and outputs of every command.
    #[arg(long, global = true, env = "NUMCQA_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,

    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph as triple files.
    Synth(SynthArgs),
    /// Split triples into cumulative train/val/test graphs.
    Build(BuildArgs),
    /// Sample queries with exact answers.
    Sample(SampleArgs),
    /// Train a query encoder.
    Train(TrainArgs),
    /// Rank hard answers and report metrics.
    Eval(EvalArgs),
    /// Answer one query with a trained model.
    Answer(AnswerArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Defaults to <data-dir>/raw.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 4)]
    relations: usize,
    #[arg(long, default_value_t = 3)]
    attribute_types: usize,
    #[arg(long, default_value_t = 60)]
    values: usize,
    #[arg(long, default_value_t = 0.02)]
    density: f64,
    #[arg(long, default_value_t = 4)]
    communities: usize,
    #[arg(long, default_value_t = 0.8)]
    affinity: f64,
}

#[derive(Args)]
struct BuildArgs {
    /// Relation triples `head<TAB>relation<TAB>tail`.
    #[arg(long)]
    relations: Option<PathBuf>,
    /// Attribute triples `entity<TAB>attribute<TAB>number`.
    #[arg(long)]
    attributes: Option<PathBuf>,
    /// Attribute type map `attribute<TAB>type`.
    #[arg(long)]
    types: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    edge_cap: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    graphs: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Queries per shape, as `train,val,test`.
    #[arg(long, value_parser = parse_counts)]
    counts: Option<SplitCounts>,
    /// Restrict sampling to these shapes, e.g. `1p,2i,up`.
    #[arg(long, value_delimiter = ',')]
    shapes: Option<Vec<GeneralQueryType>>,
    #[arg(long)]
    numeric_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graphs: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    encoding: Option<EncodingKind>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Entity and numeric steps per cycle, as `e:n`.
    #[arg(long, value_parser = parse_alternation)]
    alternation: Option<(usize, usize)>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Train the per-type value prior instead of keeping it fixed.
    #[arg(long)]
    learn_prior: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    graphs: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

#[derive(Args)]
struct AnswerArgs {
    query: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Graph file for exact answers.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

fn parse_counts(s: &str) -> Result<SplitCounts, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let n = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    match parts.as_slice() {
        [t, v, e] => Ok(SplitCounts {
            train: n(t)?,
            val: n(v)?,
            test: n(e)?,
        }),
        _ => Err("expected train,val,test".into()),
    }
}

fn parse_alternation(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected e:n")?;
    let n = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    Ok((n(a)?, n(b)?))
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}`")),
    }
}

fn path_arg(cfg: &mut RunConfig, key: &str, p: &Path) {
    cfg.paths.insert(key.to_owned(), p.display().to_string());
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let data = &cli.data_dir;
    let or = |p: &Option<PathBuf>, default: &str| p.clone().unwrap_or_else(|| data.join(default));
    match cli.command {
        Command::Synth(a) => {
            let opts = SynthOptions {
                entities: a.entities,
                relations: a.relations,
                attribute_types: a.attribute_types,
                values: a.values,
                density: a.density,
                communities: a.communities,
                affinity: a.affinity,
                ..SynthOptions::default()
            };
            let out = or(&a.out, "raw");
            let stats = pipeline::cmd_synth(&out, &opts, cfg.seed)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Build(a) => {
            let raw = data.join("raw");
            let files = TripleFiles {
                relations: a.relations.unwrap_or_else(|| raw.join(pipeline::RELATIONS_FILE)),
                attributes: a.attributes.unwrap_or_else(|| raw.join(pipeline::ATTRIBUTES_FILE)),
                types: a.types.unwrap_or_else(|| raw.join(pipeline::TYPES_FILE)),
            };
            if let Some(c) = a.edge_cap {
                cfg.edge_cap = c;
            }
            path_arg(&mut cfg, "relations", &files.relations);
            path_arg(&mut cfg, "attributes", &files.attributes);
            path_arg(&mut cfg, "types", &files.types);
            let manifest = pipeline::cmd_build(&files, &or(&a.out, "graphs"), &cfg)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Sample(a) => {
            if a.shapes.is_some() || a.counts.is_some() {
                let shapes = a.shapes.unwrap_or_else(|| GeneralQueryType::ALL.to_vec());
                let counts = a.counts.unwrap_or_else(|| {
                    cfg.shape_counts.values().next().copied().unwrap_or(SplitCounts {
                        train: 500,
                        val: 50,
                        test: 50,
                    })
                });
                cfg.shape_counts = shapes.into_iter().map(|s| (s, counts)).collect();
            }
            if let Some(f) = a.numeric_fraction {
                cfg.numeric_fraction = f;
            }
            let graphs = or(&a.graphs, "graphs");
            path_arg(&mut cfg, "graphs", &graphs);
            let stats = pipeline::cmd_sample(&graphs, &or(&a.out, "queries"), &cfg)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train(a) => {
            if let Some(m) = a.model {
                cfg.model = m;
            }
            if let Some(e) = a.encoding {
                cfg.encoding = e;
            }
            if let Some(d) = a.dim {
                cfg.dim = d;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            if let Some(b) = a.batch_size {
                cfg.batch_size = b;
            }
            if let Some(x) = a.alternation {
                cfg.alternation = x;
            }
            if let Some(s) = a.max_steps {
                cfg.steps = s;
            }
            if a.learn_prior {
                cfg.learn_prior = true;
            }
            let graphs = or(&a.graphs, "graphs");
            let queries = or(&a.queries, "queries");
            path_arg(&mut cfg, "graphs", &graphs);
            path_arg(&mut cfg, "queries", &queries);
            let out = pipeline::cmd_train(&graphs, &queries, &or(&a.out, "model"), &cfg, a.resume.as_deref())?;
            if let Some(last) = out.trace.last() {
                println!("step {} loss {:.6}", last.step, last.loss);
            }
            println!("{}", serde_json::to_string_pretty(&out.timing)?);
        }
        Command::Eval(a) => {
            let ck = a
                .checkpoint
                .unwrap_or_else(|| data.join("model").join(pipeline::CHECKPOINT_FILE));
            let out = or(&a.out, "eval");
            let res = pipeline::cmd_eval(&ck, &or(&a.graphs, "graphs"), &or(&a.queries, "queries"), a.split, &out)?;
            print!("{}", res.report.to_text());
            println!("random ranking macro mrr {:.4}", res.baseline.macro_avg.mrr);
            print!("{}", res.timing.to_text());
        }
        Command::Answer(a) => {
            let ck = a
                .checkpoint
                .unwrap_or_else(|| data.join("model").join(pipeline::CHECKPOINT_FILE));
            let out = pipeline::cmd_answer(&ck, &a.query, a.graph.as_deref(), a.top)
                .with_context(|| format!("answering `{}`", a.query))?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.ends_with(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            eprintln!("error: {msg}");
            let code = e.downcast_ref::<numcqa::Error>().map_or(3, numcqa::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
