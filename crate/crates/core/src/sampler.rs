//! Query grounding, exact answering by graph search, and benchmark
//! dataset emission with the split filtering rules.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{parse, BoundKind, BoundQuery, ComputationGraph, GeneralQueryType, GraphBuilder, NodeId, NodeKind, Phase, Template};
use crate::error::{Error, Result};
use crate::kg::{EdgeLabel, EntityId, KnowledgeGraph, NodeRef, SplitGraphs, ValueId, ValueTypeId};
use crate::rng::seeded;

/// Seed resamples allowed before an attempt counts as failed.
pub const MAX_RETRIES: usize = 128;
/// Share of seeds drawn from value nodes, giving numeric-rooted queries.
pub const NUMERIC_FRACTION: f64 = 0.2;

/// Grounding hit a node without in-edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeadEnd;

/// A concrete query and the node it was grounded from.
#[derive(Debug, Clone)]
pub struct GroundedQuery {
    pub graph: ComputationGraph,
    pub seed: NodeRef,
}

/// Node pools used to draw seeds and fresh union operands.
#[derive(Debug, Clone)]
pub struct NodePools {
    pub entities: Vec<EntityId>,
    pub values: Vec<ValueId>,
    values_by_type: BTreeMap<ValueTypeId, Vec<ValueId>>,
}

impl NodePools {
    /// Nodes with at least one in-edge, so that every seed can start a
    /// projection.
    pub fn new(g: &KnowledgeGraph) -> Self {
        let entities: Vec<EntityId> = g
            .active_entities()
            .into_iter()
            .filter(|&e| g.in_degree(NodeRef::Entity(e)) > 0)
            .collect();
        let values: Vec<ValueId> = g
            .active_values()
            .into_iter()
            .filter(|&x| g.in_degree(NodeRef::Value(x)) > 0)
            .collect();
        let mut values_by_type: BTreeMap<ValueTypeId, Vec<ValueId>> = BTreeMap::new();
        for &x in &values {
            values_by_type.entry(g.vocab().value(x).value_type).or_default().push(x);
        }
        NodePools {
            entities,
            values,
            values_by_type,
        }
    }

    /// A random node of the same class as `like`; values also keep the type.
    fn fresh<R: Rng>(&self, like: NodeRef, g: &KnowledgeGraph, rng: &mut R) -> Option<NodeRef> {
        match like {
            NodeRef::Entity(_) => self.entities.choose(rng).map(|&e| NodeRef::Entity(e)),
            NodeRef::Value(x) => self
                .values_by_type
                .get(&g.vocab().value(x).value_type)
                .and_then(|l| l.choose(rng))
                .map(|&x| NodeRef::Value(x)),
        }
    }

    fn seed<R: Rng>(&self, phase: Phase, rng: &mut R) -> Option<NodeRef> {
        match phase {
            Phase::Entity => self.entities.choose(rng).map(|&e| NodeRef::Entity(e)),
            Phase::Numeric => self.values.choose(rng).map(|&x| NodeRef::Value(x)),
        }
    }
}

struct Grounder<'a, R> {
    g: &'a KnowledgeGraph,
    pools: &'a NodePools,
    rng: &'a mut R,
    b: GraphBuilder,
}

impl<R: Rng> Grounder<'_, R> {
    fn anchor(&mut self, v: NodeRef) -> NodeId {
        let vocab = self.g.vocab();
        match v {
            NodeRef::Entity(e) => self.b.entity(vocab.entity_name(e)),
            NodeRef::Value(x) => {
                let node = vocab.value(x);
                self.b.value(node.value, vocab.value_type_name(node.value_type))
            }
        }
    }

    fn ground(&mut self, t: &Template, v: NodeRef) -> std::result::Result<NodeId, DeadEnd> {
        match t {
            Template::Anchor => Ok(self.anchor(v)),
            Template::Projection(child) => {
                let edges = self.g.in_edges(v);
                let &(u, label) = edges.choose(self.rng).ok_or(DeadEnd)?;
                let vocab = self.g.vocab();
                let kind = match (u, v, label) {
                    (NodeRef::Entity(_), NodeRef::Entity(_), EdgeLabel::Relation(r)) => {
                        NodeKind::RelProj(vocab.relation_name(r).to_owned())
                    }
                    (NodeRef::Value(_), NodeRef::Entity(_), EdgeLabel::Attribute(a)) => {
                        NodeKind::RevAttrProj(vocab.attribute_name(a).to_owned())
                    }
                    (NodeRef::Entity(_), NodeRef::Value(_), EdgeLabel::Attribute(a)) => {
                        NodeKind::AttrProj(vocab.attribute_name(a).to_owned())
                    }
                    (NodeRef::Value(_), NodeRef::Value(_), EdgeLabel::Numerical(f)) => NodeKind::NumProj(f),
                    _ => unreachable!("in_edges yields consistent edge classes"),
                };
                let c = self.ground(child, u)?;
                Ok(self.b.add(kind, vec![c]).expect("edge classes respect phases"))
            }
            Template::Intersection(children) => {
                let ids = children
                    .iter()
                    .map(|c| self.ground(c, v))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(self.b.add(NodeKind::Intersection, ids).expect("same phase"))
            }
            Template::Union(children) => {
                let mut ids = Vec::with_capacity(children.len());
                for (k, c) in children.iter().enumerate() {
                    // only the first operand has to contain v
                    let at = if k == 0 {
                        v
                    } else {
                        self.pools.fresh(v, self.g, self.rng).ok_or(DeadEnd)?
                    };
                    ids.push(self.ground(c, at)?);
                }
                Ok(self.b.add(NodeKind::Union, ids).expect("same phase"))
            }
        }
    }
}

/// Grounds `shape` so that `v` is one of its answers on `g`.
pub fn ground_general_type<R: Rng>(
    shape: GeneralQueryType,
    v: NodeRef,
    g: &KnowledgeGraph,
    rng: &mut R,
) -> std::result::Result<GroundedQuery, DeadEnd> {
    let pools = NodePools::new(g);
    ground_with_pools(shape, v, g, &pools, rng)
}

/// As [`ground_general_type`] with precomputed pools.
pub fn ground_with_pools<R: Rng>(
    shape: GeneralQueryType,
    v: NodeRef,
    g: &KnowledgeGraph,
    pools: &NodePools,
    rng: &mut R,
) -> std::result::Result<GroundedQuery, DeadEnd> {
    let mut gr = Grounder {
        g,
        pools,
        rng,
        b: GraphBuilder::new(),
    };
    let root = gr.ground(&shape.template(), v)?;
    let graph = gr.b.finish(root).expect("grounded graphs are well typed");
    Ok(GroundedQuery { graph, seed: v })
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Exact answers of `q` on `g` by bottom-up set evaluation over the
/// materialized edges. Ids are entity or value indices depending on the
/// root phase, sorted ascending.
pub fn search_answers(q: &BoundQuery, g: &KnowledgeGraph) -> Vec<usize> {
    let mut sets = node_sets(q, g);
    sets.swap_remove(q.root())
}

/// The answer set of every node of `q`, in arena order.
pub fn node_sets(q: &BoundQuery, g: &KnowledgeGraph) -> Vec<Vec<usize>> {
    let mut sets: Vec<Vec<usize>> = Vec::with_capacity(q.len());
    for node in q.nodes() {
        let child = |k: usize| &sets[node.children[k]];
        let set = match node.kind {
            BoundKind::AnchorEntity(e) => vec![e.0],
            BoundKind::AnchorValue { node, .. } => node.map(|x| vec![x.0]).unwrap_or_default(),
            BoundKind::RelProj(r) => sorted_unique(
                child(0)
                    .iter()
                    .flat_map(|&h| g.relation_tails(EntityId(h), r).map(|t| t.0))
                    .collect(),
            ),
            BoundKind::AttrProj(a) => sorted_unique(
                child(0)
                    .iter()
                    .flat_map(|&e| g.attribute_values(EntityId(e), a).map(|x| x.0))
                    .collect(),
            ),
            BoundKind::RevAttrProj(a) => sorted_unique(
                child(0)
                    .iter()
                    .flat_map(|&x| g.attribute_holders(ValueId(x), a).map(|e| e.0))
                    .collect(),
            ),
            BoundKind::NumProj(f) => sorted_unique(
                child(0)
                    .iter()
                    .flat_map(|&x| g.numerical_targets(ValueId(x), f).map(|y| y.0))
                    .collect(),
            ),
            BoundKind::Intersection => {
                let mut acc = child(0).clone();
                for k in 1..node.children.len() {
                    acc = intersect(&acc, child(k));
                }
                acc
            }
            BoundKind::Union => sorted_unique(node.children.iter().flat_map(|&c| sets[c].iter().copied()).collect()),
        };
        sets.push(set);
    }
    sets
}

/// Binds `graph` against `g`'s vocabulary and answers it.
pub fn answer_query(graph: &ComputationGraph, g: &KnowledgeGraph) -> Result<Vec<usize>> {
    Ok(search_answers(&BoundQuery::bind(graph, g.vocab())?, g))
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub answers_train: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers_val: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers_test: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// An emitted query with its grounding metadata.
#[derive(Debug, Clone)]
pub struct SampledQuery {
    pub record: QueryRecord,
    pub shape: GeneralQueryType,
    pub seed: NodeRef,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub counts: BTreeMap<GeneralQueryType, SplitCounts>,
    pub numeric_fraction: f64,
    pub max_retries: usize,
    /// Candidate budget per requested query before giving up.
    pub attempts_per_query: usize,
}

impl SampleConfig {
    pub fn uniform(shapes: &[GeneralQueryType], counts: SplitCounts) -> Self {
        SampleConfig {
            counts: shapes.iter().map(|&s| (s, counts)).collect(),
            numeric_fraction: NUMERIC_FRACTION,
            max_retries: MAX_RETRIES,
            attempts_per_query: 20,
        }
    }
}

/// Bookkeeping of one (split, shape) sampling run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeStats {
    pub requested: usize,
    pub emitted: usize,
    pub candidates: usize,
    pub dead_ends: usize,
    pub duplicates: usize,
    pub filtered: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<SampledQuery>,
    pub val: Vec<SampledQuery>,
    pub test: Vec<SampledQuery>,
    pub stats: BTreeMap<Split, BTreeMap<GeneralQueryType, ShapeStats>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SampledQuery] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn records(&self, split: Split) -> Vec<QueryRecord> {
        self.split(split).iter().map(|q| q.record.clone()).collect()
    }
}

fn stream_of(split: Split, shape: GeneralQueryType) -> u64 {
    let s = Split::ALL.iter().position(|&x| x == split).unwrap() as u64;
    let t = GeneralQueryType::ALL.iter().position(|&x| x == shape).unwrap() as u64;
    100 + 16 * s + t
}

/// Samples a benchmark. Queries are grounded on the graph of their own
/// split and answered on every cumulative graph up to it. Validation
/// queries are kept only when their answer count grows from train to
/// val, test queries only when it grows from val to test.
pub fn sample_dataset(splits: &SplitGraphs, config: &SampleConfig, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&config.numeric_fraction) {
        return Err(Error::Config(format!(
            "numeric fraction {} outside [0, 1]",
            config.numeric_fraction
        )));
    }
    let mut out = Dataset::default();
    for split in Split::ALL {
        let g = match split {
            Split::Train => &splits.train,
            Split::Val => &splits.val,
            Split::Test => &splits.test,
        };
        let pools = NodePools::new(g);
        let mut seen: HashSet<String> = HashSet::new();
        let mut emitted = Vec::new();
        for (&shape, counts) in &config.counts {
            let want = counts.get(split);
            let mut rng = seeded(seed, stream_of(split, shape));
            let mut st = ShapeStats {
                requested: want,
                ..ShapeStats::default()
            };
            let budget = want * config.attempts_per_query;
            while st.emitted < want && st.candidates < budget {
                st.candidates += 1;
                let phase = if rng.gen_bool(config.numeric_fraction) && !pools.values.is_empty() {
                    Phase::Numeric
                } else {
                    Phase::Entity
                };
                let mut grounded = None;
                for _ in 0..config.max_retries.max(1) {
                    let Some(v) = pools.seed(phase, &mut rng) else { break };
                    if let Ok(q) = ground_with_pools(shape, v, g, &pools, &mut rng) {
                        grounded = Some(q);
                        break;
                    }
                }
                let Some(q) = grounded else {
                    st.dead_ends += 1;
                    continue;
                };
                let text = q.graph.to_string();
                if seen.contains(&text) {
                    st.duplicates += 1;
                    continue;
                }
                let bound = BoundQuery::bind(&q.graph, g.vocab())?;
                let train = search_answers(&bound, &splits.train);
                let record = match split {
                    Split::Train => QueryRecord {
                        query: text.clone(),
                        answers_train: train,
                        answers_val: None,
                        answers_test: None,
                    },
                    Split::Val | Split::Test => {
                        let val = search_answers(&bound, &splits.val);
                        let test = search_answers(&bound, &splits.test);
                        let keep = match split {
                            Split::Val => val.len() != train.len(),
                            _ => test.len() != val.len(),
                        };
                        if !keep {
                            st.filtered += 1;
                            continue;
                        }
                        QueryRecord {
                            query: text.clone(),
                            answers_train: train,
                            answers_val: Some(val),
                            answers_test: Some(test),
                        }
                    }
                };
                seen.insert(text);
                st.emitted += 1;
                emitted.push(SampledQuery {
                    record,
                    shape,
                    seed: q.seed,
                });
            }
            if st.emitted < want {
                warn!(
                    "{} {}: emitted {} of {} queries after {} candidates",
                    split.name(),
                    shape,
                    st.emitted,
                    want,
                    st.candidates
                );
            }
            out.stats.entry(split).or_default().insert(shape, st);
        }
        match split {
            Split::Train => out.train = emitted,
            Split::Val => out.val = emitted,
            Split::Test => out.test = emitted,
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[QueryRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<QueryRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        parse(&r.query).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}
