//! End-to-end acceptance checks, one per criterion.
//!
//! All criteria run sequentially inside one test so that their wall-clock
//! budgets are measured without other tests competing for the CPU. Each
//! prints a `[PASS]` or `[FAIL]` line straight to stderr, which the test
//! harness does not capture. Set `ACCEPTANCE=1,4` to run a subset.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use numcqa::autodiff::{Tape, Tensor, Var};
use numcqa::dsl::{parse, BoundQuery, ComputationGraph, GeneralQueryType, NodeId, NodeKind, Phase};
use numcqa::encoding::{dice_encode, sinusoidal_encode, EncodingKind, EncodingSpec};
use numcqa::eval::{random_expected_mrr, read_rank_dump, EvalRecord, Report};
use numcqa::kg::{split_edges, EntityId, KnowledgeGraph, NodeRef, SyntheticConfig, Vocab, DEFAULT_EDGE_CAP};
use numcqa::model::{
    attribute_loss, deepset_merge, deepset_merge_with_attention, entity_loss, gated_transition, gaussian_logpdf,
    bound_log_variance, type_prior_logpdf, DeepSetVars, EncoderState, Forward, GateVars, Model, ModelConfig, ModelKind, ValueRef,
};
use numcqa::pipeline::{self, RunConfig, SynthOptions, TripleFiles};
use numcqa::rng::seeded;
use numcqa::sampler::{sample_dataset, SampleConfig, Split, SplitCounts};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report_line(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

#[test]
fn acceptance() {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "oracle equivalence", oracle_equivalence),
        (2, "sampler soundness", sampler_soundness),
        (3, "gradient suite", gradient_suite),
        (4, "invariance suite", invariance_suite),
        (5, "metric arithmetic", metric_arithmetic),
        (6, "learning signal", learning_signal),
        (7, "determinism", determinism),
        (8, "timing report", timing_report),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    report_line("");
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        report_line(&format!("[{tag}] criterion {n} {name}: {detail} ({secs:.1}s)"));
        if outcome.is_err() {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// ---------------------------------------------------------------------
// 1. oracle equivalence

const ORACLE_GRAPHS: usize = 200;
const ORACLE_MAX_NODES: usize = 50;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);

/// Answers by brute-force existential assignment: a candidate is an answer
/// when some assignment of every intermediate variable satisfies each edge
/// of the query tree. Symbols are resolved by name and edges tested for
/// membership in plain triple sets.
struct NaiveEvaluator<'g> {
    vocab: &'g Vocab,
    rel: HashSet<(usize, usize, usize)>,
    attr: HashSet<(usize, usize, usize)>,
    num: HashSet<(usize, usize, usize)>,
}

impl<'g> NaiveEvaluator<'g> {
    fn new(g: &'g KnowledgeGraph) -> Self {
        NaiveEvaluator {
            vocab: g.vocab(),
            rel: g.rel_edges().iter().map(|&(h, r, t)| (h.0, r.0, t.0)).collect(),
            attr: g.attr_edges().iter().map(|&(e, a, x)| (e.0, a.0, x.0)).collect(),
            num: g.num_edges().iter().map(|&(x, f, y)| (x.0, f.index(), y.0)).collect(),
        }
    }

    fn holds(&self, q: &ComputationGraph, id: NodeId, x: usize) -> bool {
        let v = self.vocab;
        let node = q.node(id);
        let ne = v.num_entities();
        let nv = v.num_values();
        let sub = |y: usize| self.holds(q, node.children[0], y);
        match &node.kind {
            NodeKind::AnchorEntity(name) => v.entity(name) == Some(EntityId(x)),
            NodeKind::AnchorValue { value, value_type } => v
                .values()
                .any(|(id, n)| id.0 == x && n.value == *value && v.value_type_name(n.value_type) == value_type),
            NodeKind::RelProj(r) => match v.relation(r) {
                Some(r) => (0..ne).any(|y| self.rel.contains(&(y, r.0, x)) && sub(y)),
                None => false,
            },
            NodeKind::AttrProj(a) => match v.attribute(a) {
                Some(a) => (0..ne).any(|y| self.attr.contains(&(y, a.0, x)) && sub(y)),
                None => false,
            },
            NodeKind::RevAttrProj(a) => match v.attribute(a) {
                Some(a) => (0..nv).any(|y| self.attr.contains(&(x, a.0, y)) && sub(y)),
                None => false,
            },
            NodeKind::NumProj(f) => (0..nv).any(|y| self.num.contains(&(y, f.index(), x)) && sub(y)),
            NodeKind::Intersection => node.children.iter().all(|&c| self.holds(q, c, x)),
            NodeKind::Union => node.children.iter().any(|&c| self.holds(q, c, x)),
        }
    }

    fn answers(&self, q: &ComputationGraph) -> Vec<usize> {
        let domain = match q.root_phase() {
            Phase::Entity => self.vocab.num_entities(),
            Phase::Numeric => self.vocab.num_values(),
        };
        (0..domain).filter(|&x| self.holds(q, q.root(), x)).collect()
    }
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut rng = seeded(1, 0);
    let mut checked = 0usize;
    let mut mismatches = Vec::new();
    let mut shapes = BTreeSet::new();
    let mut too_big = 0;
    for kg in 0..ORACLE_GRAPHS as u64 {
        let entities = rng.gen_range(8..=30);
        let values = rng.gen_range(4..=ORACLE_MAX_NODES - entities);
        let cfg = SyntheticConfig {
            attribute_coverage: rng.gen_range(0.4..1.0),
            communities: rng.gen_range(1..=3),
            ..SyntheticConfig::new(
                entities,
                rng.gen_range(1..=3),
                rng.gen_range(1..=3),
                values,
                rng.gen_range(0.05..0.25),
                kg,
            )
        };
        let g = cfg.generate();
        if g.vocab().num_entities() + g.vocab().num_values() > ORACLE_MAX_NODES {
            too_big += 1;
        }
        let splits = split_edges(&g, kg)
            .and_then(|s| s.augment_numerical(DEFAULT_EDGE_CAP, kg))
            .map_err(|e| e.to_string())?;
        let sample = SampleConfig {
            numeric_fraction: 0.5,
            ..SampleConfig::uniform(
                &GeneralQueryType::ALL,
                SplitCounts {
                    train: 3,
                    val: 2,
                    test: 2,
                },
            )
        };
        let data = sample_dataset(&splits, &sample, kg).map_err(|e| e.to_string())?;
        let naive = [
            NaiveEvaluator::new(&splits.train),
            NaiveEvaluator::new(&splits.val),
            NaiveEvaluator::new(&splits.test),
        ];
        for split in Split::ALL {
            for q in data.split(split) {
                let graph = parse(&q.record.query).map_err(|e| e.to_string())?;
                shapes.insert(q.shape);
                let stored = [
                    Some(&q.record.answers_train),
                    q.record.answers_val.as_ref(),
                    q.record.answers_test.as_ref(),
                ];
                for (ev, answers) in naive.iter().zip(stored) {
                    let Some(answers) = answers else { continue };
                    checked += 1;
                    if ev.answers(&graph) != *answers {
                        mismatches.push(q.record.query.clone());
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    check(
        mismatches.is_empty() && shapes.len() == 8 && too_big == 0 && elapsed < ORACLE_BUDGET,
        format!(
            "{checked} answer sets on {ORACLE_GRAPHS} graphs, {} shapes, {} mismatches{}, {too_big} oversized graphs",
            shapes.len(),
            mismatches.len(),
            mismatches.first().map(|q| format!(" (first: {q})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------------
// 2. sampler soundness

const SOUNDNESS_QUERIES: usize = 10_000;
const SOUNDNESS_BUDGET: Duration = Duration::from_secs(120);

fn sampler_soundness() -> Outcome {
    let started = Instant::now();
    let mut checked = 0usize;
    let mut violations = 0usize;
    let mut seed = 0u64;
    while checked < SOUNDNESS_QUERIES && seed < 20 {
        let g = SynthOptions::default().generate(seed);
        let splits = split_edges(&g, seed)
            .and_then(|s| s.augment_numerical(DEFAULT_EDGE_CAP, seed))
            .map_err(|e| e.to_string())?;
        let sample = SampleConfig {
            numeric_fraction: 0.5,
            ..SampleConfig::uniform(
                &GeneralQueryType::ALL,
                SplitCounts {
                    train: 1000,
                    val: 150,
                    test: 150,
                },
            )
        };
        let data = sample_dataset(&splits, &sample, seed).map_err(|e| e.to_string())?;
        for split in Split::ALL {
            for q in data.split(split) {
                let answers = match split {
                    Split::Train => Some(&q.record.answers_train),
                    Split::Val => q.record.answers_val.as_ref(),
                    Split::Test => q.record.answers_test.as_ref(),
                };
                let id = match q.seed {
                    NodeRef::Entity(e) => e.0,
                    NodeRef::Value(x) => x.0,
                };
                checked += 1;
                if !answers.is_some_and(|a| a.binary_search(&id).is_ok()) {
                    violations += 1;
                }
            }
        }
        seed += 1;
    }
    let elapsed = started.elapsed();
    check(
        checked >= SOUNDNESS_QUERIES && violations == 0 && elapsed < SOUNDNESS_BUDGET,
        format!("{checked} queries from {seed} graphs, {violations} without their seed"),
    )
}

// ---------------------------------------------------------------------
// 3. gradient suite

const GRAD_SEEDS: u64 = 20;
const GRAD_DIMS: [usize; 2] = [2, 4];
const FD_STEP: f64 = 1e-5;
const OP_TOLERANCE: f64 = 1e-4;
const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Below this gradient norm the error is taken as absolute.
const GRAD_FLOOR: f64 = 1e-8;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const BATCH: usize = 3;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < GRAD_FLOOR {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Value and input gradients of `sum(f(inputs) ⊙ w)`.
fn weighted_sum(inputs: &[Tensor], w: &Tensor, f: &OpFn) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv);
    let total = tape.sum(prod);
    let value = tape.value(total).item();
    let grads = tape.backward(total);
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
        .collect();
    (value, gs)
}

/// Largest per-input relative error between backpropagated and central
/// difference gradients of a random weighted sum of `f`'s output.
fn op_error(inputs: Vec<Tensor>, f: &OpFn, rng: &mut ChaCha8Rng) -> f64 {
    let (rows, cols) = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.shape(out)
    };
    let w = random_tensor(rows, cols, rng);
    let (_, analytic) = weighted_sum(&inputs, &w, f);
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let mut numeric = vec![0.0; inputs[i].data.len()];
        for j in 0..numeric.len() {
            let mut plus = inputs.clone();
            plus[i].data[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data[j] -= FD_STEP;
            numeric[j] = (weighted_sum(&plus, &w, f).0 - weighted_sum(&minus, &w, f).0) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i].data, &numeric));
    }
    worst
}

fn gate_inputs(input: usize, output: usize, ctx: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut t = vec![random_tensor(BATCH, input, rng), random_tensor(BATCH, ctx, rng)];
    for (r, c) in [
        (input, output),
        (1, output),
        (ctx, output),
        (output, output),
        (1, output),
        (ctx, output),
        (output, output),
        (1, output),
        (ctx, output),
        (output, output),
        (1, output),
    ] {
        t.push(random_tensor(r, c, rng));
    }
    t
}

fn gate_vars(v: &[Var]) -> GateVars {
    GateVars {
        w_p: v[0],
        b_p: v[1],
        w_z: v[2],
        u_z: v[3],
        b_z: v[4],
        w_r: v[5],
        u_r: v[6],
        b_r: v[7],
        w_h: v[8],
        u_h: v[9],
        b_h: v[10],
    }
}

fn deepset_weights(width: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        random_tensor(width, width, rng),
        random_tensor(width, width, rng),
        random_tensor(width, width, rng),
        random_tensor(width, 2 * width, rng),
        random_tensor(1, 2 * width, rng),
        random_tensor(2 * width, width, rng),
        random_tensor(1, width, rng),
    ]
}

fn deepset_vars(v: &[Var]) -> DeepSetVars {
    DeepSetVars {
        w_q: v[0],
        w_k: v[1],
        w_v: v[2],
        w_1: v[3],
        b_1: v[4],
        w_2: v[5],
        b_2: v[6],
    }
}

/// Per-operation relative errors for one seed and dimension.
fn op_errors(d: usize, rng: &mut ChaCha8Rng) -> BTreeMap<&'static str, f64> {
    let k = 2 * d;
    let mut out = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let slot = out.entry(name).or_insert(0.0f64);
        *slot = slot.max(e);
    };
    for (input, output, ctx) in [(d, d, d), (d, k, k), (k, d, k), (k, k, k)] {
        let inputs = gate_inputs(input, output, ctx, rng);
        let f = |t: &mut Tape, v: &[Var]| gated_transition(t, &gate_vars(&v[2..]), v[0], v[1]);
        record("gated_transition", op_error(inputs, &f, rng));
    }
    for width in [d, k] {
        for m in [2, 3] {
            let mut inputs: Vec<Tensor> = (0..m).map(|_| random_tensor(BATCH, width, rng)).collect();
            inputs.extend(deepset_weights(width, rng));
            let f = move |t: &mut Tape, v: &[Var]| deepset_merge(t, &deepset_vars(&v[m..]), &v[..m]);
            record("deepset_merge", op_error(inputs, &f, rng));
        }
    }
    let inputs = vec![random_tensor(BATCH, k, rng), random_tensor(BATCH, d, rng)];
    record("gaussian_logpdf", op_error(inputs, &|t, v| gaussian_logpdf(t, v[0], v[1]), rng));
    let inputs = vec![
        random_tensor(BATCH, k, rng),
        random_tensor(BATCH, d, rng),
        random_tensor(BATCH, d, rng),
    ];
    record(
        "type_prior_logpdf",
        op_error(inputs, &|t, v| type_prior_logpdf(t, v[0], v[1], v[2]), rng),
    );
    let targets: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..6)).collect();
    let inputs = vec![random_tensor(BATCH, d, rng), random_tensor(6, d, rng)];
    record(
        "entity_loss",
        op_error(inputs, &move |t, v| entity_loss(t, v[0], v[1], &targets), rng),
    );
    // reach into the saturated part of the squashing
    let wide = Tensor::new(BATCH, k, (0..BATCH * k).map(|_| rng.gen_range(-40.0..40.0)).collect());
    record(
        "bound_log_variance",
        op_error(vec![wide], &|t, v| bound_log_variance(t, v[0]), rng),
    );
    let inputs = vec![
        random_tensor(BATCH, k, rng),
        random_tensor(BATCH, d, rng),
        random_tensor(BATCH, d, rng),
        random_tensor(BATCH, d, rng),
    ];
    record(
        "attribute_loss",
        op_error(inputs, &|t, v| attribute_loss(t, v[0], v[1], v[2], v[3]), rng),
    );
    out
}

/// A vocabulary exercising every projection kind, with two value types.
fn tiny_vocab() -> Vocab {
    let mut v = Vocab::new();
    for e in ["A", "B", "C", "D", "E"] {
        v.intern_entity(e);
    }
    v.intern_relation("r");
    v.intern_relation("s");
    let t0 = v.intern_value_type("t0");
    let t1 = v.intern_value_type("t1");
    v.intern_attribute("a", t0).unwrap();
    v.intern_attribute("b", t1).unwrap();
    for x in [1.0, 3.0, 5.0, 9.0] {
        v.intern_value(x, t0).unwrap();
    }
    for x in [0.5, 2.5] {
        v.intern_value(x, t1).unwrap();
    }
    v
}

/// Queries covering every node kind, with their training targets: entity
/// ids for entity roots, `(value, type)` for numeric roots.
const TINY_QUERIES: [(&str, usize); 6] = [
    ("(i, (rp#r, (e#A)), (rap#a, (np#GreaterThan, (nv#3.0@t0))))", 1),
    ("(u, (ap#a, (e#B)), (np#SmallerThan, (nv#5.0@t0)))", 0),
    ("(rap#b, (u, (ap#b, (e#C)), (ap#b, (e#D))))", 2),
    ("(i, (ap#a, (e#A)), (ap#a, (e#B)), (np#EqualTo, (nv#3.0@t0)))", 1),
    ("(u, (rp#s, (e#A)), (rp#r, (rp#s, (e#E))))", 4),
    ("(np#TwiceGreaterThan, (ap#a, (i, (rp#r, (e#C)), (rp#s, (e#D)))))", 3),
];

fn tiny_queries(v: &Vocab) -> Vec<(BoundQuery, usize)> {
    TINY_QUERIES
        .iter()
        .map(|&(text, target)| (BoundQuery::bind(&parse(text).unwrap(), v).unwrap(), target))
        .collect()
}

/// Sum of per-query losses, on a fresh tape.
fn total_loss<'m>(model: &'m Model, queries: &[(BoundQuery, usize)], v: &Vocab, trainable: bool) -> (Forward<'m>, Var) {
    let mut fw = Forward::new(model, trainable);
    let mut total: Option<Var> = None;
    for (q, target) in queries {
        let root = fw.encode(&[q]).unwrap();
        let loss = match q.root_phase() {
            Phase::Entity => fw.entity_loss(root, &[EntityId(*target)]),
            Phase::Numeric => {
                let t = q.value_type().unwrap();
                let id = v.values_of_type(t)[*target % v.values_of_type(t).len()];
                let node = v.value(id);
                fw.numeric_loss(
                    root,
                    &[ValueRef {
                        node: Some(id),
                        value: node.value,
                        value_type: node.value_type,
                    }],
                )
                .unwrap()
            }
        };
        total = Some(match total {
            None => loss,
            Some(acc) => fw.tape.add(acc, loss),
        });
    }
    (fw, total.unwrap())
}

/// Relative error of the full model gradient, all parameters taken as
/// one vector.
fn end_to_end_error(kind: ModelKind, d: usize, seed: u64) -> f64 {
    let v = tiny_vocab();
    let queries = tiny_queries(&v);
    let config = ModelConfig {
        learn_prior: true,
        ..ModelConfig::new(kind, d)
    };
    let mut model = Model::new(config, &v, EncodingSpec::sinusoidal(d).unwrap(), seed).unwrap();
    // move the prior away from its initial zeros
    let mut rng = seeded(seed, 9);
    for name in ["prior.mean", "prior.log_var"] {
        if let Some(t) = model.params.get_mut(name) {
            t.data.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        }
    }
    let grads = {
        let (fw, loss) = total_loss(&model, &queries, &v, true);
        fw.gradients(loss)
    };
    let value = |m: &Model| {
        let (fw, loss) = total_loss(m, &queries, &v, false);
        fw.tape.value(loss).item()
    };
    let names: Vec<String> = model.params.names().map(str::to_owned).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for name in names {
        let len = model.params.get(&name).unwrap().data.len();
        for j in 0..len {
            let x = model.params.get(&name).unwrap().data[j];
            model.params.get_mut(&name).unwrap().data[j] = x + FD_STEP;
            let up = value(&model);
            model.params.get_mut(&name).unwrap().data[j] = x - FD_STEP;
            let down = value(&model);
            model.params.get_mut(&name).unwrap().data[j] = x;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        match grads.get(&name) {
            Some(t) => analytic.extend_from_slice(&t.data),
            None => analytic.extend(std::iter::repeat(0.0).take(len)),
        }
    }
    relative_error(&analytic, &numeric)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut per_op: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut e2e: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        for d in GRAD_DIMS {
            let mut rng = seeded(seed, d as u64);
            for (name, e) in op_errors(d, &mut rng) {
                let slot = per_op.entry(name).or_insert(0.0);
                *slot = slot.max(e);
            }
            for kind in [ModelKind::Nrn, ModelKind::ValueAsEntity] {
                e2e = e2e.max(end_to_end_error(kind, d, seed));
            }
        }
    }
    let elapsed = started.elapsed();
    let worst_op = per_op.values().fold(0.0f64, |a, &b| a.max(b));
    let ops: Vec<String> = per_op.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        worst_op < OP_TOLERANCE && e2e < END_TO_END_TOLERANCE && elapsed < GRAD_BUDGET,
        format!(
            "max rel. err per op [{}], end-to-end {e2e:.1e} over {GRAD_SEEDS} seeds at d in {GRAD_DIMS:?}",
            ops.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------
// 4. invariance suite

const PERMUTATION_TOLERANCE: f64 = 1e-10;
const SOFTMAX_TOLERANCE: f64 = 1e-12;
const PAIR_TOLERANCE: f64 = 1e-12;

fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 2 {
        vec![vec![0, 1], vec![1, 0]]
    } else {
        vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0],
        ]
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn state_values(s: &EncoderState) -> Vec<f64> {
    match s {
        EncoderState::Entity(q) | EncoderState::Value(q) => q.clone(),
        EncoderState::Numeric { mu, log_var } => mu.iter().chain(log_var).copied().collect(),
    }
}

fn invariance_suite() -> Outcome {
    let mut rng = seeded(4, 0);
    let mut failures = Vec::new();

    // permutation invariance of the merge, as an op and through the model
    let mut perm_err: f64 = 0.0;
    let mut softmax_err: f64 = 0.0;
    for _ in 0..100 {
        let width = [2, 4, 8, 16][rng.gen_range(0..4)];
        let m = rng.gen_range(2..=3);
        let states: Vec<Tensor> = (0..m).map(|_| random_tensor(BATCH, width, &mut rng)).collect();
        let weights = deepset_weights(width, &mut rng);
        let mut reference: Option<Vec<f64>> = None;
        for p in permutations(m) {
            let mut tape = Tape::new();
            let w: Vec<Var> = weights.iter().map(|t| tape.constant(t.clone())).collect();
            let xs: Vec<Var> = p.iter().map(|&i| tape.constant(states[i].clone())).collect();
            let (out, attention) = deepset_merge_with_attention(&mut tape, &deepset_vars(&w), &xs);
            for a in attention {
                let t = tape.value(a);
                for r in 0..t.rows {
                    softmax_err = softmax_err.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
            let out = tape.value(out).data.clone();
            match &reference {
                None => reference = Some(out),
                Some(r) => perm_err = perm_err.max(max_abs_diff(r, &out)),
            }
        }
    }
    let v = tiny_vocab();
    for kind in [ModelKind::Nrn, ModelKind::ValueAsEntity] {
        let model = Model::new(ModelConfig::new(kind, 4), &v, EncodingSpec::sinusoidal(4).unwrap(), 3).unwrap();
        for (a, b) in [
            (
                "(i, (rp#r, (e#A)), (rp#s, (e#B)), (rap#a, (nv#3.0@t0)))",
                "(i, (rap#a, (nv#3.0@t0)), (rp#r, (e#A)), (rp#s, (e#B)))",
            ),
            (
                "(u, (ap#a, (e#B)), (np#SmallerThan, (nv#5.0@t0)))",
                "(u, (np#SmallerThan, (nv#5.0@t0)), (ap#a, (e#B)))",
            ),
        ] {
            let qa = BoundQuery::bind(&parse(a).unwrap(), &v).unwrap();
            let qb = BoundQuery::bind(&parse(b).unwrap(), &v).unwrap();
            let sa = state_values(&model.encode_query(&qa).unwrap());
            let sb = state_values(&model.encode_query(&qb).unwrap());
            perm_err = perm_err.max(max_abs_diff(&sa, &sb));
        }
    }
    if perm_err > PERMUTATION_TOLERANCE {
        failures.push("permutation");
    }

    // softmax rows, including large logits
    for scale in [1.0, 10.0, 100.0, 700.0] {
        let mut tape = Tape::new();
        let logits = random_tensor(8, 5, &mut rng);
        let scaled = Tensor::new(8, 5, logits.data.iter().map(|x| x * scale).collect());
        let x = tape.constant(scaled);
        let s = tape.softmax_rows(x);
        let t = tape.value(s);
        for r in 0..t.rows {
            softmax_err = softmax_err.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
        }
    }
    if softmax_err > SOFTMAX_TOLERANCE {
        failures.push("softmax");
    }

    // positive, finite variance at every numeric-phase node
    let mut variance_checks = 0usize;
    let mut variance_bad = 0usize;
    let g = SynthOptions::default().generate(4);
    let splits = split_edges(&g, 4)
        .and_then(|s| s.augment_numerical(DEFAULT_EDGE_CAP, 4))
        .map_err(|e| e.to_string())?;
    let sample = SampleConfig {
        numeric_fraction: 1.0,
        ..SampleConfig::uniform(
            &GeneralQueryType::ALL,
            SplitCounts {
                train: 20,
                val: 0,
                test: 0,
            },
        )
    };
    let data = sample_dataset(&splits, &sample, 4).map_err(|e| e.to_string())?;
    let vocab = splits.train.vocab();
    for (seed, stretch) in [(0u64, 1.0), (1, 5.0), (2, 25.0)] {
        let mut model = pipeline::init_model(
            &RunConfig {
                dim: 8,
                seed,
                ..RunConfig::default()
            },
            &splits.train,
        )
        .map_err(|e| e.to_string())?;
        let names: Vec<String> = model.params.names().map(str::to_owned).collect();
        for n in names {
            model.params.get_mut(&n).unwrap().data.iter_mut().for_each(|x| *x *= stretch);
        }
        let d = model.dim();
        for q in &data.train {
            let bound = BoundQuery::bind(&parse(&q.record.query).unwrap(), vocab).unwrap();
            let mut fw = Forward::new(&model, false);
            let states = fw.encode_nodes(&[&bound], &bound.topological_order()).unwrap();
            for (i, s) in states.iter().enumerate() {
                if bound.node(i).phase != Phase::Numeric {
                    continue;
                }
                let row = fw.tape.value(s.unwrap()).row(0).to_vec();
                for &log_var in &row[d..] {
                    variance_checks += 1;
                    let var = log_var.exp();
                    if !(var > 0.0 && var.is_finite()) {
                        variance_bad += 1;
                    }
                }
            }
        }
    }
    if variance_bad > 0 || variance_checks == 0 {
        failures.push("variance");
    }

    // sinusoidal components come in sin/cos pairs of one frequency
    let mut pair_err: f64 = 0.0;
    for dim in [2, 4, 8, 16, 32] {
        let spec = EncodingSpec::sinusoidal(dim).unwrap();
        for i in 0..1000 {
            let x = if i == 0 { 0.0 } else { rng.gen_range(-1e4..1e4) };
            let e = sinusoidal_encode(x, &spec);
            for p in e.chunks(2) {
                pair_err = pair_err.max((p[0] * p[0] + p[1] * p[1] - 1.0).abs());
            }
        }
    }
    if pair_err > PAIR_TOLERANCE {
        failures.push("sinusoidal pairs");
    }

    // DICE endpoints, on random ranges and on ranges observed in a graph
    let mut endpoint_cases = 0usize;
    let mut endpoint_bad = 0usize;
    let mut dice_check = |spec: &EncodingSpec, ty: &str, lo: f64, hi: f64| {
        let unit = |first: f64| {
            let mut u = vec![0.0; spec.dim];
            u[0] = first;
            u
        };
        for (x, want) in [(lo, unit(1.0)), (hi, unit(-1.0)), (lo - 1.0, unit(1.0)), (hi + 1.0, unit(-1.0))] {
            endpoint_cases += 1;
            if dice_encode(x, ty, spec).unwrap() != want {
                endpoint_bad += 1;
            }
        }
    };
    for dim in 2..=16 {
        for _ in 0..20 {
            let lo = rng.gen_range(-1e3..1e3);
            let hi = lo + rng.gen_range(1e-3..1e3);
            let spec = EncodingSpec::dice(dim, [("t".to_owned(), (lo, hi))].into()).unwrap();
            dice_check(&spec, "t", lo, hi);
        }
        let spec = EncodingSpec::from_graph(EncodingKind::Dice, dim, &splits.train).map_err(|e| e.to_string())?;
        for (ty, &(lo, hi)) in &spec.ranges {
            dice_check(&spec, ty, lo, hi);
        }
    }
    if endpoint_bad > 0 {
        failures.push("DICE endpoints");
    }

    check(
        failures.is_empty(),
        format!(
            "permutation {perm_err:.1e}, softmax row sums {softmax_err:.1e}, {variance_checks} variances with {variance_bad} non-positive, sinusoidal pairs {pair_err:.1e}, DICE endpoints {}/{endpoint_cases} exact{}",
            endpoint_cases - endpoint_bad,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------
// 5. metric arithmetic

const METRIC_TOLERANCE: f64 = 1e-9;
const MONTE_CARLO_TRIALS: usize = 200_000;
const MONTE_CARLO_TOLERANCE: f64 = 2e-3;

/// Metrics from the rank dump text alone: per-query means over answers,
/// per-type means over queries, macro over types, micro over queries.
/// Returns `type -> [hit1, hit3, hit10, mrr]` with "macro" and "micro".
fn script_metrics(dump: &str) -> BTreeMap<String, [f64; 4]> {
    let mut queries: BTreeMap<u64, (String, Vec<f64>)> = BTreeMap::new();
    for line in dump.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let id: u64 = cols[0].parse().unwrap();
        let rank: f64 = cols[3].parse().unwrap();
        queries
            .entry(id)
            .or_insert_with(|| (cols[1].to_owned(), Vec::new()))
            .1
            .push(rank);
    }
    let per_query = |ranks: &[f64]| -> [f64; 4] {
        let n = ranks.len() as f64;
        let frac = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        [frac(1.0), frac(3.0), frac(10.0), ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n]
    };
    let mean = |rows: &[[f64; 4]]| -> [f64; 4] {
        let mut m = [0.0; 4];
        for r in rows {
            for j in 0..4 {
                m[j] += r[j];
            }
        }
        m.map(|x| x / rows.len() as f64)
    };
    let mut by_type: BTreeMap<String, Vec<[f64; 4]>> = BTreeMap::new();
    let mut all = Vec::new();
    for (ty, ranks) in queries.values() {
        let m = per_query(ranks);
        by_type.entry(ty.clone()).or_default().push(m);
        all.push(m);
    }
    let mut out: BTreeMap<String, [f64; 4]> = by_type.iter().map(|(t, rows)| (t.clone(), mean(rows))).collect();
    let type_means: Vec<[f64; 4]> = out.values().copied().collect();
    out.insert("macro".into(), mean(&type_means));
    out.insert("micro".into(), mean(&all));
    out
}

/// Largest difference between the script and a report, read as plain JSON.
fn script_vs_report(dump: &str, report_json: &str) -> f64 {
    let expected = script_metrics(dump);
    let report: serde_json::Value = serde_json::from_str(report_json).unwrap();
    let keys = ["hit1", "hit3", "hit10", "mrr"];
    let mut worst: f64 = 0.0;
    for (ty, want) in &expected {
        let got = match ty.as_str() {
            "macro" | "micro" => &report[ty],
            _ => &report["per_type"][ty],
        };
        for (j, k) in keys.iter().enumerate() {
            let g = got[k].as_f64().unwrap_or(f64::NAN);
            let diff = (g - want[j]).abs();
            worst = if diff.is_nan() { f64::INFINITY } else { worst.max(diff) };
        }
    }
    worst
}

fn metric_arithmetic() -> Outcome {
    let mut failures = Vec::new();

    // the frozen dump checked in next to this file
    let frozen_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/frozen_ranks.tsv");
    let frozen = std::fs::read_to_string(&frozen_path).map_err(|e| e.to_string())?;
    let records = read_rank_dump(&frozen_path).map_err(|e| e.to_string())?;
    let report = Report::from_records(Split::Test, &records, 0);
    let frozen_err = script_vs_report(&frozen, &serde_json::to_string(&report).unwrap());
    if frozen_err > METRIC_TOLERANCE {
        failures.push("frozen dump");
    }

    // a dump written by the eval command
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = small_run(dir.path(), &small_config(0, 200)).map_err(|e| e.to_string())?;
    let dump = std::fs::read_to_string(run.join("eval").join(pipeline::RANKS_FILE)).map_err(|e| e.to_string())?;
    let written = std::fs::read_to_string(run.join("eval").join(pipeline::REPORT_JSON)).map_err(|e| e.to_string())?;
    let eval_err = script_vs_report(&dump, &written);
    if eval_err > METRIC_TOLERANCE {
        failures.push("eval dump");
    }

    // worked example
    let worked = Report::from_records(
        Split::Test,
        &[EvalRecord {
            query_id: 0,
            shape: GeneralQueryType::OneP,
            ranks: vec![(0, 1), (1, 4)],
        }],
        0,
    );
    if worked.macro_avg.mrr != 0.625 || worked.micro.mrr != 0.625 {
        failures.push("worked example");
    }

    // closed-form random ranking against simulation
    let n = 100;
    let mut rng = seeded(5, 0);
    let simulated = (0..MONTE_CARLO_TRIALS)
        .map(|_| 1.0 / rng.gen_range(1..=n) as f64)
        .sum::<f64>()
        / MONTE_CARLO_TRIALS as f64;
    let closed = random_expected_mrr(n);
    if (simulated - closed).abs() > MONTE_CARLO_TOLERANCE {
        failures.push("random baseline");
    }

    check(
        failures.is_empty(),
        format!(
            "frozen dump {frozen_err:.1e}, eval dump {eval_err:.1e}, ranks {{1,4}} give MRR {}, random n={n} closed {closed:.5} vs simulated {simulated:.5}{}",
            worked.macro_avg.mrr,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failing: {}", failures.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------
// shared small pipeline run

fn small_config(seed: u64, steps: u64) -> RunConfig {
    RunConfig {
        seed,
        dim: 8,
        steps,
        batch_size: 32,
        numeric_fraction: 0.5,
        shape_counts: GeneralQueryType::ALL
            .iter()
            .map(|&s| {
                (
                    s,
                    SplitCounts {
                        train: 40,
                        val: 10,
                        test: 10,
                    },
                )
            })
            .collect(),
        ..RunConfig::default()
    }
}

/// synth, build, sample, train and eval under `root`; returns `root`.
fn small_run(root: &Path, cfg: &RunConfig) -> numcqa::Result<std::path::PathBuf> {
    let (cfg, seed) = (cfg, cfg.seed);
    let opts = SynthOptions {
        entities: 60,
        values: 40,
        density: 0.05,
        ..SynthOptions::default()
    };
    pipeline::cmd_synth(&root.join("raw"), &opts, seed)?;
    pipeline::cmd_build(&TripleFiles::in_dir(&root.join("raw")), &root.join("graphs"), cfg)?;
    pipeline::cmd_sample(&root.join("graphs"), &root.join("queries"), cfg)?;
    pipeline::cmd_train(&root.join("graphs"), &root.join("queries"), &root.join("model"), cfg, None)?;
    pipeline::cmd_eval(
        &root.join("model").join(pipeline::CHECKPOINT_FILE),
        &root.join("graphs"),
        &root.join("queries"),
        Split::Test,
        &root.join("eval"),
    )?;
    Ok(root.to_path_buf())
}

// ---------------------------------------------------------------------
// 6. learning signal

const SIGNAL_SEEDS: [u64; 3] = [0, 1, 2];
const SIGNAL_STEPS: u64 = 5000;
const SIGNAL_RATIO: f64 = 3.0;
const SIGNAL_MARGIN: f64 = 0.0;
const SIGNAL_BUDGET: Duration = Duration::from_secs(15 * 60);

/// The 200-entity fixture: enough values per type that comparisons are
/// informative, and a cap high enough to keep every comparison edge.
fn signal_fixture() -> (SynthOptions, RunConfig) {
    let opts = SynthOptions {
        entities: 200,
        relations: 4,
        attribute_types: 3,
        values: 300,
        density: 0.02,
        communities: 10,
        affinity: 0.9,
        attribute_coverage: 0.8,
    };
    let cfg = RunConfig {
        dim: 16,
        steps: SIGNAL_STEPS,
        numeric_fraction: 0.5,
        edge_cap: 20_000,
        encoding: EncodingKind::Sinusoidal,
        shape_counts: GeneralQueryType::ALL
            .iter()
            .map(|&s| {
                (
                    s,
                    SplitCounts {
                        train: 1000,
                        val: 50,
                        test: 50,
                    },
                )
            })
            .collect(),
        ..RunConfig::default()
    };
    (opts, cfg)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn learning_signal() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (opts, base) = signal_fixture();
    let (mut nrn, mut ablation, mut random) = (Vec::new(), Vec::new(), Vec::new());
    for seed in SIGNAL_SEEDS {
        let root = dir.path().join(format!("seed{seed}"));
        let mut cfg = RunConfig { seed, ..base.clone() };
        let run = || -> numcqa::Result<()> {
            pipeline::cmd_synth(&root.join("raw"), &opts, seed)?;
            pipeline::cmd_build(&TripleFiles::in_dir(&root.join("raw")), &root.join("graphs"), &cfg)?;
            pipeline::cmd_sample(&root.join("graphs"), &root.join("queries"), &cfg)?;
            Ok(())
        };
        run().map_err(|e| e.to_string())?;
        for kind in [ModelKind::Nrn, ModelKind::ValueAsEntity] {
            cfg.model = kind;
            let model_dir = root.join(format!("model_{kind:?}"));
            let eval = || -> numcqa::Result<pipeline::EvalOutcome> {
                pipeline::cmd_train(&root.join("graphs"), &root.join("queries"), &model_dir, &cfg, None)?;
                pipeline::cmd_eval(
                    &model_dir.join(pipeline::CHECKPOINT_FILE),
                    &root.join("graphs"),
                    &root.join("queries"),
                    Split::Test,
                    &root.join(format!("eval_{kind:?}")),
                )
            };
            let out = eval().map_err(|e| e.to_string())?;
            match kind {
                ModelKind::Nrn => {
                    nrn.push(out.report.macro_avg.mrr);
                    random.push(out.baseline.macro_avg.mrr);
                }
                ModelKind::ValueAsEntity => ablation.push(out.report.macro_avg.mrr),
            }
        }
    }
    let elapsed = started.elapsed();
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "test macro MRR per seed: NRN {}, value-as-entity {}, random {}",
        fmt(&nrn),
        fmt(&ablation),
        fmt(&random)
    );
    let (n, a, r) = (median(nrn), median(ablation), median(random));
    check(
        n >= SIGNAL_RATIO * r && n - a >= SIGNAL_MARGIN && elapsed < SIGNAL_BUDGET,
        format!(
            "{detail}; medians {n:.3} vs {a:.3} vs {r:.3} ({:.2}x random, margin {:+.3})",
            n / r,
            n - a
        ),
    )
}

// ---------------------------------------------------------------------
// 7. determinism

const TRACE_STEPS: u64 = 100;
const TRACE_TOLERANCE: f64 = 1e-9;

fn dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let cfg = small_config(7, TRACE_STEPS);
    let opts = SynthOptions {
        entities: 80,
        values: 60,
        ..SynthOptions::default()
    };
    let mut diffs = Vec::new();
    let run = || -> numcqa::Result<Vec<Vec<numcqa::model::StepRecord>>> {
        pipeline::cmd_synth(&root.join("raw"), &opts, 7)?;
        let files = TripleFiles::in_dir(&root.join("raw"));
        pipeline::cmd_build(&files, &root.join("g1"), &cfg)?;
        pipeline::cmd_build(&files, &root.join("g2"), &cfg)?;
        pipeline::cmd_sample(&root.join("g1"), &root.join("q1"), &cfg)?;
        pipeline::cmd_sample(&root.join("g2"), &root.join("q2"), &cfg)?;
        let a = pipeline::cmd_train(&root.join("g1"), &root.join("q1"), &root.join("m1"), &cfg, None)?;
        let b = pipeline::cmd_train(&root.join("g1"), &root.join("q1"), &root.join("m2"), &cfg, None)?;
        Ok(vec![a.trace, b.trace])
    };
    let traces = run().map_err(|e| e.to_string())?;
    for (a, b) in [("g1", "g2"), ("q1", "q2")] {
        let (fa, fb) = (dir_files(&root.join(a)), dir_files(&root.join(b)));
        if fa.is_empty() || fa != fb {
            diffs.push(format!("{a} and {b} differ"));
        }
    }
    let (ta, tb) = (&traces[0], &traces[1]);
    let mut trace_err: f64 = 0.0;
    if ta.len() as u64 != TRACE_STEPS || ta.len() != tb.len() {
        diffs.push(format!("trace lengths {} and {}", ta.len(), tb.len()));
    }
    for (x, y) in ta.iter().zip(tb) {
        if x.step != y.step || x.kind != y.kind {
            diffs.push(format!("step {} differs in kind", x.step));
        }
        trace_err = trace_err.max((x.loss - y.loss).abs());
    }
    if trace_err > TRACE_TOLERANCE {
        diffs.push("loss trace".into());
    }
    let ck = |m: &str| std::fs::read(root.join(m).join(pipeline::CHECKPOINT_FILE)).unwrap();
    if ck("m1") != ck("m2") {
        diffs.push("checkpoints differ".into());
    }
    check(
        diffs.is_empty(),
        format!(
            "build and sample artifacts byte-identical: {}, {} step loss traces differ by at most {trace_err:.1e}{}",
            !diffs.iter().any(|d| d.contains("differ")),
            ta.len(),
            if diffs.is_empty() {
                String::new()
            } else {
                format!("; {}", diffs.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------
// 8. timing report

fn timing_report() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // the default model width and batch size, on the small graph
    let cfg = RunConfig {
        dim: 16,
        batch_size: 128,
        ..small_config(3, 200)
    };
    let run = small_run(dir.path(), &cfg).map_err(|e| e.to_string())?;
    let eval = run.join("eval");
    let text = std::fs::read_to_string(eval.join(pipeline::TIMING_TEXT)).map_err(|e| e.to_string())?;
    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(eval.join(pipeline::TIMING_JSON)).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let train = json["train_ms_per_query"].as_f64();
    let infer = json["inference_ms_per_query"].as_f64();
    let ok = match (train, infer) {
        (Some(t), Some(i)) => t > 0.0 && i > 0.0 && i < t,
        _ => false,
    };
    check(
        ok && text.contains("training") && text.contains("inference"),
        format!(
            "training {} ms/query, inference {} ms/query",
            train.map_or("-".into(), |t| format!("{t:.4}")),
            infer.map_or("-".into(), |i| format!("{i:.4}"))
        ),
    )
}
