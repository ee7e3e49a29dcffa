//! Filtered ranking metrics on hard answers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsl::{general_type_of, parse, BoundQuery, GeneralQueryType};
use crate::error::{Error, Result};
use crate::kg::Vocab;
use crate::model::{candidates, rank_answers, Model, Scorer};
use crate::sampler::{QueryRecord, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Hit(usize),
    Mrr,
}

impl Metric {
    pub fn of_rank(self, rank: usize) -> f64 {
        match self {
            Metric::Hit(k) => {
                if rank <= k {
                    1.0
                } else {
                    0.0
                }
            }
            Metric::Mrr => 1.0 / rank as f64,
        }
    }
}

/// Mean of `metric` over the ranks of a query's hard answers, or `None`
/// when there are none.
pub fn metric_of_query(ranks: &[usize], metric: Metric) -> Option<f64> {
    if ranks.is_empty() {
        return None;
    }
    Some(ranks.iter().map(|&r| metric.of_rank(r)).sum::<f64>() / ranks.len() as f64)
}

/// Answers of `r` in the `split` graph that are not answers in the graph
/// before it, and the full answer set of `split` used for filtering.
pub fn hard_answers(r: &QueryRecord, split: Split) -> Result<(Vec<usize>, BTreeSet<usize>)> {
    let (full, smaller) = match split {
        Split::Train => return Err(Error::Config("train queries have no hard answers".into())),
        Split::Val => (r.answers_val.as_ref(), &r.answers_train),
        Split::Test => (r.answers_test.as_ref(), r.answers_val.as_ref().unwrap_or(&r.answers_train)),
    };
    let full = full.ok_or_else(|| Error::Config(format!("record lacks {} answers", split.name())))?;
    let smaller: BTreeSet<usize> = smaller.iter().copied().collect();
    let hard = full.iter().copied().filter(|a| !smaller.contains(a)).collect();
    Ok((hard, full.iter().copied().collect()))
}

/// Ranks of one query's hard answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: usize,
    pub shape: GeneralQueryType,
    /// `(answer id, filtered rank)`, in answer order.
    pub ranks: Vec<(usize, usize)>,
}

impl EvalRecord {
    pub fn rank_values(&self) -> Vec<usize> {
        self.ranks.iter().map(|&(_, r)| r).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    pub mrr: f64,
}

impl Metrics {
    pub fn of_ranks(ranks: &[usize]) -> Option<Self> {
        Some(Metrics {
            hit1: metric_of_query(ranks, Metric::Hit(1))?,
            hit3: metric_of_query(ranks, Metric::Hit(3))?,
            hit10: metric_of_query(ranks, Metric::Hit(10))?,
            mrr: metric_of_query(ranks, Metric::Mrr)?,
        })
    }

    /// Unweighted mean.
    pub fn mean(items: &[Metrics]) -> Metrics {
        if items.is_empty() {
            return Metrics::default();
        }
        let n = items.len() as f64;
        let mut m = Metrics::default();
        for x in items {
            m.hit1 += x.hit1;
            m.hit3 += x.hit3;
            m.hit10 += x.hit10;
            m.mrr += x.mrr;
        }
        m.hit1 /= n;
        m.hit3 /= n;
        m.hit10 /= n;
        m.mrr /= n;
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub queries: usize,
    pub answers: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: Split,
    pub per_type: BTreeMap<GeneralQueryType, TypeMetrics>,
    /// Mean over types of the per-type means.
    #[serde(rename = "macro")]
    pub macro_avg: Metrics,
    /// Mean over all queries.
    pub micro: Metrics,
    pub queries: usize,
    /// Queries without hard answers.
    pub excluded: usize,
}

impl Report {
    /// Aggregates per-query records. `excluded` counts queries dropped
    /// for lack of hard answers.
    pub fn from_records(split: Split, records: &[EvalRecord], excluded: usize) -> Self {
        let mut by_type: BTreeMap<GeneralQueryType, (Vec<Metrics>, usize)> = BTreeMap::new();
        let mut all = Vec::new();
        for r in records {
            let Some(m) = Metrics::of_ranks(&r.rank_values()) else {
                continue;
            };
            let e = by_type.entry(r.shape).or_default();
            e.0.push(m);
            e.1 += r.ranks.len();
            all.push(m);
        }
        let per_type: BTreeMap<GeneralQueryType, TypeMetrics> = by_type
            .into_iter()
            .map(|(t, (ms, answers))| {
                (
                    t,
                    TypeMetrics {
                        queries: ms.len(),
                        answers,
                        metrics: Metrics::mean(&ms),
                    },
                )
            })
            .collect();
        let type_means: Vec<Metrics> = per_type.values().map(|t| t.metrics).collect();
        Report {
            split,
            macro_avg: Metrics::mean(&type_means),
            micro: Metrics::mean(&all),
            queries: all.len(),
            excluded,
            per_type,
        }
    }

    /// Aligned text table, one row per type plus the two averages.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split: {}  queries: {}  excluded: {}", self.split.name(), self.queries, self.excluded);
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "type", "queries", "hit@1", "hit@3", "hit@10", "mrr"
        );
        let row = |s: &mut String, name: &str, n: usize, m: &Metrics| {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                name, n, m.hit1, m.hit3, m.hit10, m.mrr
            );
        };
        for (t, m) in &self.per_type {
            row(&mut s, t.abbreviation(), m.queries, &m.metrics);
        }
        row(&mut s, "macro", self.queries, &self.macro_avg);
        row(&mut s, "micro", self.queries, &self.micro);
        s
    }
}

/// Ranks every hard answer of every record. Records without hard answers
/// are counted and skipped.
pub fn rank_records(
    model: &Model,
    records: &[QueryRecord],
    split: Split,
    vocab: &Vocab,
) -> Result<(Vec<EvalRecord>, usize)> {
    let mut kept = Vec::new();
    let mut excluded = 0;
    for (i, r) in records.iter().enumerate() {
        let (hard, known) = hard_answers(r, split)?;
        if hard.is_empty() {
            excluded += 1;
            continue;
        }
        let graph = parse(&r.query)?;
        let shape = general_type_of(&graph)?;
        kept.push((i, shape, BoundQuery::bind(&graph, vocab)?, hard, known));
    }
    let queries: Vec<&BoundQuery> = kept.iter().map(|k| &k.2).collect();
    let states = model.encode_all(&queries)?;
    let scorer = Scorer::new(model, vocab)?;
    let mut out = Vec::with_capacity(kept.len());
    for ((i, shape, q, hard, known), state) in kept.iter().zip(&states) {
        let ids = candidates(q, vocab);
        let scores = scorer.score(state, &ids)?;
        let ranks = rank_answers(&scores, &ids, hard, known)?;
        out.push(EvalRecord {
            query_id: *i,
            shape: *shape,
            ranks: hard.iter().copied().zip(ranks).collect(),
        });
    }
    Ok((out, excluded))
}

pub fn evaluate(model: &Model, records: &[QueryRecord], split: Split, vocab: &Vocab) -> Result<(Vec<EvalRecord>, Report)> {
    let (ranked, excluded) = rank_records(model, records, split, vocab)?;
    let report = Report::from_records(split, &ranked, excluded);
    Ok((ranked, report))
}

/// `H_m / m`, the expected reciprocal rank of one answer placed uniformly
/// among `m` candidates.
pub fn random_expected_mrr(m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    (1..=m).map(|r| 1.0 / r as f64).sum::<f64>() / m as f64
}

/// Expected metrics of a model that scores candidates at random, with the
/// same filtering and aggregation as [`evaluate`]. Each hard answer
/// competes with the candidates that are not known answers.
pub fn random_expected_report(records: &[QueryRecord], split: Split, vocab: &Vocab) -> Result<Report> {
    let mut by_type: BTreeMap<GeneralQueryType, (Vec<Metrics>, usize)> = BTreeMap::new();
    let mut all = Vec::new();
    let mut excluded = 0;
    for r in records {
        let (hard, known) = hard_answers(r, split)?;
        if hard.is_empty() {
            excluded += 1;
            continue;
        }
        let graph = parse(&r.query)?;
        let q = BoundQuery::bind(&graph, vocab)?;
        let n = candidates(&q, vocab).len() - known.len() + 1;
        let hit = |k: usize| k.min(n) as f64 / n as f64;
        let m = Metrics {
            hit1: hit(1),
            hit3: hit(3),
            hit10: hit(10),
            mrr: random_expected_mrr(n),
        };
        let e = by_type.entry(general_type_of(&graph)?).or_default();
        e.0.push(m);
        e.1 += hard.len();
        all.push(m);
    }
    let per_type: BTreeMap<GeneralQueryType, TypeMetrics> = by_type
        .into_iter()
        .map(|(t, (ms, answers))| {
            (
                t,
                TypeMetrics {
                    queries: ms.len(),
                    answers,
                    metrics: Metrics::mean(&ms),
                },
            )
        })
        .collect();
    let type_means: Vec<Metrics> = per_type.values().map(|t| t.metrics).collect();
    Ok(Report {
        split,
        macro_avg: Metrics::mean(&type_means),
        micro: Metrics::mean(&all),
        queries: all.len(),
        excluded,
        per_type,
    })
}

const DUMP_HEADER: &str = "query_id\ttype\tanswer\trank";

/// Writes one line per (query, hard answer, rank).
pub fn write_rank_dump(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut s = String::from(DUMP_HEADER);
    s.push('\n');
    for r in records {
        for &(a, rank) in &r.ranks {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", r.query_id, r.shape.abbreviation(), a, rank);
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_rank_dump(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |line: usize, message: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out: Vec<EvalRecord> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(malformed(n + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| malformed(n + 1, e.to_string()));
        let (id, answer, rank) = (num(f[0])?, num(f[2])?, num(f[3])?);
        if rank == 0 {
            return Err(malformed(n + 1, "rank must be at least 1".into()));
        }
        let shape: GeneralQueryType = f[1].parse().map_err(|e: Error| malformed(n + 1, e.to_string()))?;
        match out.last_mut() {
            Some(r) if r.query_id == id => r.ranks.push((answer, rank)),
            _ => out.push(EvalRecord {
                query_id: id,
                shape,
                ranks: vec![(answer, rank)],
            }),
        }
    }
    Ok(out)
}

/// Average wall-clock cost per query, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ms_per_query: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_ms_per_query: Option<f64>,
    #[serde(default)]
    pub train_queries: usize,
    #[serde(default)]
    pub inference_queries: usize,
}

impl Timing {
    pub fn to_text(&self) -> String {
        let cell = |x: Option<f64>| x.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
        format!(
            "{:<28} {:>14}\n{:<28} {:>14}\n{:<28} {:>14}\n",
            "", "ms per query",
            "training",
            cell(self.train_ms_per_query),
            "inference",
            cell(self.inference_ms_per_query)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(metric_of_query(&[1, 4], Metric::Mrr), Some(0.625));
        assert_eq!(metric_of_query(&[3, 4], Metric::Hit(3)), Some(0.5));
        for m in [Metric::Hit(1), Metric::Hit(3), Metric::Hit(10), Metric::Mrr] {
            assert_eq!(metric_of_query(&[1], m), Some(1.0));
        }
        assert_eq!(metric_of_query(&[], Metric::Mrr), None);
    }

    #[test]
    fn random_mrr_closed_form() {
        assert!((random_expected_mrr(100) - 0.05187).abs() < 1e-4);
        assert_eq!(random_expected_mrr(1), 1.0);
    }

    #[test]
    fn hard_answers_by_split() {
        let r = QueryRecord {
            query: "(e#A)".into(),
            answers_train: vec![1],
            answers_val: Some(vec![1, 2]),
            answers_test: Some(vec![1, 2, 5]),
        };
        let (h, k) = hard_answers(&r, Split::Val).unwrap();
        assert_eq!(h, vec![2]);
        assert_eq!(k, [1, 2].into());
        let (h, k) = hard_answers(&r, Split::Test).unwrap();
        assert_eq!(h, vec![5]);
        assert_eq!(k.len(), 3);
        assert!(hard_answers(&r, Split::Train).is_err());
    }

    #[test]
    fn aggregation_is_macro_and_micro() {
        let recs = vec![
            EvalRecord {
                query_id: 0,
                shape: GeneralQueryType::OneP,
                ranks: vec![(0, 1)],
            },
            EvalRecord {
                query_id: 1,
                shape: GeneralQueryType::OneP,
                ranks: vec![(0, 1)],
            },
            EvalRecord {
                query_id: 2,
                shape: GeneralQueryType::TwoP,
                ranks: vec![(0, 2)],
            },
        ];
        let rep = Report::from_records(Split::Test, &recs, 4);
        assert_eq!(rep.macro_avg.mrr, 0.75);
        assert!((rep.micro.mrr - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(rep.excluded, 4);
        let m = rep.macro_avg;
        assert!(m.hit1 <= m.hit3 && m.hit3 <= m.hit10 && m.mrr <= 1.0);
    }

    #[test]
    fn dump_round_trip() {
        let recs = vec![
            EvalRecord {
                query_id: 3,
                shape: GeneralQueryType::Pi,
                ranks: vec![(7, 2), (9, 11)],
            },
            EvalRecord {
                query_id: 5,
                shape: GeneralQueryType::Up,
                ranks: vec![(1, 1)],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ranks.tsv");
        write_rank_dump(&p, &recs).unwrap();
        assert_eq!(read_rank_dump(&p).unwrap(), recs);
    }
}
