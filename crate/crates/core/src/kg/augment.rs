use std::collections::BTreeMap;

use rand::seq::index;

use super::{Comparison, KnowledgeGraph, NumEdge, NumericalRelation, ValueId, ValueTypeId};
use crate::error::Result;
use crate::rng::seeded;

/// Upper limit of sampled edges per numerical relation.
pub const DEFAULT_EDGE_CAP: usize = 4000;

/// Values of one type sorted ascending, with the satisfying-pair count
/// for every source value under one relation.
struct PairSpace<'a> {
    sorted: &'a [(f64, ValueId)],
    // for source i, satisfying targets are sorted[ranges[i].0 .. ranges[i].1]
    ranges: Vec<(usize, usize)>,
}

impl<'a> PairSpace<'a> {
    fn new(sorted: &'a [(f64, ValueId)], f: NumericalRelation) -> Self {
        let (factor, cmp) = f.form();
        let ranges = sorted
            .iter()
            .map(|&(x, _)| {
                let bound = factor * x;
                let lo = sorted.partition_point(|&(y, _)| y < bound);
                let hi = sorted.partition_point(|&(y, _)| y <= bound);
                match cmp {
                    Comparison::Equal => (lo, hi),
                    Comparison::Less => (0, lo),
                    Comparison::Greater => (hi, sorted.len()),
                }
            })
            .collect();
        PairSpace { sorted, ranges }
    }

    fn len(&self) -> usize {
        self.ranges.iter().map(|(a, b)| b - a).sum()
    }
}

/// Samples up to `cap_per_type` edges for each numerical relation,
/// uniformly without replacement among ordered pairs of same-typed value
/// nodes of `g`'s vocabulary that satisfy the relation. Existing edges
/// of `g` may be drawn again; the caller deduplicates.
pub fn sample_numerical_edges(g: &KnowledgeGraph, cap_per_type: usize, seed: u64) -> Vec<NumEdge> {
    let vocab = g.vocab();
    let mut by_type: BTreeMap<ValueTypeId, Vec<(f64, ValueId)>> = BTreeMap::new();
    for (id, node) in vocab.values() {
        by_type.entry(node.value_type).or_default().push((node.value, id));
    }
    for list in by_type.values_mut() {
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    }

    let mut out = Vec::new();
    for f in NumericalRelation::ALL {
        let spaces: Vec<PairSpace> = by_type.values().map(|s| PairSpace::new(s, f)).collect();
        // flatten (type, source, target-offset) into one index space
        let mut offsets = Vec::new();
        let mut total = 0usize;
        for space in &spaces {
            for &(a, b) in &space.ranges {
                offsets.push(total);
                total += b - a;
            }
        }
        debug_assert_eq!(total, spaces.iter().map(PairSpace::len).sum::<usize>());
        if total == 0 {
            continue;
        }
        let amount = cap_per_type.min(total);
        let mut rng = seeded(seed, 16 + f.index() as u64);
        let mut picks: Vec<usize> = index::sample(&mut rng, total, amount).into_vec();
        picks.sort_unstable();

        let sources: Vec<(usize, usize)> = spaces
            .iter()
            .enumerate()
            .flat_map(|(t, s)| (0..s.ranges.len()).map(move |i| (t, i)))
            .collect();
        for p in picks {
            // last source whose offset is <= p; empty sources share their
            // offset with the next non-empty one, so they are never chosen
            let k = offsets.partition_point(|&o| o <= p) - 1;
            let (t, i) = sources[k];
            let space = &spaces[t];
            let (a, _) = space.ranges[i];
            let source = space.sorted[i].1;
            let target = space.sorted[a + (p - offsets[k])].1;
            out.push((source, f, target));
        }
    }
    out
}

/// Returns `g` with sampled numerical edges added.
pub fn augment_numerical_edges(g: &KnowledgeGraph, cap_per_type: usize, seed: u64) -> Result<KnowledgeGraph> {
    let edges = sample_numerical_edges(g, cap_per_type, seed);
    g.with_numerical_edges(&edges)
}
