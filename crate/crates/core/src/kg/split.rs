use rand::seq::SliceRandom;

use super::{augment::sample_numerical_edges, KnowledgeGraph};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Train/validation/test proportions.
pub const SPLIT_RATIO: [usize; 3] = [8, 1, 1];

/// Cumulative graphs: every edge of `train` is in `val`, every edge of
/// `val` is in `test`. All three share one vocabulary.
#[derive(Debug, Clone)]
pub struct SplitGraphs {
    pub train: KnowledgeGraph,
    pub val: KnowledgeGraph,
    pub test: KnowledgeGraph,
}

/// Apportions `n` items by `weights` with the largest-remainder method.
/// Ties in the fractional part go to the earlier slot.
pub fn largest_remainder(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    assert!(total > 0, "weights must not all be zero");
    let mut sizes: Vec<usize> = weights.iter().map(|w| n * w / total).collect();
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps index order among equal remainders
    order.sort_by_key(|&i| std::cmp::Reverse(n * weights[i] % total));
    for i in order {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

fn partition<T: Copy>(items: &[T], stream: u64, seed: u64) -> [Vec<T>; 3] {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut seeded(seed, stream));
    let sizes = largest_remainder(shuffled.len(), &SPLIT_RATIO);
    let val_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    [
        shuffled[..val_start].to_vec(),
        shuffled[val_start..test_start].to_vec(),
        shuffled[test_start..].to_vec(),
    ]
}

fn cumulative<T: Copy>(parts: &[Vec<T>; 3]) -> [Vec<T>; 3] {
    let train = parts[0].clone();
    let mut val = train.clone();
    val.extend_from_slice(&parts[1]);
    let mut test = val.clone();
    test.extend_from_slice(&parts[2]);
    [train, val, test]
}

/// Randomly partitions each edge class 8:1:1 and aggregates the parts into
/// cumulative train/validation/test graphs.
pub fn split_edges(g: &KnowledgeGraph, seed: u64) -> Result<SplitGraphs> {
    if g.num_edges_total() == 0 {
        return Err(Error::EmptyGraph);
    }
    let rel = cumulative(&partition(g.rel_edges(), 0, seed));
    let attr = cumulative(&partition(g.attr_edges(), 1, seed));
    let num = cumulative(&partition(g.num_edges(), 2, seed));
    let [rt, rv, rs] = rel;
    let [at, av, as_] = attr;
    let [nt, nv, ns] = num;
    let vocab = g.shared_vocab();
    Ok(SplitGraphs {
        train: KnowledgeGraph::from_edges(vocab.clone(), rt, at, nt)?,
        val: KnowledgeGraph::from_edges(vocab.clone(), rv, av, nv)?,
        test: KnowledgeGraph::from_edges(vocab, rs, as_, ns)?,
    })
}

impl SplitGraphs {
    /// Samples numerical edges over the full (test) value set and spreads
    /// them over the splits 8:1:1, keeping the graphs cumulative.
    pub fn augment_numerical(&self, cap_per_type: usize, seed: u64) -> Result<SplitGraphs> {
        let new_edges = sample_numerical_edges(&self.test, cap_per_type, seed);
        let [t, v, s] = cumulative(&partition(&new_edges, 3, seed));
        Ok(SplitGraphs {
            train: self.train.with_numerical_edges(&t)?,
            val: self.val.with_numerical_edges(&v)?,
            test: self.test.with_numerical_edges(&s)?,
        })
    }

    pub fn graphs(&self) -> [(&'static str, &KnowledgeGraph); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}
