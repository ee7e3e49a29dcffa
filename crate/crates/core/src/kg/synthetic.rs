use std::sync::Arc;

use rand::seq::index;
use rand::Rng;

use super::{AttributeId, EntityId, KnowledgeGraph, RelationId, ValueId, ValueTypeId, Vocab};
use crate::rng::seeded;

/// Parameters of the synthetic graph generator.
///
/// Entities belong to latent communities. Relation `r` prefers edges from
/// community `c` to community `(c + r + 1) mod K`, and attribute values are
/// drawn from a community-dependent band of the sorted value list, so that
/// held-out edges are predictable from the observed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_attr_types: usize,
    pub n_values: usize,
    /// Expected fraction of the `n²` ordered pairs present per relation.
    pub density: f64,
    pub seed: u64,
    /// Probability that an entity carries a given attribute.
    pub attribute_coverage: f64,
    pub communities: usize,
    /// Share of the edge mass concentrated on the preferred community pair.
    pub affinity: f64,
}

impl SyntheticConfig {
    pub fn new(
        n_entities: usize,
        n_relations: usize,
        n_attr_types: usize,
        n_values: usize,
        density: f64,
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            n_entities,
            n_relations,
            n_attr_types,
            n_values,
            density,
            seed,
            attribute_coverage: 0.5,
            communities: 4,
            affinity: 0.8,
        }
    }

    pub fn generate(&self) -> KnowledgeGraph {
        assert!(self.n_entities > 0 && self.n_relations > 0 && self.n_attr_types > 0 && self.n_values > 0);
        let k = self.communities.max(1);
        let mut vocab = Vocab::new();
        let entities: Vec<EntityId> = (0..self.n_entities)
            .map(|i| vocab.intern_entity(&format!("e{i}")))
            .collect();
        let relations: Vec<RelationId> = (0..self.n_relations)
            .map(|i| vocab.intern_relation(&format!("r{i}")))
            .collect();
        let types: Vec<ValueTypeId> = (0..self.n_attr_types)
            .map(|i| vocab.intern_value_type(&format!("t{i}")))
            .collect();
        let attributes: Vec<AttributeId> = (0..self.n_attr_types)
            .map(|i| vocab.intern_attribute(&format!("a{i}"), types[i]).expect("fresh attribute"))
            .collect();

        // values round-robin over types, distinct integers per type
        let mut value_rng = seeded(self.seed, 0);
        let mut per_type: Vec<Vec<ValueId>> = vec![Vec::new(); types.len()];
        for (t, ty) in types.iter().enumerate() {
            let count = (0..self.n_values).filter(|j| j % types.len() == t).count();
            if count == 0 {
                continue;
            }
            let mut picks = index::sample(&mut value_rng, 3 * count, count).into_vec();
            picks.sort_unstable();
            for p in picks {
                let id = vocab.intern_value((p + 1) as f64, *ty).expect("finite");
                per_type[t].push(id);
            }
        }

        let mut rng = seeded(self.seed, 1);
        let community = |e: usize| e % k;
        let boost = 1.0 + self.affinity * (k as f64 - 1.0);
        let p_match = (self.density * boost).min(1.0);
        let p_other = self.density * (1.0 - self.affinity);
        let mut rel_edges = Vec::new();
        for (ri, &r) in relations.iter().enumerate() {
            for h in 0..self.n_entities {
                let preferred = (community(h) + ri + 1) % k;
                for t in 0..self.n_entities {
                    let p = if k == 1 {
                        self.density
                    } else if community(t) == preferred {
                        p_match
                    } else {
                        p_other
                    };
                    if rng.gen::<f64>() < p {
                        rel_edges.push((entities[h], r, entities[t]));
                    }
                }
            }
        }

        let mut attr_edges = Vec::new();
        for h in 0..self.n_entities {
            for (ai, &a) in attributes.iter().enumerate() {
                if !rng.gen_bool(self.attribute_coverage.clamp(0.0, 1.0)) {
                    continue;
                }
                let pool = &per_type[ai];
                if pool.is_empty() {
                    continue;
                }
                let band = (community(h) + ai) % k;
                let lo = pool.len() * band / k;
                let hi = pool.len() * (band + 1) / k;
                let (lo, hi) = if lo < hi { (lo, hi) } else { (0, pool.len()) };
                let x = pool[rng.gen_range(lo..hi)];
                attr_edges.push((entities[h], a, x));
            }
        }

        KnowledgeGraph::from_edges(Arc::new(vocab), rel_edges, attr_edges, Vec::new())
            .expect("generator produces valid edges")
    }
}

/// Deterministic random graph for tests and desk-scale experiments.
pub fn make_synthetic_kg(
    n_entities: usize,
    n_relations: usize,
    n_attr_types: usize,
    n_values: usize,
    density: f64,
    seed: u64,
) -> KnowledgeGraph {
    SyntheticConfig::new(n_entities, n_relations, n_attr_types, n_values, density, seed).generate()
}
