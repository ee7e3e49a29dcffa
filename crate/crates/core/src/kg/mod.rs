//! Knowledge graphs with entity relations, numerical attributes and
//! value-to-value numerical relations.
//!
//! Every graph shares an interned [`Vocab`] so that ids stay stable across
//! the cumulative train/validation/test graphs. Edge sets are sorted and
//! deduplicated; adjacency lists are kept per node for both directions of
//! every edge class.

mod augment;
mod io;
mod split;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment_numerical_edges, sample_numerical_edges, DEFAULT_EDGE_CAP};
pub use io::{load_triples, load_triples_from_str, save_triples, GraphFile};
pub use split::{largest_remainder, split_edges, SplitGraphs, SPLIT_RATIO};
pub use synthetic::{make_synthetic_kg, SyntheticConfig};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }
    };
}

id_type!(
    /// Dense index of an entity.
    EntityId
);
id_type!(
    /// Dense index of a numerical value node.
    ValueId
);
id_type!(RelationId);
id_type!(AttributeId);
id_type!(ValueTypeId);

/// The seven numerical relations used to connect value nodes.
///
/// For an edge `(x', f, x)` the predicate is evaluated as `f.holds(x', x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NumericalRelation {
    EqualTo,
    SmallerThan,
    GreaterThan,
    TwiceEqualTo,
    ThreeTimesEqualTo,
    TwiceGreaterThan,
    ThreeTimesGreaterThan,
}

impl NumericalRelation {
    pub const ALL: [NumericalRelation; 7] = [
        NumericalRelation::EqualTo,
        NumericalRelation::SmallerThan,
        NumericalRelation::GreaterThan,
        NumericalRelation::TwiceEqualTo,
        NumericalRelation::ThreeTimesEqualTo,
        NumericalRelation::TwiceGreaterThan,
        NumericalRelation::ThreeTimesGreaterThan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NumericalRelation::EqualTo => "EqualTo",
            NumericalRelation::SmallerThan => "SmallerThan",
            NumericalRelation::GreaterThan => "GreaterThan",
            NumericalRelation::TwiceEqualTo => "TwiceEqualTo",
            NumericalRelation::ThreeTimesEqualTo => "ThreeTimesEqualTo",
            NumericalRelation::TwiceGreaterThan => "TwiceGreaterThan",
            NumericalRelation::ThreeTimesGreaterThan => "ThreeTimesGreaterThan",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Multiplier applied to the source value and whether the relation is
    /// an equality (`x = c·x'`), a strict upper comparison (`x > c·x'`) or
    /// the lower comparison (`x < x'`).
    pub(crate) fn form(self) -> (f64, Comparison) {
        match self {
            NumericalRelation::EqualTo => (1.0, Comparison::Equal),
            NumericalRelation::SmallerThan => (1.0, Comparison::Less),
            NumericalRelation::GreaterThan => (1.0, Comparison::Greater),
            NumericalRelation::TwiceEqualTo => (2.0, Comparison::Equal),
            NumericalRelation::ThreeTimesEqualTo => (3.0, Comparison::Equal),
            NumericalRelation::TwiceGreaterThan => (2.0, Comparison::Greater),
            NumericalRelation::ThreeTimesGreaterThan => (3.0, Comparison::Greater),
        }
    }

    /// Whether the edge `(source, self, target)` is allowed.
    pub fn holds(self, source: f64, target: f64) -> bool {
        let (factor, cmp) = self.form();
        let bound = factor * source;
        match cmp {
            Comparison::Equal => target == bound,
            Comparison::Less => target < bound,
            Comparison::Greater => target > bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Comparison {
    Equal,
    Less,
    Greater,
}

impl fmt::Display for NumericalRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A numerical literal together with its value type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueNode {
    pub value: f64,
    pub value_type: ValueTypeId,
}

/// Either kind of graph node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    Entity(EntityId),
    Value(ValueId),
}

/// Label of an edge entering a node, as seen by the query sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeLabel {
    Relation(RelationId),
    Attribute(AttributeId),
    Numerical(NumericalRelation),
}

/// Canonical form of a literal: `-0.0` becomes `0.0`.
pub fn canonical_value(value: f64) -> f64 {
    if value == 0.0 {
        0.0
    } else {
        value
    }
}

/// Interned names shared by all graphs derived from one source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocab {
    entities: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    value_types: Vec<String>,
    value_type_index: HashMap<String, ValueTypeId>,
    attributes: Vec<(String, ValueTypeId)>,
    attribute_index: HashMap<String, AttributeId>,
    values: Vec<ValueNode>,
    value_index: HashMap<(u64, ValueTypeId), ValueId>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = EntityId(self.entities.len());
        self.entities.push(name.to_owned());
        self.entity_index.insert(name.to_owned(), id);
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = RelationId(self.relations.len());
        self.relations.push(name.to_owned());
        self.relation_index.insert(name.to_owned(), id);
        id
    }

    pub fn intern_value_type(&mut self, name: &str) -> ValueTypeId {
        if let Some(&id) = self.value_type_index.get(name) {
            return id;
        }
        let id = ValueTypeId(self.value_types.len());
        self.value_types.push(name.to_owned());
        self.value_type_index.insert(name.to_owned(), id);
        id
    }

    /// Registers an attribute with its value type. Re-registering with a
    /// different type is an error.
    pub fn intern_attribute(&mut self, name: &str, value_type: ValueTypeId) -> Result<AttributeId> {
        if let Some(&id) = self.attribute_index.get(name) {
            if self.attributes[id.0].1 != value_type {
                return Err(Error::InvalidGraph(format!(
                    "attribute `{name}` assigned to two value types"
                )));
            }
            return Ok(id);
        }
        let id = AttributeId(self.attributes.len());
        self.attributes.push((name.to_owned(), value_type));
        self.attribute_index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn intern_value(&mut self, value: f64, value_type: ValueTypeId) -> Result<ValueId> {
        if !value.is_finite() {
            return Err(Error::InvalidGraph(format!("non-finite value {value}")));
        }
        let value = canonical_value(value);
        let key = (value.to_bits(), value_type);
        if let Some(&id) = self.value_index.get(&key) {
            return Ok(id);
        }
        let id = ValueId(self.values.len());
        self.values.push(ValueNode { value, value_type });
        self.value_index.insert(key, id);
        Ok(id)
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }
    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }
    pub fn num_value_types(&self) -> usize {
        self.value_types.len()
    }
    pub fn num_values(&self) -> usize {
        self.values.len()
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.0]
    }
    pub fn relation_name(&self, id: RelationId) -> &str {
        &self.relations[id.0]
    }
    pub fn attribute_name(&self, id: AttributeId) -> &str {
        &self.attributes[id.0].0
    }
    pub fn attribute_type(&self, id: AttributeId) -> ValueTypeId {
        self.attributes[id.0].1
    }
    pub fn value_type_name(&self, id: ValueTypeId) -> &str {
        &self.value_types[id.0]
    }
    pub fn value(&self, id: ValueId) -> ValueNode {
        self.values[id.0]
    }

    pub fn entity(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }
    pub fn relation(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }
    pub fn attribute(&self, name: &str) -> Option<AttributeId> {
        self.attribute_index.get(name).copied()
    }
    pub fn value_type(&self, name: &str) -> Option<ValueTypeId> {
        self.value_type_index.get(name).copied()
    }
    pub fn value_node(&self, value: f64, value_type: ValueTypeId) -> Option<ValueId> {
        self.value_index
            .get(&(canonical_value(value).to_bits(), value_type))
            .copied()
    }

    pub fn values(&self) -> impl Iterator<Item = (ValueId, ValueNode)> + '_ {
        self.values.iter().enumerate().map(|(i, v)| (ValueId(i), *v))
    }

    /// Value nodes of one type, in id order.
    pub fn values_of_type(&self, value_type: ValueTypeId) -> Vec<ValueId> {
        self.values()
            .filter(|(_, v)| v.value_type == value_type)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }
    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }
    pub fn value_type_names(&self) -> &[String] {
        &self.value_types
    }
    pub fn attributes(&self) -> &[(String, ValueTypeId)] {
        &self.attributes
    }
}

pub type RelEdge = (EntityId, RelationId, EntityId);
pub type AttrEdge = (EntityId, AttributeId, ValueId);
pub type NumEdge = (ValueId, NumericalRelation, ValueId);

/// An immutable knowledge graph over a shared vocabulary.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    vocab: Arc<Vocab>,
    rel_edges: Vec<RelEdge>,
    attr_edges: Vec<AttrEdge>,
    num_edges: Vec<NumEdge>,
    rel_out: Vec<Vec<(RelationId, EntityId)>>,
    rel_in: Vec<Vec<(RelationId, EntityId)>>,
    attr_out: Vec<Vec<(AttributeId, ValueId)>>,
    attr_in: Vec<Vec<(AttributeId, EntityId)>>,
    num_out: Vec<Vec<(NumericalRelation, ValueId)>>,
    num_in: Vec<Vec<(NumericalRelation, ValueId)>>,
}

fn by_label<L: Ord + Copy, T: Copy>(list: &[(L, T)], label: L) -> impl Iterator<Item = T> + '_ {
    let start = list.partition_point(|(l, _)| *l < label);
    let end = list.partition_point(|(l, _)| *l <= label);
    list[start..end].iter().map(|&(_, t)| t)
}

impl KnowledgeGraph {
    /// Builds a graph from edge lists, deduplicating and validating them.
    pub fn from_edges(
        vocab: Arc<Vocab>,
        mut rel_edges: Vec<RelEdge>,
        mut attr_edges: Vec<AttrEdge>,
        mut num_edges: Vec<NumEdge>,
    ) -> Result<Self> {
        rel_edges.sort_unstable();
        rel_edges.dedup();
        attr_edges.sort_unstable();
        attr_edges.dedup();
        num_edges.sort_unstable();
        num_edges.dedup();

        let ne = vocab.num_entities();
        let nv = vocab.num_values();
        for &(h, r, t) in &rel_edges {
            if h.0 >= ne || t.0 >= ne || r.0 >= vocab.num_relations() {
                return Err(Error::InvalidGraph(format!(
                    "relation edge ({}, {}, {}) out of range",
                    h.0, r.0, t.0
                )));
            }
        }
        for &(e, a, x) in &attr_edges {
            if e.0 >= ne || x.0 >= nv || a.0 >= vocab.num_attributes() {
                return Err(Error::InvalidGraph(format!(
                    "attribute edge ({}, {}, {}) out of range",
                    e.0, a.0, x.0
                )));
            }
            if vocab.attribute_type(a) != vocab.value(x).value_type {
                return Err(Error::InvalidGraph(format!(
                    "attribute `{}` points at a value of type `{}`",
                    vocab.attribute_name(a),
                    vocab.value_type_name(vocab.value(x).value_type)
                )));
            }
        }
        for &(x1, f, x2) in &num_edges {
            if x1.0 >= nv || x2.0 >= nv {
                return Err(Error::InvalidGraph(format!(
                    "numerical edge ({}, {f}, {}) out of range",
                    x1.0, x2.0
                )));
            }
            if vocab.value(x1).value_type != vocab.value(x2).value_type {
                return Err(Error::InvalidGraph(format!(
                    "numerical edge ({}, {f}, {}) joins different value types",
                    x1.0, x2.0
                )));
            }
        }

        let mut rel_out = vec![Vec::new(); ne];
        let mut rel_in = vec![Vec::new(); ne];
        for &(h, r, t) in &rel_edges {
            rel_out[h.0].push((r, t));
            rel_in[t.0].push((r, h));
        }
        let mut attr_out = vec![Vec::new(); ne];
        let mut attr_in = vec![Vec::new(); nv];
        for &(e, a, x) in &attr_edges {
            attr_out[e.0].push((a, x));
            attr_in[x.0].push((a, e));
        }
        let mut num_out = vec![Vec::new(); nv];
        let mut num_in = vec![Vec::new(); nv];
        for &(x1, f, x2) in &num_edges {
            num_out[x1.0].push((f, x2));
            num_in[x2.0].push((f, x1));
        }
        for list in rel_out.iter_mut().chain(rel_in.iter_mut()) {
            list.sort_unstable();
        }
        attr_out.iter_mut().for_each(|l| l.sort_unstable());
        attr_in.iter_mut().for_each(|l| l.sort_unstable());
        num_out.iter_mut().for_each(|l| l.sort_unstable());
        num_in.iter_mut().for_each(|l| l.sort_unstable());

        Ok(KnowledgeGraph {
            vocab,
            rel_edges,
            attr_edges,
            num_edges,
            rel_out,
            rel_in,
            attr_out,
            attr_in,
            num_out,
            num_in,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn shared_vocab(&self) -> Arc<Vocab> {
        Arc::clone(&self.vocab)
    }

    pub fn rel_edges(&self) -> &[RelEdge] {
        &self.rel_edges
    }
    pub fn attr_edges(&self) -> &[AttrEdge] {
        &self.attr_edges
    }
    pub fn num_edges(&self) -> &[NumEdge] {
        &self.num_edges
    }

    pub fn num_edges_total(&self) -> usize {
        self.rel_edges.len() + self.attr_edges.len() + self.num_edges.len()
    }

    /// Same vocabulary, additional numerical edges.
    pub fn with_numerical_edges(&self, extra: &[NumEdge]) -> Result<Self> {
        let mut num = self.num_edges.clone();
        num.extend_from_slice(extra);
        KnowledgeGraph::from_edges(
            self.shared_vocab(),
            self.rel_edges.clone(),
            self.attr_edges.clone(),
            num,
        )
    }

    /// Tails `t` with `r(h, t)`.
    pub fn relation_tails(&self, h: EntityId, r: RelationId) -> impl Iterator<Item = EntityId> + '_ {
        by_label(&self.rel_out[h.0], r)
    }
    /// Heads `h` with `r(h, t)`.
    pub fn relation_heads(&self, t: EntityId, r: RelationId) -> impl Iterator<Item = EntityId> + '_ {
        by_label(&self.rel_in[t.0], r)
    }
    /// Values `x` with `a(e, x)`.
    pub fn attribute_values(&self, e: EntityId, a: AttributeId) -> impl Iterator<Item = ValueId> + '_ {
        by_label(&self.attr_out[e.0], a)
    }
    /// Entities `e` with `a(e, x)`.
    pub fn attribute_holders(&self, x: ValueId, a: AttributeId) -> impl Iterator<Item = EntityId> + '_ {
        by_label(&self.attr_in[x.0], a)
    }
    /// Values `x` with `f(x', x)`.
    pub fn numerical_targets(
        &self,
        source: ValueId,
        f: NumericalRelation,
    ) -> impl Iterator<Item = ValueId> + '_ {
        by_label(&self.num_out[source.0], f)
    }
    /// Values `x'` with `f(x', x)`.
    pub fn numerical_sources(
        &self,
        target: ValueId,
        f: NumericalRelation,
    ) -> impl Iterator<Item = ValueId> + '_ {
        by_label(&self.num_in[target.0], f)
    }

    /// All edges entering `node` in the sampling view of the graph: a
    /// relation edge `r(u, v)` enters `v`; an attribute edge `a(e, x)`
    /// enters both `x` (from `e`) and `e` (from `x`); a numerical edge
    /// `f(x', x)` enters `x`.
    pub fn in_edges(&self, node: NodeRef) -> Vec<(NodeRef, EdgeLabel)> {
        match node {
            NodeRef::Entity(e) => {
                let rel = self.rel_in[e.0]
                    .iter()
                    .map(|&(r, u)| (NodeRef::Entity(u), EdgeLabel::Relation(r)));
                let attr = self.attr_out[e.0]
                    .iter()
                    .map(|&(a, x)| (NodeRef::Value(x), EdgeLabel::Attribute(a)));
                rel.chain(attr).collect()
            }
            NodeRef::Value(x) => {
                let attr = self.attr_in[x.0]
                    .iter()
                    .map(|&(a, e)| (NodeRef::Entity(e), EdgeLabel::Attribute(a)));
                let num = self.num_in[x.0]
                    .iter()
                    .map(|&(f, u)| (NodeRef::Value(u), EdgeLabel::Numerical(f)));
                attr.chain(num).collect()
            }
        }
    }

    pub fn in_degree(&self, node: NodeRef) -> usize {
        match node {
            NodeRef::Entity(e) => self.rel_in[e.0].len() + self.attr_out[e.0].len(),
            NodeRef::Value(x) => self.attr_in[x.0].len() + self.num_in[x.0].len(),
        }
    }

    /// Entities incident to at least one edge of this graph.
    pub fn active_entities(&self) -> Vec<EntityId> {
        (0..self.vocab.num_entities())
            .filter(|&i| {
                !self.rel_out[i].is_empty() || !self.rel_in[i].is_empty() || !self.attr_out[i].is_empty()
            })
            .map(EntityId)
            .collect()
    }

    /// Value nodes incident to at least one edge of this graph.
    pub fn active_values(&self) -> Vec<ValueId> {
        (0..self.vocab.num_values())
            .filter(|&i| !self.attr_in[i].is_empty() || !self.num_out[i].is_empty() || !self.num_in[i].is_empty())
            .map(ValueId)
            .collect()
    }

    /// Per-split tallies in the layout of a dataset statistics table.
    pub fn stats(&self) -> GraphStats {
        let rel_types: std::collections::BTreeSet<_> = self.rel_edges.iter().map(|e| e.1).collect();
        let attr_types: std::collections::BTreeSet<_> = self.attr_edges.iter().map(|e| e.1).collect();
        let nodes = self.active_entities().len() + self.active_values().len();
        GraphStats {
            nodes,
            relation_types: rel_types.len(),
            attribute_types: attr_types.len(),
            rel_edges: self.rel_edges.len(),
            attr_edges: self.attr_edges.len(),
            num_edges: self.num_edges.len(),
            edges: self.num_edges_total(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub relation_types: usize,
    pub attribute_types: usize,
    pub rel_edges: usize,
    pub attr_edges: usize,
    pub num_edges: usize,
    pub edges: usize,
}
