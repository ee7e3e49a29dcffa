//! The query language: phase-typed computation graphs, their textual
//! s-expression form, and the eight general query shapes.
//!
//! ```text
//! expr := "(" head ("," expr)+ ")" | leaf
//! head := ("rp" | "ap" | "rap" | "np") "#" ident | "i" | "u"
//! leaf := "(" ("e" "#" ident | "nv" "#" number "@" ident) ")"
//! ```
//!
//! Phases follow the projection signatures: `rp` maps entities to
//! entities, `ap` entities to values, `rap` values to entities and `np`
//! values to values. Intersections and unions keep the phase of their
//! operands.

mod bind;
mod parser;
mod shape;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::NumericalRelation;

pub use bind::{BoundKind, BoundNode, BoundQuery};
pub use parser::parse;
pub use shape::{general_type_of, GeneralQueryType, Template};

/// Whether an intermediate state denotes a set of entities or of values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Entity,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    AnchorEntity(String),
    AnchorValue { value: f64, value_type: String },
    RelProj(String),
    AttrProj(String),
    RevAttrProj(String),
    NumProj(NumericalRelation),
    Intersection,
    Union,
}

impl NodeKind {
    pub fn is_anchor(&self) -> bool {
        matches!(self, NodeKind::AnchorEntity(_) | NodeKind::AnchorValue { .. })
    }

    pub fn is_projection(&self) -> bool {
        matches!(
            self,
            NodeKind::RelProj(_) | NodeKind::AttrProj(_) | NodeKind::RevAttrProj(_) | NodeKind::NumProj(_)
        )
    }

    /// Head symbol in the textual syntax.
    pub fn head(&self) -> &'static str {
        match self {
            NodeKind::AnchorEntity(_) => "e",
            NodeKind::AnchorValue { .. } => "nv",
            NodeKind::RelProj(_) => "rp",
            NodeKind::AttrProj(_) => "ap",
            NodeKind::RevAttrProj(_) => "rap",
            NodeKind::NumProj(_) => "np",
            NodeKind::Intersection => "i",
            NodeKind::Union => "u",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub phase: Phase,
    pub children: Vec<NodeId>,
}

/// Infers the phase of a node from its kind and its children's phases,
/// rejecting any combination that breaks the typing rules.
pub fn infer_phase(kind: &NodeKind, children: &[Phase]) -> Result<Phase> {
    let arity = |lo: usize, hi: usize| -> Result<()> {
        if children.len() < lo || children.len() > hi {
            let expected = if lo == hi { lo.to_string() } else { format!("{lo}..={hi}") };
            return Err(Error::Phase(format!(
                "`{}` takes {expected} operand(s), got {}",
                kind.head(),
                children.len()
            )));
        }
        Ok(())
    };
    let expect = |want: Phase| -> Result<()> {
        if children[0] != want {
            return Err(Error::Phase(format!(
                "`{}` needs a {:?} operand but got a {:?} one",
                kind.head(),
                want,
                children[0]
            )));
        }
        Ok(())
    };
    match kind {
        NodeKind::AnchorEntity(_) => arity(0, 0).map(|_| Phase::Entity),
        NodeKind::AnchorValue { .. } => arity(0, 0).map(|_| Phase::Numeric),
        NodeKind::RelProj(_) => {
            arity(1, 1)?;
            expect(Phase::Entity)?;
            Ok(Phase::Entity)
        }
        NodeKind::AttrProj(_) => {
            arity(1, 1)?;
            expect(Phase::Entity)?;
            Ok(Phase::Numeric)
        }
        NodeKind::RevAttrProj(_) => {
            arity(1, 1)?;
            expect(Phase::Numeric)?;
            Ok(Phase::Entity)
        }
        NodeKind::NumProj(_) => {
            arity(1, 1)?;
            expect(Phase::Numeric)?;
            Ok(Phase::Numeric)
        }
        NodeKind::Intersection | NodeKind::Union => {
            if matches!(kind, NodeKind::Intersection) {
                arity(2, 3)?;
            } else {
                arity(2, 2)?;
            }
            let first = children[0];
            if children.iter().any(|&p| p != first) {
                return Err(Error::Phase(format!(
                    "operands of `{}` mix entity and numeric phases",
                    kind.head()
                )));
            }
            Ok(first)
        }
    }
}

/// A validated query computation graph. Nodes are stored children-first,
/// so arena order is a topological order and the root comes last.
#[derive(Debug, Clone)]
pub struct ComputationGraph {
    nodes: Vec<Node>,
    root: NodeId,
}

/// Incremental construction of a [`ComputationGraph`]; every node is
/// type-checked as it is added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, kind: NodeKind, children: Vec<NodeId>) -> Result<NodeId> {
        let phases: Vec<Phase> = children
            .iter()
            .map(|c| {
                self.nodes
                    .get(c.0)
                    .map(|n| n.phase)
                    .ok_or_else(|| Error::Phase(format!("child {} does not exist", c.0)))
            })
            .collect::<Result<_>>()?;
        let phase = infer_phase(&kind, &phases)?;
        self.nodes.push(Node { kind, phase, children });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn entity(&mut self, name: &str) -> NodeId {
        self.add(NodeKind::AnchorEntity(name.to_owned()), vec![]).expect("leaf")
    }

    pub fn value(&mut self, value: f64, value_type: &str) -> NodeId {
        let kind = NodeKind::AnchorValue {
            value,
            value_type: value_type.to_owned(),
        };
        self.add(kind, vec![]).expect("leaf")
    }

    pub fn finish(self, root: NodeId) -> Result<ComputationGraph> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Phase("root does not exist".into()));
        }
        // keep only what the root reaches, renumbered children-first
        let mut out = GraphBuilder::new();
        let mut map = vec![None; self.nodes.len()];
        fn copy(src: &[Node], id: NodeId, map: &mut [Option<NodeId>], out: &mut GraphBuilder) -> Result<NodeId> {
            if let Some(done) = map[id.0] {
                return Ok(done);
            }
            let node = &src[id.0];
            let children = node
                .children
                .iter()
                .map(|&c| copy(src, c, map, out))
                .collect::<Result<Vec<_>>>()?;
            let new = out.add(node.kind.clone(), children)?;
            map[id.0] = Some(new);
            Ok(new)
        }
        let root = copy(&self.nodes, root, &mut map, &mut out)?;
        Ok(ComputationGraph { nodes: out.nodes, root })
    }
}

impl ComputationGraph {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_phase(&self) -> Phase {
        self.node(self.root).phase
    }

    /// Recomputes every phase bottom-up from the typing rules.
    pub fn recompute_phases(&self) -> Result<Vec<Phase>> {
        let mut phases = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let child: Vec<Phase> = node.children.iter().map(|c| phases[c.0]).collect();
            phases.push(infer_phase(&node.kind, &child)?);
        }
        Ok(phases)
    }

    fn write_node(&self, id: NodeId, out: &mut String) {
        let node = self.node(id);
        out.push('(');
        match &node.kind {
            NodeKind::AnchorEntity(name) => {
                out.push_str("e#");
                out.push_str(name);
            }
            NodeKind::AnchorValue { value, value_type } => {
                out.push_str(&format!("nv#{value:?}@{value_type}"));
            }
            NodeKind::RelProj(l) | NodeKind::AttrProj(l) | NodeKind::RevAttrProj(l) => {
                out.push_str(node.kind.head());
                out.push('#');
                out.push_str(l);
            }
            NodeKind::NumProj(f) => {
                out.push_str("np#");
                out.push_str(f.name());
            }
            NodeKind::Intersection | NodeKind::Union => out.push_str(node.kind.head()),
        }
        for &c in &node.children {
            out.push_str(", ");
            self.write_node(c, out);
        }
        out.push(')');
    }

    fn eq_at(&self, a: NodeId, other: &ComputationGraph, b: NodeId) -> bool {
        let (x, y) = (self.node(a), other.node(b));
        let same_kind = match (&x.kind, &y.kind) {
            (
                NodeKind::AnchorValue { value: v1, value_type: t1 },
                NodeKind::AnchorValue { value: v2, value_type: t2 },
            ) => v1.to_bits() == v2.to_bits() && t1 == t2,
            (k1, k2) => k1 == k2,
        };
        same_kind
            && x.phase == y.phase
            && x.children.len() == y.children.len()
            && x
                .children
                .iter()
                .zip(&y.children)
                .all(|(&c1, &c2)| self.eq_at(c1, other, c2))
    }
}

/// Structural equality from the roots, independent of arena layout.
impl PartialEq for ComputationGraph {
    fn eq(&self, other: &Self) -> bool {
        self.eq_at(self.root, other, other.root)
    }
}

/// Canonical text form; `parse` of the output reproduces the graph.
impl fmt::Display for ComputationGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.write_node(self.root, &mut s);
        f.write_str(&s)
    }
}

/// Canonical text of `g`.
pub fn serialize(g: &ComputationGraph) -> String {
    g.to_string()
}
