use std::fmt::Write as _;

use super::{ComputationGraph, NodeKind, Phase};
use crate::error::{Error, Result};
use crate::kg::{AttributeId, EntityId, NumericalRelation, RelationId, ValueId, ValueTypeId, Vocab};

/// Node kinds with every symbol resolved against a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundKind {
    AnchorEntity(EntityId),
    /// `node` is `None` when the literal is not a value of the graph; the
    /// model can still encode it, the oracle treats it as an empty set.
    AnchorValue {
        node: Option<ValueId>,
        value: f64,
        value_type: ValueTypeId,
    },
    RelProj(RelationId),
    AttrProj(AttributeId),
    RevAttrProj(AttributeId),
    NumProj(NumericalRelation),
    Intersection,
    Union,
}

impl BoundKind {
    fn tag(&self) -> &'static str {
        match self {
            BoundKind::AnchorEntity(_) => "e",
            BoundKind::AnchorValue { .. } => "nv",
            BoundKind::RelProj(_) => "rp",
            BoundKind::AttrProj(_) => "ap",
            BoundKind::RevAttrProj(_) => "rap",
            BoundKind::NumProj(_) => "np",
            BoundKind::Intersection => "i",
            BoundKind::Union => "u",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundNode {
    pub kind: BoundKind,
    pub phase: Phase,
    /// Value type of a numeric-phase node.
    pub value_type: Option<ValueTypeId>,
    pub children: Vec<usize>,
}

/// A computation graph whose anchors and labels are vocabulary ids.
/// Arena order is children-first, as in [`ComputationGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundQuery {
    nodes: Vec<BoundNode>,
    root: usize,
}

fn unknown(kind: &'static str, name: &str) -> Error {
    Error::UnknownSymbol {
        kind,
        name: name.to_owned(),
    }
}

impl BoundQuery {
    pub fn bind(g: &ComputationGraph, vocab: &Vocab) -> Result<Self> {
        let mut nodes: Vec<BoundNode> = Vec::with_capacity(g.len());
        for node in g.nodes() {
            let children: Vec<usize> = node.children.iter().map(|c| c.0).collect();
            let child_type = |i: usize| nodes[children[i]].value_type;
            let (kind, value_type) = match &node.kind {
                NodeKind::AnchorEntity(name) => {
                    let e = vocab.entity(name).ok_or_else(|| unknown("entity", name))?;
                    (BoundKind::AnchorEntity(e), None)
                }
                NodeKind::AnchorValue { value, value_type } => {
                    let t = vocab
                        .value_type(value_type)
                        .ok_or_else(|| unknown("value type", value_type))?;
                    let kind = BoundKind::AnchorValue {
                        node: vocab.value_node(*value, t),
                        value: *value,
                        value_type: t,
                    };
                    (kind, Some(t))
                }
                NodeKind::RelProj(name) => {
                    let r = vocab.relation(name).ok_or_else(|| unknown("relation", name))?;
                    (BoundKind::RelProj(r), None)
                }
                NodeKind::AttrProj(name) => {
                    let a = vocab.attribute(name).ok_or_else(|| unknown("attribute", name))?;
                    (BoundKind::AttrProj(a), Some(vocab.attribute_type(a)))
                }
                NodeKind::RevAttrProj(name) => {
                    let a = vocab.attribute(name).ok_or_else(|| unknown("attribute", name))?;
                    if child_type(0) != Some(vocab.attribute_type(a)) {
                        return Err(Error::Phase(format!(
                            "`rap#{name}` expects values of type `{}`",
                            vocab.value_type_name(vocab.attribute_type(a))
                        )));
                    }
                    (BoundKind::RevAttrProj(a), None)
                }
                NodeKind::NumProj(f) => (BoundKind::NumProj(*f), child_type(0)),
                NodeKind::Intersection | NodeKind::Union => {
                    let t = child_type(0);
                    if (1..children.len()).any(|i| child_type(i) != t) {
                        return Err(Error::Phase(format!(
                            "operands of `{}` have different value types",
                            node.kind.head()
                        )));
                    }
                    let kind = if matches!(node.kind, NodeKind::Intersection) {
                        BoundKind::Intersection
                    } else {
                        BoundKind::Union
                    };
                    (kind, t)
                }
            };
            nodes.push(BoundNode {
                kind,
                phase: node.phase,
                value_type,
                children,
            });
        }
        Ok(BoundQuery { nodes, root: g.root().0 })
    }

    pub fn nodes(&self) -> &[BoundNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &BoundNode {
        &self.nodes[i]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root_phase(&self) -> Phase {
        self.nodes[self.root].phase
    }

    /// Value type of the root when it is numeric.
    pub fn value_type(&self) -> Option<ValueTypeId> {
        self.nodes[self.root].value_type
    }

    /// Structure with labels erased but projection kinds kept. Queries with
    /// equal skeletons can be encoded together node by node.
    pub fn skeleton(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            s.push_str(n.kind.tag());
            for c in &n.children {
                let _ = write!(s, ":{c}");
            }
            s.push(';');
        }
        s
    }

    /// Arena order: children before parents.
    pub fn topological_order(&self) -> Vec<usize> {
        (0..self.nodes.len()).collect()
    }

    /// A different valid order: depth-first from the root visiting the
    /// last operand first.
    pub fn reverse_operand_order(&self) -> Vec<usize> {
        fn visit(q: &BoundQuery, i: usize, seen: &mut [bool], out: &mut Vec<usize>) {
            if seen[i] {
                return;
            }
            seen[i] = true;
            for &c in q.nodes[i].children.iter().rev() {
                visit(q, c, seen, out);
            }
            out.push(i);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::with_capacity(self.nodes.len());
        visit(self, self.root, &mut seen, &mut out);
        out
    }
}
