use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ComputationGraph, NodeId, NodeKind};
use crate::error::{Error, Result};

/// The eight general query types. Each one fixes the shape of the
/// computation graph with projections left generic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GeneralQueryType {
    #[serde(rename = "1p")]
    OneP,
    #[serde(rename = "2p")]
    TwoP,
    #[serde(rename = "2i")]
    TwoI,
    #[serde(rename = "3i")]
    ThreeI,
    #[serde(rename = "ip")]
    Ip,
    #[serde(rename = "pi")]
    Pi,
    #[serde(rename = "2u")]
    TwoU,
    #[serde(rename = "up")]
    Up,
}

/// Shape skeleton of a general type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Template {
    Anchor,
    Projection(Box<Template>),
    Intersection(Vec<Template>),
    Union(Vec<Template>),
}

impl Template {
    fn p(child: Template) -> Template {
        Template::Projection(Box::new(child))
    }

    fn p1() -> Template {
        Template::p(Template::Anchor)
    }

    /// Number of projection edges.
    pub fn projections(&self) -> usize {
        match self {
            Template::Anchor => 0,
            Template::Projection(c) => 1 + c.projections(),
            Template::Intersection(cs) | Template::Union(cs) => cs.iter().map(Template::projections).sum(),
        }
    }

    fn of(g: &ComputationGraph, id: NodeId) -> Template {
        let node = g.node(id);
        let kids = || node.children.iter().map(|&c| Template::of(g, c)).collect::<Vec<_>>();
        match node.kind {
            NodeKind::AnchorEntity(_) | NodeKind::AnchorValue { .. } => Template::Anchor,
            NodeKind::Intersection => Template::Intersection(kids()),
            NodeKind::Union => Template::Union(kids()),
            _ => Template::p(Template::of(g, node.children[0])),
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::Anchor => f.write_str("(e)"),
            Template::Projection(c) => write!(f, "(p,{c})"),
            Template::Intersection(cs) | Template::Union(cs) => {
                f.write_str(if matches!(self, Template::Intersection(_)) { "(i" } else { "(u" })?;
                for c in cs {
                    write!(f, ",{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl GeneralQueryType {
    pub const ALL: [GeneralQueryType; 8] = [
        GeneralQueryType::OneP,
        GeneralQueryType::TwoP,
        GeneralQueryType::TwoI,
        GeneralQueryType::ThreeI,
        GeneralQueryType::Ip,
        GeneralQueryType::Pi,
        GeneralQueryType::TwoU,
        GeneralQueryType::Up,
    ];

    pub fn abbreviation(self) -> &'static str {
        match self {
            GeneralQueryType::OneP => "1p",
            GeneralQueryType::TwoP => "2p",
            GeneralQueryType::TwoI => "2i",
            GeneralQueryType::ThreeI => "3i",
            GeneralQueryType::Ip => "ip",
            GeneralQueryType::Pi => "pi",
            GeneralQueryType::TwoU => "2u",
            GeneralQueryType::Up => "up",
        }
    }

    pub fn template(self) -> Template {
        use Template as T;
        match self {
            GeneralQueryType::OneP => T::p1(),
            GeneralQueryType::TwoP => T::p(T::p1()),
            GeneralQueryType::TwoI => T::Intersection(vec![T::p1(), T::p1()]),
            GeneralQueryType::ThreeI => T::Intersection(vec![T::p1(), T::p1(), T::p1()]),
            GeneralQueryType::Ip => T::p(T::Intersection(vec![T::p1(), T::p1()])),
            GeneralQueryType::Pi => T::Intersection(vec![T::p1(), T::p(T::p1())]),
            GeneralQueryType::TwoU => T::Union(vec![T::p1(), T::p1()]),
            GeneralQueryType::Up => T::p(T::Union(vec![T::p1(), T::p1()])),
        }
    }

    fn matches(self, t: &Template) -> bool {
        if self.template() == *t {
            return true;
        }
        // intersection operands are unordered
        match (self, t) {
            (GeneralQueryType::Pi, Template::Intersection(cs)) if cs.len() == 2 => {
                let swapped = Template::Intersection(vec![cs[1].clone(), cs[0].clone()]);
                self.template() == swapped
            }
            _ => false,
        }
    }
}

impl fmt::Display for GeneralQueryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbreviation())
    }
}

impl FromStr for GeneralQueryType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeneralQueryType::ALL
            .into_iter()
            .find(|t| t.abbreviation() == s)
            .ok_or_else(|| Error::UnknownShape(s.to_owned()))
    }
}

/// Classifies a graph into one of the eight general types by erasing its
/// projection kinds.
pub fn general_type_of(g: &ComputationGraph) -> Result<GeneralQueryType> {
    let t = Template::of(g, g.root());
    GeneralQueryType::ALL
        .into_iter()
        .find(|ty| ty.matches(&t))
        .ok_or_else(|| Error::UnknownShape(t.to_string()))
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    #[test]
    fn table_examples_classify() {
        let cases = [
            ("(rap#a, (nv#1.0@T))", "1p"),
            ("(rap#a, (np#GreaterThan, (nv#1.0@T)))", "2p"),
            ("(i, (np#EqualTo, (nv#1.0@T)), (ap#a, (e#X)))", "2i"),
            ("(i, (np#EqualTo, (nv#1.0@T)), (ap#a, (e#X)), (ap#b, (e#Y)))", "3i"),
            ("(rp#r, (i, (rap#a, (nv#1.0@T)), (rp#s, (e#X))))", "ip"),
            ("(i, (np#EqualTo, (nv#1.0@T)), (ap#a, (rp#r, (e#X))))", "pi"),
            ("(u, (np#EqualTo, (nv#1.0@T)), (ap#a, (e#X)))", "2u"),
            ("(rp#r, (u, (rap#a, (nv#1.0@T)), (rp#s, (e#X))))", "up"),
        ];
        for (text, abbr) in cases {
            let g = parse(text).unwrap();
            assert_eq!(general_type_of(&g).unwrap().abbreviation(), abbr, "{text}");
        }
    }

    #[test]
    fn pi_operands_in_either_order() {
        let g = parse("(i, (ap#a, (rp#r, (e#X))), (np#EqualTo, (nv#1.0@T)))").unwrap();
        assert_eq!(general_type_of(&g).unwrap(), GeneralQueryType::Pi);
    }

    #[test]
    fn four_way_intersection_is_not_a_general_type() {
        // 4-way intersection cannot even be built; a nested one parses but has no type
        let g = parse("(i, (i, (rp#r, (e#A)), (rp#r, (e#B))), (i, (rp#r, (e#C)), (rp#r, (e#D))))").unwrap();
        assert!(matches!(general_type_of(&g), Err(Error::UnknownShape(_))));
        let leaf = parse("(e#A)").unwrap();
        assert!(general_type_of(&leaf).is_err());
    }

    #[test]
    fn abbreviations_round_trip() {
        for t in GeneralQueryType::ALL {
            assert_eq!(t.abbreviation().parse::<GeneralQueryType>().unwrap(), t);
        }
        assert_eq!(GeneralQueryType::Pi.template().to_string(), "(i,(p,(e)),(p,(p,(e))))");
    }
}
