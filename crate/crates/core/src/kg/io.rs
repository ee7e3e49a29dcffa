use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    AttributeId, EntityId, KnowledgeGraph, NumericalRelation, RelationId, ValueId, Vocab,
};
use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads relation triples, attribute triples and the attribute type map
/// from tab-separated files.
pub fn load_triples(rel_path: &Path, attr_path: &Path, type_map_path: &Path) -> Result<KnowledgeGraph> {
    let rel = read(rel_path)?;
    let attr = read(attr_path)?;
    let types = read(type_map_path)?;
    load_triples_inner((&rel, rel_path), (&attr, attr_path), (&types, type_map_path))
}

/// Same as [`load_triples`] over in-memory file contents.
pub fn load_triples_from_str(rel: &str, attr: &str, type_map: &str) -> Result<KnowledgeGraph> {
    load_triples_inner(
        (rel, Path::new("<relations>")),
        (attr, Path::new("<attributes>")),
        (type_map, Path::new("<type-map>")),
    )
}

fn fields<'a>(line: &'a str, path: &Path, lineno: usize, n: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
    if parts.len() != n || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Malformed {
            path: path.to_owned(),
            line: lineno,
            message: format!("expected {n} tab-separated fields, found {}", parts.len()),
        });
    }
    Ok(parts)
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn load_triples_inner(rel: (&str, &Path), attr: (&str, &Path), types: (&str, &Path)) -> Result<KnowledgeGraph> {
    let mut vocab = Vocab::new();

    let mut type_of: HashMap<String, String> = HashMap::new();
    for (lineno, line) in lines(types.0) {
        let f = fields(line, types.1, lineno, 2)?;
        if let Some(prev) = type_of.insert(f[0].to_owned(), f[1].to_owned()) {
            if prev != f[1] {
                return Err(Error::Malformed {
                    path: types.1.to_owned(),
                    line: lineno,
                    message: format!("attribute `{}` mapped to both `{prev}` and `{}`", f[0], f[1]),
                });
            }
        }
    }

    let mut rel_edges = Vec::new();
    for (lineno, line) in lines(rel.0) {
        let f = fields(line, rel.1, lineno, 3)?;
        let h = vocab.intern_entity(f[0]);
        let r = vocab.intern_relation(f[1]);
        let t = vocab.intern_entity(f[2]);
        rel_edges.push((h, r, t));
    }

    let mut attr_edges = Vec::new();
    for (lineno, line) in lines(attr.0) {
        let f = fields(line, attr.1, lineno, 3)?;
        let value: f64 = f[2].parse().map_err(|_| Error::Malformed {
            path: attr.1.to_owned(),
            line: lineno,
            message: format!("`{}` is not a decimal literal", f[2]),
        })?;
        if !value.is_finite() {
            return Err(Error::Malformed {
                path: attr.1.to_owned(),
                line: lineno,
                message: format!("`{}` is not finite", f[2]),
            });
        }
        let type_name = type_of
            .get(f[1])
            .ok_or_else(|| Error::UnknownValueType(f[1].to_owned()))?;
        let vt = vocab.intern_value_type(type_name);
        let e = vocab.intern_entity(f[0]);
        let a = vocab.intern_attribute(f[1], vt)?;
        let x = vocab.intern_value(value, vt)?;
        attr_edges.push((e, a, x));
    }

    KnowledgeGraph::from_edges(Arc::new(vocab), rel_edges, attr_edges, Vec::new())
}

/// Writes the relation triples, attribute triples and attribute type map
/// of `g` in the layout read by [`load_triples`]. Numerical edges are not
/// written; they are derived again on build.
pub fn save_triples(g: &KnowledgeGraph, rel_path: &Path, attr_path: &Path, type_map_path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let v = g.vocab();
    let mut rel = String::new();
    for &(h, r, t) in g.rel_edges() {
        let _ = writeln!(rel, "{}\t{}\t{}", v.entity_name(h), v.relation_name(r), v.entity_name(t));
    }
    let mut attr = String::new();
    for &(e, a, x) in g.attr_edges() {
        let _ = writeln!(attr, "{}\t{}\t{:?}", v.entity_name(e), v.attribute_name(a), v.value(x).value);
    }
    let mut types = String::new();
    for (name, t) in v.attributes() {
        let _ = writeln!(types, "{name}\t{}", v.value_type_name(*t));
    }
    for (path, text) in [(rel_path, rel), (attr_path, attr), (type_map_path, types)] {
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

const GRAPH_FORMAT: &str = "numcqa-graph/v1";

/// On-disk JSON layout of a graph. Field order is fixed so that the
/// serialized bytes are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub format: String,
    pub entities: Vec<String>,
    pub relations: Vec<String>,
    pub value_types: Vec<String>,
    pub attributes: Vec<(String, String)>,
    pub values: Vec<(f64, String)>,
    pub rel_edges: Vec<(usize, usize, usize)>,
    pub attr_edges: Vec<(usize, usize, usize)>,
    pub num_edges: Vec<(usize, NumericalRelation, usize)>,
}

impl GraphFile {
    pub fn from_graph(g: &KnowledgeGraph) -> Self {
        GraphFile {
            rel_edges: g.rel_edges().iter().map(|&(h, r, t)| (h.0, r.0, t.0)).collect(),
            attr_edges: g.attr_edges().iter().map(|&(e, a, x)| (e.0, a.0, x.0)).collect(),
            num_edges: g.num_edges().iter().map(|&(a, f, b)| (a.0, f, b.0)).collect(),
            ..GraphFile::from_vocab(g.vocab())
        }
    }

    /// A file holding only the vocabulary.
    pub fn from_vocab(v: &Vocab) -> Self {
        GraphFile {
            format: GRAPH_FORMAT.to_owned(),
            entities: v.entity_names().to_vec(),
            relations: v.relation_names().to_vec(),
            value_types: v.value_type_names().to_vec(),
            attributes: v
                .attributes()
                .iter()
                .map(|(name, t)| (name.clone(), v.value_type_name(*t).to_owned()))
                .collect(),
            values: v
                .values()
                .map(|(_, n)| (n.value, v.value_type_name(n.value_type).to_owned()))
                .collect(),
            rel_edges: Vec::new(),
            attr_edges: Vec::new(),
            num_edges: Vec::new(),
        }
    }

    /// Rebuilds the vocabulary. Ids are preserved because interning
    /// happens in file order.
    pub fn vocab(&self) -> Result<Vocab> {
        if self.format != GRAPH_FORMAT {
            return Err(Error::InvalidGraph(format!("unsupported graph format `{}`", self.format)));
        }
        let mut v = Vocab::new();
        for name in &self.entities {
            let id = v.intern_entity(name);
            if id.0 + 1 != v.num_entities() {
                return Err(Error::InvalidGraph(format!("duplicate entity `{name}`")));
            }
        }
        for name in &self.relations {
            v.intern_relation(name);
        }
        for name in &self.value_types {
            v.intern_value_type(name);
        }
        if v.num_value_types() != self.value_types.len() {
            return Err(Error::InvalidGraph("duplicate value types".into()));
        }
        for (name, ty) in &self.attributes {
            let t = v.value_type(ty).ok_or_else(|| Error::UnknownSymbol {
                kind: "value type",
                name: ty.clone(),
            })?;
            v.intern_attribute(name, t)?;
        }
        for (value, ty) in &self.values {
            let t = v.value_type(ty).ok_or_else(|| Error::UnknownSymbol {
                kind: "value type",
                name: ty.clone(),
            })?;
            v.intern_value(*value, t)?;
        }
        if v.num_relations() != self.relations.len()
            || v.num_attributes() != self.attributes.len()
            || v.num_values() != self.values.len()
        {
            return Err(Error::InvalidGraph("duplicate vocabulary entries".into()));
        }
        Ok(v)
    }

    pub fn into_graph_with(self, vocab: Arc<Vocab>) -> Result<KnowledgeGraph> {
        KnowledgeGraph::from_edges(
            vocab,
            self.rel_edges
                .iter()
                .map(|&(h, r, t)| (EntityId(h), RelationId(r), EntityId(t)))
                .collect(),
            self.attr_edges
                .iter()
                .map(|&(e, a, x)| (EntityId(e), AttributeId(a), ValueId(x)))
                .collect(),
            self.num_edges
                .iter()
                .map(|&(a, f, b)| (ValueId(a), f, ValueId(b)))
                .collect(),
        )
    }

    pub fn into_graph(self) -> Result<KnowledgeGraph> {
        let vocab = Arc::new(self.vocab()?);
        self.into_graph_with(vocab)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl KnowledgeGraph {
    pub fn to_json(&self) -> Result<String> {
        GraphFile::from_graph(self).to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        GraphFile::from_json(text)?.into_graph()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read(path)?)
    }
}
