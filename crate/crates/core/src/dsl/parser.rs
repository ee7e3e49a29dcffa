use super::{ComputationGraph, GraphBuilder, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::kg::NumericalRelation;

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    builder: GraphBuilder,
}

fn is_delimiter(c: char) -> bool {
    c.is_whitespace() || matches!(c, '(' | ')' | ',')
}

impl<'a> Parser<'a> {
    fn error<T>(&self, at: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            position: at,
            message: message.into(),
        })
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<()> {
        match self.peek() {
            Some(found) if found == c => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(found) => self.error(self.pos, format!("expected `{c}`, found `{found}`")),
            None => self.error(self.pos, format!("expected `{c}`, found end of input")),
        }
    }

    /// A maximal run of non-delimiter characters.
    fn atom(&mut self) -> Result<(usize, &'a str)> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest.find(is_delimiter).unwrap_or(rest.len());
        if len == 0 {
            return self.error(start, "expected a symbol");
        }
        self.pos += len;
        Ok((start, &rest[..len]))
    }

    fn label<'b>(&self, at: usize, atom: &'b str, head: &str) -> Result<&'b str> {
        match atom.strip_prefix(head).and_then(|r| r.strip_prefix('#')) {
            Some(label) if !label.is_empty() && !label.contains(['#', '@']) => Ok(label),
            _ => self.error(at, format!("`{head}` needs a label written as `{head}#name`")),
        }
    }

    fn expr(&mut self) -> Result<NodeId> {
        let open = self.pos;
        self.expect('(')?;
        let (at, head) = self.atom()?;
        let name = head.split('#').next().unwrap_or(head);
        let kind = match name {
            "e" => {
                let label = self.label(at, head, "e")?;
                self.expect(')')?;
                return Ok(self.builder.entity(label));
            }
            "nv" => {
                let body = head.strip_prefix("nv#").unwrap_or("");
                let Some((number, ty)) = body.split_once('@') else {
                    return self.error(at, "value anchors are written `nv#<number>@<type>`");
                };
                let value: f64 = match number.parse() {
                    Ok(v) if f64::is_finite(v) => v,
                    _ => return self.error(at + 3, format!("`{number}` is not a finite number")),
                };
                if ty.is_empty() || ty.contains(['#', '@']) {
                    return self.error(at, "value anchors need a value type after `@`");
                }
                self.expect(')')?;
                return Ok(self.builder.value(value, ty));
            }
            "rp" => NodeKind::RelProj(self.label(at, head, "rp")?.to_owned()),
            "ap" => NodeKind::AttrProj(self.label(at, head, "ap")?.to_owned()),
            "rap" => NodeKind::RevAttrProj(self.label(at, head, "rap")?.to_owned()),
            "np" => {
                let label = self.label(at, head, "np")?;
                let f = NumericalRelation::from_name(label).ok_or_else(|| Error::UnknownSymbol {
                    kind: "numerical relation",
                    name: label.to_owned(),
                })?;
                NodeKind::NumProj(f)
            }
            "i" | "u" if head.len() == 1 => {
                if head == "i" {
                    NodeKind::Intersection
                } else {
                    NodeKind::Union
                }
            }
            _ => return self.error(at, format!("unknown head `{head}`")),
        };
        let mut children = Vec::new();
        loop {
            match self.peek() {
                Some(',') => {
                    self.pos += 1;
                    self.skip_ws();
                    children.push(self.expr()?);
                }
                Some(')') => {
                    self.pos += 1;
                    break;
                }
                Some(c) => return self.error(self.pos, format!("expected `,` or `)`, found `{c}`")),
                None => return self.error(self.pos, "unterminated expression"),
            }
        }
        if children.is_empty() {
            return self.error(open, format!("`{}` has no operands", kind.head()));
        }
        self.builder.add(kind, children)
    }
}

/// Parses and type-checks a query.
pub fn parse(text: &str) -> Result<ComputationGraph> {
    let mut p = Parser {
        src: text,
        pos: 0,
        builder: GraphBuilder::new(),
    };
    p.skip_ws();
    let root = p.expr()?;
    if p.peek().is_some() {
        return p.error(p.pos, "trailing input after query");
    }
    p.builder.finish(root)
}
