//! Deterministic maps from real values to fixed-width vectors.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

pub const SINUSOIDAL_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    Dice,
    Sinusoidal,
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(EncodingKind::Dice),
            "sinusoidal" | "sin" => Ok(EncodingKind::Sinusoidal),
            _ => Err(Error::InvalidEncoding(format!("unknown encoding `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingSpec {
    pub kind: EncodingKind,
    pub dim: usize,
    /// Per value type `(min, max)`, used by DICE.
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub base: f64,
}

impl EncodingSpec {
    pub fn sinusoidal(dim: usize) -> Result<Self> {
        let spec = EncodingSpec {
            kind: EncodingKind::Sinusoidal,
            dim,
            ranges: BTreeMap::new(),
            base: SINUSOIDAL_BASE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dice(dim: usize, ranges: BTreeMap<String, (f64, f64)>) -> Result<Self> {
        let spec = EncodingSpec {
            kind: EncodingKind::Dice,
            dim,
            ranges,
            base: SINUSOIDAL_BASE,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec of `kind` whose DICE ranges are the observed min and max per
    /// value type among the values that `g` touches. Types without any
    /// touched value fall back to all vocabulary values of the type. A
    /// single observed value `c` gives the range `(c - 0.5, c + 0.5)`.
    pub fn from_graph(kind: EncodingKind, dim: usize, g: &KnowledgeGraph) -> Result<Self> {
        let vocab = g.vocab();
        let mut observed: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        let widen = |map: &mut BTreeMap<String, (f64, f64)>, ty: &str, x: f64| {
            let e = map.entry(ty.to_owned()).or_insert((x, x));
            e.0 = e.0.min(x);
            e.1 = e.1.max(x);
        };
        for x in g.active_values() {
            let node = vocab.value(x);
            widen(&mut observed, vocab.value_type_name(node.value_type), node.value);
        }
        let mut fallback = BTreeMap::new();
        for (_, node) in vocab.values() {
            widen(&mut fallback, vocab.value_type_name(node.value_type), node.value);
        }
        for (ty, r) in fallback {
            observed.entry(ty).or_insert(r);
        }
        for r in observed.values_mut() {
            if r.0 == r.1 {
                *r = (r.0 - 0.5, r.1 + 0.5);
            }
        }
        match kind {
            EncodingKind::Dice => EncodingSpec::dice(dim, observed),
            EncodingKind::Sinusoidal => EncodingSpec::sinusoidal(dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidEncoding(format!("dimension {} below 2", self.dim)));
        }
        if !(self.base > 1.0) {
            return Err(Error::InvalidEncoding(format!("base {} must exceed 1", self.base)));
        }
        match self.kind {
            EncodingKind::Sinusoidal if self.dim % 2 != 0 => Err(Error::InvalidEncoding(format!(
                "sinusoidal encoding needs an even dimension, got {}",
                self.dim
            ))),
            EncodingKind::Dice => {
                for (ty, &(lo, hi)) in &self.ranges {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return Err(Error::InvalidEncoding(format!("range of `{ty}` is ({lo}, {hi})")));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn encode(&self, value: f64, value_type: &str) -> Result<Vec<f64>> {
        match self.kind {
            EncodingKind::Dice => dice_encode(value, value_type, self),
            EncodingKind::Sinusoidal => Ok(sinusoidal_encode(value, self)),
        }
    }
}

/// DICE: the value is mapped linearly to an angle in `[0, π]` and then to
/// polar-style coordinates. Inputs outside the type's range are clamped.
pub fn dice_encode(value: f64, value_type: &str, spec: &EncodingSpec) -> Result<Vec<f64>> {
    let &(lo, hi) = spec
        .ranges
        .get(value_type)
        .ok_or_else(|| Error::MissingRange(value_type.to_owned()))?;
    let v = value.clamp(lo, hi);
    let alpha = PI * (v - lo) / (hi - lo);
    let (s, c) = alpha.sin_cos();
    let d = spec.dim;
    let mut out = Vec::with_capacity(d);
    for i in 1..d {
        out.push(s.powi(i as i32 - 1) * c);
    }
    out.push(s.powi(d as i32));
    // sin π is not exactly zero in floating point
    if v == hi {
        out.iter_mut().skip(1).for_each(|x| *x = 0.0);
        out[0] = -1.0;
    }
    Ok(out)
}

/// Transformer-style encoding: even components `sin(v / n^(d/D))`, odd
/// components `cos(v / n^((d-1)/D))`.
pub fn sinusoidal_encode(value: f64, spec: &EncodingSpec) -> Vec<f64> {
    let d = spec.dim as f64;
    (0..spec.dim)
        .map(|i| {
            if i % 2 == 0 {
                (value / spec.base.powf(i as f64 / d)).sin()
            } else {
                (value / spec.base.powf((i - 1) as f64 / d)).cos()
            }
        })
        .collect()
}
