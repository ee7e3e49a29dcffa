//! The two-phase neural query encoder.
//!
//! Entity sets are vectors in `R^d`. Value sets are diagonal Gaussians
//! with parameters `θ = [μ | s] ∈ R^{2d}` and variances `exp(s)`. All four
//! projections are gated transitions with their own weights, and
//! intersections and unions are attention DeepSets with weights per
//! operator and phase.
//!
//! [`ModelKind::ValueAsEntity`] is the comparison model: value nodes get
//! learned embeddings like entities and every state is a vector in `R^d`.

mod checkpoint;
mod forward;
mod ops;
mod params;
mod rank;
mod train;

use serde::{Deserialize, Serialize};

use crate::dsl::{BoundQuery, Phase};
use crate::encoding::EncodingSpec;
use crate::error::{Error, Result};
use crate::kg::{NumericalRelation, Vocab};
use crate::rng::seeded;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use forward::{Forward, MergeOp, ValueRef};
pub use ops::{
    attribute_loss, deepset_merge, deepset_merge_with_attention, diagonal_logpdf, entity_loss, gated_transition,
    bound_log_variance, gaussian_logpdf, gaussian_logpdf_f64, type_prior_logpdf, DeepSetVars, GateVars, LOG_VAR_BOUND,
};
pub use params::{ParamStore, StoredTensor};
pub use rank::{candidates, filtered_rank, rank_answers, score_candidates, Scorer};
pub use train::{batch_loss, clip_gradients, CLIP_NORM, Adam, AdamSlot, StepKind, StepRecord, TrainConfig, TrainExample, TrainSet, Trainer};

/// Log-variance of value anchors: `σ² = 0.01`.
pub const ANCHOR_VARIANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Nrn,
    ValueAsEntity,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nrn" => Ok(ModelKind::Nrn),
            "value_as_entity" | "value-as-entity" => Ok(ModelKind::ValueAsEntity),
            _ => Err(Error::Config(format!("unknown model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub anchor_variance: f64,
    /// Train the per-type prior mean and log-variance. Off by default:
    /// the prior then stays at its standard normal initialization.
    #[serde(default)]
    pub learn_prior: bool,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, dim: usize) -> Self {
        ModelConfig {
            kind,
            dim,
            anchor_variance: ANCHOR_VARIANCE,
            learn_prior: false,
        }
    }
}

/// Vocabulary sizes a model was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub entities: usize,
    pub relations: usize,
    pub attributes: usize,
    pub values: usize,
    pub value_types: usize,
}

impl Sizes {
    pub fn of(vocab: &Vocab) -> Self {
        Sizes {
            entities: vocab.num_entities(),
            relations: vocab.num_relations(),
            attributes: vocab.num_attributes(),
            values: vocab.num_values(),
            value_types: vocab.num_value_types(),
        }
    }
}

/// Root representation of an encoded query.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderState {
    Entity(Vec<f64>),
    Numeric { mu: Vec<f64>, log_var: Vec<f64> },
    /// Numeric-phase state of the value-as-entity model.
    Value(Vec<f64>),
}

impl EncoderState {
    pub fn phase(&self) -> Phase {
        match self {
            EncoderState::Entity(_) => Phase::Entity,
            _ => Phase::Numeric,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoding: EncodingSpec,
    /// Value type names by id, for encoding anchors.
    pub value_types: Vec<String>,
    pub sizes: Sizes,
    pub params: ParamStore,
}

impl Model {
    /// A freshly initialized model for `vocab`.
    pub fn new(config: ModelConfig, vocab: &Vocab, encoding: EncodingSpec, seed: u64) -> Result<Self> {
        encoding.validate()?;
        if encoding.dim != config.dim {
            return Err(Error::Config(format!(
                "encoding dimension {} differs from model dimension {}",
                encoding.dim, config.dim
            )));
        }
        if !(config.anchor_variance > 0.0) {
            return Err(Error::Config("anchor variance must be positive".into()));
        }
        let sizes = Sizes::of(vocab);
        let d = config.dim;
        let k = match config.kind {
            ModelKind::Nrn => 2 * d,
            ModelKind::ValueAsEntity => d,
        };
        let mut rng = seeded(seed, 1);
        let mut p = ParamStore::new();
        let emb = |rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            params::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
        };
        p.insert("emb.entity", emb(sizes.entities, d, &mut rng));
        p.insert("emb.relation", emb(sizes.relations, d, &mut rng));
        p.insert("emb.attribute", emb(sizes.attributes, k, &mut rng));
        p.insert("emb.numerical", emb(NumericalRelation::ALL.len(), k, &mut rng));
        match config.kind {
            ModelKind::Nrn => {
                p.insert("prior.mean", crate::autodiff::Tensor::zeros(sizes.value_types, d));
                p.insert("prior.log_var", crate::autodiff::Tensor::zeros(sizes.value_types, d));
            }
            ModelKind::ValueAsEntity => p.insert("emb.value", emb(sizes.values, d, &mut rng)),
        }
        ops::init_gate(&mut p, "gate.rel", d, d, d, &mut rng);
        ops::init_gate(&mut p, "gate.attr", d, k, k, &mut rng);
        ops::init_gate(&mut p, "gate.rev", k, d, k, &mut rng);
        ops::init_gate(&mut p, "gate.num", k, k, k, &mut rng);
        for op in ["i", "u"] {
            ops::init_deepset(&mut p, &format!("merge.{op}.entity"), d, &mut rng);
            ops::init_deepset(&mut p, &format!("merge.{op}.numeric"), k, &mut rng);
        }
        Ok(Model {
            config,
            encoding,
            value_types: vocab.value_type_names().to_vec(),
            sizes,
            params: p,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Width of numeric-phase states.
    pub fn numeric_width(&self) -> usize {
        match self.config.kind {
            ModelKind::Nrn => 2 * self.config.dim,
            ModelKind::ValueAsEntity => self.config.dim,
        }
    }

    /// Errors unless `vocab` matches the vocabulary the model was built for.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if Sizes::of(vocab) != self.sizes || vocab.value_type_names() != self.value_types.as_slice() {
            return Err(Error::Checkpoint(
                "graph vocabulary does not match the one the model was trained on".into(),
            ));
        }
        Ok(())
    }

    /// `ψ(value)` for a value of type `value_type`.
    pub fn psi(&self, value: f64, value_type: usize) -> Result<Vec<f64>> {
        let name = self
            .value_types
            .get(value_type)
            .ok_or_else(|| Error::UnknownSymbol {
                kind: "value type",
                name: value_type.to_string(),
            })?;
        self.encoding.encode(value, name)
    }

    /// Root states of `queries`, encoded in batches of equal structure.
    pub fn encode_all(&self, queries: &[&BoundQuery]) -> Result<Vec<EncoderState>> {
        let mut groups: std::collections::BTreeMap<String, Vec<usize>> = std::collections::BTreeMap::new();
        for (i, q) in queries.iter().enumerate() {
            groups.entry(q.skeleton()).or_default().push(i);
        }
        let mut out: Vec<Option<EncoderState>> = vec![None; queries.len()];
        for idx in groups.values() {
            let batch: Vec<&BoundQuery> = idx.iter().map(|&i| queries[i]).collect();
            let mut fw = Forward::new(self, false);
            let root = fw.encode(&batch)?;
            let value = fw.tape.value(root).clone();
            let phase = batch[0].root_phase();
            for (row, &i) in idx.iter().enumerate() {
                out[i] = Some(self.state_from_row(phase, value.row(row)));
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every query encoded")).collect())
    }

    pub fn encode_query(&self, q: &BoundQuery) -> Result<EncoderState> {
        Ok(self.encode_all(&[q])?.remove(0))
    }

    pub(crate) fn state_from_row(&self, phase: Phase, row: &[f64]) -> EncoderState {
        match (phase, self.config.kind) {
            (Phase::Entity, _) => EncoderState::Entity(row.to_vec()),
            (Phase::Numeric, ModelKind::Nrn) => {
                let d = self.config.dim;
                EncoderState::Numeric {
                    mu: row[..d].to_vec(),
                    log_var: row[d..].to_vec(),
                }
            }
            (Phase::Numeric, ModelKind::ValueAsEntity) => EncoderState::Value(row.to_vec()),
        }
    }

    /// `⟨q, e_v⟩`.
    pub fn entity_score(&self, q: &[f64], entity: usize) -> f64 {
        crate::autodiff::dot(q, self.params.get("emb.entity").expect("entity table").row(entity))
    }
}
