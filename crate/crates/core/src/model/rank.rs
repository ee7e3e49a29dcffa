use std::collections::BTreeSet;

use super::ops::gaussian_logpdf_f64;
use super::{EncoderState, Model, ModelKind};
use crate::autodiff::dot;
use crate::dsl::{BoundQuery, Phase};
use crate::error::{Error, Result};
use crate::kg::Vocab;

/// Candidate answer ids of `q`: every entity for entity-rooted queries,
/// every value of the root's type otherwise.
pub fn candidates(q: &BoundQuery, vocab: &Vocab) -> Vec<usize> {
    match q.root_phase() {
        Phase::Entity => (0..vocab.num_entities()).collect(),
        Phase::Numeric => {
            let t = q.value_type().expect("numeric root has a value type");
            vocab.values_of_type(t).into_iter().map(|v| v.index()).collect()
        }
    }
}

/// Scores candidates against encoded queries, with `ψ` of every value
/// computed once.
pub struct Scorer<'a> {
    model: &'a Model,
    psi: Vec<Vec<f64>>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, vocab: &Vocab) -> Result<Self> {
        let psi = match model.config.kind {
            ModelKind::Nrn => vocab
                .values()
                .map(|(_, node)| model.psi(node.value, node.value_type.index()))
                .collect::<Result<Vec<_>>>()?,
            ModelKind::ValueAsEntity => Vec::new(),
        };
        Ok(Scorer { model, psi })
    }

    /// Scores of `candidates` under `state`; larger is better.
    pub fn score(&self, state: &EncoderState, candidates: &[usize]) -> Result<Vec<f64>> {
        match state {
            EncoderState::Entity(q) => {
                let table = self.model.params.get("emb.entity").expect("entity table");
                Ok(candidates.iter().map(|&e| dot(q, table.row(e))).collect())
            }
            EncoderState::Numeric { mu, log_var } => candidates
                .iter()
                .map(|&v| {
                    let psi = self
                        .psi
                        .get(v)
                        .ok_or_else(|| Error::Shape(format!("value {v} outside the scorer's vocabulary")))?;
                    Ok(gaussian_logpdf_f64(mu, log_var, psi))
                })
                .collect(),
            EncoderState::Value(q) => {
                let table = self
                    .model
                    .params
                    .get("emb.value")
                    .ok_or_else(|| Error::Shape("model has no value table".into()))?;
                Ok(candidates.iter().map(|&v| dot(q, table.row(v))).collect())
            }
        }
    }
}

/// Scores of `candidates` under `state`; larger is better.
pub fn score_candidates(model: &Model, state: &EncoderState, candidates: &[usize], vocab: &Vocab) -> Result<Vec<f64>> {
    Scorer::new(model, vocab)?.score(state, candidates)
}

/// Filtered rank of candidate position `target`: one plus the number of
/// candidates outside `known` scoring strictly higher, or scoring the same
/// with a smaller id. `ids[i]` is the id of candidate `i`.
pub fn filtered_rank(scores: &[f64], ids: &[usize], target: usize, known: &BTreeSet<usize>) -> usize {
    let (s_t, id_t) = (scores[target], ids[target]);
    1 + scores
        .iter()
        .zip(ids)
        .filter(|&(&s, &id)| id != id_t && !known.contains(&id) && (s > s_t || (s == s_t && id < id_t)))
        .count()
}

/// Filtered ranks of `answers` among the candidates of a query. `known`
/// holds every answer of the query in the evaluation graph; each answer
/// is ranked against the candidates that are not answers.
pub fn rank_answers(scores: &[f64], ids: &[usize], answers: &[usize], known: &BTreeSet<usize>) -> Result<Vec<usize>> {
    answers
        .iter()
        .map(|a| {
            let pos = ids
                .binary_search(a)
                .map_err(|_| Error::Shape(format!("answer {a} is not a candidate")))?;
            Ok(filtered_rank(scores, ids, pos, known))
        })
        .collect()
}
