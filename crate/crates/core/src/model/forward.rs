use std::collections::BTreeMap;

use super::ops::{self, DeepSetVars, GateVars, DEEPSET_PARTS, GATE_PARTS};
use super::{Model, ModelKind};
use crate::autodiff::{Tape, Tensor, Var};
use crate::dsl::{BoundKind, BoundQuery, Phase};
use crate::error::{Error, Result};
use crate::kg::{AttributeId, EntityId, NumericalRelation, RelationId, ValueId, ValueTypeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOp {
    Intersection,
    Union,
}

/// A literal together with its graph node, when it has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueRef {
    pub node: Option<ValueId>,
    pub value: f64,
    pub value_type: ValueTypeId,
}

/// One forward pass of a model on a fresh tape. Parameters are placed on
/// the tape the first time they are used.
pub struct Forward<'m> {
    pub tape: Tape,
    model: &'m Model,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'m> Forward<'m> {
    /// With `trainable` false, parameters enter as constants and no
    /// gradient bookkeeping is done. The type prior is constant unless the
    /// model config learns it.
    pub fn new(model: &'m Model, trainable: bool) -> Self {
        Forward {
            tape: Tape::new(),
            model,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .model
            .params
            .get(name)
            .unwrap_or_else(|| panic!("model has no parameter `{name}`"))
            .clone();
        let frozen = name.starts_with("prior.") && !self.model.config.learn_prior;
        let v = if self.trainable && !frozen {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_owned(), v);
        v
    }

    pub fn gate(&mut self, prefix: &str) -> GateVars {
        let v: Vec<Var> = GATE_PARTS.iter().map(|p| self.param(&format!("{prefix}.{p}"))).collect();
        GateVars {
            w_p: v[0],
            b_p: v[1],
            w_z: v[2],
            u_z: v[3],
            b_z: v[4],
            w_r: v[5],
            u_r: v[6],
            b_r: v[7],
            w_h: v[8],
            u_h: v[9],
            b_h: v[10],
        }
    }

    pub fn deepset(&mut self, op: MergeOp, phase: Phase) -> DeepSetVars {
        let o = match op {
            MergeOp::Intersection => "i",
            MergeOp::Union => "u",
        };
        let p = match phase {
            Phase::Entity => "entity",
            Phase::Numeric => "numeric",
        };
        let v: Vec<Var> = DEEPSET_PARTS
            .iter()
            .map(|part| self.param(&format!("merge.{o}.{p}.{part}")))
            .collect();
        DeepSetVars {
            w_q: v[0],
            w_k: v[1],
            w_v: v[2],
            w_1: v[3],
            b_1: v[4],
            w_2: v[5],
            b_2: v[6],
        }
    }

    /// Embedding rows of the anchor entities.
    pub fn entity_anchors(&mut self, ids: &[EntityId]) -> Var {
        let table = self.param("emb.entity");
        let idx: Vec<usize> = ids.iter().map(|e| e.index()).collect();
        self.tape.gather(table, &idx)
    }

    /// Anchor value states. The network model uses `μ = ψ(x)` and a fixed
    /// small variance; the comparison model looks up value embeddings, with
    /// a zero vector for literals that are not graph values.
    pub fn value_anchors(&mut self, anchors: &[ValueRef]) -> Result<Var> {
        let m = self.model;
        match m.config.kind {
            ModelKind::Nrn => {
                let d = m.dim();
                let log_var = m.config.anchor_variance.ln();
                let mut rows = Vec::with_capacity(anchors.len());
                for a in anchors {
                    let mut row = m.psi(a.value, a.value_type.index())?;
                    row.extend(std::iter::repeat(log_var).take(d));
                    rows.push(row);
                }
                Ok(self.tape.constant(Tensor::from_rows(&rows)))
            }
            ModelKind::ValueAsEntity => {
                let table = self.param("emb.value");
                let idx: Vec<usize> = anchors.iter().map(|a| a.node.map_or(0, |x| x.index())).collect();
                let rows = self.tape.gather(table, &idx);
                if anchors.iter().all(|a| a.node.is_some()) {
                    return Ok(rows);
                }
                let mask = Tensor::new(
                    anchors.len(),
                    1,
                    anchors.iter().map(|a| if a.node.is_some() { 1.0 } else { 0.0 }).collect(),
                );
                let mask = self.tape.constant(mask);
                Ok(self.tape.mul_col(rows, mask))
            }
        }
    }

    fn projection(&mut self, gate: &str, table: &str, x: Var, ids: &[usize]) -> Var {
        let w = self.gate(gate);
        let table = self.param(table);
        let ctx = self.tape.gather(table, ids);
        ops::gated_transition(&mut self.tape, &w, x, ctx)
    }

    /// Entity set to entity set along relation `r`.
    pub fn rel_projection(&mut self, q: Var, relations: &[RelationId]) -> Var {
        let ids: Vec<usize> = relations.iter().map(|r| r.index()).collect();
        self.projection("gate.rel", "emb.relation", q, &ids)
    }

    /// Entity set to the density of its attribute values.
    pub fn attr_projection(&mut self, q: Var, attributes: &[AttributeId]) -> Var {
        let ids: Vec<usize> = attributes.iter().map(|a| a.index()).collect();
        let theta = self.projection("gate.attr", "emb.attribute", q, &ids);
        self.bounded(theta)
    }

    /// Value density to the entities holding such values.
    pub fn rev_attr_projection(&mut self, theta: Var, attributes: &[AttributeId]) -> Var {
        let ids: Vec<usize> = attributes.iter().map(|a| a.index()).collect();
        self.projection("gate.rev", "emb.attribute", theta, &ids)
    }

    /// Value density to the density of related values.
    pub fn num_projection(&mut self, theta: Var, relations: &[NumericalRelation]) -> Var {
        let ids: Vec<usize> = relations.iter().map(|f| f.index()).collect();
        let theta = self.projection("gate.num", "emb.numerical", theta, &ids);
        self.bounded(theta)
    }

    /// Numeric states of the network model keep `|s| < LOG_VAR_BOUND`.
    fn bounded(&mut self, theta: Var) -> Var {
        match self.model.config.kind {
            ModelKind::Nrn => ops::bound_log_variance(&mut self.tape, theta),
            ModelKind::ValueAsEntity => theta,
        }
    }

    pub fn merge(&mut self, op: MergeOp, phase: Phase, states: &[Var]) -> Result<Var> {
        if !(2..=3).contains(&states.len()) {
            return Err(Error::Shape(format!("merge of {} states", states.len())));
        }
        let width = self.tape.shape(states[0]).1;
        let expected = match phase {
            Phase::Entity => self.model.dim(),
            Phase::Numeric => self.model.numeric_width(),
        };
        if states.iter().any(|&s| self.tape.shape(s).1 != expected) || width != expected {
            return Err(Error::Shape(format!("{phase:?} merge expects width {expected}")));
        }
        let w = self.deepset(op, phase);
        let out = ops::deepset_merge(&mut self.tape, &w, states);
        Ok(match phase {
            Phase::Entity => out,
            Phase::Numeric => self.bounded(out),
        })
    }

    /// Encodes a batch of queries that share one skeleton, in arena order.
    pub fn encode(&mut self, queries: &[&BoundQuery]) -> Result<Var> {
        let order = queries[0].topological_order();
        self.encode_in_order(queries, &order)
    }

    /// As [`Forward::encode`], visiting nodes in `order`, which must list
    /// every node after its children.
    pub fn encode_in_order(&mut self, queries: &[&BoundQuery], order: &[usize]) -> Result<Var> {
        let states = self.encode_nodes(queries, order)?;
        states[queries[0].root()].ok_or_else(|| Error::Shape("order does not reach the root".into()))
    }

    /// The state of every node visited by `order`, indexed by arena position.
    pub fn encode_nodes(&mut self, queries: &[&BoundQuery], order: &[usize]) -> Result<Vec<Option<Var>>> {
        let first = queries
            .first()
            .ok_or_else(|| Error::Shape("encode of an empty batch".into()))?;
        let skeleton = first.skeleton();
        if queries.iter().any(|q| q.skeleton() != skeleton) {
            return Err(Error::Shape("batched queries differ in structure".into()));
        }
        let mut states: Vec<Option<Var>> = vec![None; first.len()];
        for &i in order {
            let node = first.node(i);
            let child = |k: usize| -> Result<Var> {
                states[node.children[k]].ok_or_else(|| Error::Shape(format!("node {i} visited before its operands")))
            };
            let pick = |f: &dyn Fn(&BoundKind) -> Option<usize>| -> Vec<usize> {
                queries.iter().map(|q| f(&q.node(i).kind).expect("same skeleton")).collect()
            };
            let var = match node.kind {
                BoundKind::AnchorEntity(_) => {
                    let ids = pick(&|k| match k {
                        BoundKind::AnchorEntity(e) => Some(e.index()),
                        _ => None,
                    });
                    self.entity_anchors(&ids.into_iter().map(EntityId).collect::<Vec<_>>())
                }
                BoundKind::AnchorValue { .. } => {
                    let refs: Vec<ValueRef> = queries
                        .iter()
                        .map(|q| match q.node(i).kind {
                            BoundKind::AnchorValue {
                                node,
                                value,
                                value_type,
                            } => ValueRef {
                                node,
                                value,
                                value_type,
                            },
                            _ => unreachable!("same skeleton"),
                        })
                        .collect();
                    self.value_anchors(&refs)?
                }
                BoundKind::RelProj(_) => {
                    let ids = pick(&|k| match k {
                        BoundKind::RelProj(r) => Some(r.index()),
                        _ => None,
                    });
                    let x = child(0)?;
                    self.rel_projection(x, &ids.into_iter().map(RelationId).collect::<Vec<_>>())
                }
                BoundKind::AttrProj(_) => {
                    let ids = pick(&|k| match k {
                        BoundKind::AttrProj(a) => Some(a.index()),
                        _ => None,
                    });
                    let x = child(0)?;
                    self.attr_projection(x, &ids.into_iter().map(AttributeId).collect::<Vec<_>>())
                }
                BoundKind::RevAttrProj(_) => {
                    let ids = pick(&|k| match k {
                        BoundKind::RevAttrProj(a) => Some(a.index()),
                        _ => None,
                    });
                    let x = child(0)?;
                    self.rev_attr_projection(x, &ids.into_iter().map(AttributeId).collect::<Vec<_>>())
                }
                BoundKind::NumProj(_) => {
                    let fs: Vec<NumericalRelation> = queries
                        .iter()
                        .map(|q| match q.node(i).kind {
                            BoundKind::NumProj(f) => f,
                            _ => unreachable!("same skeleton"),
                        })
                        .collect();
                    let x = child(0)?;
                    self.num_projection(x, &fs)
                }
                BoundKind::Intersection | BoundKind::Union => {
                    let op = if matches!(node.kind, BoundKind::Intersection) {
                        MergeOp::Intersection
                    } else {
                        MergeOp::Union
                    };
                    let xs = (0..node.children.len()).map(child).collect::<Result<Vec<_>>>()?;
                    self.merge(op, node.phase, &xs)?
                }
            };
            states[i] = Some(var);
        }
        Ok(states)
    }

    /// Mean full-softmax cross-entropy of the target entities.
    pub fn entity_loss(&mut self, q: Var, targets: &[EntityId]) -> Var {
        let table = self.param("emb.entity");
        let t: Vec<usize> = targets.iter().map(|e| e.index()).collect();
        ops::entity_loss(&mut self.tape, q, table, &t)
    }

    /// Mean loss of numeric-rooted queries against their target values.
    /// The network model uses the negative log-likelihood of `ψ(v)` plus
    /// the negative log type prior; the comparison model uses a softmax
    /// over all value nodes.
    pub fn numeric_loss(&mut self, theta: Var, targets: &[ValueRef]) -> Result<Var> {
        match self.model.config.kind {
            ModelKind::Nrn => {
                let m = self.model;
                let rows = targets
                    .iter()
                    .map(|t| m.psi(t.value, t.value_type.index()))
                    .collect::<Result<Vec<_>>>()?;
                let psi = self.tape.constant(Tensor::from_rows(&rows));
                let types: Vec<usize> = targets.iter().map(|t| t.value_type.index()).collect();
                let mean_table = self.param("prior.mean");
                let var_table = self.param("prior.log_var");
                let mean = self.tape.gather(mean_table, &types);
                let log_var = self.tape.gather(var_table, &types);
                Ok(ops::attribute_loss(&mut self.tape, theta, psi, mean, log_var))
            }
            ModelKind::ValueAsEntity => {
                let table = self.param("emb.value");
                let ids = targets
                    .iter()
                    .map(|t| {
                        t.node
                            .map(|x| x.index())
                            .ok_or_else(|| Error::Shape("value target is not a graph value".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ops::entity_loss(&mut self.tape, theta, table, &ids))
            }
        }
    }

    /// Gradients of `loss` by parameter name, for parameters that took
    /// part in the pass.
    pub fn gradients(&self, loss: Var) -> BTreeMap<String, Tensor> {
        let mut grads = self.tape.backward(loss);
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }

    /// Tape handles of the parameters used so far.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }
}
