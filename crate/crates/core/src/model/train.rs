use std::collections::BTreeMap;

use log::debug;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{Forward, ValueRef};
use super::params::StoredTensor;
use super::Model;
use crate::autodiff::{Tensor, Var};
use crate::dsl::{parse, BoundQuery, Phase};
use crate::error::{Error, Result};
use crate::kg::{EntityId, ValueId, Vocab};
use crate::rng::{seeded, RngState};
use crate::sampler::QueryRecord;

pub const CLIP_NORM: f64 = 1.0;

/// Rng stream used for batch sampling.
const BATCH_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Entity steps per cycle.
    pub entity_steps: usize,
    /// Numeric steps per cycle.
    pub numeric_steps: usize,
    /// Gradients with a larger global L2 norm are rescaled to this norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            batch_size: 128,
            entity_steps: 1,
            numeric_steps: 1,
            clip_norm: Some(CLIP_NORM),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: StoredTensor,
    pub v: StoredTensor,
    pub t: u64,
}

/// Adam with per-parameter step counts. Parameters without a gradient in
/// a step are left alone, moments included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            let p = model
                .params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let slot = self.state.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: (&Tensor::zeros(p.rows, p.cols)).into(),
                v: (&Tensor::zeros(p.rows, p.cols)).into(),
                t: 0,
            });
            slot.t += 1;
            let c1 = 1.0 - self.beta1.powi(slot.t as i32);
            let c2 = 1.0 - self.beta2.powi(slot.t as i32);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                let m = &mut slot.m.data[i];
                let v = &mut slot.v.data[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                if self.lr != 0.0 {
                    p.data[i] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// A training query with its train-graph answers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub query: BoundQuery,
    pub answers: Vec<usize>,
    pub skeleton: String,
}

/// Training queries split by the phase of their root.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSet {
    pub entity: Vec<TrainExample>,
    pub numeric: Vec<TrainExample>,
}

impl TrainSet {
    /// Records without train answers are skipped.
    pub fn from_records(records: &[QueryRecord], vocab: &Vocab) -> Result<Self> {
        let mut set = TrainSet::default();
        for r in records {
            if r.answers_train.is_empty() {
                continue;
            }
            let query = BoundQuery::bind(&parse(&r.query)?, vocab)?;
            let ex = TrainExample {
                skeleton: query.skeleton(),
                answers: r.answers_train.clone(),
                query,
            };
            match ex.query.root_phase() {
                Phase::Entity => set.entity.push(ex),
                Phase::Numeric => set.numeric.push(ex),
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.entity.len() + self.numeric.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Entity,
    Numeric,
}

impl StepKind {
    pub fn name(self) -> &'static str {
        match self {
            StepKind::Entity => "entity",
            StepKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub kind: StepKind,
    pub loss: f64,
}

/// Rescales `grads` so that their joint L2 norm is at most `max`.
/// Returns the norm before rescaling.
pub fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max {
        let scale = max / norm;
        for g in grads.values_mut() {
            g.data.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// Loss of one batch of `(example, answer)` pairs, all of the same root
/// phase. Pairs are encoded in groups of equal structure; the result is
/// the mean over all pairs.
pub fn batch_loss(fw: &mut Forward<'_>, batch: &[(&TrainExample, usize)], vocab: &Vocab) -> Result<Var> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (ex, _)) in batch.iter().enumerate() {
        groups.entry(ex.skeleton.as_str()).or_default().push(i);
    }
    let total = batch.len() as f64;
    let mut acc: Option<Var> = None;
    for idx in groups.values() {
        let queries: Vec<&BoundQuery> = idx.iter().map(|&i| &batch[i].0.query).collect();
        let root = fw.encode(&queries)?;
        let loss = match queries[0].root_phase() {
            Phase::Entity => {
                let targets: Vec<EntityId> = idx.iter().map(|&i| EntityId(batch[i].1)).collect();
                fw.entity_loss(root, &targets)
            }
            Phase::Numeric => {
                let targets: Vec<ValueRef> = idx
                    .iter()
                    .map(|&i| {
                        let id = ValueId(batch[i].1);
                        let node = vocab.value(id);
                        ValueRef {
                            node: Some(id),
                            value: node.value,
                            value_type: node.value_type,
                        }
                    })
                    .collect();
                fw.numeric_loss(root, &targets)?
            }
        };
        let weighted = fw.tape.affine(loss, idx.len() as f64 / total, 0.0);
        acc = Some(match acc {
            None => weighted,
            Some(a) => fw.tape.add(a, weighted),
        });
    }
    acc.ok_or_else(|| Error::Shape("empty training batch".into()))
}

/// Alternating mini-batch training of one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        if config.batch_size == 0 || config.entity_steps + config.numeric_steps == 0 {
            return Err(Error::Config("batch size and alternation must be positive".into()));
        }
        if !(config.lr >= 0.0 && config.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", config.lr)));
        }
        Ok(Trainer {
            model,
            adam: Adam::new(config.lr),
            config,
            seed,
            step: 0,
            rng: seeded(seed, BATCH_STREAM),
        })
    }

    /// Continues from saved optimizer, rng and step state.
    pub fn resume(model: Model, adam: Adam, config: TrainConfig, rng: RngState, step: u64) -> Result<Self> {
        let mut t = Trainer::new(model, config, rng.seed)?;
        t.adam = adam;
        t.adam.lr = config.lr;
        t.rng = rng.restore();
        t.step = step;
        Ok(t)
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(self.seed, &self.rng)
    }

    /// Kind of step number `step`, falling back to the other kind when
    /// one pool is empty.
    pub fn kind_of(&self, step: u64, data: &TrainSet) -> Option<StepKind> {
        let cycle = (self.config.entity_steps + self.config.numeric_steps) as u64;
        let preferred = if step % cycle < self.config.entity_steps as u64 {
            StepKind::Entity
        } else {
            StepKind::Numeric
        };
        match (preferred, data.entity.is_empty(), data.numeric.is_empty()) {
            (_, true, true) => None,
            (StepKind::Entity, true, false) => Some(StepKind::Numeric),
            (StepKind::Numeric, false, true) => Some(StepKind::Entity),
            (k, _, _) => Some(k),
        }
    }

    /// One optimizer step.
    pub fn train_step(&mut self, data: &TrainSet, vocab: &Vocab) -> Result<StepRecord> {
        let kind = self
            .kind_of(self.step, data)
            .ok_or_else(|| Error::Config("no training queries".into()))?;
        let pool = match kind {
            StepKind::Entity => &data.entity,
            StepKind::Numeric => &data.numeric,
        };
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let ex = &pool[self.rng.gen_range(0..pool.len())];
            let answer = ex.answers[self.rng.gen_range(0..ex.answers.len())];
            batch.push((ex, answer));
        }
        let mut fw = Forward::new(&self.model, true);
        let loss_var = batch_loss(&mut fw, &batch, vocab)?;
        let loss = fw.tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                kind: kind.name(),
            });
        }
        let mut grads = fw.gradients(loss_var);
        drop(fw);
        if let Some(max) = self.config.clip_norm {
            clip_gradients(&mut grads, max);
        }
        self.adam.update(&mut self.model, &grads);
        let record = StepRecord {
            step: self.step,
            kind,
            loss,
        };
        debug!("step {} {} loss {loss:.6}", self.step, kind.name());
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` steps, calling `each` after every one.
    pub fn train<F: FnMut(&StepRecord)>(
        &mut self,
        data: &TrainSet,
        vocab: &Vocab,
        steps: u64,
        mut each: F,
    ) -> Result<Vec<StepRecord>> {
        let mut trace = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.train_step(data, vocab)?;
            each(&r);
            trace.push(r);
        }
        Ok(trace)
    }
}
