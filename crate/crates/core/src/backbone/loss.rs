use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::model::{backward, forward_branch, log_sigmoid, sigmoid, GradBuffers, SharedQuery};
use crate::backbone::store::ParameterStore;
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::query::OperatorTypeKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 2.0,
            negatives: 32,
        }
    }
}

/// One training example: a query, one of its answers and pre-drawn negatives.
#[derive(Debug, Clone)]
pub struct LossItem {
    pub query: SharedQuery,
    pub positive: EntityId,
    pub negatives: Vec<EntityId>,
}

/// A batch with all randomness drawn up front, so the loss is a pure
/// function of the parameters.
#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    pub items: Vec<LossItem>,
}

impl LossBatch {
    pub fn sample<'a, R, I>(queries: I, config: &LossConfig, num_entities: usize, rng: &mut R) -> Result<Self>
    where
        R: Rng + ?Sized,
        I: IntoIterator<Item = &'a SharedQuery>,
    {
        let items = queries
            .into_iter()
            .map(|q| {
                if q.positives.is_empty() {
                    return Err(Error::Contract(format!(
                        "a `{}` query has no answers to train on",
                        q.template
                    )));
                }
                let positive = q.positives[rng.gen_range(0..q.positives.len())];
                let negatives = (0..config.negatives)
                    .map(|_| rng.gen_range(0..num_entities) as EntityId)
                    .collect();
                Ok(LossItem {
                    query: q.clone(),
                    positive,
                    negatives,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Which parameter groups to return gradients for.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selector {
    pub entity: bool,
    pub shared: bool,
    pub overlays: Vec<OperatorTypeKey>,
}

impl Selector {
    pub fn all(store: &ParameterStore) -> Self {
        Self {
            entity: true,
            shared: true,
            overlays: store.adapted.keys().copied().collect(),
        }
    }

    pub fn overlay(key: OperatorTypeKey) -> Self {
        Self {
            overlays: vec![key],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap {
    pub entity: Option<Vec<f64>>,
    pub shared: Option<Vec<f64>>,
    pub overlays: BTreeMap<OperatorTypeKey, Vec<f64>>,
}

impl GradientMap {
    pub fn select(buffers: GradBuffers, selector: &Selector) -> Self {
        let GradBuffers {
            entity,
            shared,
            mut overlays,
        } = buffers;
        let len = shared.len();
        Self {
            entity: selector.entity.then_some(entity),
            shared: selector.shared.then_some(shared),
            overlays: selector
                .overlays
                .iter()
                .map(|k| (*k, overlays.remove(k).unwrap_or_else(|| vec![0.0; len])))
                .collect(),
        }
    }
}

/// Mean over the batch of
/// `−log σ(γ + s(q, a)) − (1/k) Σ log σ(−s(q, n) − γ)`.
pub fn loss(batch: &LossBatch, store: &ParameterStore, config: &LossConfig) -> Result<f64> {
    run(batch, store, config, None)
}

pub fn loss_and_grad(batch: &LossBatch, store: &ParameterStore, config: &LossConfig) -> Result<(f64, GradBuffers)> {
    let mut grads = GradBuffers::zeros(&store.dims);
    let value = run(batch, store, config, Some(&mut grads))?;
    Ok((value, grads))
}

pub fn grad(
    batch: &LossBatch,
    store: &ParameterStore,
    config: &LossConfig,
    selector: &Selector,
) -> Result<GradientMap> {
    let (_, buffers) = loss_and_grad(batch, store, config)?;
    Ok(GradientMap::select(buffers, selector))
}

fn run(
    batch: &LossBatch,
    store: &ParameterStore,
    config: &LossConfig,
    mut grads: Option<&mut GradBuffers>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty loss batch".into()));
    }
    let d = store.dims.dim;
    let scale = 1.0 / batch.len() as f64;
    let gamma = config.margin;
    let mut total = 0.0;

    for item in &batch.items {
        let traces = item
            .query
            .branches
            .iter()
            .map(|b| forward_branch(b, store))
            .collect::<Result<Vec<_>>>()?;
        let k = item.negatives.len().max(1) as f64;
        let candidates = std::iter::once((item.positive, true)).chain(item.negatives.iter().map(|&n| (n, false)));
        let mut douts = vec![vec![0.0; d]; traces.len()];

        for (entity, is_positive) in candidates {
            let row = store.entity_row(entity);
            let squashed: Vec<f64> = row.iter().map(|&x| sigmoid(x)).collect();
            let (best, s) = traces
                .iter()
                .enumerate()
                .map(|(b, t)| {
                    (
                        b,
                        -t.out().iter().zip(&squashed).map(|(q, e)| (q - e).abs()).sum::<f64>(),
                    )
                })
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });

            let (term, ds) = if is_positive {
                (-log_sigmoid(gamma + s), -sigmoid(-(gamma + s)))
            } else {
                (-log_sigmoid(-s - gamma) / k, sigmoid(s + gamma) / k)
            };
            total += term * scale;

            if let Some(g) = grads.as_deref_mut() {
                let ds = ds * scale;
                let q = traces[best].out();
                let erow = &mut g.entity[entity as usize * d..(entity as usize + 1) * d];
                for j in 0..d {
                    // s = −Σ|q − e|, sign(0) taken as 0
                    let sgn = sign(q[j] - squashed[j]);
                    douts[best][j] -= ds * sgn;
                    erow[j] += ds * sgn * squashed[j] * (1.0 - squashed[j]);
                }
            }
        }

        if let Some(g) = grads.as_deref_mut() {
            for (trace, dout) in traces.iter().zip(&douts) {
                backward(trace, dout, store, g);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is {total}")));
    }
    Ok(total)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
