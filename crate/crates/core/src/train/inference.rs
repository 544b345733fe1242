//! Test-time adaptation before evaluation.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;

use crate::backbone::{loss_and_grad, LossBatch, ParameterStore, SharedQuery};
use crate::dataset::template_rng;
use crate::error::Result;
use crate::query::{builtin_template, NodeKind, OperatorTypeKey, QueryTree, Scheme};
use crate::train::config::{Algorithm, TrainConfig};
use crate::train::data::TrainingSet;

const INFERENCE_STREAM: u64 = 3;

/// Parameters to score each evaluation template with.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalModel {
    /// Scheme the evaluation queries must be prepared with for overlay routing.
    pub scheme: Option<Scheme>,
    pub base: ParameterStore,
    pub per_template: BTreeMap<String, ParameterStore>,
}

impl EvalModel {
    pub fn shared(store: ParameterStore) -> Self {
        Self {
            scheme: None,
            base: store,
            per_template: BTreeMap::new(),
        }
    }

    pub fn store_for(&self, template: &str) -> &ParameterStore {
        self.per_template.get(template).unwrap_or(&self.base)
    }
}

/// Adapts a trained store for evaluation according to the algorithm it was
/// trained with. `categories` are the operator types present in the
/// evaluation queries; `eval_templates` their template names.
pub fn inference_adapt(
    store: &ParameterStore,
    train: &TrainingSet,
    config: &TrainConfig,
    categories: &BTreeSet<OperatorTypeKey>,
    eval_templates: &[String],
) -> Result<EvalModel> {
    match config.algorithm {
        Algorithm::Vanilla => Ok(EvalModel::shared(store.shared_only())),
        Algorithm::Mamo => Ok(EvalModel {
            scheme: config.scheme,
            base: adapt_overlays(store, train, config, categories)?,
            per_template: BTreeMap::new(),
        }),
        Algorithm::Maml => Ok(EvalModel {
            scheme: None,
            base: store.shared_only(),
            per_template: adapt_per_template(store, train, config, eval_templates)?,
        }),
    }
}

/// One overlay per category, each fine-tuned from θ on support queries that
/// contain it while θ and every other type stay fixed.
pub fn adapt_overlays(
    store: &ParameterStore,
    train: &TrainingSet,
    config: &TrainConfig,
    categories: &BTreeSet<OperatorTypeKey>,
) -> Result<ParameterStore> {
    let base = store.shared_only();
    let overlays = categories
        .par_iter()
        .map(|key| {
            let pool = train.containing(key);
            if pool.is_empty() {
                warn!("no training query contains {key}; its overlay stays at the shared parameters");
                return Ok((*key, base.theta.clone()));
            }
            let mut rng = template_rng(config.seed, &key.to_string(), INFERENCE_STREAM);
            let support = draw(&pool, config.inference_support, &mut rng);
            let batch = LossBatch::sample(&support, &config.loss, base.dims.num_entities, &mut rng)?;
            let mut probe = base.clone();
            probe.set_overlay(*key, base.theta.clone())?;
            for _ in 0..config.inference_steps {
                let (_, g) = loss_and_grad(&batch, &probe, &config.loss)?;
                if let (Some(g), Some(o)) = (g.overlays.get(key), probe.adapted.get_mut(key)) {
                    for (p, x) in o.iter_mut().zip(g) {
                        *p -= config.inference_lr() * x;
                    }
                }
            }
            Ok((*key, probe.adapted.remove(key).expect("inserted above")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = base;
    for (k, o) in overlays {
        out.set_overlay(k, o)?;
    }
    Ok(out)
}

/// One fully fine-tuned copy per evaluation template. Templates never seen in
/// training borrow support from the nearest training template.
pub fn adapt_per_template(
    store: &ParameterStore,
    train: &TrainingSet,
    config: &TrainConfig,
    eval_templates: &[String],
) -> Result<BTreeMap<String, ParameterStore>> {
    let names: Vec<&str> = train.template_names().collect();
    eval_templates
        .par_iter()
        .map(|name| {
            let source = nearest_template(name, &names).unwrap_or(names[0]);
            if source != name {
                info!("support for {name} drawn from {source}");
            }
            let pool = train.group(source).expect("name from the set");
            let mut rng = template_rng(config.seed, name, INFERENCE_STREAM);
            let support = draw(pool, config.inference_support, &mut rng);
            let mut fast = store.shared_only();
            let batch = LossBatch::sample(&support, &config.loss, fast.dims.num_entities, &mut rng)?;
            for _ in 0..config.inference_steps {
                let (_, g) = loss_and_grad(&batch, &fast, &config.loss)?;
                for (p, x) in fast.theta.iter_mut().zip(&g.shared) {
                    *p -= config.inference_lr() * x;
                }
                for (p, x) in fast.entity.iter_mut().zip(&g.entity) {
                    *p -= config.inference_lr() * x;
                }
            }
            Ok((name.clone(), fast))
        })
        .collect()
}

fn draw<R: Rng + ?Sized>(pool: &[SharedQuery], n: usize, rng: &mut R) -> Vec<SharedQuery> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
}

/// The candidate whose shape is closest to `name` (itself when present).
/// Shapes compare by operator counts and projection depth; ties go to the
/// earlier candidate.
pub fn nearest_template<'a>(name: &str, candidates: &[&'a str]) -> Option<&'a str> {
    if let Some(c) = candidates.iter().find(|c| **c == name) {
        return Some(c);
    }
    let target = shape(&builtin_template(name)?.tree);
    candidates
        .iter()
        .filter_map(|c| Some((*c, shape(&builtin_template(c)?.tree))))
        .min_by_key(|(_, s)| s.iter().zip(&target).map(|(a, b)| a.abs_diff(*b)).sum::<usize>())
        .map(|(c, _)| c)
}

fn shape(tree: &QueryTree) -> [usize; 5] {
    [
        tree.count(NodeKind::Projection),
        tree.count(NodeKind::Intersection),
        tree.count(NodeKind::Union),
        tree.count(NodeKind::Negation),
        depth(tree),
    ]
}

fn depth(tree: &QueryTree) -> usize {
    let below = tree.children().iter().map(depth).max().unwrap_or(0);
    below + usize::from(tree.kind() == NodeKind::Projection)
}
