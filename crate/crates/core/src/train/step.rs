//! One optimization step of each training regime.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{loss_and_grad, GradBuffers, LossBatch, LossConfig, ParameterStore, SharedQuery};
use crate::error::{Error, Result};
use crate::query::OperatorTypeKey;
use crate::train::config::{Algorithm, TrainConfig};
use crate::train::data::{step_rngs, TrainingSet};
use crate::train::optim::OptimizerState;

/// Largest coordinate of a finite-difference perturbation.
const HVP_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub algorithm: Algorithm,
    pub outer_loss: f64,
    /// L2 norm of each inner gradient, keyed by operator type (or `all` for MAML).
    pub inner_grad_norms: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_residual: Option<f64>,
}

/// Result of one inner step for an operator type.
#[derive(Debug, Clone, PartialEq)]
pub struct Adaptation {
    pub overlay: Vec<f64>,
    pub gradient: Vec<f64>,
}

/// The items of `batch` whose query contains a site of `key`.
pub fn subset_with(batch: &LossBatch, key: &OperatorTypeKey) -> LossBatch {
    LossBatch {
        items: batch
            .items
            .iter()
            .filter(|it| it.query.contains(key))
            .cloned()
            .collect(),
    }
}

/// `θ − α·g` with `g` the support-loss gradient w.r.t. the overlay of `key`,
/// taken at overlay = θ and every other type at θ. `None` for an empty support.
pub fn adapt_operator(
    store: &ParameterStore,
    support: &LossBatch,
    key: OperatorTypeKey,
    alpha: f64,
    loss: &LossConfig,
) -> Result<Option<Adaptation>> {
    if support.is_empty() {
        return Ok(None);
    }
    let mut probe = store.shared_only();
    probe.set_overlay(key, store.theta.clone())?;
    let (_, mut g) = loss_and_grad(support, &probe, loss)?;
    let gradient = g.overlays.remove(&key).unwrap_or_else(|| vec![0.0; store.theta.len()]);
    let overlay = store.theta.iter().zip(&gradient).map(|(t, g)| t - alpha * g).collect();
    Ok(Some(Adaptation { overlay, gradient }))
}

/// Largest componentwise relative gap between the shared-θ gradient and the
/// sum of per-type overlay gradients taken at overlays = θ.
pub fn partition_residual(
    batch: &LossBatch,
    store: &ParameterStore,
    keys: &BTreeSet<OperatorTypeKey>,
    loss: &LossConfig,
) -> Result<f64> {
    let plain_store = store.shared_only();
    let (_, plain) = loss_and_grad(batch, &plain_store, loss)?;
    let mut split_store = plain_store;
    for k in keys {
        split_store.set_overlay(*k, store.theta.clone())?;
    }
    let (_, split) = loss_and_grad(batch, &split_store, loss)?;
    Ok(max_relative_error(&split.theta_total(), &plain.shared))
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += s * x;
    }
}

fn check_finite(loss: f64, store: &ParameterStore, step: u64) -> Result<()> {
    if !loss.is_finite() || !store.is_finite() {
        return Err(Error::Numeric(format!("non-finite value at step {step}")));
    }
    Ok(())
}

/// Shared θ at every site; one Adam step on a target batch.
pub fn vanilla_step(
    data: &TrainingSet,
    store: &mut ParameterStore,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    let (_, mut trng) = step_rngs(config.seed, step);
    let targets = data.sample(config.target_batch, &mut trng);
    let batch = LossBatch::sample(&targets, &config.loss, store.dims.num_entities, &mut trng)?;
    let plain = store.shared_only();
    let (outer_loss, g) = loss_and_grad(&batch, &plain, &config.loss)?;
    optimizer.update(store, &g.entity, &g.shared, config.outer_lr);
    check_finite(outer_loss, store, step)?;
    Ok(StepReport {
        step,
        algorithm: Algorithm::Vanilla,
        outer_loss,
        inner_grad_norms: BTreeMap::new(),
        template: None,
        partition_residual: None,
    })
}

/// Meta-operator step: adapt one overlay per operator type present in the
/// support batch, then update θ and the entity table from the target loss
/// with all overlays active.
pub fn mamo_step(
    data: &TrainingSet,
    store: &mut ParameterStore,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    if config.scheme.is_none() {
        return Err(Error::Config(
            "meta-operator training needs a categorization scheme".into(),
        ));
    }
    let n = store.dims.num_entities;
    let (mut srng, mut trng) = step_rngs(config.seed, step);
    let support = data.sample(config.support_batch, &mut srng);
    let s_batch = LossBatch::sample(&support, &config.loss, n, &mut srng)?;
    let keys: BTreeSet<OperatorTypeKey> = support.iter().flat_map(|q| q.categories()).collect();

    let base = store.shared_only();
    let adapted = keys
        .par_iter()
        .map(|k| {
            let sub = subset_with(&s_batch, k);
            let a = adapt_operator(&base, &sub, *k, config.adaptation_lr, &config.loss)?;
            Ok(a.map(|a| (*k, sub, a)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();

    let partition = if config.verify_partition {
        Some(partition_residual(&s_batch, &base, &keys, &config.loss)?)
    } else {
        None
    };

    let targets = data.sample(config.target_batch, &mut trng);
    let t_batch = LossBatch::sample(&targets, &config.loss, n, &mut trng)?;
    let mut active = base.clone();
    for (k, _, a) in &adapted {
        active.set_overlay(*k, a.overlay.clone())?;
    }
    let (outer_loss, g) = loss_and_grad(&t_batch, &active, &config.loss)?;

    let mut theta_grad = g.shared.clone();
    let mut entity_grad = g.entity.clone();
    for (k, sub, _) in &adapted {
        let Some(gk) = g.overlays.get(k) else { continue };
        add_scaled(&mut theta_grad, gk, 1.0);
        if config.second_order && config.adaptation_lr != 0.0 {
            let (h_theta, h_entity) = overlay_hvp(&base, sub, *k, gk, &config.loss)?;
            add_scaled(&mut theta_grad, &h_theta, -config.adaptation_lr);
            add_scaled(&mut entity_grad, &h_entity, -config.adaptation_lr);
        }
    }
    optimizer.update(store, &entity_grad, &theta_grad, config.outer_lr);
    store.clear_overlays();
    check_finite(outer_loss, store, step)?;

    Ok(StepReport {
        step,
        algorithm: Algorithm::Mamo,
        outer_loss,
        inner_grad_norms: adapted
            .iter()
            .map(|(k, _, a)| (k.to_string(), norm(&a.gradient)))
            .collect(),
        template: None,
        partition_residual: partition,
    })
}

/// Derivative of the overlay's inner gradient, transposed onto `v`: returns
/// the θ part and entity part of `∂(∇_overlay L_S)ᵀ v` by central differences
/// of exact gradients along `overlay = θ ± εv`.
fn overlay_hvp(
    base: &ParameterStore,
    support: &LossBatch,
    key: OperatorTypeKey,
    v: &[f64],
    loss: &LossConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scale = max_abs(v);
    if scale == 0.0 {
        return Ok((vec![0.0; v.len()], vec![0.0; base.entity.len()]));
    }
    let eps = HVP_STEP / scale;
    let at = |sign: f64| -> Result<GradBuffers> {
        let mut s = base.clone();
        let shifted = base.theta.iter().zip(v).map(|(t, x)| t + sign * eps * x).collect();
        s.set_overlay(key, shifted)?;
        Ok(loss_and_grad(support, &s, loss)?.1)
    };
    let (plus, minus) = (at(1.0)?, at(-1.0)?);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) / (2.0 * eps)).collect::<Vec<_>>();
    Ok((
        diff(&plus.theta_total(), &minus.theta_total()),
        diff(&plus.entity, &minus.entity),
    ))
}

/// Query-type MAML step: one template is a task; all parameters are adapted
/// on its support batch and the originals updated from the target loss.
pub fn maml_step(
    data: &TrainingSet,
    store: &mut ParameterStore,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    let n = store.dims.num_entities;
    let (mut srng, mut trng) = step_rngs(config.seed, step);
    let names: Vec<&str> = data.template_names().collect();
    let name = names[srng.gen_range(0..names.len())].to_string();
    let group = data.group(&name).expect("sampled from the set");
    let (support, targets) = task_split(group, config.support_batch, config.target_batch, &mut srng, &mut trng);
    let s_batch = LossBatch::sample(&support, &config.loss, n, &mut srng)?;
    let t_batch = LossBatch::sample(&targets, &config.loss, n, &mut trng)?;

    let base = store.shared_only();
    let (_, gs) = loss_and_grad(&s_batch, &base, &config.loss)?;
    let mut fast = base.clone();
    add_scaled(&mut fast.theta, &gs.shared, -config.adaptation_lr);
    add_scaled(&mut fast.entity, &gs.entity, -config.adaptation_lr);
    let (outer_loss, gt) = loss_and_grad(&t_batch, &fast, &config.loss)?;

    let mut theta_grad = gt.shared.clone();
    let mut entity_grad = gt.entity.clone();
    if config.second_order && config.adaptation_lr != 0.0 {
        let (h_theta, h_entity) = full_hvp(&base, &s_batch, &gt.shared, &gt.entity, &config.loss)?;
        add_scaled(&mut theta_grad, &h_theta, -config.adaptation_lr);
        add_scaled(&mut entity_grad, &h_entity, -config.adaptation_lr);
    }
    optimizer.update(store, &entity_grad, &theta_grad, config.outer_lr);
    check_finite(outer_loss, store, step)?;

    let inner = (norm(&gs.shared).powi(2) + norm(&gs.entity).powi(2)).sqrt();
    Ok(StepReport {
        step,
        algorithm: Algorithm::Maml,
        outer_loss,
        inner_grad_norms: BTreeMap::from([("all".to_string(), inner)]),
        template: Some(name),
        partition_residual: None,
    })
}

/// Disjoint support and target when the template has enough queries,
/// otherwise independent draws with replacement.
fn task_split<R: Rng + ?Sized>(
    group: &[SharedQuery],
    s: usize,
    t: usize,
    srng: &mut R,
    trng: &mut R,
) -> (Vec<SharedQuery>, Vec<SharedQuery>) {
    if group.len() >= s + t {
        let idx = rand::seq::index::sample(srng, group.len(), s + t).into_vec();
        let pick = |is: &[usize]| is.iter().map(|&i| group[i].clone()).collect::<Vec<_>>();
        (pick(&idx[..s]), pick(&idx[s..]))
    } else {
        let draw = |n: usize, rng: &mut R| (0..n).map(|_| group[rng.gen_range(0..group.len())].clone()).collect();
        (draw(s, srng), draw(t, trng))
    }
}

/// Hessian of the support loss over (θ, entity table) applied to `(vθ, vφ)`.
fn full_hvp(
    base: &ParameterStore,
    support: &LossBatch,
    v_theta: &[f64],
    v_entity: &[f64],
    loss: &LossConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let scale = max_abs(v_theta).max(max_abs(v_entity));
    if scale == 0.0 {
        return Ok((vec![0.0; v_theta.len()], vec![0.0; v_entity.len()]));
    }
    let eps = HVP_STEP / scale;
    let at = |sign: f64| -> Result<GradBuffers> {
        let mut s = base.clone();
        add_scaled(&mut s.theta, v_theta, sign * eps);
        add_scaled(&mut s.entity, v_entity, sign * eps);
        Ok(loss_and_grad(support, &s, loss)?.1)
    };
    let (plus, minus) = (at(1.0)?, at(-1.0)?);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) / (2.0 * eps)).collect::<Vec<_>>();
    Ok((diff(&plus.shared, &minus.shared), diff(&plus.entity, &minus.entity)))
}

/// Dispatches on the configured algorithm.
pub fn train_step(
    data: &TrainingSet,
    store: &mut ParameterStore,
    optimizer: &mut OptimizerState,
    config: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    match config.algorithm {
        Algorithm::Vanilla => vanilla_step(data, store, optimizer, config, step),
        Algorithm::Maml => maml_step(data, store, optimizer, config, step),
        Algorithm::Mamo => mamo_step(data, store, optimizer, config, step),
    }
}
