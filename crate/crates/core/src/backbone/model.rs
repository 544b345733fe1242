//! Forward execution of a computation tree with cached activations, and the
//! matching reverse pass.
//!
//! Operators on `[0, 1]^d`:
//! - anchor: `σ(entity row)`
//! - projection: `σ(W2 · tanh(W1 x + b1) + b2)` with per-relation weights
//! - intersection: componentwise minimum
//! - negation: `1 − x`

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::backbone::store::{Dims, ParameterStore, Slot};
use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};
use crate::oracle::GroundedQuery;
use crate::query::{branch_sites, categorize, dnf_decompose, OperatorTypeKey, QueryTree, Scheme, Term};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -(((-x).max(0.0)) + (-x.abs()).exp().ln_1p())
}

/// An embedding with every component in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedVector(Vec<f64>);

impl BoundedVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A union-free branch with the operator-type key of each projection site (pre-order).
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBranch {
    pub tree: QueryTree,
    pub keys: Vec<OperatorTypeKey>,
}

/// A grounded query ready for the model: DNF branches, site keys under one
/// scheme (if any), and the positive answers used by the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub template: String,
    pub branches: Vec<PreparedBranch>,
    pub positives: Vec<EntityId>,
}

impl PreparedQuery {
    pub fn new(query: &GroundedQuery, scheme: Option<Scheme>, depth_cap: u32) -> Result<Self> {
        Self::from_tree(
            &query.template_name,
            &query.tree,
            query.easy_answers.iter().copied().collect(),
            scheme,
            depth_cap,
        )
    }

    pub fn from_tree(
        template: &str,
        tree: &QueryTree,
        positives: Vec<EntityId>,
        scheme: Option<Scheme>,
        depth_cap: u32,
    ) -> Result<Self> {
        let branches = dnf_decompose(tree)?
            .into_iter()
            .map(|b| {
                let keys = match scheme {
                    Some(s) => branch_sites(&b)?
                        .iter()
                        .map(|site| categorize(site, s, depth_cap))
                        .collect(),
                    None => Vec::new(),
                };
                Ok(PreparedBranch { tree: b, keys })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            template: template.to_string(),
            branches,
            positives,
        })
    }

    /// Operator types present anywhere in the query.
    pub fn categories(&self) -> BTreeSet<OperatorTypeKey> {
        self.branches.iter().flat_map(|b| b.keys.iter().copied()).collect()
    }

    pub fn contains(&self, key: &OperatorTypeKey) -> bool {
        self.branches.iter().any(|b| b.keys.contains(key))
    }
}

pub type SharedQuery = Arc<PreparedQuery>;

/// Cached forward activations of one node.
#[derive(Debug, Clone)]
pub enum Trace {
    Anchor {
        entity: EntityId,
        out: Vec<f64>,
    },
    Projection {
        relation: RelationId,
        slot: Slot,
        input: Box<Trace>,
        hidden: Vec<f64>,
        out: Vec<f64>,
    },
    Intersection {
        children: Vec<Trace>,
        argmin: Vec<usize>,
        out: Vec<f64>,
    },
    Negation {
        child: Box<Trace>,
        out: Vec<f64>,
    },
}

impl Trace {
    pub fn out(&self) -> &[f64] {
        match self {
            Trace::Anchor { out, .. }
            | Trace::Projection { out, .. }
            | Trace::Intersection { out, .. }
            | Trace::Negation { out, .. } => out,
        }
    }
}

/// Runs a union-free branch. Site `i` (pre-order) uses the overlay for
/// `keys[i]` when the store has one and θ otherwise.
pub fn forward_branch(branch: &PreparedBranch, store: &ParameterStore) -> Result<Trace> {
    let mut counter = 0;
    forward_node(&branch.tree, &branch.keys, &mut counter, store)
}

fn forward_node(
    node: &QueryTree,
    keys: &[OperatorTypeKey],
    counter: &mut usize,
    store: &ParameterStore,
) -> Result<Trace> {
    let dims = &store.dims;
    match node {
        QueryTree::Anchor(Term::Id(e)) => {
            if *e as usize >= dims.num_entities {
                return Err(Error::Validation(format!("entity {e} out of range")));
            }
            Ok(Trace::Anchor {
                entity: *e,
                out: store.entity_row(*e).iter().map(|&x| sigmoid(x)).collect(),
            })
        }
        QueryTree::Projection {
            relation: Term::Id(r),
            child,
        } => {
            if *r as usize >= dims.num_relations {
                return Err(Error::Validation(format!("relation {r} out of range")));
            }
            let slot = match keys.get(*counter) {
                Some(k) if store.adapted.contains_key(k) => Slot::Overlay(*k),
                _ => Slot::Shared,
            };
            *counter += 1;
            let input = forward_node(child, keys, counter, store)?;
            let params = ParameterStore::relation_block(store.slot_params(slot), dims, *r);
            let (hidden, out) = project(params, dims, input.out());
            Ok(Trace::Projection {
                relation: *r,
                slot,
                input: Box::new(input),
                hidden,
                out,
            })
        }
        QueryTree::Intersection(cs) => {
            let children = cs
                .iter()
                .map(|c| forward_node(c, keys, counter, store))
                .collect::<Result<Vec<_>>>()?;
            let mut out = children[0].out().to_vec();
            let mut argmin = vec![0; dims.dim];
            for (ci, c) in children.iter().enumerate().skip(1) {
                for (j, &v) in c.out().iter().enumerate() {
                    if v < out[j] {
                        out[j] = v;
                        argmin[j] = ci;
                    }
                }
            }
            Ok(Trace::Intersection { children, argmin, out })
        }
        QueryTree::Negation(c) => {
            let child = forward_node(c, keys, counter, store)?;
            let out = child.out().iter().map(|x| 1.0 - x).collect();
            Ok(Trace::Negation {
                child: Box::new(child),
                out,
            })
        }
        QueryTree::Union(_) => Err(Error::Contract(
            "forward received a union node; split the query into DNF branches first".into(),
        )),
        _ => Err(Error::Contract(format!(
            "forward received an ungrounded query `{node}`"
        ))),
    }
}

fn project(params: &[f64], dims: &Dims, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, h) = (dims.dim, dims.hidden);
    let (w1, rest) = params.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(d * h);
    let hidden: Vec<f64> = (0..h)
        .map(|i| {
            let row = &w1[i * d..(i + 1) * d];
            (b1[i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
        })
        .collect();
    let out = (0..d)
        .map(|j| {
            let row = &w2[j * h..(j + 1) * h];
            sigmoid(b2[j] + row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>())
        })
        .collect();
    (hidden, out)
}

/// Dense gradient accumulators. Overlay buffers are created on first touch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffers {
    pub entity: Vec<f64>,
    pub shared: Vec<f64>,
    pub overlays: BTreeMap<OperatorTypeKey, Vec<f64>>,
}

impl GradBuffers {
    pub fn zeros(dims: &Dims) -> Self {
        Self {
            entity: vec![0.0; dims.entity_len()],
            shared: vec![0.0; dims.theta_len()],
            overlays: BTreeMap::new(),
        }
    }

    /// Gradient w.r.t. θ when every overlay is a copy of θ: shared plus all overlay parts.
    pub fn theta_total(&self) -> Vec<f64> {
        let mut total = self.shared.clone();
        for g in self.overlays.values() {
            for (t, x) in total.iter_mut().zip(g) {
                *t += x;
            }
        }
        total
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut Vec<f64> {
        match slot {
            Slot::Shared => &mut self.shared,
            Slot::Overlay(k) => {
                let len = self.shared.len();
                self.overlays.entry(k).or_insert_with(|| vec![0.0; len])
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self
            .entity
            .iter_mut()
            .chain(self.shared.iter_mut())
            .chain(self.overlays.values_mut().flatten())
        {
            *x *= factor;
        }
    }
}

/// Propagates `dout` (gradient w.r.t. the node output) back through a trace.
pub fn backward(trace: &Trace, dout: &[f64], store: &ParameterStore, grads: &mut GradBuffers) {
    let dims = &store.dims;
    match trace {
        Trace::Anchor { entity, out } => {
            let d = dims.dim;
            let row = &mut grads.entity[*entity as usize * d..(*entity as usize + 1) * d];
            for ((g, &s), &up) in row.iter_mut().zip(out).zip(dout) {
                *g += up * s * (1.0 - s);
            }
        }
        Trace::Projection {
            relation,
            slot,
            input,
            hidden,
            out,
        } => {
            let (d, h) = (dims.dim, dims.hidden);
            let block = dims.block();
            let offset = *relation as usize * block;
            let params = &store.slot_params(*slot)[offset..offset + block];
            let (w1, rest) = params.split_at(h * d);
            let (_b1, rest) = rest.split_at(h);
            let (w2, _b2) = rest.split_at(d * h);

            let dz2: Vec<f64> = out.iter().zip(dout).map(|(&y, &g)| g * y * (1.0 - y)).collect();
            let mut dz1 = vec![0.0; h];
            for (j, &g) in dz2.iter().enumerate() {
                for (i, acc) in dz1.iter_mut().enumerate() {
                    *acc += w2[j * h + i] * g;
                }
            }
            for (acc, &a) in dz1.iter_mut().zip(hidden) {
                *acc *= 1.0 - a * a;
            }
            let x = input.out();
            let mut dx = vec![0.0; d];
            for (i, &g) in dz1.iter().enumerate() {
                for (j, acc) in dx.iter_mut().enumerate() {
                    *acc += w1[i * d + j] * g;
                }
            }

            let buf = &mut grads.slot_mut(*slot)[offset..offset + block];
            let (gw1, rest) = buf.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(d * h);
            for (i, &g) in dz1.iter().enumerate() {
                gb1[i] += g;
                for (gw, &xv) in gw1[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *gw += g * xv;
                }
            }
            for (j, &g) in dz2.iter().enumerate() {
                gb2[j] += g;
                for (gw, &hv) in gw2[j * h..(j + 1) * h].iter_mut().zip(hidden) {
                    *gw += g * hv;
                }
            }
            backward(input, &dx, store, grads);
        }
        Trace::Intersection { children, argmin, .. } => {
            for (ci, child) in children.iter().enumerate() {
                let routed: Vec<f64> = dout
                    .iter()
                    .zip(argmin)
                    .map(|(&g, &a)| if a == ci { g } else { 0.0 })
                    .collect();
                if routed.iter().any(|&g| g != 0.0) {
                    backward(child, &routed, store, grads);
                }
            }
        }
        Trace::Negation { child, .. } => {
            let neg: Vec<f64> = dout.iter().map(|g| -g).collect();
            backward(child, &neg, store, grads);
        }
    }
}

/// Embeds a union-free tree. With a scheme, sites whose operator type has an
/// overlay in the store use that overlay.
pub fn forward(
    tree: &QueryTree,
    store: &ParameterStore,
    scheme: Option<Scheme>,
    depth_cap: u32,
) -> Result<BoundedVector> {
    if tree.has_union() {
        return Err(Error::Contract(
            "forward received a union node; split the query into DNF branches first".into(),
        ));
    }
    let prepared = PreparedQuery::from_tree("", tree, Vec::new(), scheme, depth_cap)?;
    Ok(BoundedVector(
        forward_branch(&prepared.branches[0], store)?.out().to_vec(),
    ))
}

/// `−‖q − σ(entity row)‖₁`; higher is more plausible.
pub fn score(query: &[f64], entity: EntityId, store: &ParameterStore) -> f64 {
    -query
        .iter()
        .zip(store.entity_row(entity))
        .map(|(q, &raw)| (q - sigmoid(raw)).abs())
        .sum::<f64>()
}

/// The whole entity table squashed into `[0, 1]`, row-major.
pub fn squashed_entities(store: &ParameterStore) -> Vec<f64> {
    store.entity.iter().map(|&x| sigmoid(x)).collect()
}

/// Scores every entity against a query: the maximum over its DNF branches.
pub fn score_all(query: &PreparedQuery, store: &ParameterStore, squashed: &[f64]) -> Result<Vec<f64>> {
    let d = store.dims.dim;
    let mut best = vec![f64::NEG_INFINITY; store.dims.num_entities];
    for branch in &query.branches {
        let trace = forward_branch(branch, store)?;
        let q = trace.out();
        for (e, row) in squashed.chunks_exact(d).enumerate() {
            let s = -q.iter().zip(row).map(|(a, b)| (a - b).abs()).sum::<f64>();
            if s > best[e] {
                best[e] = s;
            }
        }
    }
    Ok(best)
}
