use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};
use crate::query::OperatorTypeKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub num_entities: usize,
    pub num_relations: usize,
    pub dim: usize,
    pub hidden: usize,
}

impl Dims {
    /// Hidden width defaults to the embedding width.
    pub fn new(num_entities: usize, num_relations: usize, dim: usize) -> Self {
        Self {
            num_entities,
            num_relations,
            dim,
            hidden: dim,
        }
    }

    /// Reals per relation transform: `W1 (h×d) | b1 (h) | W2 (d×h) | b2 (d)`.
    pub fn block(&self) -> usize {
        2 * self.dim * self.hidden + self.hidden + self.dim
    }

    pub fn theta_len(&self) -> usize {
        self.num_relations * self.block()
    }

    pub fn entity_len(&self) -> usize {
        self.num_entities * self.dim
    }
}

/// Where a projection site reads its transform from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Shared,
    Overlay(OperatorTypeKey),
}

/// Model parameters: the entity table (the non-meta parameters), the shared
/// per-relation projection transforms, and optional per-type overlays of the
/// projection transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterStore {
    pub dims: Dims,
    pub entity: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub adapted: BTreeMap<OperatorTypeKey, Vec<f64>>,
}

impl ParameterStore {
    /// Uniform `[-0.5, 0.5]` initialization from a seeded stream.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entity = (0..dims.entity_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let theta = (0..dims.theta_len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Self {
            dims,
            entity,
            theta,
            adapted: BTreeMap::new(),
        }
    }

    pub fn entity_row(&self, e: EntityId) -> &[f64] {
        let d = self.dims.dim;
        &self.entity[e as usize * d..(e as usize + 1) * d]
    }

    /// Parameter vector a slot resolves to. Overlays absent from the store fall back to θ.
    pub fn slot_params(&self, slot: Slot) -> &[f64] {
        match slot {
            Slot::Shared => &self.theta,
            Slot::Overlay(k) => self.adapted.get(&k).map(Vec::as_slice).unwrap_or(&self.theta),
        }
    }

    pub fn relation_block<'a>(params: &'a [f64], dims: &Dims, r: RelationId) -> &'a [f64] {
        let b = dims.block();
        &params[r as usize * b..(r as usize + 1) * b]
    }

    pub fn set_overlay(&mut self, key: OperatorTypeKey, params: Vec<f64>) -> Result<()> {
        if params.len() != self.theta.len() {
            return Err(Error::Contract(format!(
                "overlay {key} has {} reals, projection parameters have {}",
                params.len(),
                self.theta.len()
            )));
        }
        self.adapted.insert(key, params);
        Ok(())
    }

    pub fn clear_overlays(&mut self) {
        self.adapted.clear();
    }

    /// Same parameters with no overlays.
    pub fn shared_only(&self) -> Self {
        Self {
            dims: self.dims,
            entity: self.entity.clone(),
            theta: self.theta.clone(),
            adapted: BTreeMap::new(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entity
            .iter()
            .chain(&self.theta)
            .chain(self.adapted.values().flatten())
            .all(|x| x.is_finite())
    }

    pub fn check_shapes(&self) -> Result<()> {
        if self.entity.len() != self.dims.entity_len() || self.theta.len() != self.dims.theta_len() {
            return Err(Error::Data("parameter lengths do not match dimensions".into()));
        }
        for (k, v) in &self.adapted {
            if v.len() != self.theta.len() {
                return Err(Error::Data(format!("overlay {k} has the wrong shape")));
            }
        }
        Ok(())
    }
}
