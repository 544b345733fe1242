use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{PreparedQuery, SharedQuery};
use crate::dataset::FewShotDataset;
use crate::error::{Error, Result};
use crate::oracle::GroundedQuery;
use crate::query::{OperatorTypeKey, Scheme};

/// Training queries grouped by template and prepared for the model.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    groups: Vec<(String, Vec<SharedQuery>)>,
}

impl TrainingSet {
    pub fn new(dataset: &FewShotDataset, scheme: Option<Scheme>, depth_cap: u32) -> Result<Self> {
        Self::from_groups(&dataset.train, scheme, depth_cap)
    }

    pub fn from_groups(
        groups: &BTreeMap<String, Vec<GroundedQuery>>,
        scheme: Option<Scheme>,
        depth_cap: u32,
    ) -> Result<Self> {
        let groups = groups
            .iter()
            .filter(|(_, qs)| !qs.is_empty())
            .map(|(name, qs)| {
                let prepared = qs
                    .iter()
                    .map(|q| PreparedQuery::new(q, scheme, depth_cap).map(Arc::new))
                    .collect::<Result<Vec<_>>>()?;
                Ok((name.clone(), prepared))
            })
            .collect::<Result<Vec<_>>>()?;
        if groups.is_empty() {
            return Err(Error::Data("no training queries".into()));
        }
        Ok(Self { groups })
    }

    pub fn template_names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|(n, _)| n.as_str())
    }

    pub fn group(&self, name: &str) -> Option<&[SharedQuery]> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, qs)| qs.as_slice())
    }

    pub fn num_templates(&self) -> usize {
        self.groups.len()
    }

    /// `n` queries: a template uniformly, then a query of it uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<SharedQuery> {
        (0..n)
            .map(|_| {
                let qs = &self.groups[rng.gen_range(0..self.groups.len())].1;
                qs[rng.gen_range(0..qs.len())].clone()
            })
            .collect()
    }

    /// All queries containing at least one site of `key`.
    pub fn containing(&self, key: &OperatorTypeKey) -> Vec<SharedQuery> {
        self.groups
            .iter()
            .flat_map(|(_, qs)| qs.iter().filter(|q| q.contains(key)).cloned())
            .collect()
    }
}

/// Support and target streams of one training step. Both depend only on
/// `(seed, step)` so a resumed run replays the same draws.
pub fn step_rngs(seed: u64, step: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    (stream(2 * step + 2), stream(2 * step + 3))
}
