//! Triple store, adjacency indices and the synthetic graph generator.
//!
//! A [`KnowledgeGraph`] is immutable once built. The three graphs of a
//! [`GraphSplit`] share one id space and are nested: every training edge is a
//! validation edge and every validation edge is a test edge.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    triples: BTreeSet<Triple>,
    out_index: BTreeMap<(EntityId, RelationId), Vec<EntityId>>,
    in_index: BTreeMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl KnowledgeGraph {
    /// Builds an indexed graph. Duplicate triples collapse to one.
    pub fn from_triples<I>(num_entities: usize, num_relations: usize, triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = Triple>,
    {
        let mut set = BTreeSet::new();
        for t in triples {
            if t.head as usize >= num_entities || t.tail as usize >= num_entities {
                return Err(Error::Validation(format!(
                    "triple ({}, {}, {}) references an entity >= {num_entities}",
                    t.head, t.relation, t.tail
                )));
            }
            if t.relation as usize >= num_relations {
                return Err(Error::Validation(format!(
                    "triple ({}, {}, {}) references a relation >= {num_relations}",
                    t.head, t.relation, t.tail
                )));
            }
            set.insert(t);
        }

        let mut out_index: BTreeMap<_, Vec<EntityId>> = BTreeMap::new();
        let mut in_index: BTreeMap<_, Vec<EntityId>> = BTreeMap::new();
        // BTreeSet iteration is sorted by (head, relation, tail), so every
        // out list is already sorted; in lists need a sort afterwards.
        for t in &set {
            out_index.entry((t.head, t.relation)).or_default().push(t.tail);
            in_index.entry((t.tail, t.relation)).or_default().push(t.head);
        }
        for heads in in_index.values_mut() {
            heads.sort_unstable();
        }

        Ok(Self {
            num_entities,
            num_relations,
            triples: set,
            out_index,
            in_index,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> + '_ {
        self.triples.iter()
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.triples.contains(&Triple::new(head, relation, tail))
    }

    pub fn check_entity(&self, entity: EntityId) -> Result<()> {
        if (entity as usize) < self.num_entities {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "entity {entity} out of range (num_entities = {})",
                self.num_entities
            )))
        }
    }

    pub fn check_relation(&self, relation: RelationId) -> Result<()> {
        if (relation as usize) < self.num_relations {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "relation {relation} out of range (num_relations = {})",
                self.num_relations
            )))
        }
    }

    /// Sorted tails `t` with `(head, relation, t)` in the graph.
    pub fn neighbors(&self, head: EntityId, relation: RelationId) -> Result<&[EntityId]> {
        self.check_entity(head)?;
        self.check_relation(relation)?;
        Ok(self.tails(head, relation))
    }

    /// Unchecked variant of [`neighbors`](Self::neighbors) for hot loops.
    pub fn tails(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.out_index.get(&(head, relation)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Sorted heads `h` with `(h, relation, tail)` in the graph.
    pub fn heads(&self, tail: EntityId, relation: RelationId) -> &[EntityId] {
        self.in_index.get(&(tail, relation)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All incoming edges of `tail` as `(relation, head)` pairs, ordered by relation then head.
    pub fn in_edges(&self, tail: EntityId) -> Vec<(RelationId, EntityId)> {
        self.in_index
            .range((tail, 0)..=(tail, RelationId::MAX))
            .flat_map(|(&(_, r), heads)| heads.iter().map(move |&h| (r, h)))
            .collect()
    }

    /// Distinct `(head, relation)` pairs with at least one tail, in sorted order.
    pub fn head_relation_pairs(&self) -> impl Iterator<Item = (EntityId, RelationId, &[EntityId])> + '_ {
        self.out_index.iter().map(|(&(h, r), tails)| (h, r, tails.as_slice()))
    }

    pub fn out_index(&self) -> &BTreeMap<(EntityId, RelationId), Vec<EntityId>> {
        &self.out_index
    }

    pub fn in_index(&self) -> &BTreeMap<(EntityId, RelationId), Vec<EntityId>> {
        &self.in_index
    }

    pub fn is_subgraph_of(&self, other: &KnowledgeGraph) -> bool {
        self.triples.is_subset(&other.triples)
    }

    pub fn write_triples(&self, path: &Path) -> Result<()> {
        let mut text = String::with_capacity(self.triples.len() * 12);
        for t in &self.triples {
            text.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Parses a whitespace-separated triple file. Blank lines and lines starting
/// with `#` are skipped. When `counts` is absent they are inferred as max id + 1.
pub fn parse_triples(text: &str, counts: Option<(usize, usize)>) -> Result<KnowledgeGraph> {
    let mut triples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut ids = [0u32; 3];
        for (slot, field) in ids.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                message: format!("`{field}` is not a non-negative integer id"),
            })?;
        }
        triples.push(Triple::new(ids[0], ids[1], ids[2]));
    }

    let (num_entities, num_relations) = match counts {
        Some(c) => c,
        None => {
            let ne = triples
                .iter()
                .map(|t| t.head.max(t.tail) as usize + 1)
                .max()
                .unwrap_or(0);
            let nr = triples.iter().map(|t| t.relation as usize + 1).max().unwrap_or(0);
            (ne, nr)
        }
    };
    KnowledgeGraph::from_triples(num_entities, num_relations, triples)
}

pub fn load_triples(path: &Path, counts: Option<(usize, usize)>) -> Result<KnowledgeGraph> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_triples(&text, counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub num_entities: usize,
    pub num_relations: usize,
}

/// Train/valid/test graphs over a shared id space with nested edge sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSplit {
    pub train: KnowledgeGraph,
    pub valid: KnowledgeGraph,
    pub test: KnowledgeGraph,
}

impl GraphSplit {
    pub fn new(train: KnowledgeGraph, valid: KnowledgeGraph, test: KnowledgeGraph) -> Result<Self> {
        let split = Self { train, valid, test };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.meta();
        for (name, g) in [("valid", &self.valid), ("test", &self.test)] {
            if g.num_entities() != m.num_entities || g.num_relations() != m.num_relations {
                return Err(Error::Validation(format!(
                    "{name} graph id space differs from train graph"
                )));
            }
        }
        if !self.train.is_subgraph_of(&self.valid) {
            return Err(Error::Validation("train edges are not a subset of valid edges".into()));
        }
        if !self.valid.is_subgraph_of(&self.test) {
            return Err(Error::Validation("valid edges are not a subset of test edges".into()));
        }
        Ok(())
    }

    pub fn meta(&self) -> GraphMeta {
        GraphMeta {
            num_entities: self.train.num_entities(),
            num_relations: self.train.num_relations(),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.train.num_entities()
    }

    pub fn num_relations(&self) -> usize {
        self.train.num_relations()
    }

    /// Writes `train.txt`, `valid.txt`, `test.txt` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write_triples(&dir.join("train.txt"))?;
        self.valid.write_triples(&dir.join("valid.txt"))?;
        self.test.write_triples(&dir.join("test.txt"))?;
        let meta = serde_json::to_string_pretty(&self.meta()).map_err(|e| Error::json("meta.json", e))?;
        let path = dir.join("meta.json");
        fs::write(&path, meta + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: GraphMeta =
            serde_json::from_str(&text).map_err(|e| Error::json(meta_path.display().to_string(), e))?;
        let counts = Some((meta.num_entities, meta.num_relations));
        Self::new(
            load_triples(&dir.join("train.txt"), counts)?,
            load_triples(&dir.join("valid.txt"), counts)?,
            load_triples(&dir.join("test.txt"), counts)?,
        )
    }
}

/// Parameters of the seeded synthetic graph generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub num_entities: usize,
    pub num_relations: usize,
    pub edges_per_relation: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            num_entities: 500,
            num_relations: 8,
            edges_per_relation: 1500,
            holdout_fraction: 0.15,
            seed: 7,
        }
    }
}

/// Zipf exponent of the head/tail popularity distribution.
const ZIPF_EXPONENT: f64 = 1.0;

/// Generates a nested train/valid/test split.
///
/// Entities are assigned to latent clusters and each relation maps every
/// source cluster to one target cluster, so held-out edges are predictable
/// from the observed ones. Heads are drawn from a Zipf popularity law over
/// all entities, tails from the same law restricted to the target cluster.
/// Per relation, `round(holdout_fraction * edges)` edges are withheld from
/// train; the first half of those withheld edges is restored in valid.
pub fn generate_synthetic_kg(params: &SyntheticParams) -> Result<GraphSplit> {
    let SyntheticParams {
        num_entities: n,
        num_relations,
        edges_per_relation,
        holdout_fraction,
        seed,
    } = *params;
    if n < 2 {
        return Err(Error::Config("synthetic graph needs at least 2 entities".into()));
    }
    if edges_per_relation < 1 {
        return Err(Error::Config("edges_per_relation must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout_fraction {holdout_fraction} outside [0, 1]"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut ranked: Vec<EntityId> = (0..n as EntityId).collect();
    ranked.shuffle(&mut rng);
    let mut popularity = vec![0.0; n];
    for (rank, &e) in ranked.iter().enumerate() {
        popularity[e as usize] = 1.0 / ((rank + 1) as f64).powf(ZIPF_EXPONENT);
    }
    let heads_dist = WeightedIndex::new(&popularity).expect("positive weights");

    let num_clusters = ((n as f64).sqrt() / 2.0).round().max(2.0) as usize;
    let mut order: Vec<EntityId> = (0..n as EntityId).collect();
    order.shuffle(&mut rng);
    let mut cluster_of = vec![0usize; n];
    let mut members: Vec<Vec<EntityId>> = vec![Vec::new(); num_clusters];
    for (i, &e) in order.iter().enumerate() {
        cluster_of[e as usize] = i % num_clusters;
    }
    for e in 0..n as EntityId {
        members[cluster_of[e as usize]].push(e);
    }
    let tail_dists: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&e| popularity[e as usize])).expect("nonempty cluster"))
        .collect();

    let max_attempts = edges_per_relation.saturating_mul(50);
    let mut test_edges: Vec<Triple> = Vec::new();
    let mut held_out: Vec<Triple> = Vec::new();
    let mut restored: Vec<Triple> = Vec::new();
    for r in 0..num_relations as RelationId {
        let targets: Vec<usize> = (0..num_clusters).map(|_| rng.gen_range(0..num_clusters)).collect();
        let mut edges = BTreeSet::new();
        let mut attempts = 0;
        while edges.len() < edges_per_relation && attempts < max_attempts {
            attempts += 1;
            let h = heads_dist.sample(&mut rng) as EntityId;
            let c = targets[cluster_of[h as usize]];
            let t = members[c][tail_dists[c].sample(&mut rng)];
            if t != h {
                edges.insert(Triple::new(h, r, t));
            }
        }
        let edges: Vec<Triple> = edges.into_iter().collect();
        let k = (holdout_fraction * edges.len() as f64).round() as usize;
        let withheld: Vec<Triple> = rand::seq::index::sample(&mut rng, edges.len(), k)
            .iter()
            .map(|i| edges[i])
            .collect();
        let half = k / 2;
        restored.extend_from_slice(&withheld[..half]);
        held_out.extend_from_slice(&withheld);
        test_edges.extend(edges);
    }

    let held: BTreeSet<Triple> = held_out.iter().copied().collect();
    let train_edges: Vec<Triple> = test_edges.iter().copied().filter(|t| !held.contains(t)).collect();
    let valid_edges: Vec<Triple> = train_edges.iter().chain(restored.iter()).copied().collect();

    GraphSplit::new(
        KnowledgeGraph::from_triples(n, num_relations, train_edges)?,
        KnowledgeGraph::from_triples(n, num_relations, valid_edges)?,
        KnowledgeGraph::from_triples(n, num_relations, test_edges)?,
    )
}
