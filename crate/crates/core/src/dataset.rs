//! Few-shot query datasets for the multi-hop, EPFO and EFO-1 settings.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{GraphSplit, KnowledgeGraph};
use crate::oracle::{ground, GroundedQuery, QueryRecord, MAX_GROUNDING_ATTEMPTS};
use crate::query::{builtin_template, QueryTemplate, QueryTree, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    MultiHop,
    Epfo,
    Efo1,
}

impl Setting {
    /// Training query types, in table order.
    pub fn train_types(self) -> &'static [&'static str] {
        match self {
            Setting::MultiHop => &["1p", "2p", "3p"],
            Setting::Epfo => &["1p", "2p", "3p", "2i", "3i"],
            Setting::Efo1 => &["1p", "2p", "3p", "2i", "3i", "2in", "3in", "inp", "pin", "pni"],
        }
    }

    /// Evaluation query types, in table column order.
    pub fn eval_types(self) -> &'static [&'static str] {
        match self {
            Setting::MultiHop => &["1p", "2p", "3p", "4p", "5p", "6p"],
            Setting::Epfo => &["1p", "2p", "3p", "2i", "3i", "ip", "pi", "2u", "up"],
            Setting::Efo1 => &[
                "1p", "2p", "3p", "2i", "3i", "ip", "pi", "2in", "3in", "inp", "pin", "pni", "2u", "up",
            ],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::MultiHop => "multihop",
            Setting::Epfo => "epfo",
            Setting::Efo1 => "efo1",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "multihop" => Ok(Setting::MultiHop),
            "epfo" => Ok(Setting::Epfo),
            "efo1" => Ok(Setting::Efo1),
            _ => Err(Error::Config(format!("unknown setting `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub setting: Setting,
    /// Groundings sampled per non-1p training type before retention.
    pub pool_size_per_type: usize,
    pub retention_ratio: f64,
    pub eval_queries_per_type: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            setting: Setting::MultiHop,
            pool_size_per_type: 20_000,
            retention_ratio: 0.001,
            eval_queries_per_type: 200,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// `⌈ratio · pool⌉`, the number of retained queries per non-1p type.
    pub fn retained_per_type(&self) -> usize {
        let raw = self.retention_ratio * self.pool_size_per_type as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.pool_size_per_type)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    pub setting: Setting,
    pub retention_ratio: f64,
    pub train: BTreeMap<String, Vec<GroundedQuery>>,
    pub eval: BTreeMap<String, Vec<GroundedQuery>>,
}

impl FewShotDataset {
    /// Training types that have at least one query, in setting order.
    pub fn train_groups(&self) -> Vec<(&str, &[GroundedQuery])> {
        self.setting
            .train_types()
            .iter()
            .filter_map(|name| self.train.get(*name).map(|q| (*name, q.as_slice())))
            .filter(|(_, q)| !q.is_empty())
            .collect()
    }

    pub fn eval_groups(&self) -> Vec<(&str, &[GroundedQuery])> {
        self.setting
            .eval_types()
            .iter()
            .filter_map(|name| self.eval.get(*name).map(|q| (*name, q.as_slice())))
            .collect()
    }

    pub fn num_train(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (role, groups) in [("train", &self.train), ("eval", &self.eval)] {
            let sub = dir.join(role);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (name, queries) in groups {
                let mut text = String::new();
                for q in queries {
                    let line = serde_json::to_string(&q.to_record()).map_err(|e| Error::json(name.clone(), e))?;
                    text.push_str(&line);
                    text.push('\n');
                }
                let path = sub.join(format!("{name}.jsonl"));
                fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
        }
        let meta = DatasetMeta {
            setting: self.setting,
            retention_ratio: self.retention_ratio,
            train_types: self.train.keys().cloned().collect(),
            eval_types: self.eval.keys().cloned().collect(),
        };
        let path = dir.join("dataset.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("dataset.json", e))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let read_role = |role: &str, names: &[String]| -> Result<BTreeMap<String, Vec<GroundedQuery>>> {
            let mut out = BTreeMap::new();
            for name in names {
                let path = dir.join(role).join(format!("{name}.jsonl"));
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let mut queries = Vec::new();
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let rec: QueryRecord = serde_json::from_str(line)
                        .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))?;
                    queries.push(GroundedQuery::from_record(name, &rec)?);
                }
                out.insert(name.clone(), queries);
            }
            Ok(out)
        };
        Ok(Self {
            setting: meta.setting,
            retention_ratio: meta.retention_ratio,
            train: read_role("train", &meta.train_types)?,
            eval: read_role("eval", &meta.eval_types)?,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    setting: Setting,
    retention_ratio: f64,
    train_types: Vec<String>,
    eval_types: Vec<String>,
}

/// Independent rng stream for one (seed, template, role) triple.
pub fn template_rng(seed: u64, template: &str, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(template.as_bytes()));
    rng.set_stream(role);
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Builds the few-shot dataset for one setting.
///
/// 1p training queries are every `(head, relation)` pair of the training
/// graph with all its tails as answers. Every other training type samples a
/// pool of groundings on the training graph and keeps a uniform subset of
/// `⌈ratio · pool⌉`. Evaluation queries are grounded on the full graph and
/// must have at least one hard answer.
pub fn build_fewshot_dataset(split: &GraphSplit, config: &DatasetConfig) -> Result<FewShotDataset> {
    if !(config.retention_ratio > 0.0 && config.retention_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "retention ratio {} outside (0, 1]",
            config.retention_ratio
        )));
    }
    let lookup = |name: &str| builtin_template(name).ok_or_else(|| Error::Config(format!("unknown template `{name}`")));
    let train_templates = config
        .setting
        .train_types()
        .iter()
        .map(|n| lookup(n))
        .collect::<Result<Vec<_>>>()?;
    let eval_templates = config
        .setting
        .eval_types()
        .iter()
        .map(|n| lookup(n))
        .collect::<Result<Vec<_>>>()?;

    let train = train_templates
        .par_iter()
        .map(|t| Ok((t.name.clone(), training_queries(t, &split.train, config)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let eval = eval_templates
        .par_iter()
        .map(|t| Ok((t.name.clone(), eval_queries(t, split, config)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    Ok(FewShotDataset {
        setting: config.setting,
        retention_ratio: config.retention_ratio,
        train,
        eval,
    })
}

fn training_queries(
    template: &QueryTemplate,
    train: &KnowledgeGraph,
    config: &DatasetConfig,
) -> Result<Vec<GroundedQuery>> {
    if template.name == "1p" {
        return Ok(train
            .head_relation_pairs()
            .map(|(h, r, tails)| GroundedQuery {
                template_name: template.name.clone(),
                tree: QueryTree::Projection {
                    relation: Term::Id(r),
                    child: Box::new(QueryTree::Anchor(Term::Id(h))),
                },
                easy_answers: tails.iter().copied().collect(),
                hard_answers: Default::default(),
            })
            .collect());
    }
    let mut rng = template_rng(config.seed, &template.name, TRAIN_STREAM);
    let mut pool = Vec::with_capacity(config.pool_size_per_type);
    for _ in 0..config.pool_size_per_type {
        let q = ground(template, train, train, &mut rng, false)?.expect("hard answers not required");
        pool.push(q);
    }
    let keep = config.retained_per_type();
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), keep).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

fn eval_queries(template: &QueryTemplate, split: &GraphSplit, config: &DatasetConfig) -> Result<Vec<GroundedQuery>> {
    let mut rng = template_rng(config.seed, &template.name, EVAL_STREAM);
    let mut out = Vec::with_capacity(config.eval_queries_per_type);
    let mut misses = 0;
    while out.len() < config.eval_queries_per_type {
        match ground(template, &split.train, &split.test, &mut rng, true)? {
            Some(q) => {
                misses = 0;
                out.push(q);
            }
            None => {
                misses += 1;
                if misses >= MAX_GROUNDING_ATTEMPTS {
                    return Err(Error::SamplingExhausted {
                        template: template.name.clone(),
                        attempts: misses,
                    });
                }
            }
        }
    }
    Ok(out)
}
