//! Filtered ranking, MRR and result tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{score_all, squashed_entities, PreparedQuery};
use crate::dataset::Setting;
use crate::error::{Error, Result};
use crate::kg::EntityId;
use crate::oracle::GroundedQuery;
use crate::train::EvalModel;

/// Filtered ranks of every hard answer of one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub template: String,
    pub ranks: Vec<u64>,
}

impl RankRecord {
    pub fn reciprocals(&self) -> impl Iterator<Item = f64> + '_ {
        self.ranks.iter().map(|&r| 1.0 / r as f64)
    }
}

/// `rank(a) = 1 + #{e ∉ easy ∪ hard : score(e) ≥ score(a)}` for each hard
/// answer `a`, in ascending id order. Ties count against the answer.
pub fn filtered_ranks_from_scores(
    scores: &[f64],
    easy: &BTreeSet<EntityId>,
    hard: &BTreeSet<EntityId>,
) -> Result<Vec<u64>> {
    if hard.is_empty() {
        return Err(Error::Contract("ranking a query without hard answers".into()));
    }
    if let Some(&e) = easy.iter().chain(hard).find(|&&e| e as usize >= scores.len()) {
        return Err(Error::Validation(format!("answer {e} has no score")));
    }
    let mut others: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|(e, _)| !easy.contains(&(*e as EntityId)) && !hard.contains(&(*e as EntityId)))
        .map(|(_, &s)| s)
        .collect();
    if others.iter().any(|s| s.is_nan()) || hard.iter().any(|&a| scores[a as usize].is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    others.sort_by(|a, b| a.total_cmp(b));
    Ok(hard
        .iter()
        .map(|&a| {
            let s = scores[a as usize];
            let below = others.partition_point(|&x| x < s);
            1 + (others.len() - below) as u64
        })
        .collect())
}

/// Ranks a query's hard answers under a model.
pub fn filtered_ranks(query: &GroundedQuery, model: &EvalModel, depth_cap: u32) -> Result<RankRecord> {
    let store = model.store_for(&query.template_name);
    let prepared = PreparedQuery::new(query, model.scheme, depth_cap)?;
    let scores = score_all(&prepared, store, &squashed_entities(store))?;
    Ok(RankRecord {
        template: query.template_name.clone(),
        ranks: filtered_ranks_from_scores(&scores, &query.easy_answers, &query.hard_answers)?,
    })
}

/// Mean reciprocal rank over all hard answers of all records, in percent.
pub fn mrr_percent(records: &[RankRecord]) -> f64 {
    let (sum, n) = records
        .iter()
        .flat_map(RankRecord::reciprocals)
        .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

/// Per-template MRR of one model over evaluation groups.
pub fn evaluate_model(
    model: &EvalModel,
    groups: &[(&str, &[GroundedQuery])],
    depth_cap: u32,
) -> Result<BTreeMap<String, f64>> {
    groups
        .iter()
        .map(|(name, queries)| {
            let store = model.store_for(name);
            let squashed = squashed_entities(store);
            let records = queries
                .par_iter()
                .map(|q| {
                    let prepared = PreparedQuery::new(q, model.scheme, depth_cap)?;
                    let scores = score_all(&prepared, store, &squashed)?;
                    Ok(RankRecord {
                        template: q.template_name.clone(),
                        ranks: filtered_ranks_from_scores(&scores, &q.easy_answers, &q.hard_answers)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((name.to_string(), mrr_percent(&records)))
        })
        .collect()
}

/// MRR of uniformly random scores under the same filtering, per template.
pub fn random_baseline_mrr<R: Rng + ?Sized>(
    groups: &[(&str, &[GroundedQuery])],
    num_entities: usize,
    rng: &mut R,
) -> Result<BTreeMap<String, f64>> {
    groups
        .iter()
        .map(|(name, queries)| {
            let records = queries
                .iter()
                .map(|q| {
                    let scores: Vec<f64> = (0..num_entities).map(|_| rng.gen()).collect();
                    Ok(RankRecord {
                        template: name.to_string(),
                        ranks: filtered_ranks_from_scores(&scores, &q.easy_answers, &q.hard_answers)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((name.to_string(), mrr_percent(&records)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub values: Vec<f64>,
    pub avg: f64,
}

/// One row per model, one column per template plus AVG; values are MRR percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub setting: Setting,
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn new(setting: Setting) -> Self {
        Self {
            setting,
            columns: setting.eval_types().iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, label: &str, mrr: &BTreeMap<String, f64>) -> Result<()> {
        let values = self
            .columns
            .iter()
            .map(|c| {
                mrr.get(c)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("row {label} has no value for {c}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        self.rows.push(ResultRow {
            label: label.to_string(),
            values,
            avg,
        });
        Ok(())
    }

    pub fn row(&self, label: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",AVG\n");
        for r in &self.rows {
            out.push_str(&r.label);
            for v in r.values.iter().chain([&r.avg]) {
                let _ = write!(out, ",{v:.2}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let label_w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max("Model".len());
        let col_w = 6;
        let mut out = format!("{:<label_w$}", "Model");
        for c in self.columns.iter().map(String::as_str).chain(["AVG"]) {
            let _ = write!(out, " {c:>col_w$}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<label_w$}", r.label);
            for v in r.values.iter().chain([&r.avg]) {
                let _ = write!(out, " {v:>col_w$.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates labelled models on a dataset's evaluation queries.
pub fn mrr_table(
    setting: Setting,
    groups: &[(&str, &[GroundedQuery])],
    models: &[(String, EvalModel)],
    depth_cap: u32,
) -> Result<ResultTable> {
    let mut table = ResultTable::new(setting);
    for (label, model) in models {
        table.push_row(label, &evaluate_model(model, groups, depth_cap)?)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(xs: &[u32]) -> BTreeSet<u32> {
        xs.iter().copied().collect()
    }

    #[test]
    fn top_scored_hard_answer_ranks_first() {
        let r = filtered_ranks_from_scores(&[0.1, 0.9, 0.3], &set(&[]), &set(&[1])).unwrap();
        assert_eq!(r, vec![1]);
    }

    #[test]
    fn easy_answers_above_are_filtered() {
        // entity 4 is hard; 0 and 1 easy and above it; 2 a non-answer above it
        let scores = [0.9, 0.8, 0.7, 0.1, 0.5];
        let r = filtered_ranks_from_scores(&scores, &set(&[0, 1]), &set(&[4])).unwrap();
        assert_eq!(r, vec![2]);
    }

    #[test]
    fn ties_count_against_the_answer() {
        let r = filtered_ranks_from_scores(&[0.5, 0.5, 0.5], &set(&[]), &set(&[1])).unwrap();
        assert_eq!(r, vec![3]);
    }

    #[test]
    fn empty_hard_set_is_a_contract_error() {
        assert!(filtered_ranks_from_scores(&[0.5], &set(&[0]), &set(&[])).is_err());
    }

    #[test]
    fn single_answer_at_rank_two_gives_fifty() {
        let rec = RankRecord {
            template: "1p".into(),
            ranks: vec![2],
        };
        assert_eq!(mrr_percent(&[rec]), 50.0);
    }

    #[test]
    fn average_column_and_layouts() {
        let mut t = ResultTable::new(Setting::MultiHop);
        let row: BTreeMap<String, f64> = (1..=6).map(|i| (format!("{i}p"), i as f64)).collect();
        t.push_row("Vanilla", &row).unwrap();
        assert_eq!(t.rows[0].avg, 3.5);
        assert_eq!(
            t.to_csv(),
            "model,1p,2p,3p,4p,5p,6p,AVG\nVanilla,1.00,2.00,3.00,4.00,5.00,6.00,3.50\n"
        );
        let text = t.to_text();
        assert!(text.starts_with("Model       1p     2p"));
        assert!(text.lines().nth(1).unwrap().ends_with("  3.50"));
        assert!(t.push_row("bad", &BTreeMap::new()).is_err());
    }

    #[test]
    fn random_baseline_is_near_the_harmonic_estimate() {
        let q = GroundedQuery {
            template_name: "1p".into(),
            tree: crate::query::parse_tree("(p,0,0)").unwrap(),
            easy_answers: set(&[]),
            hard_answers: set(&[0]),
        };
        let qs = vec![q; 4000];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = random_baseline_mrr(&[("1p", &qs)], 100, &mut rng).unwrap()["1p"];
        let expected = 100.0 * (1..=100).map(|k| 1.0 / k as f64).sum::<f64>() / 100.0;
        assert!((m - expected).abs() < 0.6, "{m} vs {expected}");
    }
}
