//! Exact set semantics of query trees and grounding of templates.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::query::{parse_tree, QueryTemplate, QueryTree, Term};

/// Consecutive failed walks after which grounding gives up.
pub const MAX_GROUNDING_ATTEMPTS: usize = 1000;

/// Evaluates a grounded tree bottom-up over `graph`.
pub fn evaluate(tree: &QueryTree, graph: &KnowledgeGraph) -> Result<BTreeSet<EntityId>> {
    check_ids(tree, graph)?;
    Ok(to_set(&eval_mask(tree, graph)))
}

fn check_ids(tree: &QueryTree, graph: &KnowledgeGraph) -> Result<()> {
    match tree {
        QueryTree::Anchor(Term::Id(e)) => graph.check_entity(*e),
        QueryTree::Projection {
            relation: Term::Id(r),
            child,
        } => {
            graph.check_relation(*r)?;
            check_ids(child, graph)
        }
        QueryTree::Anchor(Term::Var(_)) | QueryTree::Projection { .. } => {
            Err(Error::Validation(format!("query `{tree}` is not fully grounded")))
        }
        _ => tree.children().iter().try_for_each(|c| check_ids(c, graph)),
    }
}

fn to_set(mask: &[bool]) -> BTreeSet<EntityId> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i as EntityId)
        .collect()
}

/// Membership mask over all entities. Assumes ids were checked.
pub(crate) fn eval_mask(tree: &QueryTree, graph: &KnowledgeGraph) -> Vec<bool> {
    let n = graph.num_entities();
    match tree {
        QueryTree::Anchor(t) => {
            let mut m = vec![false; n];
            m[t.id().expect("grounded") as usize] = true;
            m
        }
        QueryTree::Projection { relation, child } => {
            let r = relation.id().expect("grounded");
            let input = eval_mask(child, graph);
            let mut out = vec![false; n];
            for (a, _) in input.iter().enumerate().filter(|(_, &x)| x) {
                for &b in graph.tails(a as EntityId, r) {
                    out[b as usize] = true;
                }
            }
            out
        }
        QueryTree::Intersection(cs) => {
            let mut acc = vec![true; n];
            for c in cs {
                for (x, y) in acc.iter_mut().zip(eval_mask(c, graph)) {
                    *x &= y;
                }
            }
            acc
        }
        QueryTree::Union(cs) => {
            let mut acc = vec![false; n];
            for c in cs {
                for (x, y) in acc.iter_mut().zip(eval_mask(c, graph)) {
                    *x |= y;
                }
            }
            acc
        }
        QueryTree::Negation(c) => eval_mask(c, graph).into_iter().map(|x| !x).collect(),
    }
}

/// A grounded query with answers split into those reachable on the training
/// graph (easy) and those only reachable on the full graph (hard).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedQuery {
    pub template_name: String,
    pub tree: QueryTree,
    pub easy_answers: BTreeSet<EntityId>,
    pub hard_answers: BTreeSet<EntityId>,
}

impl GroundedQuery {
    /// Labels a tree: easy answers hold on both graphs, hard answers only on `test`.
    pub fn label(template_name: &str, tree: QueryTree, train: &KnowledgeGraph, test: &KnowledgeGraph) -> Result<Self> {
        let all = evaluate(&tree, test)?;
        // negation is not monotone; a train answer can be excluded on the test graph
        let easy: BTreeSet<EntityId> = evaluate(&tree, train)?.intersection(&all).copied().collect();
        let hard = all.difference(&easy).copied().collect();
        Ok(Self {
            template_name: template_name.to_string(),
            tree,
            easy_answers: easy,
            hard_answers: hard,
        })
    }

    pub fn all_answers(&self) -> BTreeSet<EntityId> {
        self.easy_answers.union(&self.hard_answers).copied().collect()
    }

    /// Re-checks disjointness and that the union equals the test-graph answers.
    pub fn check(&self, test: &KnowledgeGraph) -> Result<()> {
        if !self.easy_answers.is_disjoint(&self.hard_answers) {
            return Err(Error::Validation(format!(
                "easy and hard answers overlap for `{}`",
                self.tree
            )));
        }
        if self.all_answers() != evaluate(&self.tree, test)? {
            return Err(Error::Validation(format!(
                "answers of `{}` do not match the test graph",
                self.tree
            )));
        }
        Ok(())
    }

    pub fn to_record(&self) -> QueryRecord {
        QueryRecord {
            tree: self.tree.to_string(),
            easy: self.easy_answers.iter().copied().collect(),
            hard: self.hard_answers.iter().copied().collect(),
        }
    }

    pub fn from_record(template_name: &str, record: &QueryRecord) -> Result<Self> {
        let tree = parse_tree(&record.tree)?;
        tree.validate()?;
        if !tree.is_grounded() {
            return Err(Error::Data(format!("query `{}` has unbound slots", record.tree)));
        }
        Ok(Self {
            template_name: template_name.to_string(),
            tree,
            easy_answers: record.easy.iter().copied().collect(),
            hard_answers: record.hard.iter().copied().collect(),
        })
    }
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub tree: String,
    pub easy: Vec<EntityId>,
    pub hard: Vec<EntityId>,
}

/// Grounds `template` by walking backwards from a random answer entity on
/// `test`. Walks that dead-end, yield no answers, or (for negation shapes)
/// answer more than half of all entities are retried; after
/// [`MAX_GROUNDING_ATTEMPTS`] such failures in a row this errors. A valid
/// grounding without hard answers yields `None` when `require_hard` is set.
pub fn ground<R: Rng + ?Sized>(
    template: &QueryTemplate,
    train: &KnowledgeGraph,
    test: &KnowledgeGraph,
    rng: &mut R,
    require_hard: bool,
) -> Result<Option<GroundedQuery>> {
    let n = test.num_entities();
    if n == 0 {
        return Err(Error::SamplingExhausted {
            template: template.name.clone(),
            attempts: 0,
        });
    }
    let negated = template.tree.has_negation();
    for _ in 0..MAX_GROUNDING_ATTEMPTS {
        let target = rng.gen_range(0..n) as EntityId;
        let Some(tree) = walk(&template.tree, target, test, rng) else {
            continue;
        };
        let all = to_set(&eval_mask(&tree, test));
        if all.is_empty() || (negated && all.len() * 2 > n) {
            continue;
        }
        let easy: BTreeSet<EntityId> = to_set(&eval_mask(&tree, train)).intersection(&all).copied().collect();
        let hard: BTreeSet<EntityId> = all.difference(&easy).copied().collect();
        if require_hard && hard.is_empty() {
            return Ok(None);
        }
        return Ok(Some(GroundedQuery {
            template_name: template.name.clone(),
            tree,
            easy_answers: easy,
            hard_answers: hard,
        }));
    }
    Err(Error::SamplingExhausted {
        template: template.name.clone(),
        attempts: MAX_GROUNDING_ATTEMPTS,
    })
}

/// Binds `node` so that `target` is in its answer set on `graph`. Negated
/// branches are walked towards an independent random entity.
fn walk<R: Rng + ?Sized>(node: &QueryTree, target: EntityId, graph: &KnowledgeGraph, rng: &mut R) -> Option<QueryTree> {
    Some(match node {
        QueryTree::Anchor(_) => QueryTree::Anchor(Term::Id(target)),
        QueryTree::Projection { child, .. } => {
            let edges = graph.in_edges(target);
            if edges.is_empty() {
                return None;
            }
            let (r, h) = edges[rng.gen_range(0..edges.len())];
            QueryTree::Projection {
                relation: Term::Id(r),
                child: Box::new(walk(child, h, graph, rng)?),
            }
        }
        QueryTree::Intersection(cs) => {
            QueryTree::Intersection(cs.iter().map(|c| walk(c, target, graph, rng)).collect::<Option<_>>()?)
        }
        QueryTree::Union(cs) => {
            QueryTree::Union(cs.iter().map(|c| walk(c, target, graph, rng)).collect::<Option<_>>()?)
        }
        QueryTree::Negation(child) => {
            let other = rng.gen_range(0..graph.num_entities()) as EntityId;
            QueryTree::Negation(Box::new(walk(child, other, graph, rng)?))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{GraphSplit, Triple};
    use crate::query::builtin_template;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kg(n: usize, nr: usize, triples: &[(u32, u32, u32)]) -> KnowledgeGraph {
        KnowledgeGraph::from_triples(n, nr, triples.iter().map(|&(h, r, t)| Triple::new(h, r, t))).unwrap()
    }

    fn set(xs: &[u32]) -> BTreeSet<u32> {
        xs.iter().copied().collect()
    }

    #[test]
    fn two_hop_chase() {
        let g = kg(3, 2, &[(0, 0, 1), (1, 1, 2)]);
        let t = parse_tree("(p,1,(p,0,0))").unwrap();
        assert_eq!(evaluate(&t, &g).unwrap(), set(&[2]));
    }

    #[test]
    fn complement_under_intersection() {
        let g = kg(3, 2, &[(0, 0, 1), (0, 1, 0), (0, 1, 1), (0, 1, 2)]);
        // (p,1,0) is the full entity set; (p,0,0) = {1}
        let t = parse_tree("(i,(p,1,0),(n,(p,0,0)))").unwrap();
        assert_eq!(evaluate(&t, &g).unwrap(), set(&[0, 2]));
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let g = kg(3, 2, &[(0, 0, 1)]);
        assert!(evaluate(&parse_tree("(p,0,9)").unwrap(), &g).is_err());
        assert!(evaluate(&parse_tree("(p,5,0)").unwrap(), &g).is_err());
        assert!(evaluate(&parse_tree("(p,r0,e0)").unwrap(), &g).is_err());
    }

    #[test]
    fn two_in_and_pni_match_hand_evaluation() {
        // 5 entities; r0: 0->1, 0->2, 0->3 ; r1: 4->2 ; r2: 4->1, 4->3
        let g = kg(
            5,
            3,
            &[
                (0, 0, 1),
                (0, 0, 2),
                (0, 0, 3),
                (4, 1, 2),
                (4, 2, 1),
                (4, 2, 3),
                (1, 1, 3),
            ],
        );
        let two_in = builtin_template("2in").unwrap().bind(&[0, 4], &[0, 1]).unwrap();
        // {1,2,3} minus {2}
        assert_eq!(evaluate(&two_in, &g).unwrap(), set(&[1, 3]));
        let pni = builtin_template("pni").unwrap().bind(&[0, 4], &[0, 1, 2]).unwrap();
        // project∘project from 0: r0 -> {1,2,3}, r1 -> {3}; complement = {0,1,2,4}; ∩ r2(4) = {1,3}
        assert_eq!(evaluate(&pni, &g).unwrap(), set(&[1]));
    }

    #[test]
    fn one_hop_zero_holdout_has_no_hard_answers() {
        let g = kg(4, 1, &[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = builtin_template("1p").unwrap();
        assert_eq!(ground(&t, &g, &g, &mut rng, true).unwrap(), None);
    }

    #[test]
    fn one_hop_easy_answers_are_train_neighbors() {
        let train = kg(5, 2, &[(0, 0, 1), (0, 0, 2), (1, 1, 3)]);
        let test = kg(5, 2, &[(0, 0, 1), (0, 0, 2), (0, 0, 4), (1, 1, 3), (2, 1, 3)]);
        let t = builtin_template("1p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let q = ground(&t, &train, &test, &mut rng, false).unwrap().unwrap();
            let QueryTree::Projection { relation, child } = &q.tree else {
                panic!()
            };
            let head = child.anchors()[0].id().unwrap();
            let expected: BTreeSet<u32> = train
                .neighbors(head, relation.id().unwrap())
                .unwrap()
                .iter()
                .copied()
                .collect();
            assert_eq!(q.easy_answers, expected);
            q.check(&test).unwrap();
        }
    }

    #[test]
    fn two_in_grounding_on_small_split() {
        // test graph adds (2,0,3); train lacks it
        let train = kg(6, 2, &[(0, 0, 1), (0, 0, 2), (5, 1, 2), (5, 1, 4)]);
        let test = kg(6, 2, &[(0, 0, 1), (0, 0, 2), (0, 0, 3), (5, 1, 2), (5, 1, 4)]);
        let tree = builtin_template("2in").unwrap().bind(&[0, 5], &[0, 1]).unwrap();
        let q = GroundedQuery::label("2in", tree, &train, &test).unwrap();
        // train: {1,2} - {2,4} = {1}; test: {1,2,3} - {2,4} = {1,3}
        assert_eq!(q.easy_answers, set(&[1]));
        assert_eq!(q.hard_answers, set(&[3]));
    }

    #[test]
    fn grounding_is_deterministic_and_consistent() {
        let split = crate::kg::generate_synthetic_kg(&crate::kg::SyntheticParams {
            num_entities: 80,
            num_relations: 4,
            edges_per_relation: 150,
            holdout_fraction: 0.2,
            seed: 11,
        })
        .unwrap();
        let GraphSplit { train, test, .. } = &split;
        for t in crate::query::builtin_templates() {
            let mut a = ChaCha8Rng::seed_from_u64(3);
            let mut b = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..5 {
                let qa = ground(&t, train, test, &mut a, false).unwrap().unwrap();
                let qb = ground(&t, train, test, &mut b, false).unwrap().unwrap();
                assert_eq!(qa, qb);
                qa.check(test).unwrap();
                if qa.tree.has_negation() {
                    assert!(qa.all_answers().len() * 2 <= test.num_entities());
                }
            }
        }
    }

    #[test]
    fn empty_graph_exhausts_sampling() {
        let g = kg(3, 1, &[]);
        let t = builtin_template("2p").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match ground(&t, &g, &g, &mut rng, false) {
            Err(Error::SamplingExhausted { template, .. }) => assert_eq!(template, "2p"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn record_round_trip() {
        let g = kg(3, 2, &[(0, 0, 1), (1, 1, 2)]);
        let tree = parse_tree("(p,1,(p,0,0))").unwrap();
        let q = GroundedQuery::label("2p", tree, &g, &g).unwrap();
        let json = serde_json::to_string(&q.to_record()).unwrap();
        assert_eq!(json, r#"{"tree":"(p,1,(p,0,0))","easy":[2],"hard":[]}"#);
        let back: QueryRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(GroundedQuery::from_record("2p", &back).unwrap(), q);
    }
}
