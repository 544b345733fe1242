#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, HashSet};

use mamo_core::kg::{KnowledgeGraph, Triple};
use mamo_core::query::{QueryTree, Term};
use rand::Rng;

/// Answers by enumerating every entity as a candidate for each existential
/// variable: `y` answers a projection iff some `x` with `(x, r, y)` in the
/// graph satisfies the child. Memoized per (node, entity).
pub fn brute_force_answers(tree: &QueryTree, graph: &KnowledgeGraph) -> BTreeSet<u32> {
    let triples: HashSet<(u32, u32, u32)> = graph.triples().map(|t| (t.head, t.relation, t.tail)).collect();
    let n = graph.num_entities() as u32;
    let mut memo = HashMap::new();
    (0..n).filter(|&y| holds(tree, y, n, &triples, &mut memo)).collect()
}

fn holds(
    node: &QueryTree,
    y: u32,
    n: u32,
    triples: &HashSet<(u32, u32, u32)>,
    memo: &mut HashMap<(*const QueryTree, u32), bool>,
) -> bool {
    let key = (node as *const QueryTree, y);
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = match node {
        QueryTree::Anchor(Term::Id(e)) => *e == y,
        QueryTree::Projection {
            relation: Term::Id(r),
            child,
        } => (0..n).any(|x| triples.contains(&(x, *r, y)) && holds(child, x, n, triples, memo)),
        QueryTree::Intersection(cs) => cs.iter().all(|c| holds(c, y, n, triples, memo)),
        QueryTree::Union(cs) => cs.iter().any(|c| holds(c, y, n, triples, memo)),
        QueryTree::Negation(c) => !holds(c, y, n, triples, memo),
        _ => panic!("ungrounded query"),
    };
    memo.insert(key, v);
    v
}

/// Random graph from `edges` uniform draws; duplicates collapse.
pub fn random_graph<R: Rng>(n: usize, nr: usize, edges: usize, rng: &mut R) -> KnowledgeGraph {
    let triples: Vec<Triple> = (0..edges)
        .map(|_| {
            Triple::new(
                rng.gen_range(0..n as u32),
                rng.gen_range(0..nr as u32),
                rng.gen_range(0..n as u32),
            )
        })
        .collect();
    KnowledgeGraph::from_triples(n, nr, triples).unwrap()
}
