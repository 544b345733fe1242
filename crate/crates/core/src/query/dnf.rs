use crate::error::{Error, Result};
use crate::query::tree::QueryTree;

/// Splits a query into union-free conjunctive branches whose answer sets
/// union to the original answer set. Unions are lifted through projections
/// (projection distributes over union) and intersections (cartesian product
/// of branch choices). Union-free input comes back unchanged as a singleton.
pub fn dnf_decompose(tree: &QueryTree) -> Result<Vec<QueryTree>> {
    if !tree.has_union() {
        return Ok(vec![tree.clone()]);
    }
    branches(tree)
}

fn branches(node: &QueryTree) -> Result<Vec<QueryTree>> {
    Ok(match node {
        QueryTree::Anchor(_) => vec![node.clone()],
        QueryTree::Projection { relation, child } => branches(child)?
            .into_iter()
            .map(|c| QueryTree::Projection {
                relation: *relation,
                child: Box::new(c),
            })
            .collect(),
        QueryTree::Union(cs) => {
            let mut out = Vec::new();
            for c in cs {
                out.extend(branches(c)?);
            }
            out
        }
        QueryTree::Intersection(cs) => {
            let mut acc: Vec<Vec<QueryTree>> = vec![Vec::new()];
            for c in cs {
                let options = branches(c)?;
                acc = acc
                    .into_iter()
                    .flat_map(|prefix| {
                        options.iter().map(move |o| {
                            let mut p = prefix.clone();
                            p.push(o.clone());
                            p
                        })
                    })
                    .collect();
            }
            acc.into_iter().map(QueryTree::Intersection).collect()
        }
        QueryTree::Negation(child) => {
            if child.has_union() {
                return Err(Error::UnsupportedStructure("union nested under negation".into()));
            }
            vec![node.clone()]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::template::builtin_template;
    use crate::query::tree::parse_tree;

    #[test]
    fn two_union_splits_into_one_hops() {
        let parts = dnf_decompose(&builtin_template("2u").unwrap().tree).unwrap();
        let text: Vec<String> = parts.iter().map(ToString::to_string).collect();
        assert_eq!(text, vec!["(p,r0,e0)", "(p,r1,e1)"]);
    }

    #[test]
    fn union_projection_distributes() {
        let parts = dnf_decompose(&builtin_template("up").unwrap().tree).unwrap();
        let text: Vec<String> = parts.iter().map(ToString::to_string).collect();
        assert_eq!(text, vec!["(p,r2,(p,r0,e0))", "(p,r2,(p,r1,e1))"]);
    }

    #[test]
    fn union_free_is_identity() {
        let t = builtin_template("3i").unwrap().tree;
        assert_eq!(dnf_decompose(&t).unwrap(), vec![t]);
    }

    #[test]
    fn union_under_negation_is_rejected() {
        let t = parse_tree("(i,(p,r0,e0),(n,(p,r1,(u,(p,r2,e1),(p,r3,e2)))))").unwrap();
        assert!(matches!(dnf_decompose(&t), Err(Error::UnsupportedStructure(_))));
    }

    #[test]
    fn union_inside_intersection_multiplies_branches() {
        let t = parse_tree("(i,(u,(p,0,1),(p,0,2)),(u,(p,1,3),(p,1,4)))").unwrap();
        assert_eq!(dnf_decompose(&t).unwrap().len(), 4);
    }
}
