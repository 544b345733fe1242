use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};
use crate::query::tree::{parse_tree, QueryTree, Term};

/// A named query shape whose anchor and relation slots are placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryTemplate {
    pub name: String,
    pub tree: QueryTree,
    pub anchors: usize,
    pub relations: usize,
}

impl QueryTemplate {
    pub fn new(name: impl Into<String>, tree: QueryTree) -> Result<Self> {
        tree.validate()?;
        let anchors = contiguous_vars(&tree.anchors(), "anchor")?;
        let relations = contiguous_vars(&tree.relations(), "relation")?;
        Ok(Self {
            name: name.into(),
            tree,
            anchors,
            relations,
        })
    }

    pub fn bind(&self, anchors: &[EntityId], relations: &[RelationId]) -> Result<QueryTree> {
        if anchors.len() != self.anchors || relations.len() != self.relations {
            return Err(Error::Validation(format!(
                "template {} expects {} anchors and {} relations, got {} and {}",
                self.name,
                self.anchors,
                self.relations,
                anchors.len(),
                relations.len()
            )));
        }
        self.tree.bind(anchors, relations)
    }
}

impl fmt::Display for QueryTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.tree.fmt(f)
    }
}

fn contiguous_vars(terms: &[Term], what: &str) -> Result<usize> {
    let mut seen = vec![false; terms.len()];
    for t in terms {
        match *t {
            Term::Id(x) => {
                return Err(Error::Structure(format!(
                    "template {what} slot holds bound id {x}; expected a placeholder"
                )))
            }
            Term::Var(k) if k >= terms.len() => {
                return Err(Error::Structure(format!(
                    "{what} placeholders are not contiguous: index {k} with {} slots",
                    terms.len()
                )))
            }
            Term::Var(k) if seen[k] => return Err(Error::Structure(format!("{what} placeholder {k} used twice"))),
            Term::Var(k) => seen[k] = true,
        }
    }
    Ok(terms.len())
}

/// Parses a template string and checks the tree invariants and placeholder
/// numbering.
pub fn parse_template(name: &str, text: &str) -> Result<QueryTemplate> {
    QueryTemplate::new(name, parse_tree(text)?)
}

/// The seventeen named shapes: the fourteen standard benchmark types plus the
/// long chains 4p, 5p and 6p.
pub const BUILTIN_TEMPLATES: [(&str, &str); 17] = [
    ("1p", "(p,r0,e0)"),
    ("2p", "(p,r1,(p,r0,e0))"),
    ("3p", "(p,r2,(p,r1,(p,r0,e0)))"),
    ("4p", "(p,r3,(p,r2,(p,r1,(p,r0,e0))))"),
    ("5p", "(p,r4,(p,r3,(p,r2,(p,r1,(p,r0,e0)))))"),
    ("6p", "(p,r5,(p,r4,(p,r3,(p,r2,(p,r1,(p,r0,e0))))))"),
    ("2i", "(i,(p,r0,e0),(p,r1,e1))"),
    ("3i", "(i,(p,r0,e0),(p,r1,e1),(p,r2,e2))"),
    ("ip", "(p,r2,(i,(p,r0,e0),(p,r1,e1)))"),
    ("pi", "(i,(p,r1,(p,r0,e0)),(p,r2,e1))"),
    ("2u", "(u,(p,r0,e0),(p,r1,e1))"),
    ("up", "(p,r2,(u,(p,r0,e0),(p,r1,e1)))"),
    ("2in", "(i,(p,r0,e0),(n,(p,r1,e1)))"),
    ("3in", "(i,(p,r0,e0),(p,r1,e1),(n,(p,r2,e2)))"),
    ("inp", "(p,r2,(i,(p,r0,e0),(n,(p,r1,e1))))"),
    ("pin", "(i,(p,r1,(p,r0,e0)),(n,(p,r2,e1)))"),
    ("pni", "(i,(n,(p,r1,(p,r0,e0))),(p,r2,e1))"),
];

pub fn builtin_templates() -> Vec<QueryTemplate> {
    BUILTIN_TEMPLATES
        .iter()
        .map(|(name, text)| parse_template(name, text).expect("builtin template is valid"))
        .collect()
}

pub fn builtin_template(name: &str) -> Option<QueryTemplate> {
    BUILTIN_TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| parse_template(n, text).expect("builtin template is valid"))
}

/// `{name: template-string}` JSON dump of a registry.
pub fn registry_json(templates: &[QueryTemplate]) -> String {
    let map: BTreeMap<&str, String> = templates.iter().map(|t| (t.name.as_str(), t.to_string())).collect();
    serde_json::to_string_pretty(&map).expect("string map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::tree::NodeKind;

    #[test]
    fn parses_2p() {
        let t = parse_template("2p", "(p,r1,(p,r0,e0))").unwrap();
        assert_eq!(
            t.tree,
            QueryTree::Projection {
                relation: Term::Var(1),
                child: Box::new(QueryTree::Projection {
                    relation: Term::Var(0),
                    child: Box::new(QueryTree::Anchor(Term::Var(0))),
                }),
            }
        );
        assert_eq!((t.anchors, t.relations), (1, 2));
    }

    #[test]
    fn negation_root_is_structural_error() {
        assert!(matches!(
            parse_template("bad", "(n,(p,r0,e0))"),
            Err(Error::Structure(_))
        ));
        assert!(matches!(parse_template("bad", "e0"), Err(Error::Structure(_))));
    }

    #[test]
    fn placeholders_must_be_contiguous_and_distinct() {
        assert!(parse_template("x", "(i,(p,r0,e0),(p,r2,e1))").is_err());
        assert!(parse_template("x", "(i,(p,r0,e0),(p,r1,e0))").is_err());
        assert!(parse_template("x", "(p,r0,5)").is_err());
    }

    #[test]
    fn builtin_counts_match_conventional_shapes() {
        let expect = [
            ("1p", 1, 1),
            ("2p", 1, 2),
            ("3p", 1, 3),
            ("4p", 1, 4),
            ("5p", 1, 5),
            ("6p", 1, 6),
            ("2i", 2, 2),
            ("3i", 3, 3),
            ("ip", 2, 3),
            ("pi", 2, 3),
            ("2u", 2, 2),
            ("up", 2, 3),
            ("2in", 2, 2),
            ("3in", 3, 3),
            ("inp", 2, 3),
            ("pin", 2, 3),
            ("pni", 2, 3),
        ];
        let all = builtin_templates();
        assert_eq!(all.len(), 17);
        for ((name, a, r), t) in expect.iter().zip(&all) {
            assert_eq!(&t.name, name);
            assert_eq!((t.anchors, t.relations), (*a, *r), "{name}");
        }
    }

    #[test]
    fn six_hop_is_a_chain_of_six_projections() {
        let t = builtin_template("6p").unwrap();
        assert_eq!(t.tree.count(NodeKind::Projection), 6);
        assert_eq!(t.tree.count(NodeKind::Anchor), 1);
        let mut node = &t.tree;
        for _ in 0..6 {
            assert_eq!(node.kind(), NodeKind::Projection);
            node = &node.children()[0];
        }
        assert_eq!(node.kind(), NodeKind::Anchor);
    }

    #[test]
    fn pni_shape() {
        let t = builtin_template("pni").unwrap();
        let expected = QueryTree::Intersection(vec![
            QueryTree::Negation(Box::new(QueryTree::Projection {
                relation: Term::Var(1),
                child: Box::new(QueryTree::Projection {
                    relation: Term::Var(0),
                    child: Box::new(QueryTree::Anchor(Term::Var(0))),
                }),
            })),
            QueryTree::Projection {
                relation: Term::Var(2),
                child: Box::new(QueryTree::Anchor(Term::Var(1))),
            },
        ]);
        assert_eq!(t.tree, expected);
        assert_eq!(builtin_template("1p").unwrap().to_string(), "(p,r0,e0)");
        assert!(builtin_template("7p").is_none());
    }

    #[test]
    fn parse_serialize_round_trip_on_builtins() {
        for t in builtin_templates() {
            let text = t.to_string();
            assert_eq!(parse_template(&t.name, &text).unwrap(), t);
        }
    }

    #[test]
    fn registry_dump_is_a_name_map() {
        let json = registry_json(&builtin_templates());
        let map: BTreeMap<String, String> = serde_json::from_str(&json).unwrap();
        assert_eq!(map.len(), 17);
        assert_eq!(map["2in"], "(i,(p,r0,e0),(n,(p,r1,e1)))");
    }
}
