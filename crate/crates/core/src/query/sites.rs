//! Projection sites and the six operator-type categorizations.
//!
//! | scheme | category                                        |
//! |--------|-------------------------------------------------|
//! | R      | distance to the root, clamped to `depth_cap`    |
//! | L      | distance to the nearest leaf, clamped           |
//! | I      | input node kind: Entity, Projection, Intersection |
//! | O      | output node kind: Projection, Intersection, Negation, Answer |
//! | BI     | Entity / NonEntity input                        |
//! | BO     | Answer / NonAnswer output                       |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::query::dnf::dnf_decompose;
use crate::query::tree::{NodeKind, QueryTree};

/// Default clamp for the R and L schemes; the deepest training chain is 3p.
pub const DEFAULT_DEPTH_CAP: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InputKind {
    Entity,
    Projection,
    Intersection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OutputKind {
    Projection,
    Intersection,
    Negation,
    Answer,
}

/// One projection occurrence inside a conjunctive branch of a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSite {
    /// Index of the DNF branch the site lives in (0 for union-free queries).
    pub branch: usize,
    /// Child-index path from the branch root to the projection node.
    pub path: Vec<usize>,
    pub input_kind: InputKind,
    pub output_kind: OutputKind,
    pub root_distance: u32,
    pub leaf_distance: u32,
}

/// Lists every projection site of `tree` in pre-order, branch by branch.
/// Distances are measured inside each conjunctive branch.
pub fn enumerate_projection_sites(tree: &QueryTree) -> Result<Vec<OperatorSite>> {
    let mut sites = Vec::new();
    for (branch, b) in dnf_decompose(tree)?.iter().enumerate() {
        collect_sites(b, branch, None, 0, &mut Vec::new(), &mut sites)?;
    }
    Ok(sites)
}

/// Sites of a single union-free tree.
pub fn branch_sites(branch: &QueryTree) -> Result<Vec<OperatorSite>> {
    let mut sites = Vec::new();
    collect_sites(branch, 0, None, 0, &mut Vec::new(), &mut sites)?;
    Ok(sites)
}

fn collect_sites(
    node: &QueryTree,
    branch: usize,
    parent: Option<NodeKind>,
    depth: u32,
    path: &mut Vec<usize>,
    out: &mut Vec<OperatorSite>,
) -> Result<()> {
    if let QueryTree::Projection { child, .. } = node {
        let input_kind = match child.kind() {
            NodeKind::Anchor => InputKind::Entity,
            NodeKind::Projection => InputKind::Projection,
            NodeKind::Intersection => InputKind::Intersection,
            other => return Err(Error::UnsupportedStructure(format!("projection over a {other:?} node"))),
        };
        let output_kind = match parent {
            None => OutputKind::Answer,
            Some(NodeKind::Projection) => OutputKind::Projection,
            Some(NodeKind::Intersection) => OutputKind::Intersection,
            Some(NodeKind::Negation) => OutputKind::Negation,
            Some(other) => {
                return Err(Error::UnsupportedStructure(format!(
                    "projection feeding a {other:?} node"
                )))
            }
        };
        out.push(OperatorSite {
            branch,
            path: path.clone(),
            input_kind,
            output_kind,
            root_distance: depth + 1,
            leaf_distance: leaf_distance(node),
        });
    }
    let kind = node.kind();
    for (i, c) in node.children().iter().enumerate() {
        path.push(i);
        collect_sites(c, branch, Some(kind), depth + 1, path, out)?;
        path.pop();
    }
    Ok(())
}

fn leaf_distance(node: &QueryTree) -> u32 {
    match node {
        QueryTree::Anchor(_) => 0,
        _ => 1 + node.children().iter().map(leaf_distance).min().unwrap_or(0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scheme {
    R,
    L,
    I,
    O,
    BI,
    BO,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [Scheme::R, Scheme::L, Scheme::I, Scheme::O, Scheme::BI, Scheme::BO];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::R => "R",
            Scheme::L => "L",
            Scheme::I => "I",
            Scheme::O => "O",
            Scheme::BI => "BI",
            Scheme::BO => "BO",
        }
    }

    /// Every category the scheme can produce, given a depth cap.
    pub fn categories(self, depth_cap: u32) -> Vec<Category> {
        match self {
            Scheme::R | Scheme::L => (1..=depth_cap).map(Category::Depth).collect(),
            Scheme::I => vec![
                Category::Input(InputKind::Entity),
                Category::Input(InputKind::Projection),
                Category::Input(InputKind::Intersection),
            ],
            Scheme::O => vec![
                Category::Output(OutputKind::Projection),
                Category::Output(OutputKind::Intersection),
                Category::Output(OutputKind::Negation),
                Category::Output(OutputKind::Answer),
            ],
            Scheme::BI => vec![Category::EntityInput(true), Category::EntityInput(false)],
            Scheme::BO => vec![Category::AnswerOutput(true), Category::AnswerOutput(false)],
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "R" => Ok(Scheme::R),
            "L" => Ok(Scheme::L),
            "I" => Ok(Scheme::I),
            "O" => Ok(Scheme::O),
            "BI" => Ok(Scheme::BI),
            "BO" => Ok(Scheme::BO),
            _ => Err(Error::Config(format!("unknown categorization scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Depth(u32),
    Input(InputKind),
    Output(OutputKind),
    /// Binary input: true for Entity, false for NonEntity.
    EntityInput(bool),
    /// Binary output: true for Answer, false for NonAnswer.
    AnswerOutput(bool),
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Category::Depth(d) => write!(f, "{d}"),
            Category::Input(k) => write!(f, "{k:?}"),
            Category::Output(k) => write!(f, "{k:?}"),
            Category::EntityInput(true) => f.write_str("Entity"),
            Category::EntityInput(false) => f.write_str("NonEntity"),
            Category::AnswerOutput(true) => f.write_str("Answer"),
            Category::AnswerOutput(false) => f.write_str("NonAnswer"),
        }
    }
}

/// The learnable operators that can carry meta parameters. Only projection
/// is parameterized in the reference backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OperatorKind {
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OperatorTypeKey {
    pub operator: OperatorKind,
    pub scheme: Scheme,
    pub category: Category,
}

impl OperatorTypeKey {
    pub fn projection(scheme: Scheme, category: Category) -> Self {
        Self {
            operator: OperatorKind::Projection,
            scheme,
            category,
        }
    }
}

impl fmt::Display for OperatorTypeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.scheme, self.category)
    }
}

impl FromStr for OperatorTypeKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scheme, cat) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("malformed operator type `{s}`")))?;
        let scheme: Scheme = scheme.parse()?;
        let category = match scheme {
            Scheme::R | Scheme::L => Category::Depth(
                cat.parse()
                    .map_err(|_| Error::Config(format!("bad depth category in `{s}`")))?,
            ),
            _ => *scheme
                .categories(1)
                .iter()
                .find(|c| c.to_string() == cat)
                .ok_or_else(|| Error::Config(format!("unknown category in `{s}`")))?,
        };
        Ok(Self::projection(scheme, category))
    }
}

impl Serialize for OperatorTypeKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OperatorTypeKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Category of a site under one scheme.
pub fn categorize(site: &OperatorSite, scheme: Scheme, depth_cap: u32) -> OperatorTypeKey {
    let cap = depth_cap.max(1);
    let category = match scheme {
        Scheme::R => Category::Depth(site.root_distance.min(cap)),
        Scheme::L => Category::Depth(site.leaf_distance.min(cap)),
        Scheme::I => Category::Input(site.input_kind),
        Scheme::O => Category::Output(site.output_kind),
        Scheme::BI => Category::EntityInput(site.input_kind == InputKind::Entity),
        Scheme::BO => Category::AnswerOutput(site.output_kind == OutputKind::Answer),
    };
    OperatorTypeKey::projection(scheme, category)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::template::{builtin_template, builtin_templates, parse_template};

    fn sites(name: &str) -> Vec<OperatorSite> {
        enumerate_projection_sites(&builtin_template(name).unwrap().tree).unwrap()
    }

    #[test]
    fn two_hop_sites() {
        let s = sites("2p");
        assert_eq!(s.len(), 2);
        assert_eq!(
            (
                s[0].input_kind,
                s[0].output_kind,
                s[0].root_distance,
                s[0].leaf_distance
            ),
            (InputKind::Projection, OutputKind::Answer, 1, 2)
        );
        assert_eq!(
            (
                s[1].input_kind,
                s[1].output_kind,
                s[1].root_distance,
                s[1].leaf_distance
            ),
            (InputKind::Entity, OutputKind::Projection, 2, 1)
        );
        assert_eq!(s[0].path, Vec::<usize>::new());
        assert_eq!(s[1].path, vec![0]);
    }

    #[test]
    fn three_intersection_sites() {
        let s = sites("3i");
        assert_eq!(s.len(), 3);
        for site in &s {
            assert_eq!(
                (
                    site.input_kind,
                    site.output_kind,
                    site.root_distance,
                    site.leaf_distance
                ),
                (InputKind::Entity, OutputKind::Intersection, 2, 1)
            );
        }
    }

    #[test]
    fn figure_query_has_three_input_categories() {
        // performed-in(∩(directed-by(e0), ¬ won(held-in(e1))))
        let t = parse_template("figure", "(p,r3,(i,(p,r0,e0),(n,(p,r2,(p,r1,e1)))))").unwrap();
        let s = enumerate_projection_sites(&t.tree).unwrap();
        let mut kinds: Vec<InputKind> = s.iter().map(|x| x.input_kind).collect();
        kinds.sort();
        assert_eq!(
            kinds,
            vec![
                InputKind::Entity,
                InputKind::Entity,
                InputKind::Projection,
                InputKind::Intersection
            ]
        );
        let mut cats: Vec<_> = s.iter().map(|x| categorize(x, Scheme::I, 3)).collect();
        cats.dedup();
        cats.sort();
        cats.dedup();
        assert_eq!(cats.len(), 3);
    }

    #[test]
    fn input_scheme_on_2p() {
        let s = sites("2p");
        assert_eq!(
            categorize(&s[1], Scheme::I, 3).category,
            Category::Input(InputKind::Entity)
        );
        assert_eq!(
            categorize(&s[0], Scheme::I, 3).category,
            Category::Input(InputKind::Projection)
        );
    }

    #[test]
    fn root_scheme_clamps_to_cap() {
        let s = sites("6p");
        let deepest = s.iter().max_by_key(|x| x.root_distance).unwrap();
        assert_eq!(deepest.root_distance, 6);
        assert_eq!(categorize(deepest, Scheme::R, 3).category, Category::Depth(3));
        // enumeration of the clamp over the chain
        let got: Vec<u32> = s
            .iter()
            .map(|x| match categorize(x, Scheme::R, 3).category {
                Category::Depth(d) => d,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(got, vec![1, 2, 3, 3, 3, 3]);
    }

    #[test]
    fn pni_negated_site() {
        let s = sites("pni");
        // pre-order: (n,(p,r1,...)) comes first; r1 site feeds the negation
        let fed = s.iter().find(|x| x.output_kind == OutputKind::Negation).unwrap();
        assert_eq!(fed.path, vec![0, 0]);
        assert_eq!(fed.root_distance, 3);
        assert_eq!(
            categorize(fed, Scheme::O, 3).category,
            Category::Output(OutputKind::Negation)
        );
        assert_eq!(categorize(fed, Scheme::BO, 3).category, Category::AnswerOutput(false));
    }

    #[test]
    fn union_sites_live_in_branches() {
        let s = sites("up");
        assert_eq!(s.len(), 4);
        assert_eq!(s.iter().filter(|x| x.branch == 0).count(), 2);
        assert!(s.iter().all(|x| x.output_kind != OutputKind::Intersection));
    }

    #[test]
    fn kinds_stay_in_closed_sets_and_paths_resolve() {
        for t in builtin_templates() {
            let branches = dnf_decompose(&t.tree).unwrap();
            for site in enumerate_projection_sites(&t.tree).unwrap() {
                let node = branches[site.branch].at_path(&site.path).unwrap();
                assert_eq!(node.kind(), NodeKind::Projection);
                assert_eq!(
                    site.root_distance == 1,
                    site.output_kind == OutputKind::Answer,
                    "{}",
                    t.name
                );
                assert_eq!(
                    site.leaf_distance == 1,
                    site.input_kind == InputKind::Entity,
                    "{}",
                    t.name
                );
                for scheme in Scheme::ALL {
                    let k = categorize(&site, scheme, 3);
                    assert_eq!(k, categorize(&site, scheme, 3));
                    assert!(scheme.categories(3).contains(&k.category));
                }
            }
        }
    }

    #[test]
    fn key_string_round_trip() {
        for scheme in Scheme::ALL {
            for c in scheme.categories(4) {
                let k = OperatorTypeKey::projection(scheme, c);
                assert_eq!(k.to_string().parse::<OperatorTypeKey>().unwrap(), k);
            }
        }
        assert!("X:1".parse::<OperatorTypeKey>().is_err());
        assert!("I:Bogus".parse::<OperatorTypeKey>().is_err());
        assert_eq!("bo".parse::<Scheme>().unwrap(), Scheme::BO);
    }
}
