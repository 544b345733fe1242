use std::fmt;

use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId};

/// A slot in a query tree: either a template placeholder index or a bound id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Var(usize),
    Id(u32),
}

impl Term {
    pub fn id(self) -> Option<u32> {
        match self {
            Term::Id(x) => Some(x),
            Term::Var(_) => None,
        }
    }
}

/// Tree-shaped computation graph of set expressions. The root denotes the
/// free variable; every leaf is an anchor entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum QueryTree {
    Anchor(Term),
    Projection { relation: Term, child: Box<QueryTree> },
    Intersection(Vec<QueryTree>),
    Union(Vec<QueryTree>),
    Negation(Box<QueryTree>),
}

/// Node kinds, used for parent/child structure checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Anchor,
    Projection,
    Intersection,
    Union,
    Negation,
}

impl QueryTree {
    pub fn anchor(entity: EntityId) -> Self {
        QueryTree::Anchor(Term::Id(entity))
    }

    pub fn projection(relation: RelationId, child: QueryTree) -> Self {
        QueryTree::Projection {
            relation: Term::Id(relation),
            child: Box::new(child),
        }
    }

    pub fn negation(child: QueryTree) -> Self {
        QueryTree::Negation(Box::new(child))
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            QueryTree::Anchor(_) => NodeKind::Anchor,
            QueryTree::Projection { .. } => NodeKind::Projection,
            QueryTree::Intersection(_) => NodeKind::Intersection,
            QueryTree::Union(_) => NodeKind::Union,
            QueryTree::Negation(_) => NodeKind::Negation,
        }
    }

    pub fn children(&self) -> &[QueryTree] {
        match self {
            QueryTree::Anchor(_) => &[],
            QueryTree::Projection { child, .. } | QueryTree::Negation(child) => std::slice::from_ref(child),
            QueryTree::Intersection(cs) | QueryTree::Union(cs) => cs,
        }
    }

    /// Resolves a child-index path from this node.
    pub fn at_path(&self, path: &[usize]) -> Option<&QueryTree> {
        path.iter().try_fold(self, |node, &i| node.children().get(i))
    }

    pub fn contains_kind(&self, kind: NodeKind) -> bool {
        self.kind() == kind || self.children().iter().any(|c| c.contains_kind(kind))
    }

    pub fn has_negation(&self) -> bool {
        self.contains_kind(NodeKind::Negation)
    }

    pub fn has_union(&self) -> bool {
        self.contains_kind(NodeKind::Union)
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        usize::from(self.kind() == kind) + self.children().iter().map(|c| c.count(kind)).sum::<usize>()
    }

    /// True when every anchor and relation slot holds a bound id.
    pub fn is_grounded(&self) -> bool {
        match self {
            QueryTree::Anchor(t) => t.id().is_some(),
            QueryTree::Projection { relation, child } => relation.id().is_some() && child.is_grounded(),
            _ => self.children().iter().all(QueryTree::is_grounded),
        }
    }

    /// Anchor terms in pre-order.
    pub fn anchors(&self) -> Vec<Term> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let QueryTree::Anchor(t) = n {
                out.push(*t);
            }
        });
        out
    }

    /// Relation terms in pre-order.
    pub fn relations(&self) -> Vec<Term> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let QueryTree::Projection { relation, .. } = n {
                out.push(*relation);
            }
        });
        out
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a QueryTree)) {
        f(self);
        for c in self.children() {
            c.visit(f);
        }
    }

    /// Checks the structural invariants: the root is neither an anchor nor a
    /// negation, intersections and unions have at least two children, and a
    /// negation sits directly under an intersection with a projection below it.
    pub fn validate(&self) -> Result<()> {
        match self {
            QueryTree::Anchor(_) => return Err(Error::Structure("root of a query cannot be an anchor".into())),
            QueryTree::Negation(_) => return Err(Error::Structure("root of a query cannot be a negation".into())),
            _ => {}
        }
        self.validate_node(None)
    }

    fn validate_node(&self, parent: Option<NodeKind>) -> Result<()> {
        match self {
            QueryTree::Intersection(cs) | QueryTree::Union(cs) if cs.len() < 2 => {
                return Err(Error::Structure(format!(
                    "{:?} node needs at least two children, found {}",
                    self.kind(),
                    cs.len()
                )));
            }
            QueryTree::Negation(child) => {
                if parent != Some(NodeKind::Intersection) {
                    return Err(Error::Structure(
                        "negation must be a direct child of an intersection".into(),
                    ));
                }
                if child.kind() != NodeKind::Projection {
                    return Err(Error::Structure(
                        "negation must be the direct parent of a projection".into(),
                    ));
                }
            }
            _ => {}
        }
        let kind = self.kind();
        self.children().iter().try_for_each(|c| c.validate_node(Some(kind)))
    }

    /// Replaces placeholders with ids.
    pub fn bind(&self, anchors: &[EntityId], relations: &[RelationId]) -> Result<QueryTree> {
        let lookup = |t: Term, table: &[u32], what: &str| match t {
            Term::Id(x) => Ok(Term::Id(x)),
            Term::Var(k) => table
                .get(k)
                .map(|&x| Term::Id(x))
                .ok_or_else(|| Error::Validation(format!("no binding for {what} placeholder {k}"))),
        };
        Ok(match self {
            QueryTree::Anchor(t) => QueryTree::Anchor(lookup(*t, anchors, "anchor")?),
            QueryTree::Projection { relation, child } => QueryTree::Projection {
                relation: lookup(*relation, relations, "relation")?,
                child: Box::new(child.bind(anchors, relations)?),
            },
            QueryTree::Intersection(cs) => {
                QueryTree::Intersection(cs.iter().map(|c| c.bind(anchors, relations)).collect::<Result<_>>()?)
            }
            QueryTree::Union(cs) => {
                QueryTree::Union(cs.iter().map(|c| c.bind(anchors, relations)).collect::<Result<_>>()?)
            }
            QueryTree::Negation(c) => QueryTree::Negation(Box::new(c.bind(anchors, relations)?)),
        })
    }
}

impl fmt::Display for QueryTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryTree::Anchor(Term::Var(k)) => write!(f, "e{k}"),
            QueryTree::Anchor(Term::Id(x)) => write!(f, "{x}"),
            QueryTree::Projection { relation, child } => {
                match relation {
                    Term::Var(k) => write!(f, "(p,r{k},")?,
                    Term::Id(x) => write!(f, "(p,{x},")?,
                }
                write!(f, "{child})")
            }
            QueryTree::Intersection(cs) | QueryTree::Union(cs) => {
                let tag = if matches!(self, QueryTree::Intersection(_)) {
                    'i'
                } else {
                    'u'
                };
                write!(f, "({tag}")?;
                for c in cs {
                    write!(f, ",{c}")?;
                }
                write!(f, ")")
            }
            QueryTree::Negation(c) => write!(f, "(n,{c})"),
        }
    }
}

/// Parses the prefix grammar:
///
/// ```text
/// EXPR := ANCHOR | "(p," REL "," EXPR ")" | "(i," EXPR "," EXPR ["," EXPR] ")"
///       | "(u," EXPR "," EXPR ")" | "(n," EXPR ")"
/// ANCHOR := "e" INT | INT        REL := "r" INT | INT
/// ```
///
/// Placeholders (`e3`, `r1`) and bound ids (bare integers) may be mixed.
/// Whitespace is ignored. Only the grammar is checked here, not the tree
/// invariants.
pub fn parse_tree(text: &str) -> Result<QueryTree> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let tree = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("trailing input after expression"));
    }
    Ok(tree)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> Error {
        Error::Template {
            position: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, byte: u8) -> Result<()> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected `{}`", byte as char)))
        }
    }

    fn int(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected an integer"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Template {
                position: start,
                message: "integer out of range".into(),
            })
    }

    fn term(&mut self, prefix: u8) -> Result<Term> {
        match self.peek() {
            Some(b) if b == prefix => {
                self.pos += 1;
                Ok(Term::Var(self.int()? as usize))
            }
            Some(b) if b.is_ascii_digit() => Ok(Term::Id(self.int()?)),
            _ => Err(self.error(format!("expected `{}<k>` or an id", prefix as char))),
        }
    }

    fn expr(&mut self) -> Result<QueryTree> {
        if self.peek() != Some(b'(') {
            return Ok(QueryTree::Anchor(self.term(b'e')?));
        }
        self.pos += 1;
        let tag = self.peek().ok_or_else(|| self.error("unexpected end of input"))?;
        self.pos += 1;
        self.expect(b',')?;
        let tree = match tag {
            b'p' => {
                let relation = self.term(b'r')?;
                self.expect(b',')?;
                let child = self.expr()?;
                QueryTree::Projection {
                    relation,
                    child: Box::new(child),
                }
            }
            b'n' => QueryTree::Negation(Box::new(self.expr()?)),
            b'i' | b'u' => {
                let mut children = vec![self.expr()?];
                while self.peek() == Some(b',') {
                    self.pos += 1;
                    children.push(self.expr()?);
                }
                let max = if tag == b'i' { 3 } else { 2 };
                if children.len() < 2 || children.len() > max {
                    return Err(self.error(format!(
                        "`{}` takes 2{} operands, found {}",
                        tag as char,
                        if max == 3 { " or 3" } else { "" },
                        children.len()
                    )));
                }
                if tag == b'i' {
                    QueryTree::Intersection(children)
                } else {
                    QueryTree::Union(children)
                }
            }
            other => {
                self.pos -= 2;
                return Err(self.error(format!("unknown operator `{}`", other as char)));
            }
        };
        self.expect(b')')?;
        Ok(tree)
    }
}
