//! Query trees, the template grammar, projection sites and DNF splitting.

mod dnf;
mod sites;
mod template;
mod tree;

pub use dnf::dnf_decompose;
pub use sites::{
    branch_sites, categorize, enumerate_projection_sites, Category, InputKind, OperatorKind, OperatorSite,
    OperatorTypeKey, OutputKind, Scheme, DEFAULT_DEPTH_CAP,
};
pub use template::{
    builtin_template, builtin_templates, parse_template, registry_json, QueryTemplate, BUILTIN_TEMPLATES,
};
pub use tree::{parse_tree, NodeKind, QueryTree, Term};
