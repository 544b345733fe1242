//! Complex query answering over incomplete knowledge graphs with
//! meta-learned projection operators.
//!
//! The crate is organised bottom-up:
//!
//! - [`kg`]: triple store, indices and the synthetic graph generator
//! - [`query`]: computation trees, template grammar, operator sites and categorizations
//! - [`oracle`]: exact set evaluation and grounding of templates
//! - [`dataset`]: few-shot datasets for the multi-hop, EPFO and EFO-1 settings
//! - [`backbone`]: the differentiable fuzzy-vector query embedding model
//! - [`train`]: vanilla, query-type MAML and meta-operator training plus test-time adaptation
//! - [`eval`]: filtered ranks, MRR and result tables
//! - [`experiment`]: manifests and the make-data / train / eval / repro pipeline

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kg;
pub mod oracle;
pub mod query;
pub mod train;

pub use error::{Error, Result};
