//! Retrieval-augmented response generation for task-oriented dialogue.
//!
//! A dual-encoder retriever selects knowledge-base entities for each
//! dialogue turn, each retrieved entity is annotated with meta knowledge
//! (retrieval order, confidence and co-occurrence), and a small
//! attention decoder generates the system response. Retriever and
//! generator are trained jointly through the marginal likelihood of the
//! response over the retrieved entities.

pub mod analysis;
pub mod autodiff;
pub mod dialogue;
pub mod error;
pub mod eval;
pub mod generator;
pub mod kb;
pub mod metaknow;
pub mod pipeline;
pub mod retriever;
pub mod text;
pub mod training;

pub use error::{Error, Result};
