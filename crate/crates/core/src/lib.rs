//! Fine-grained chemical entity typing.
//!
//! A mention in a sentence is typed with a set of ontology paths using three
//! kinds of evidence: its local context, the molecular graph of the chemical
//! it links to, and that chemical's natural-language description.

pub mod tensor;
pub mod molecule;
pub mod ontology;
pub mod labeler;
pub mod resolver;
pub mod encoders;
pub mod metrics;
pub mod typer;
pub mod synthetic;
