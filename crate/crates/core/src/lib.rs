//! Harness for multimodal analogical reasoning over a background knowledge graph.
//!
//! A question `(head, tail) : (query, ?)` asks for the entity that relates to
//! `query` the way `tail` relates to `head`. Each slot is shown either as a
//! picture or as a text label. The crate covers the work around a model
//! rather than the model itself:
//!
//! - [`kg`] loads and validates graph and question files.
//! - [`image_ops`] combines pictures side by side for single-image models.
//! - [`prompt`] renders the unified mask template and the chat dialogues.
//! - [`client`] talks to a chat-completions endpoint or to a mock oracle.
//! - [`mapper`] grounds free-text answers onto the graph vocabulary.
//! - [`ft_dataset`] writes fine-tuning corpora.
//! - [`eval`] computes Hits@k and MRR and compares runs.
//! - [`run`] ties these into the pipeline behind the `marh` binary.
//!
//! The `examples/` directory has one runnable program per capability.
pub mod client;
pub mod config;
pub mod eval;
pub mod files;
pub mod ft_dataset;
pub mod image_ops;
pub mod kg;
pub mod mapper;
pub mod prompt;
pub mod run;
pub mod seed;
pub mod synth;
