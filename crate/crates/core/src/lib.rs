//! Zero-shot named entity recognition with a self-built demonstration library.
//!
//! The pipeline clusters an unlabelled task set, asks a chat model to invent
//! labelled sentences resembling each cluster's medoid, retrieves the most
//! similar invented sentences for each task sentence, and recognizes entities
//! with optional self-consistency voting.

pub mod clusterer;
pub mod corpus;
pub mod embedder;
pub mod evaluator;
pub mod extract;
mod http;
pub mod librarian;
pub mod llm;
pub mod pipeline;
pub mod recognizer;
pub mod selector;

#[cfg(test)]
mod test_server;

pub use http::RetryPolicy;
