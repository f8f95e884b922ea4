//! Natural language to SPARQL translation, built from scratch.
//!
//! The pipeline runs in stages: query-log cleaning and encoding
//! ([`codec`]), subword tokenization ([`tokenizer`]), denoising corruption
//! for pre-training ([`corruption`]), a transformer encoder-decoder with
//! hand-written gradients ([`model`]), optimization and checkpointing
//! ([`training`]), beam-search generation ([`decoding`]), and translation
//! scoring ([`evaluation`]). [`data`] holds corpus loading and fixture
//! generation shared by the tests and the command-line driver.
//!
//! Everything is deterministic under a seed: cleaning, vocabulary
//! induction, corruption draws, parameter initialization, batch order, and
//! decoding all reproduce bit-identically on the same inputs.

pub mod codec;
pub mod corruption;
pub mod data;
pub mod decoding;
pub mod evaluation;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use codec::{EncodedQuery, NamespaceTable, RawQuery};
pub use tokenizer::{TokenSequence, Vocab};
