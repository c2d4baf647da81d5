//! Cross-modal graph reasoning for knowledge-based visual question answering.
//!
//! The pipeline answers a question about an image by reasoning over three
//! graphs built per instance: a fully connected visual graph over object
//! detections (spatial edge features), a semantic graph over caption triplets,
//! and a fact graph over retrieved knowledge triplets. A question-guided
//! selection pass reweights nodes and edges inside each graph, a recurrent
//! memory module walks the visual and semantic graphs once per fact concept,
//! and a gated fusion step combines the streams into a single concept vector
//! that is scored against the question. Answering is binary classification
//! over fact-graph entities: the top-scoring entity wins.
//!
//! Everything runs on an arena tape ([`numerics::Tape`]) that records forward
//! operations and replays them in reverse for exact gradients, in `f64`
//! throughout. No tensor framework is involved, which keeps runs bit-for-bit
//! reproducible from a seed: parameter init, batch order, dropout masks, and
//! checkpoint round-trips are all deterministic.
//!
//! Module map:
//!
//! * [`numerics`]: tensors, the autodiff tape, Glorot init, Adam, the
//!   warmup/cosine learning-rate schedule, and a finite-difference checker.
//! * [`embeddings`]: token embedding table, tokenizer, phrase pooling, and
//!   the LSTM question encoder.
//! * [`graphs`]: modal graph types, the three builders, and instance I/O.
//! * [`retrieval`]: fact scoring against question plus detection labels,
//!   top-N retention, and the relation-prediction head.
//! * [`selection`]: question-guided intra-modal node/edge attention.
//! * [`reasoning`]: the recurrent graph-memory walker.
//! * [`assessment`]: gated fusion, global assessment, answer scoring, and
//!   the weighted binary cross-entropy loss.
//! * [`model`]: parameter-set construction and the end-to-end forward pass.
//! * [`harness`]: training/evaluation loops, the synthetic benchmark
//!   generator, and sweeps.
//! * [`checkpoint`] / [`manifest`]: versioned binary snapshots and run
//!   manifests.

pub mod assessment;
pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod graphs;
pub mod harness;
pub mod manifest;
pub mod model;
pub mod numerics;
pub mod reasoning;
pub mod retrieval;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
