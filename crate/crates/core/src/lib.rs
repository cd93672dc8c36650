//! Core engine for turning a tour video's per-chunk object observations into
//! a persistent spatiotemporal knowledge graph, answering natural-language
//! navigation queries over it, and scoring the results on a frame-retrieval
//! benchmark.
//!
//! Module map:
//!
//! - [`graph`] — knowledge-graph domain types and pure graph operations
//! - [`extract`] — frame chunking and per-chunk graph extraction prompts
//! - [`assoc`] — spatiotemporal object association (chunk-to-graph merging)
//! - [`store`] — file-backed graph persistence and criteria-based subgraph
//!   retrieval
//! - [`query`] — decompose / retrieve / reason / localize query pipeline
//!   with three modes (retrieval, full graph, chunk-wise)
//! - [`backend`] — model backend abstraction: a remote HTTP provider client
//!   and a deterministic mock for tests
//! - [`bench`] — benchmark loading, retrieval metrics, and a synthetic
//!   benchmark generator
//!
//! All model inference is behind [`backend::Backend`], so the full pipeline
//! runs deterministically with the mock backend.

pub mod assoc;
pub mod backend;
pub mod bench;
pub mod error;
pub mod extract;
pub mod graph;
pub mod query;
pub mod store;
pub mod text;

pub use error::{Error, Result};
pub use graph::{
    BoundingBox, ChunkGraph, FrameRef, GraphMeta, KnowledgeGraph, MergePolicy, ObjectDescriptor,
    SizeClass, SpatialRelation,
};
