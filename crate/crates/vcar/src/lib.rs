//! Two-step adapter training on a toy multimodal decoder.
//!
//! The crate trains two independent low-rank adapter sets on a small
//! decoder-only transformer that consumes a grid scene as prefix
//! embeddings: one set for visual-description generation, one for
//! description-assisted rationale generation. A synthetic multimodal-math
//! benchmark with controllable text/visual information placement provides
//! the data, a scripted teacher (local or behind a small wire protocol)
//! provides supervision, and the harness runs the full mode matrix with
//! reproducible seeds.

pub mod adapters;
pub mod harness;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod taskgen;
pub mod teacher;
pub mod trainer;
