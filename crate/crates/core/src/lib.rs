//! Model-data co-scheduling for expert-parallel mixture-of-experts inference.
//!
//! The crate is organized along the offline/online split of the system:
//!
//! - [`trace`]: activation profiles (per-layer token-expert count matrices,
//!   routed request traces, token embeddings), JSONL ingestion and a planted
//!   synthetic generator.
//! - [`predictor`]: token-to-expert confidence tables, OOV extrapolation by
//!   embedding cosine similarity, the inter-layer device n-gram model and
//!   predictor evaluation.
//! - [`solver`]: the balanced token-expert co-clustering objective, the
//!   cross-entropy solver, the alternating request/expert optimizer, an
//!   exhaustive oracle and two baselines.
//! - [`scheduler`]: lookup bundles and the online operations that consume
//!   them (token re-batching, request scheduling, transparent expert shuffle).
//! - [`comm`]: analytic collective volumes and an event-counting replay of
//!   token movement under a given layout.
//! - [`plan`]: per-layer solving and bundle assembly tying the above together.

pub mod comm;
pub mod error;
pub mod plan;
pub mod predictor;
pub mod scheduler;
pub mod solver;
pub mod tables;
pub mod topology;
pub mod trace;

pub use error::{Error, Result};
pub use topology::Topology;

/// Cluster / device label. Serialized tables store these as 16-bit integers.
pub type ClusterId = u16;

/// Index of the maximum element; ties resolve to the lowest index.
/// Returns `None` for an empty slice.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) if v > values[b] => best = Some(i),
            _ => {}
        }
    }
    best
}
