//! Run-time use of the solved tables: token re-batching, request
//! scheduling and the expert/gate permutation.

mod bundle;
mod dp;
mod expert_shuffle;
mod rebatch;

pub use bundle::{bundle_memory_bytes, BundleShape, LookupBundle, MemoryReport, NGramLookup};
pub use dp::{schedule_request_dp, RequestScheduler};
pub use expert_shuffle::{apply_expert_shuffle, top_k_indices, GatePermutation};
pub use rebatch::{lookup_device, rebatch_tokens, resume_tokens, ShuffleIndices, PAD_TOKEN};
