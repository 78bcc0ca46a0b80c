//! Shared fixtures for the criterion benches.

use cosched::trace::{synthesize_planted_profile, PlantedConfig, PlantedProfile};
use cosched::Topology;

/// Planted profile with `E = G = devices`, one layer unless stated.
pub fn planted(devices: usize, experts: usize, top_k: usize, layers: usize, tokens_per_cluster: usize, noise: f64) -> PlantedProfile {
    let vocab = tokens_per_cluster * devices * 2;
    let topo = Topology::new(devices, experts, top_k, layers, vocab);
    let cfg = PlantedConfig::new(topo, noise, tokens_per_cluster, 7);
    synthesize_planted_profile(&cfg).expect("valid planted config")
}
