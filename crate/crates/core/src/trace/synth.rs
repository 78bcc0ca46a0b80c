//! Planted bi-clustered activation profiles.
//!
//! Tokens are split into `E` clusters and, per layer, experts into `E`
//! blocks of `N / E`. Every routing slot of a token picks its own block with
//! probability `1 - noise`, otherwise a uniformly random other block, then a
//! uniformly random not-yet-chosen expert inside the chosen block.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingTable, Request, RequestTrace, TokenExpertMatrix};
use crate::{ClusterId, Error, Result, Topology};

#[derive(Debug, Clone)]
pub struct PlantedConfig {
    pub topology: Topology,
    /// Probability that a routing slot leaves the token's own block.
    pub noise: f64,
    pub tokens_per_cluster: usize,
    pub requests: usize,
    pub request_len: usize,
    /// Cluster-pure requests (request `r` draws only from cluster `r mod E`)
    /// instead of uniformly mixed ones.
    pub pure_requests: bool,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl PlantedConfig {
    pub fn new(topology: Topology, noise: f64, tokens_per_cluster: usize, seed: u64) -> Self {
        Self {
            topology,
            noise,
            tokens_per_cluster,
            requests: 64,
            request_len: 32,
            pure_requests: false,
            embedding_dim: 16,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedProfile {
    pub matrices: Vec<TokenExpertMatrix>,
    pub trace: RequestTrace,
    /// Planted cluster of every vocabulary token. Tokens outside the planted
    /// set get a cluster too, used only to place their embeddings.
    pub token_labels: Vec<ClusterId>,
    /// Planted token ids, `tokens_per_cluster * E` of them.
    pub planted_tokens: Vec<u32>,
    /// Per layer, the block of every expert.
    pub expert_labels: Vec<Vec<ClusterId>>,
    /// Cluster of every request.
    pub request_labels: Vec<ClusterId>,
    pub embeddings: EmbeddingTable,
}

pub fn synthesize_planted_profile(cfg: &PlantedConfig) -> Result<PlantedProfile> {
    let topo = &cfg.topology;
    topo.validate()?;
    let e = topo.clusters;
    let n = topo.experts;
    let block = topo.experts_per_cluster();
    let m = cfg.tokens_per_cluster;
    if !(0.0..1.0).contains(&cfg.noise) {
        return Err(Error::InvalidConfig(format!("noise {} outside [0, 1)", cfg.noise)));
    }
    if m == 0 || m * e > topo.vocab {
        return Err(Error::InvalidConfig(format!(
            "{m} tokens per cluster x {e} clusters does not fit vocabulary {}",
            topo.vocab
        )));
    }
    if topo.top_k > block {
        return Err(Error::InvalidConfig(format!(
            "k = {} exceeds block size N/E = {block}",
            topo.top_k
        )));
    }
    if cfg.noise > 0.0 && e < 2 {
        return Err(Error::InvalidConfig("noise needs at least two clusters".into()));
    }
    if cfg.pure_requests && !cfg.requests.is_multiple_of(e) {
        return Err(Error::InvalidConfig(format!(
            "pure requests need a request count divisible by E = {e}"
        )));
    }
    if cfg.embedding_dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut ids: Vec<u32> = (0..topo.vocab as u32).collect();
    ids.shuffle(&mut rng);
    let mut token_labels = vec![0 as ClusterId; topo.vocab];
    let mut members: Vec<Vec<u32>> = vec![Vec::with_capacity(m); e];
    for (i, &tok) in ids.iter().enumerate() {
        let c = if i < m * e { i / m } else { rng.gen_range(0..e) };
        token_labels[tok as usize] = c as ClusterId;
        if i < m * e {
            members[c].push(tok);
        }
    }
    let mut planted_tokens: Vec<u32> = ids[..m * e].to_vec();
    planted_tokens.sort_unstable();

    let mut expert_labels = Vec::with_capacity(topo.layers);
    let mut blocks: Vec<Vec<Vec<u16>>> = Vec::with_capacity(topo.layers);
    for _ in 0..topo.layers {
        let mut perm: Vec<u16> = (0..n as u16).collect();
        perm.shuffle(&mut rng);
        let mut labels = vec![0 as ClusterId; n];
        let layer_blocks: Vec<Vec<u16>> = perm.chunks(block).map(<[u16]>::to_vec).collect();
        for (c, b) in layer_blocks.iter().enumerate() {
            for &x in b {
                labels[x as usize] = c as ClusterId;
            }
        }
        expert_labels.push(labels);
        blocks.push(layer_blocks);
    }

    // Cluster of every occurrence, equal across clusters (±1).
    let total = cfg.requests * cfg.request_len;
    let mut per_cluster_seen = vec![0usize; e];
    let mut trace = RequestTrace::new(topo.layers, n, topo.top_k, topo.vocab);
    let mut request_labels = Vec::with_capacity(cfg.requests);
    let mut occurrence = 0usize;
    for r in 0..cfg.requests {
        let req_cluster = r % e;
        request_labels.push(req_cluster as ClusterId);
        let mut clusters: Vec<usize> = (0..cfg.request_len)
            .map(|_| {
                let c = if cfg.pure_requests { req_cluster } else { occurrence % e };
                occurrence += 1;
                c
            })
            .collect();
        clusters.shuffle(&mut rng);
        let mut tokens = Vec::with_capacity(cfg.request_len);
        let mut routes = Vec::with_capacity(cfg.request_len * topo.layers * topo.top_k);
        for &c in &clusters {
            let seen = per_cluster_seen[c];
            per_cluster_seen[c] += 1;
            let tok = if seen < m {
                members[c][seen]
            } else {
                members[c][rng.gen_range(0..m)]
            };
            tokens.push(tok);
            for layer_blocks in &blocks {
                let mut chosen: Vec<u16> = Vec::with_capacity(topo.top_k);
                for _ in 0..topo.top_k {
                    let b = if e == 1 || rng.gen::<f64>() >= cfg.noise {
                        c
                    } else {
                        let other = rng.gen_range(0..e - 1);
                        if other >= c {
                            other + 1
                        } else {
                            other
                        }
                    };
                    let free: Vec<u16> = layer_blocks[b]
                        .iter()
                        .copied()
                        .filter(|x| !chosen.contains(x))
                        .collect();
                    chosen.push(free[rng.gen_range(0..free.len())]);
                }
                routes.extend_from_slice(&chosen);
            }
        }
        trace.requests.push(Request { id: r as u64, tokens, routes });
    }
    debug_assert_eq!(occurrence, total);

    // Embeddings: cluster centroid plus small isotropic noise.
    let dim = cfg.embedding_dim;
    let centroids: Vec<Vec<f32>> = (0..e)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    let mut vectors = Vec::with_capacity(topo.vocab * dim);
    for tok in 0..topo.vocab {
        let c = &centroids[token_labels[tok] as usize];
        vectors.extend(c.iter().map(|&x| x + rng.gen_range(-0.1f32..0.1)));
    }
    let embeddings = EmbeddingTable::new(dim, vectors)?;

    let matrices = trace.layer_matrices()?;
    Ok(PlantedProfile {
        matrices,
        trace,
        token_labels,
        planted_tokens,
        expert_labels,
        request_labels,
        embeddings,
    })
}
