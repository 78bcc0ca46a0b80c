//! Inter-layer device transition model: the devices a token visited at the
//! previous `n` layers predict its device at the current layer.

use crate::trace::RequestTrace;
use crate::{ClusterId, Error, Result};

/// Largest supported `E^n` row count.
const MAX_ROWS: usize = 1 << 24;

/// `E^n x E` transition table. Row index encodes the history
/// `(d_{l-n}, ..., d_{l-1})` in base `E`, oldest device most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceNGramTable {
    pub n: usize,
    pub n_clusters: usize,
    pub counts: Vec<u64>,
    pub probs: Vec<f64>,
    /// Row-wise argmax (ties to the lower device).
    pub best: Vec<ClusterId>,
    /// Probability of `best`; 0 for unobserved rows so the token table
    /// always wins there.
    pub confidence: Vec<f64>,
}

impl DeviceNGramTable {
    pub fn n_rows(&self) -> usize {
        self.best.len()
    }

    /// An all-unobserved table.
    pub fn empty(n_clusters: usize, n: usize) -> Result<Self> {
        let rows = row_count(n_clusters, n)?;
        Ok(Self {
            n,
            n_clusters,
            counts: vec![0; rows * n_clusters],
            probs: vec![0.0; rows * n_clusters],
            best: vec![0; rows],
            confidence: vec![0.0; rows],
        })
    }

    pub fn row_index(&self, history: &[ClusterId]) -> usize {
        history
            .iter()
            .fold(0usize, |acc, &d| acc * self.n_clusters + d as usize)
    }

    pub fn row_probs(&self, row: usize) -> &[f64] {
        &self.probs[row * self.n_clusters..(row + 1) * self.n_clusters]
    }

    pub fn observed(&self, row: usize) -> bool {
        self.counts[row * self.n_clusters..(row + 1) * self.n_clusters]
            .iter()
            .any(|&c| c > 0)
    }

    pub fn total_observations(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn finalize(&mut self) {
        let e = self.n_clusters;
        for r in 0..self.n_rows() {
            let row = &self.counts[r * e..(r + 1) * e];
            let sum: u64 = row.iter().sum();
            if sum == 0 {
                continue;
            }
            let mut best = 0;
            for d in 0..e {
                self.probs[r * e + d] = row[d] as f64 / sum as f64;
                if row[d] > row[best] {
                    best = d;
                }
            }
            self.best[r] = best as ClusterId;
            self.confidence[r] = self.probs[r * e + best];
        }
    }
}

fn row_count(n_clusters: usize, n: usize) -> Result<usize> {
    if n_clusters == 0 {
        return Err(Error::InvalidConfig("n-gram needs at least one cluster".into()));
    }
    let mut rows = 1usize;
    for _ in 0..n {
        rows = rows
            .checked_mul(n_clusters)
            .filter(|&r| r <= MAX_ROWS)
            .ok_or_else(|| Error::InvalidConfig(format!("E^n = {n_clusters}^{n} rows is too large")))?;
    }
    Ok(rows)
}

/// Counts device transitions over every token occurrence and every layer
/// `l >= n`. A token's device at a layer is the cluster of its top-1 routed
/// expert under `expert_to_cluster[l]`.
pub fn build_ngram_table(
    trace: &RequestTrace,
    expert_to_cluster: &[Vec<ClusterId>],
    n_clusters: usize,
    n: usize,
) -> Result<DeviceNGramTable> {
    if !trace.is_routed() || trace.requests.iter().all(|r| r.routes.is_empty()) {
        return Err(Error::MissingRouting);
    }
    if expert_to_cluster.len() != trace.n_layers {
        return Err(Error::DimensionMismatch(format!(
            "{} expert tables for {} layers",
            expert_to_cluster.len(),
            trace.n_layers
        )));
    }
    for (l, map) in expert_to_cluster.iter().enumerate() {
        if map.len() != trace.n_experts || map.iter().any(|&c| c as usize >= n_clusters) {
            return Err(Error::DimensionMismatch(format!(
                "layer {l}: expert table must map {} experts into [0, {n_clusters})",
                trace.n_experts
            )));
        }
    }
    let mut table = DeviceNGramTable::empty(n_clusters, n)?;
    let mut devices = vec![0 as ClusterId; trace.n_layers];
    for req in &trace.requests {
        for pos in 0..req.tokens.len() {
            for (layer, d) in devices.iter_mut().enumerate() {
                let top1 = trace.experts(req, pos, layer)[0] as usize;
                *d = expert_to_cluster[layer][top1];
            }
            for layer in n..trace.n_layers {
                let row = table.row_index(&devices[layer - n..layer]);
                table.counts[row * n_clusters + devices[layer] as usize] += 1;
            }
        }
    }
    table.finalize();
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Request;

    fn trace_from(routes: Vec<Vec<u16>>, layers: usize) -> RequestTrace {
        let mut t = RequestTrace::new(layers, 4, 1, 10);
        for (i, r) in routes.into_iter().enumerate() {
            let len = r.len() / layers;
            t.requests.push(Request { id: i as u64, tokens: vec![1; len], routes: r });
        }
        t
    }

    #[test]
    fn constant_sequence_is_one_hot() {
        let trace = trace_from(vec![vec![0, 1, 0, 1, 1, 0, 0, 1]], 4);
        // experts 0,1 -> cluster 0 in every layer
        let map = vec![vec![0, 0, 1, 1]; 4];
        let t = build_ngram_table(&trace, &map, 2, 2).unwrap();
        assert_eq!(t.n_rows(), 4);
        assert_eq!(t.row_probs(0), &[1.0, 0.0]);
        assert_eq!(t.best[0], 0);
        assert_eq!(t.confidence[0], 1.0);
        // 2 occurrences x (4 - 2) eligible layers
        assert_eq!(t.total_observations(), 4);
        assert!(!t.observed(3));
        assert_eq!(t.confidence[3], 0.0);
    }

    #[test]
    fn row_count_is_e_to_the_n() {
        let t = DeviceNGramTable::empty(4, 2).unwrap();
        assert_eq!(t.n_rows(), 16);
        assert_eq!(t.row_index(&[3, 1]), 13);
    }

    #[test]
    fn unrouted_trace_is_rejected() {
        let mut t = RequestTrace::new(2, 4, 1, 10);
        t.requests.push(Request { id: 0, tokens: vec![1], routes: vec![] });
        assert!(matches!(
            build_ngram_table(&t, &[vec![0; 4], vec![0; 4]], 2, 1),
            Err(Error::MissingRouting)
        ));
    }

    #[test]
    fn ties_pick_lower_device() {
        let trace = trace_from(vec![vec![0, 0], vec![0, 2]], 2);
        let map = vec![vec![0, 0, 1, 1]; 2];
        let t = build_ngram_table(&trace, &map, 2, 1).unwrap();
        assert_eq!(t.row_probs(0), &[0.5, 0.5]);
        assert_eq!(t.best[0], 0);
    }
}
