use serde::Serialize;

use super::Assignment;
use crate::trace::{RequestTrace, TokenExpertMatrix};
use crate::{ClusterId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutMetrics {
    /// Local activation ratio: events whose token and expert share a cluster.
    pub lar: f64,
    /// Max over median of the per-cluster expert-side loads.
    pub imbalance: f64,
    pub local_events: u64,
    pub total_events: u64,
    /// Activation events landing on the experts of each cluster.
    pub cluster_loads: Vec<u64>,
}

impl LayoutMetrics {
    fn from_counts(local: u64, loads: Vec<u64>) -> Result<Self> {
        let total: u64 = loads.iter().sum();
        if total == 0 {
            return Err(Error::EmptyInput("no activation events to score".into()));
        }
        Ok(Self {
            lar: local as f64 / total as f64,
            imbalance: imbalance(&loads),
            local_events: local,
            total_events: total,
            cluster_loads: loads,
        })
    }
}

/// `max / median`; the median of an even count is the mean of the two
/// middle values. Infinite when the median is zero but the maximum is not.
pub fn imbalance(loads: &[u64]) -> f64 {
    if loads.is_empty() {
        return f64::NAN;
    }
    let mut s = loads.to_vec();
    s.sort_unstable();
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] as f64 } else { (s[n / 2 - 1] + s[n / 2]) as f64 / 2.0 };
    let max = s[n - 1] as f64;
    if median == 0.0 {
        if max == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        max / median
    }
}

pub fn metrics_on_matrix(assign: &Assignment, matrix: &TokenExpertMatrix) -> Result<LayoutMetrics> {
    if assign.token_labels.len() != matrix.n_tokens() || assign.expert_labels.len() != matrix.n_experts {
        return Err(Error::DimensionMismatch("assignment does not match the matrix".into()));
    }
    let mut loads = vec![0u64; assign.n_clusters];
    let mut local = 0u64;
    for j in 0..matrix.n_tokens() {
        let r = assign.token_labels[j];
        for (k, &c) in matrix.row(j).iter().enumerate() {
            let ce = assign.expert_labels[k];
            loads[ce as usize] += c as u64;
            if ce == r {
                local += c as u64;
            }
        }
    }
    LayoutMetrics::from_counts(local, loads)
}

/// Scores routed events of one layer of `trace`. `token_labels` is indexed
/// by vocabulary id.
pub fn metrics_on_trace(
    token_labels: &[ClusterId],
    expert_labels: &[ClusterId],
    n_clusters: usize,
    trace: &RequestTrace,
    layer: usize,
) -> Result<LayoutMetrics> {
    if !trace.is_routed() {
        return Err(Error::MissingRouting);
    }
    if layer >= trace.n_layers || expert_labels.len() != trace.n_experts || token_labels.len() < trace.vocab {
        return Err(Error::DimensionMismatch("labels do not match the trace".into()));
    }
    let mut loads = vec![0u64; n_clusters];
    let mut local = 0u64;
    for req in &trace.requests {
        for (pos, &tok) in req.tokens.iter().enumerate() {
            let r = token_labels[tok as usize];
            for &x in trace.experts(req, pos, layer) {
                let ce = expert_labels[x as usize];
                loads[ce as usize] += 1;
                if ce == r {
                    local += 1;
                }
            }
        }
    }
    LayoutMetrics::from_counts(local, loads)
}
