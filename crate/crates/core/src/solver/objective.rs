use serde::Serialize;

use super::Assignment;
use crate::trace::TokenExpertMatrix;
use crate::{Error, Result, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveValue {
    /// Load-balance deviation `sum_i |load_i - S/E|`, in token occurrences.
    pub l1: f64,
    /// Activation mass between tokens and experts of different clusters.
    pub l2: f64,
    pub combined: f64,
}

impl ObjectiveValue {
    pub fn new(l1: f64, l2: f64, theta: f64) -> Self {
        Self { l1, l2, combined: theta * l1 + (1.0 - theta) * l2 }
    }
}

pub fn objective(assign: &Assignment, matrix: &TokenExpertMatrix, theta: f64) -> Result<ObjectiveValue> {
    let e = assign.n_clusters;
    if assign.token_labels.len() != matrix.n_tokens() || assign.expert_labels.len() != matrix.n_experts {
        return Err(Error::DimensionMismatch(format!(
            "assignment has {} tokens / {} experts, matrix {} / {}",
            assign.token_labels.len(),
            assign.expert_labels.len(),
            matrix.n_tokens(),
            matrix.n_experts
        )));
    }
    if assign.token_labels.iter().chain(&assign.expert_labels).any(|&l| l as usize >= e) {
        return Err(Error::DimensionMismatch(format!("label outside [0, {e})")));
    }
    let mut loads = vec![0u64; e];
    let mut local = 0u64;
    for j in 0..matrix.n_tokens() {
        let r = assign.token_labels[j];
        loads[r as usize] += matrix.freq[j];
        for (k, &c) in matrix.row(j).iter().enumerate() {
            if assign.expert_labels[k] == r {
                local += c as u64;
            }
        }
    }
    let share = matrix.total as f64 / e as f64;
    let l1 = loads.iter().map(|&l| (l as f64 - share).abs()).sum();
    let l2 = (matrix.total - local) as f64;
    Ok(ObjectiveValue::new(l1, l2, theta))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConstraintReport {
    pub violations: Vec<String>,
}

impl ConstraintReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies label ranges and exactly `N / E` experts per cluster. A
/// topology where `E` does not divide `N` is a configuration error.
pub fn check_constraints(assign: &Assignment, topology: &Topology) -> Result<ConstraintReport> {
    topology.validate()?;
    let e = topology.clusters;
    let mut report = ConstraintReport::default();
    if assign.n_clusters != e {
        report
            .violations
            .push(format!("assignment has {} clusters, topology {e}", assign.n_clusters));
    }
    if assign.expert_labels.len() != topology.experts {
        report.violations.push(format!(
            "{} expert labels for N = {}",
            assign.expert_labels.len(),
            topology.experts
        ));
    }
    for (j, &l) in assign.token_labels.iter().enumerate() {
        if l as usize >= e {
            report.violations.push(format!("token {j} label {l} outside [0, {e})"));
        }
    }
    let mut sizes = vec![0usize; e];
    for (k, &l) in assign.expert_labels.iter().enumerate() {
        if l as usize >= e {
            report.violations.push(format!("expert {k} label {l} outside [0, {e})"));
        } else {
            sizes[l as usize] += 1;
        }
    }
    let cap = topology.experts_per_cluster();
    for (c, &s) in sizes.iter().enumerate() {
        if s != cap {
            report.violations.push(format!("cluster {c} hosts {s} experts, expected {cap}"));
        }
    }
    Ok(report)
}
