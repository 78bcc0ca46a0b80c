//! Balanced token-expert co-clustering.
//!
//! Tokens and experts are partitioned into `E` clusters so that activations
//! stay inside a cluster, every cluster hosts exactly `N / E` experts, and
//! token frequency is spread evenly over clusters.

mod alternating;
mod baselines;
mod bruteforce;
mod ceo;
mod metrics;
mod objective;

pub use alternating::{solve_alternating, AlternatingOutcome};
pub use baselines::{baseline_round_robin, baseline_two_stage_kmeans, vanilla_expert_layout};
pub use bruteforce::{solve_bruteforce, BRUTEFORCE_LIMIT};
pub use ceo::{sample_labels, solve_ceo, CeoOutcome, SampleKind};
pub use metrics::{imbalance, metrics_on_matrix, metrics_on_trace, LayoutMetrics};
pub use objective::{check_constraints, objective, ConstraintReport, ObjectiveValue};

use serde::{Deserialize, Serialize};

use crate::predictor::TokenDeviceTable;
use crate::tables::{Table, TableData};
use crate::trace::TokenExpertMatrix;
use crate::{ClusterId, Error, Result};

/// Token and expert cluster labels. `token_labels[j]` belongs to row `j` of
/// the matrix the assignment was solved for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub n_clusters: usize,
    pub token_labels: Vec<ClusterId>,
    pub expert_labels: Vec<ClusterId>,
}

impl Assignment {
    /// Vocabulary-wide token table: profiled rows carry their label and the
    /// given confidence, everything else the fallback rule.
    pub fn token_table(
        &self,
        matrix: &TokenExpertMatrix,
        confidence: &[f64],
        vocab: usize,
    ) -> Result<TokenDeviceTable> {
        if self.token_labels.len() != matrix.n_tokens() || confidence.len() != matrix.n_tokens() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels / {} confidences for {} tokens",
                self.token_labels.len(),
                confidence.len(),
                matrix.n_tokens()
            )));
        }
        TokenDeviceTable::from_profiled(
            vocab,
            self.n_clusters,
            matrix
                .token_ids
                .iter()
                .zip(&self.token_labels)
                .zip(confidence)
                .map(|((&t, &l), &c)| (t, l, c as f32)),
        )
    }

    /// Renames clusters through `perm` (old label -> new label).
    pub fn relabel(&self, perm: &[ClusterId]) -> Assignment {
        Assignment {
            n_clusters: self.n_clusters,
            token_labels: self.token_labels.iter().map(|&l| perm[l as usize]).collect(),
            expert_labels: self.expert_labels.iter().map(|&l| perm[l as usize]).collect(),
        }
    }

    /// Token labels and expert labels as two single-row i16 tables.
    pub fn to_tables(&self) -> (Table, Table) {
        let row = |v: &[ClusterId]| {
            Table::new(1, v.len(), TableData::I16(v.iter().map(|&l| l as i16).collect()))
                .expect("sized")
        };
        (row(&self.token_labels), row(&self.expert_labels))
    }
}

/// Solver hyper-parameters shared by the cross-entropy and alternating
/// solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Weight of the load-balance term in `theta * L1 + (1 - theta) * L2`.
    pub theta: f64,
    pub n_steps: usize,
    /// Samples drawn per cross-entropy iteration.
    pub samples: usize,
    /// Elite fraction.
    pub rho: f64,
    /// Independent cross-entropy runs; the lowest objective wins.
    pub restarts: usize,
    /// Token load relaxation: a cluster is closed once its token frequency
    /// reaches `S / E * beta`.
    pub beta: f64,
    /// Smoothing rate of the probability-matrix update.
    pub eta: f64,
    /// Random swap proposals after each expert placement pass.
    pub ft_steps: usize,
    pub alpha_e: f64,
    pub beta_e: f64,
    pub gamma_e: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    /// Refuse to schedule fewer requests than clusters.
    pub strict_request_balance: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            theta: 0.5,
            n_steps: 100,
            samples: 128,
            rho: 0.2,
            restarts: 1,
            beta: 1.1,
            eta: 0.7,
            ft_steps: 200,
            alpha_e: 1.0,
            beta_e: 1.0,
            gamma_e: 1.0,
            alpha_r: 1.0,
            beta_r: 1.0,
            strict_request_balance: true,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta = {} outside (0, 1)", self.theta));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho = {} outside (0, 1]", self.rho));
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if self.beta.is_nan() || self.beta < 1.0 {
            return bad(format!("beta = {} below 1", self.beta));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta = {} outside (0, 1]", self.eta));
        }
        Ok(())
    }
}

/// Checks `E | N` and that the matrix is non-degenerate in shape.
fn check_feasible(matrix: &TokenExpertMatrix, n_clusters: usize) -> Result<()> {
    if n_clusters == 0 || matrix.n_experts == 0 || !matrix.n_experts.is_multiple_of(n_clusters) {
        return Err(Error::Infeasible(format!(
            "{} experts cannot be split evenly into {n_clusters} clusters",
            matrix.n_experts
        )));
    }
    if n_clusters > ClusterId::MAX as usize + 1 {
        return Err(Error::Infeasible("too many clusters for 16-bit labels".into()));
    }
    Ok(())
}

/// Sparse view of the matrix rows: `(expert, count)` for non-zero entries.
pub(crate) fn sparse_rows(matrix: &TokenExpertMatrix) -> Vec<Vec<(u32, u32)>> {
    (0..matrix.n_tokens())
        .map(|j| {
            matrix
                .row(j)
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(k, &c)| (k as u32, c))
                .collect()
        })
        .collect()
}
