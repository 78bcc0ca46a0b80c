//! End-to-end table construction: one solve per layer, token tables, the
//! device n-gram and the two lookup bundles the simulator compares.

use serde::{Deserialize, Serialize};

use crate::predictor::{
    build_confidence_table, build_ngram_table, extrapolate_oov, token_table_for_layout,
};
use crate::scheduler::LookupBundle;
use crate::solver::{
    baseline_round_robin, baseline_two_stage_kmeans, check_constraints, metrics_on_matrix, objective,
    solve_alternating, solve_bruteforce, solve_ceo, vanilla_expert_layout, Assignment, ObjectiveValue,
    SolverConfig,
};
use crate::trace::{EmbeddingTable, RequestTrace, TokenExpertMatrix};
use crate::{ClusterId, Error, Result, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Ceo,
    Alternating,
    Kmeans,
    RoundRobin,
    Bruteforce,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ceo" => SolverKind::Ceo,
            "alternating" => SolverKind::Alternating,
            "kmeans" => SolverKind::Kmeans,
            "round_robin" => SolverKind::RoundRobin,
            "bruteforce" => SolverKind::Bruteforce,
            other => return Err(Error::InvalidConfig(format!("unknown solver '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub assignment: Assignment,
    pub objective: ObjectiveValue,
    /// Local activation ratio on the matrix the layer was solved for.
    pub lar: f64,
    pub imbalance: f64,
    pub constraint_violations: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Plan {
    /// Solved token tables and expert layouts.
    pub solved: LookupBundle,
    /// Token tables targeting the contiguous expert layout.
    pub vanilla: LookupBundle,
    pub layers: Vec<LayerPlan>,
}

/// Solves every layer matrix with `solver` and assembles both bundles.
///
/// `train` supplies request structure for the alternating solver and the
/// device sequences for the n-gram (skipped when `ngram_n == 0`, when the
/// trace is unrouted, or when `L <= n`). Non-profiled tokens are filled
/// from `embeddings` when given.
pub fn build_plan(
    matrices: &[TokenExpertMatrix],
    train: &RequestTrace,
    topology: &Topology,
    solver: SolverKind,
    config: &SolverConfig,
    ngram_n: usize,
    embeddings: Option<&EmbeddingTable>,
) -> Result<Plan> {
    topology.validate()?;
    if matrices.len() != topology.layers {
        return Err(Error::DimensionMismatch(format!(
            "{} layer matrices for L = {}",
            matrices.len(),
            topology.layers
        )));
    }
    let e = topology.clusters;
    let vocab = topology.vocab;
    let vanilla_layout = vanilla_expert_layout(topology.experts, e);
    let mut layers = Vec::with_capacity(matrices.len());
    let mut solved_tables = Vec::with_capacity(matrices.len());
    let mut vanilla_tables = Vec::with_capacity(matrices.len());

    for (layer, matrix) in matrices.iter().enumerate() {
        if matrix.n_experts != topology.experts {
            return Err(Error::DimensionMismatch(format!(
                "layer {layer} has {} experts, topology {}",
                matrix.n_experts, topology.experts
            )));
        }
        let cfg = SolverConfig { seed: config.seed.wrapping_add(layer as u64), ..config.clone() };
        let (assignment, confidence) = match solver {
            SolverKind::Ceo => {
                let out = solve_ceo(matrix, e, &cfg)?;
                (out.assignment, out.token_confidence)
            }
            SolverKind::Alternating => {
                let out = solve_alternating(matrix, train, e, &cfg)?;
                (out.assignment, out.token_confidence)
            }
            SolverKind::Kmeans => {
                let a = baseline_two_stage_kmeans(matrix, topology, cfg.beta, cfg.seed)?;
                let c = mass_share(matrix, &a);
                (a, c)
            }
            SolverKind::RoundRobin => {
                let a = baseline_round_robin(topology, &matrix.token_ids)?;
                let c = vec![1.0 / e as f64; matrix.n_tokens()];
                (a, c)
            }
            SolverKind::Bruteforce => {
                let (a, _) = solve_bruteforce(matrix, topology, cfg.theta)?;
                let c = mass_share(matrix, &a);
                (a, c)
            }
        };
        let report = check_constraints(&assignment, topology)?;
        let obj = objective(&assignment, matrix, config.theta)?;
        let (lar, imbalance) = match metrics_on_matrix(&assignment, matrix) {
            Ok(m) => (m.lar, m.imbalance),
            Err(_) => (1.0, 1.0),
        };

        let profiled = matrix.token_ids.clone();
        let mut solved = assignment.token_table(matrix, &confidence, vocab)?;
        let mut vanilla = token_table_for_layout(&build_confidence_table(matrix), &vanilla_layout, e, vocab)?;
        if let (Some(emb), false) = (embeddings, profiled.is_empty()) {
            solved = extrapolate_oov(&solved, emb, &profiled)?;
            vanilla = extrapolate_oov(&vanilla, emb, &profiled)?;
        }
        solved_tables.push(solved);
        vanilla_tables.push(vanilla);
        layers.push(LayerPlan {
            layer,
            objective: obj,
            lar,
            imbalance,
            constraint_violations: report.violations,
            assignment,
        });
    }

    let solved_layouts: Vec<Vec<ClusterId>> = layers.iter().map(|l| l.assignment.expert_labels.clone()).collect();
    let vanilla_layouts = vec![vanilla_layout; matrices.len()];
    let use_ngram = ngram_n > 0
        && ngram_n < topology.layers
        && train.is_routed()
        && train.requests.iter().any(|r| !r.tokens.is_empty());
    let (solved_ngram, vanilla_ngram) = if use_ngram {
        (
            Some(build_ngram_table(train, &solved_layouts, e, ngram_n)?),
            Some(build_ngram_table(train, &vanilla_layouts, e, ngram_n)?),
        )
    } else {
        (None, None)
    };
    Ok(Plan {
        solved: LookupBundle::from_layers(&solved_tables, &solved_layouts, solved_ngram.as_ref())?,
        vanilla: LookupBundle::from_layers(&vanilla_tables, &vanilla_layouts, vanilla_ngram.as_ref())?,
        layers,
    })
}

/// Share of each token's activation mass on the experts of its own cluster.
fn mass_share(matrix: &TokenExpertMatrix, a: &Assignment) -> Vec<f64> {
    (0..matrix.n_tokens())
        .map(|j| {
            let own: u64 = matrix
                .row(j)
                .iter()
                .zip(&a.expert_labels)
                .filter(|(_, &c)| c == a.token_labels[j])
                .map(|(&v, _)| v as u64)
                .sum();
            if matrix.freq[j] == 0 {
                0.0
            } else {
                own as f64 / matrix.freq[j] as f64
            }
        })
        .collect()
}
