use crate::{ClusterId, Error, Result};

/// Physical slot order of experts: slot `s` holds original expert
/// `expert_perm[s]`, and the experts of cluster `i` fill slots
/// `[i * N/E, (i + 1) * N/E)` in their original relative order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatePermutation {
    pub expert_perm: Vec<usize>,
}

impl GatePermutation {
    pub fn from_table(table: &[ClusterId], n_clusters: usize) -> Result<Self> {
        let n = table.len();
        if n_clusters == 0 || !n.is_multiple_of(n_clusters) {
            return Err(Error::InvalidTopology(format!("{n} experts do not split into {n_clusters} clusters")));
        }
        let mut fill = vec![0usize; n_clusters];
        for &c in table {
            let c = c as usize;
            if c >= n_clusters {
                return Err(Error::InvalidConfig(format!("expert label {c} outside [0, {n_clusters})")));
            }
            fill[c] += 1;
        }
        if fill.iter().any(|&f| f != n / n_clusters) {
            return Err(Error::InvalidConfig(format!("cluster sizes {fill:?} are not {} each", n / n_clusters)));
        }
        let mut expert_perm: Vec<usize> = (0..n).collect();
        expert_perm.sort_by_key(|&j| table[j]);
        Ok(Self { expert_perm })
    }

    /// `inverse()[expert]` is the slot of `expert`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.expert_perm.len()];
        for (slot, &j) in self.expert_perm.iter().enumerate() {
            inv[j] = slot;
        }
        inv
    }

    pub fn permute<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.expert_perm.iter().map(|&j| items[j].clone()).collect()
    }
}

/// Reorders expert payloads and gate columns cluster-contiguously with the
/// same permutation, so top-k over the permuted logits picks the same
/// original experts.
pub fn apply_expert_shuffle<W: Clone, C: Clone>(
    weights: &[W],
    gate_columns: &[C],
    table: &[ClusterId],
    n_clusters: usize,
) -> Result<(Vec<W>, Vec<C>, GatePermutation)> {
    if weights.len() != table.len() || gate_columns.len() != table.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} payloads / {} gate columns for {} experts",
            weights.len(),
            gate_columns.len(),
            table.len()
        )));
    }
    let perm = GatePermutation::from_table(table, n_clusters)?;
    Ok((perm.permute(weights), perm.permute(gate_columns), perm))
}

/// Indices of the `k` largest values, largest first; ties to the lower
/// index.
pub fn top_k_indices(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
