use crate::trace::TokenExpertMatrix;
use crate::{argmax, ClusterId, Result};

use super::TokenDeviceTable;

/// Row-normalized activation counts, `probs[j][k] = Pr(expert k | token j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenExpertConfidence {
    pub layer: usize,
    pub n_experts: usize,
    pub token_ids: Vec<u32>,
    pub probs: Vec<f64>,
    /// False for zero-frequency rows, which stay all-zero.
    pub seen: Vec<bool>,
}

impl TokenExpertConfidence {
    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.probs[j * self.n_experts..(j + 1) * self.n_experts]
    }

    pub fn row_of(&self, token: u32) -> Option<usize> {
        self.token_ids.binary_search(&token).ok()
    }

    /// The `k` most probable experts of row `j`, ties to the lower index.
    pub fn top_k(&self, j: usize, k: usize) -> Vec<usize> {
        let row = self.row(j);
        let mut idx: Vec<usize> = (0..self.n_experts).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

pub fn build_confidence_table(matrix: &TokenExpertMatrix) -> TokenExpertConfidence {
    let n = matrix.n_experts;
    let mut probs = Vec::with_capacity(matrix.counts.len());
    let mut seen = Vec::with_capacity(matrix.n_tokens());
    for j in 0..matrix.n_tokens() {
        let row = matrix.row(j);
        let sum: u64 = row.iter().map(|&c| c as u64).sum();
        if sum == 0 {
            probs.extend(std::iter::repeat_n(0.0, n));
            seen.push(false);
        } else {
            probs.extend(row.iter().map(|&c| c as f64 / sum as f64));
            seen.push(true);
        }
    }
    TokenExpertConfidence {
        layer: matrix.layer,
        n_experts: n,
        token_ids: matrix.token_ids.clone(),
        probs,
        seen,
    }
}

/// Token table for a fixed expert layout: each profiled token goes to the
/// cluster holding most of its predicted expert mass, with that mass as
/// confidence. Unprofiled tokens keep the fallback rule.
pub fn token_table_for_layout(
    confidence: &TokenExpertConfidence,
    expert_to_cluster: &[ClusterId],
    n_clusters: usize,
    vocab: usize,
) -> Result<TokenDeviceTable> {
    let mut entries = Vec::with_capacity(confidence.n_tokens());
    let mut mass = vec![0.0f64; n_clusters];
    for j in 0..confidence.n_tokens() {
        if !confidence.seen[j] {
            continue;
        }
        mass.iter_mut().for_each(|m| *m = 0.0);
        for (k, &p) in confidence.row(j).iter().enumerate() {
            mass[expert_to_cluster[k] as usize] += p;
        }
        let c = argmax(&mass).unwrap_or(0);
        entries.push((confidence.token_ids[j], c as ClusterId, mass[c] as f32));
    }
    TokenDeviceTable::from_profiled(vocab, n_clusters, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<(u32, Vec<u32>)>) -> TokenExpertMatrix {
        let n = rows[0].1.len();
        TokenExpertMatrix::from_rows(0, n, rows).unwrap()
    }

    #[test]
    fn normalizes_rows() {
        let c = build_confidence_table(&matrix(vec![(0, vec![2, 0, 2]), (1, vec![0, 7, 0])]));
        assert_eq!(c.row(0), &[0.5, 0.0, 0.5]);
        assert_eq!(c.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_rows_stay_unseen() {
        let c = build_confidence_table(&matrix(vec![(0, vec![0, 0]), (4, vec![1, 3])]));
        assert!(!c.seen[0]);
        assert_eq!(c.row(0), &[0.0, 0.0]);
        assert_eq!(c.row(1), &[0.25, 0.75]);
    }

    #[test]
    fn top_k_breaks_ties_low() {
        let c = build_confidence_table(&matrix(vec![(0, vec![3, 5, 5, 1])]));
        assert_eq!(c.top_k(0, 2), vec![1, 2]);
        assert_eq!(c.top_k(0, 3), vec![1, 2, 0]);
    }

    #[test]
    fn layout_table_follows_cluster_mass() {
        let c = build_confidence_table(&matrix(vec![(2, vec![1, 1, 6, 0])]));
        let t = token_table_for_layout(&c, &[0, 0, 1, 1], 2, 4).unwrap();
        assert_eq!(t.labels[2], 1);
        assert!((t.confidence[2] - 0.75).abs() < 1e-6);
        assert_eq!(t.labels[3], 1); // fallback 3 mod 2
    }
}
