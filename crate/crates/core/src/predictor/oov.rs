use rayon::prelude::*;

use super::{Provenance, TokenDeviceTable};
use crate::trace::EmbeddingTable;
use crate::{ClusterId, Error, Result};

/// Fills every non-profiled token from its nearest profiled neighbour by
/// cosine similarity (ties to the lower token id). Tokens with a zero-norm
/// embedding, or with no usable profiled neighbour, fall back to
/// `token mod E` at confidence `1/E`.
pub fn extrapolate_oov(
    table: &TokenDeviceTable,
    embeddings: &EmbeddingTable,
    profiled: &[u32],
) -> Result<TokenDeviceTable> {
    if profiled.is_empty() {
        return Err(Error::EmptyInput("no profiled tokens to extrapolate from".into()));
    }
    let vocab = table.vocab();
    if embeddings.vocab() < vocab {
        return Err(Error::DimensionMismatch(format!(
            "embeddings cover {} tokens, table has {vocab}",
            embeddings.vocab()
        )));
    }
    let mut anchors: Vec<u32> = profiled.to_vec();
    anchors.sort_unstable();
    anchors.dedup();
    if let Some(&t) = anchors.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::DimensionMismatch(format!("profiled token {t} outside vocabulary")));
    }
    let dim = embeddings.dim;
    let unit = |t: usize| -> Vec<f64> {
        let norm = embeddings.norm(t);
        embeddings.vector(t).iter().map(|&x| x as f64 / norm).collect()
    };
    // (token id, unit vector), ascending id, zero-norm anchors excluded.
    let anchor_units: Vec<(u32, Vec<f64>)> = anchors
        .iter()
        .filter(|&&t| !embeddings.is_zero(t as usize))
        .map(|&t| (t, unit(t as usize)))
        .collect();

    let e = table.n_clusters.max(1);
    let filled: Vec<(ClusterId, f32, Provenance)> = (0..vocab)
        .into_par_iter()
        .map(|tok| {
            if anchors.binary_search(&(tok as u32)).is_ok() {
                return (table.labels[tok], table.confidence[tok], Provenance::Profiled);
            }
            let fallback = ((tok % e) as ClusterId, 1.0 / e as f32, Provenance::Fallback);
            if embeddings.is_zero(tok) || anchor_units.is_empty() {
                return fallback;
            }
            let q = unit(tok);
            let mut best: Option<(f64, u32)> = None;
            for (id, v) in &anchor_units {
                let sim: f64 = (0..dim).map(|i| q[i] * v[i]).sum();
                if best.is_none_or(|(b, _)| sim > b) {
                    best = Some((sim, *id));
                }
            }
            let (_, src) = best.expect("non-empty anchors");
            let s = src as usize;
            (table.labels[s], table.confidence[s], Provenance::Extrapolated)
        })
        .collect();

    let mut out = table.clone();
    for (tok, (label, conf, prov)) in filled.into_iter().enumerate() {
        out.labels[tok] = label;
        out.confidence[tok] = conf;
        out.provenance[tok] = prov;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[[f32; 3]]) -> EmbeddingTable {
        EmbeddingTable::new(3, rows.iter().flatten().copied().collect()).unwrap()
    }

    fn base() -> TokenDeviceTable {
        // profiled: 0 -> 1, 1 -> 0, 2 -> 1
        TokenDeviceTable::from_profiled(6, 2, [(0, 1, 0.9), (1, 0, 0.8), (2, 1, 0.7)]).unwrap()
    }

    #[test]
    fn identical_embedding_copies_label() {
        let mut t = TokenDeviceTable::fallback(8, 3);
        t.labels[7] = 2;
        t.confidence[7] = 0.6;
        t.provenance[7] = Provenance::Profiled;
        let mut rows = [[0.0, 1.0, 0.0]; 8];
        rows[7] = [0.3, -0.2, 0.9];
        rows[3] = [0.3, -0.2, 0.9];
        let out = extrapolate_oov(&t, &emb(&rows), &[7]).unwrap();
        assert_eq!(out.labels[3], 2);
        assert_eq!(out.confidence[3], 0.6);
        assert_eq!(out.provenance[3], Provenance::Extrapolated);
    }

    #[test]
    fn zero_norm_falls_back() {
        let rows = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
        ];
        let out = extrapolate_oov(&base(), &emb(&rows), &[0, 1, 2]).unwrap();
        assert_eq!(out.provenance[3], Provenance::Fallback);
        assert_eq!(out.labels[3], 1);
        assert_eq!(out.confidence[3], 0.5);
        // 45 degrees between axes 0 and 1: tie resolves to token 0.
        assert_eq!(out.provenance[4], Provenance::Extrapolated);
        assert_eq!(out.labels[4], 1);
        assert_eq!(out.confidence[4], 0.9);
    }

    #[test]
    fn idempotent() {
        let rows = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.2, 0.1, 0.9],
            [1.0, 1.0, 0.0],
            [0.0, 0.0, 0.0],
        ];
        let e = emb(&rows);
        let once = extrapolate_oov(&base(), &e, &[0, 1, 2]).unwrap();
        let twice = extrapolate_oov(&once, &e, &[0, 1, 2]).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.labels[3], 1);
    }

    #[test]
    fn empty_profiled_set_is_an_error() {
        let rows = [[1.0, 0.0, 0.0]; 6];
        assert!(matches!(extrapolate_oov(&base(), &emb(&rows), &[]), Err(Error::EmptyInput(_))));
    }
}
