//! Predictor quality metrics.
//!
//! Precision, recall and F1 are micro-averaged over (token, expert)
//! activation events of the holdout:
//!
//! - every holdout occurrence of a token profiled in training predicts that
//!   token's static top-k experts, i.e. `a[j]` predicted events per row;
//! - a predicted event is correct when the occurrence really activated the
//!   predicted expert, so row `j` scores `sum over predicted e of T[j][e]`;
//! - precision = correct / predicted events;
//! - recall = correct / all holdout activation events, OOV tokens included;
//! - F1 is their harmonic mean.

use serde::Serialize;

use super::TokenExpertConfidence;
use crate::trace::TokenExpertMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictorReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted_events: u64,
    pub correct_events: u64,
    pub holdout_events: u64,
    /// Fraction of holdout events whose token was profiled in training.
    pub coverage: f64,
}

pub fn evaluate_predictor(
    confidence: &TokenExpertConfidence,
    holdout: &TokenExpertMatrix,
    k: usize,
) -> Result<PredictorReport> {
    if holdout.total == 0 {
        return Err(Error::EmptyInput("holdout has no activation events".into()));
    }
    if confidence.n_experts != holdout.n_experts || confidence.layer != holdout.layer {
        return Err(Error::DimensionMismatch(format!(
            "predictor for layer {} with N = {} evaluated on layer {} with N = {}",
            confidence.layer, confidence.n_experts, holdout.layer, holdout.n_experts
        )));
    }
    let mut predicted = 0u64;
    let mut correct = 0u64;
    for (j, &tok) in holdout.token_ids.iter().enumerate() {
        let Some(row) = confidence.row_of(tok) else {
            continue;
        };
        if !confidence.seen[row] {
            continue;
        }
        predicted += holdout.freq[j];
        correct += confidence
            .top_k(row, k)
            .into_iter()
            .map(|e| holdout.get(j, e) as u64)
            .sum::<u64>();
    }
    let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let recall = correct as f64 / holdout.total as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PredictorReport {
        precision,
        recall,
        f1,
        predicted_events: predicted,
        correct_events: correct,
        holdout_events: holdout.total,
        coverage: predicted as f64 / holdout.total as f64,
    })
}

/// Pearson (non-excess) kurtosis `E[(x - mu)^4] / sigma^4` of every token's
/// activation-count row, taken over the `N` per-expert counts. Rows with
/// zero variance report `f64::INFINITY`.
pub fn activation_kurtosis(matrix: &TokenExpertMatrix) -> Vec<f64> {
    let n = matrix.n_experts as f64;
    (0..matrix.n_tokens())
        .map(|j| {
            let row = matrix.row(j);
            let mean = row.iter().map(|&c| c as f64).sum::<f64>() / n;
            let (mut m2, mut m4) = (0.0, 0.0);
            for &c in row {
                let d = c as f64 - mean;
                let d2 = d * d;
                m2 += d2;
                m4 += d2 * d2;
            }
            m2 /= n;
            m4 /= n;
            if m2 == 0.0 {
                f64::INFINITY
            } else {
                m4 / (m2 * m2)
            }
        })
        .collect()
}

/// Distribution summary of per-token kurtosis (finite values only for the
/// quantiles).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KurtosisSummary {
    pub tokens: usize,
    pub zero_variance: usize,
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
    pub fraction_above_8: f64,
}

impl KurtosisSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        finite.sort_by(f64::total_cmp);
        let q = |p: f64| -> f64 {
            if finite.is_empty() {
                return f64::NAN;
            }
            let pos = p * (finite.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            finite[lo] + (finite[hi] - finite[lo]) * (pos - lo as f64)
        };
        let above = values.iter().filter(|&&v| v > 8.0).count();
        Self {
            tokens: values.len(),
            zero_variance: values.len() - finite.len(),
            min: q(0.0),
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            max: q(1.0),
            fraction_above_8: if values.is_empty() { 0.0 } else { above as f64 / values.len() as f64 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::build_confidence_table;

    fn m(rows: Vec<(u32, Vec<u32>)>) -> TokenExpertMatrix {
        let n = rows[0].1.len();
        TokenExpertMatrix::from_rows(0, n, rows).unwrap()
    }

    #[test]
    fn kurtosis_hand_value() {
        // mean 1/4; m2 = 3/16; m4 = 21/256; 21/256 / (9/256) = 7/3
        let k = activation_kurtosis(&m(vec![(0, vec![1, 0, 0, 0])]));
        assert!((k[0] - 7.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_row_is_zero_variance() {
        let k = activation_kurtosis(&m(vec![(0, vec![3, 3, 3])]));
        assert!(k[0].is_infinite());
    }

    #[test]
    fn perfect_prediction() {
        let train = m(vec![(0, vec![4, 0, 0]), (1, vec![0, 0, 2])]);
        let hold = m(vec![(0, vec![9, 0, 0]), (1, vec![0, 0, 1])]);
        let r = evaluate_predictor(&build_confidence_table(&train), &hold, 1).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn oov_tokens_lower_recall_only() {
        let train = m(vec![(0, vec![4, 0, 0])]);
        let hold = m(vec![(0, vec![3, 1, 0]), (5, vec![0, 0, 4])]);
        let r = evaluate_predictor(&build_confidence_table(&train), &hold, 1).unwrap();
        assert_eq!(r.predicted_events, 4);
        assert_eq!(r.correct_events, 3);
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 3.0 / 8.0);
        assert!((r.f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_holdout_is_error() {
        let train = m(vec![(0, vec![4, 0, 0])]);
        let hold = TokenExpertMatrix::empty(0, 3);
        assert!(evaluate_predictor(&build_confidence_table(&train), &hold, 1).is_err());
    }

    #[test]
    fn summary_quantiles() {
        let s = KurtosisSummary::from_values(&[1.0, 2.0, 3.0, 9.0, f64::INFINITY]);
        assert_eq!(s.zero_variance, 1);
        assert_eq!(s.median, 2.5);
        assert_eq!(s.fraction_above_8, 0.4);
    }
}
