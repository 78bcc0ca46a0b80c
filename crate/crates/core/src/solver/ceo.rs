//! Cross-entropy co-clustering.
//!
//! Each expert and each token carries a categorical distribution over the
//! `E` clusters, initially uniform. Every iteration draws `K` expert
//! labelings and `K` token labelings with capacity masks, scores sample
//! pair `s` by its within-cluster activation mass, and moves both
//! distributions towards the label frequencies of the top `rho` fraction:
//! `p <- (1 - eta) p + eta * freq_elite`. After `n_steps` the labels are
//! the row-wise argmax; expert labels are decoded under the `N / E`
//! capacity so the result is always feasible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_feasible, objective, sparse_rows, Assignment, ObjectiveValue, SolverConfig};
use crate::trace::TokenExpertMatrix;
use crate::{argmax, ClusterId, Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum SampleKind<'a> {
    /// Exact capacity `N / E` per cluster.
    Expert,
    /// A cluster closes once its accumulated token frequency reaches
    /// `S / E * beta`.
    Token { freq: &'a [u64], beta: f64 },
}

/// Draws one label vector from the row distributions in `p` (`rows x E`,
/// row-major), processing rows in order with a running capacity mask.
///
/// When every unmasked cluster has zero probability the row goes to the
/// least-loaded unmasked cluster; when every cluster is masked (token kind
/// only) it goes to the least-loaded cluster overall.
pub fn sample_labels<R: Rng + ?Sized>(
    p: &[f64],
    n_clusters: usize,
    kind: SampleKind<'_>,
    rng: &mut R,
) -> Vec<ClusterId> {
    let e = n_clusters;
    let rows = p.len() / e;
    let mut mask = vec![true; e];
    let mut load = vec![0.0f64; e];
    let mut labels = Vec::with_capacity(rows);
    let (expert_cap, token_cap) = match kind {
        SampleKind::Expert => ((rows / e) as f64, f64::INFINITY),
        SampleKind::Token { freq, beta } => {
            let s: u64 = freq.iter().sum();
            (f64::INFINITY, s as f64 / e as f64 * beta)
        }
    };
    for i in 0..rows {
        let row = &p[i * e..(i + 1) * e];
        let mut sum = 0.0;
        for c in 0..e {
            if mask[c] {
                sum += row[c];
            }
        }
        let cls = if sum > 0.0 {
            let u = rng.gen::<f64>() * sum;
            let mut acc = 0.0;
            let mut pick = 0;
            for c in 0..e {
                if mask[c] && row[c] > 0.0 {
                    acc += row[c];
                    pick = c;
                    if u < acc {
                        break;
                    }
                }
            }
            pick
        } else {
            least_loaded(&load, Some(&mask)).or_else(|| least_loaded(&load, None)).unwrap()
        };
        labels.push(cls as ClusterId);
        match kind {
            SampleKind::Expert => {
                load[cls] += 1.0;
                if load[cls] >= expert_cap {
                    mask[cls] = false;
                }
            }
            SampleKind::Token { freq, .. } => {
                load[cls] += freq[i] as f64;
                if load[cls] >= token_cap {
                    mask[cls] = false;
                }
            }
        }
    }
    labels
}

fn least_loaded(load: &[f64], mask: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<usize> = None;
    for c in 0..load.len() {
        if mask.is_some_and(|m| !m[c]) {
            continue;
        }
        if best.is_none_or(|b| load[c] < load[b]) {
            best = Some(c);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct CeoOutcome {
    pub assignment: Assignment,
    /// Probability of each token's final label (`T_p`).
    pub token_confidence: Vec<f64>,
    pub objective: ObjectiveValue,
    /// Best within-cluster activation mass seen up to each iteration.
    pub best_score_history: Vec<u64>,
    /// Final `N x E` expert distribution.
    pub expert_probs: Vec<f64>,
    /// Final `t x E` token distribution.
    pub token_probs: Vec<f64>,
}

struct Candidate {
    experts: Vec<ClusterId>,
    tokens: Vec<ClusterId>,
    combined: f64,
}

pub fn solve_ceo(matrix: &TokenExpertMatrix, n_clusters: usize, config: &SolverConfig) -> Result<CeoOutcome> {
    config.validate()?;
    check_feasible(matrix, n_clusters)?;
    if config.samples < 2 {
        return Err(Error::InvalidConfig(format!("K = {} samples, need at least 2", config.samples)));
    }
    let mut best: Option<CeoOutcome> = None;
    for restart in 0..config.restarts {
        let run = ceo_run(matrix, n_clusters, config, restart)?;
        if best.as_ref().is_none_or(|b| run.objective.combined < b.objective.combined) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn ceo_run(matrix: &TokenExpertMatrix, n_clusters: usize, config: &SolverConfig, restart: usize) -> Result<CeoOutcome> {
    let e = n_clusters;
    let n = matrix.n_experts;
    let t = matrix.n_tokens();
    // flat sparse rows: entries[row_ptr[j]..row_ptr[j + 1]] = (expert, count)
    let mut row_ptr = vec![0usize];
    let mut entries: Vec<(u32, u32)> = Vec::new();
    for row in sparse_rows(matrix) {
        entries.extend(row);
        row_ptr.push(entries.len());
    }
    let theta = config.theta;
    let share = matrix.total as f64 / e as f64;
    let k_samples = config.samples;
    let n_elite = ((config.rho * k_samples as f64).ceil() as usize).clamp(1, k_samples);
    let stream_base = (restart * config.n_steps * k_samples) as u64;

    let mut p_ep = vec![1.0 / e as f64; n * e];
    let mut p_tk = vec![1.0 / e as f64; t * e];
    let mut best: Option<Candidate> = None;
    let mut best_score = 0u64;
    let mut history = Vec::with_capacity(config.n_steps);

    let evaluate = |experts: &[ClusterId], tokens: &[ClusterId]| -> (u64, f64) {
        let mut local = 0u64;
        let mut loads = vec![0u64; e];
        for j in 0..t {
            let r = tokens[j];
            loads[r as usize] += matrix.freq[j];
            for &(k, c) in &entries[row_ptr[j]..row_ptr[j + 1]] {
                if experts[k as usize] == r {
                    local += c as u64;
                }
            }
        }
        let l1: f64 = loads.iter().map(|&l| (l as f64 - share).abs()).sum();
        let l2 = (matrix.total - local) as f64;
        (local, theta * l1 + (1.0 - theta) * l2)
    };

    for step in 0..config.n_steps {
        let samples: Vec<(Vec<ClusterId>, Vec<ClusterId>, u64, f64)> = (0..k_samples)
            .into_par_iter()
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(stream_base + (step * k_samples + s) as u64);
                let experts = sample_labels(&p_ep, e, SampleKind::Expert, &mut rng);
                let tokens = sample_labels(
                    &p_tk,
                    e,
                    SampleKind::Token { freq: &matrix.freq, beta: config.beta },
                    &mut rng,
                );
                let (score, combined) = evaluate(&experts, &tokens);
                (experts, tokens, score, combined)
            })
            .collect();

        let mut order: Vec<usize> = (0..k_samples).collect();
        order.sort_by(|&a, &b| samples[b].2.cmp(&samples[a].2).then(a.cmp(&b)));
        best_score = best_score.max(samples[order[0]].2);
        history.push(best_score);

        for s in &samples {
            if best.as_ref().is_none_or(|b| s.3 < b.combined) {
                best = Some(Candidate { experts: s.0.clone(), tokens: s.1.clone(), combined: s.3 });
            }
        }

        let mut f_ep = vec![0.0f64; n * e];
        let mut f_tk = vec![0.0f64; t * e];
        for &s in &order[..n_elite] {
            for (i, &c) in samples[s].0.iter().enumerate() {
                f_ep[i * e + c as usize] += 1.0;
            }
            for (j, &c) in samples[s].1.iter().enumerate() {
                f_tk[j * e + c as usize] += 1.0;
            }
        }
        smooth(&mut p_ep, &f_ep, n_elite, config.eta, e);
        smooth(&mut p_tk, &f_tk, n_elite, config.eta, e);
    }

    let expert_labels = decode_with_capacity(&p_ep, e, n / e);
    let token_labels: Vec<ClusterId> = p_tk
        .chunks_exact(e)
        .map(|row| argmax(row).unwrap_or(0) as ClusterId)
        .collect();
    let (_, decoded_combined) = evaluate(&expert_labels, &token_labels);

    let (experts, tokens) = match best {
        Some(b) if b.combined < decoded_combined => (b.experts, b.tokens),
        _ => (expert_labels, token_labels),
    };
    let token_confidence = tokens
        .iter()
        .enumerate()
        .map(|(j, &c)| p_tk[j * e + c as usize])
        .collect();
    let assignment = Assignment { n_clusters: e, token_labels: tokens, expert_labels: experts };
    let objective = objective(&assignment, matrix, theta)?;
    Ok(CeoOutcome {
        assignment,
        token_confidence,
        objective,
        best_score_history: history,
        expert_probs: p_ep,
        token_probs: p_tk,
    })
}

fn smooth(p: &mut [f64], freq: &[f64], n_elite: usize, eta: f64, e: usize) {
    let inv = 1.0 / n_elite as f64;
    for (row, frow) in p.chunks_exact_mut(e).zip(freq.chunks_exact(e)) {
        let mut sum = 0.0;
        for (x, &f) in row.iter_mut().zip(frow) {
            *x = (1.0 - eta) * *x + eta * f * inv;
            sum += *x;
        }
        if sum > 0.0 {
            row.iter_mut().for_each(|x| *x /= sum);
        }
    }
}

/// Argmax decoding under exact capacity: (expert, cluster) pairs are taken
/// in decreasing probability order (ties: lower expert, then lower cluster)
/// while both the expert is unplaced and the cluster has room. Equals the
/// plain row argmax whenever that is already balanced.
fn decode_with_capacity(p: &[f64], e: usize, cap: usize) -> Vec<ClusterId> {
    let n = p.len() / e;
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..e).map(move |c| (i, c))).collect();
    pairs.sort_by(|&(i1, c1), &(i2, c2)| {
        p[i2 * e + c2].total_cmp(&p[i1 * e + c1]).then(i1.cmp(&i2)).then(c1.cmp(&c2))
    });
    let mut labels: Vec<Option<ClusterId>> = vec![None; n];
    let mut fill = vec![0usize; e];
    for (i, c) in pairs {
        if labels[i].is_none() && fill[c] < cap {
            labels[i] = Some(c as ClusterId);
            fill[c] += 1;
        }
    }
    labels.into_iter().map(|l| l.expect("capacity covers all experts")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expert_samples_respect_capacity() {
        let p = vec![0.5; 4 * 2];
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = sample_labels(&p, 2, SampleKind::Expert, &mut rng);
            assert_eq!(l.iter().filter(|&&c| c == 0).count(), 2);
        }
    }

    #[test]
    fn one_hot_rows_reproduce_argmax() {
        let p = vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_labels(&p, 2, SampleKind::Expert, &mut rng), vec![1, 0, 1, 0]);
        let freq = [1, 1, 1, 1];
        let l = sample_labels(&p, 2, SampleKind::Token { freq: &freq, beta: 1.1 }, &mut rng);
        assert_eq!(l, vec![1, 0, 1, 0]);
    }

    #[test]
    fn token_mask_forces_exact_balance_at_beta_one() {
        let p = vec![0.25; 12 * 4];
        let freq = [1u64; 12];
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = sample_labels(&p, 4, SampleKind::Token { freq: &freq, beta: 1.0 }, &mut rng);
            let mut counts = [0; 4];
            l.iter().for_each(|&c| counts[c as usize] += 1);
            assert_eq!(counts, [3; 4]);
        }
    }

    #[test]
    fn exhausted_mask_goes_to_least_loaded() {
        // cap = 13 / 2 * 0.5 = 3.25, so each heavy token closes its cluster
        let p = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let freq = [6u64, 6, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = sample_labels(&p, 2, SampleKind::Token { freq: &freq, beta: 0.5 }, &mut rng);
        // token 1 has no mass on the open cluster; token 2 finds both closed
        // and takes the lowest-index least-loaded one
        assert_eq!(l, vec![0, 1, 0]);
    }

    #[test]
    fn capacity_decoding() {
        // all experts prefer cluster 0
        let p = vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4];
        assert_eq!(decode_with_capacity(&p, 2, 2), vec![0, 0, 1, 1]);
    }
}
