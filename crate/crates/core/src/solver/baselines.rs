use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_feasible, Assignment};
use crate::trace::TokenExpertMatrix;
use crate::{ClusterId, Error, Result, Topology};

const KMEANS_ROUNDS: usize = 50;

/// Contiguous expert blocks: expert `j` goes to cluster `j / (N / E)`.
pub fn vanilla_expert_layout(n_experts: usize, n_clusters: usize) -> Vec<ClusterId> {
    let per = (n_experts / n_clusters.max(1)).max(1);
    (0..n_experts).map(|j| (j / per) as ClusterId).collect()
}

/// Vanilla layout plus round-robin tokens (`token mod E`) for the given
/// token ids.
pub fn baseline_round_robin(topology: &Topology, token_ids: &[u32]) -> Result<Assignment> {
    topology.validate()?;
    let e = topology.clusters;
    Ok(Assignment {
        n_clusters: e,
        token_labels: token_ids.iter().map(|&t| (t as usize % e) as ClusterId).collect(),
        expert_labels: vanilla_expert_layout(topology.experts, e),
    })
}

/// Balanced k-means on expert columns of the row-normalized matrix, then
/// each token (most frequent first) joins the expert cluster holding most of
/// its mass, subject to a token-frequency capacity of `S / E * beta`.
pub fn baseline_two_stage_kmeans(
    matrix: &TokenExpertMatrix,
    topology: &Topology,
    beta: f64,
    seed: u64,
) -> Result<Assignment> {
    topology.validate()?;
    let e = topology.clusters;
    check_feasible(matrix, e)?;
    if matrix.total == 0 {
        return Err(Error::EmptyInput("all-zero activation matrix".into()));
    }
    let n = matrix.n_experts;
    let t = matrix.n_tokens();

    // feature[k] = column k of the row-normalized matrix
    let mut feat = vec![vec![0.0f64; t]; n];
    for j in 0..t {
        let row = matrix.row(j);
        let s: u64 = row.iter().map(|&c| c as u64).sum();
        if s == 0 {
            continue;
        }
        for (f, &c) in feat.iter_mut().zip(row) {
            f[j] = c as f64 / s as f64;
        }
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();

    // farthest-point seeding
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = vec![feat[rng.gen_range(0..n)].clone()];
    while centroids.len() < e {
        let far = (0..n)
            .map(|k| centroids.iter().map(|c| dist(&feat[k], c)).fold(f64::INFINITY, f64::min))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (k, d)| if d > b.1 { (k, d) } else { b })
            .0;
        centroids.push(feat[far].clone());
    }

    let cap = n / e;
    let mut labels = vec![0 as ClusterId; n];
    for round in 0..KMEANS_ROUNDS {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * e);
        for (k, f) in feat.iter().enumerate() {
            for (c, cent) in centroids.iter().enumerate() {
                pairs.push((dist(f, cent), k, c));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next: Vec<Option<ClusterId>> = vec![None; n];
        let mut fill = vec![0usize; e];
        for (_, k, c) in pairs {
            if next[k].is_none() && fill[c] < cap {
                next[k] = Some(c as ClusterId);
                fill[c] += 1;
            }
        }
        let next: Vec<ClusterId> = next.into_iter().map(|l| l.expect("capacity covers all")).collect();
        if round > 0 && next == labels {
            break;
        }
        labels = next;
        for (c, cent) in centroids.iter_mut().enumerate() {
            cent.iter_mut().for_each(|x| *x = 0.0);
            for k in (0..n).filter(|&k| labels[k] as usize == c) {
                for (x, &f) in cent.iter_mut().zip(&feat[k]) {
                    *x += f / cap as f64;
                }
            }
        }
    }

    let token_labels = assign_tokens_to_layout(matrix, &labels, e, beta);
    Ok(Assignment { n_clusters: e, token_labels, expert_labels: labels })
}

/// Most frequent tokens first, each to the cluster with the most of its
/// mass among clusters still under `S / E * beta`; the least loaded cluster
/// when all are closed.
pub(crate) fn assign_tokens_to_layout(
    matrix: &TokenExpertMatrix,
    expert_labels: &[ClusterId],
    e: usize,
    beta: f64,
) -> Vec<ClusterId> {
    let t = matrix.n_tokens();
    let cap = matrix.total as f64 / e as f64 * beta;
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| matrix.freq[b].cmp(&matrix.freq[a]).then(a.cmp(&b)));
    let mut loads = vec![0u64; e];
    let mut labels = vec![0 as ClusterId; t];
    for j in order {
        let mut mass = vec![0u64; e];
        for (k, &c) in matrix.row(j).iter().enumerate() {
            mass[expert_labels[k] as usize] += c as u64;
        }
        let open = (0..e).filter(|&c| (loads[c] as f64) < cap);
        let pick = open
            .fold(None, |b: Option<usize>, c| match b {
                Some(b) if mass[b] >= mass[c] => Some(b),
                _ => Some(c),
            })
            .unwrap_or_else(|| (0..e).min_by_key(|&c| (loads[c], c)).unwrap());
        labels[j] = pick as ClusterId;
        loads[pick] += matrix.freq[j];
    }
    labels
}
