//! Exhaustive optimum for tiny instances, used as a test oracle.

use super::{check_feasible, Assignment, ObjectiveValue};
use crate::trace::TokenExpertMatrix;
use crate::{ClusterId, Error, Result, Topology};

/// Upper bound on `E^t * (#balanced expert partitions)`.
pub const BRUTEFORCE_LIMIT: u128 = 10_000_000;

/// Enumerates every balanced expert labeling and every token labeling and
/// returns the global minimum of `theta * L1 + (1 - theta) * L2`. Ties go
/// to the lexicographically smallest `(token_labels, expert_labels)`.
pub fn solve_bruteforce(
    matrix: &TokenExpertMatrix,
    topology: &Topology,
    theta: f64,
) -> Result<(Assignment, ObjectiveValue)> {
    let e = topology.clusters;
    check_feasible(matrix, e)?;
    if matrix.n_experts != topology.experts {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} experts, topology {}",
            matrix.n_experts, topology.experts
        )));
    }
    let t = matrix.n_tokens();
    let n = matrix.n_experts;
    let cap = n / e;
    let count = (e as u128)
        .checked_pow(t as u32)
        .and_then(|x| x.checked_mul(balanced_partitions(n, e)))
        .unwrap_or(u128::MAX);
    if count > BRUTEFORCE_LIMIT {
        return Err(Error::InstanceTooLarge { count, limit: BRUTEFORCE_LIMIT });
    }

    let experts = balanced_labelings(n, e, cap);
    let share = matrix.total as f64 / e as f64;
    // local[c * t + j]: mass of token j on the experts of cluster c
    let mut local = vec![0u64; e * t];
    let mut best: Option<(Vec<ClusterId>, Vec<ClusterId>, ObjectiveValue)> = None;
    for c_lab in &experts {
        local.iter_mut().for_each(|x| *x = 0);
        for j in 0..t {
            for (k, &v) in matrix.row(j).iter().enumerate() {
                local[c_lab[k] as usize * t + j] += v as u64;
            }
        }
        let mut tokens = vec![0 as ClusterId; t];
        loop {
            let mut loads = vec![0u64; e];
            let mut inside = 0u64;
            for j in 0..t {
                let r = tokens[j] as usize;
                loads[r] += matrix.freq[j];
                inside += local[r * t + j];
            }
            let l1 = loads.iter().map(|&l| (l as f64 - share).abs()).sum();
            let value = ObjectiveValue::new(l1, (matrix.total - inside) as f64, theta);
            let better = match &best {
                None => true,
                Some((bt, bc, bv)) => {
                    value.combined < bv.combined - 1e-9
                        || (value.combined <= bv.combined + 1e-9 && (&tokens, c_lab) < (bt, bc))
                }
            };
            if better {
                best = Some((tokens.clone(), c_lab.clone(), value));
            }
            if !increment(&mut tokens, e) {
                break;
            }
        }
    }
    let (token_labels, expert_labels, value) = best.expect("at least one labeling");
    Ok((Assignment { n_clusters: e, token_labels, expert_labels }, value))
}

/// Odometer increment with the last position fastest; false on wrap.
fn increment(labels: &mut [ClusterId], e: usize) -> bool {
    for x in labels.iter_mut().rev() {
        if (*x as usize) + 1 < e {
            *x += 1;
            return true;
        }
        *x = 0;
    }
    false
}

/// Multinomial coefficient `N! / ((N/E)!)^E`.
fn balanced_partitions(n: usize, e: usize) -> u128 {
    let cap = n / e;
    let mut total: u128 = 1;
    let mut left = n as u128;
    for _ in 0..e {
        // choose cap of the remaining `left`
        let mut c: u128 = 1;
        for i in 0..cap as u128 {
            c = c * (left - i) / (i + 1);
        }
        total = total.saturating_mul(c);
        left -= cap as u128;
    }
    total
}

/// All expert labelings with exactly `cap` experts per cluster, in
/// lexicographic order.
fn balanced_labelings(n: usize, e: usize, cap: usize) -> Vec<Vec<ClusterId>> {
    fn rec(pos: usize, cur: &mut Vec<ClusterId>, fill: &mut [usize], cap: usize, out: &mut Vec<Vec<ClusterId>>) {
        if pos == cur.len() {
            out.push(cur.clone());
            return;
        }
        for c in 0..fill.len() {
            if fill[c] < cap {
                fill[c] += 1;
                cur[pos] = c as ClusterId;
                rec(pos + 1, cur, fill, cap, out);
                fill[c] -= 1;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, &mut vec![0; n], &mut vec![0; e], cap, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_counts() {
        assert_eq!(balanced_partitions(4, 2), 6);
        assert_eq!(balanced_partitions(6, 3), 90);
        assert_eq!(balanced_labelings(4, 2, 2).len(), 6);
        assert_eq!(balanced_labelings(6, 3, 2).len(), 90);
        assert_eq!(balanced_labelings(4, 2, 2)[0], vec![0, 0, 1, 1]);
    }

    #[test]
    fn single_token_joins_its_top_expert() {
        let m = TokenExpertMatrix::from_rows(0, 2, vec![(0, vec![1, 5])]).unwrap();
        let topo = Topology::new(2, 2, 1, 1, 1);
        let (a, v) = solve_bruteforce(&m, &topo, 0.1).unwrap();
        assert_eq!(a.expert_labels[1], a.token_labels[0]);
        assert_eq!(v.l2, 1.0);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let rows: Vec<(u32, Vec<u32>)> = (0..30).map(|j| (j, vec![1, 0, 0, 1])).collect();
        let m = TokenExpertMatrix::from_rows(0, 4, rows).unwrap();
        let topo = Topology::new(2, 4, 1, 1, 30);
        assert!(matches!(solve_bruteforce(&m, &topo, 0.5), Err(Error::InstanceTooLarge { .. })));
    }

    #[test]
    fn planted_block_has_zero_cut() {
        let m = TokenExpertMatrix::from_rows(
            0,
            4,
            vec![(0, vec![2, 1, 0, 0]), (1, vec![0, 0, 1, 2]), (2, vec![1, 2, 0, 0]), (3, vec![0, 0, 2, 1])],
        )
        .unwrap();
        let topo = Topology::new(2, 4, 2, 1, 4);
        let (a, v) = solve_bruteforce(&m, &topo, 0.5).unwrap();
        assert_eq!(v.l2, 0.0);
        assert_eq!(v.l1, 0.0);
        // smallest optimum starts token 0 in cluster 0
        assert_eq!(a.token_labels, vec![0, 1, 0, 1]);
        assert_eq!(a.expert_labels, vec![0, 0, 1, 1]);
    }
}
