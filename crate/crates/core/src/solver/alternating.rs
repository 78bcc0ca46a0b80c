//! Alternating data-model co-scheduling.
//!
//! Alternates between placing experts given the current request clusters
//! and scheduling requests given the current expert placement. Request
//! demand is summarized as `M[r][e]`, the confidence-table mass of the
//! request's tokens on expert `e`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_feasible, Assignment, SolverConfig};
use crate::predictor::build_confidence_table;
use crate::trace::{RequestTrace, TokenExpertMatrix};
use crate::{ClusterId, Error, Result};

#[derive(Debug, Clone)]
pub struct AlternatingOutcome {
    pub assignment: Assignment,
    pub token_confidence: Vec<f64>,
    /// Cluster of every request, in trace order.
    pub request_labels: Vec<ClusterId>,
    /// Best `max cluster load + k * remote mass` (lower is better).
    pub score: f64,
    /// Score of each iterate.
    pub score_history: Vec<f64>,
}

struct Problem<'a> {
    e: usize,
    n: usize,
    top_k: usize,
    /// `M[r]`, length `N` per request.
    demand: Vec<Vec<f64>>,
    lengths: Vec<usize>,
    /// Unit-normalized `M[r]` (zero vector stays zero).
    demand_unit: Vec<Vec<f64>>,
    /// Cosine similarity between expert count columns, `N x N`.
    expert_cos: Vec<f64>,
    expert_load: Vec<f64>,
    total_load: f64,
    config: &'a SolverConfig,
}

pub fn solve_alternating(
    matrix: &TokenExpertMatrix,
    requests: &RequestTrace,
    n_clusters: usize,
    config: &SolverConfig,
) -> Result<AlternatingOutcome> {
    config.validate()?;
    check_feasible(matrix, n_clusters)?;
    let e = n_clusters;
    let n = matrix.n_experts;
    let n_req = requests.requests.len();
    if n_req == 0 {
        return Err(Error::EmptyInput("no requests to schedule".into()));
    }
    if config.strict_request_balance && n_req < e {
        return Err(Error::Infeasible(format!("{n_req} requests cannot fill {e} clusters")));
    }
    if requests.n_experts != n {
        return Err(Error::DimensionMismatch(format!(
            "trace has {} experts, matrix {n}",
            requests.n_experts
        )));
    }

    let conf = build_confidence_table(matrix);
    let demand: Vec<Vec<f64>> = requests
        .requests
        .iter()
        .map(|req| {
            let mut m = vec![0.0; n];
            for &tok in &req.tokens {
                if let Some(j) = conf.row_of(tok) {
                    for (x, &p) in m.iter_mut().zip(conf.row(j)) {
                        *x += p;
                    }
                }
            }
            m
        })
        .collect();
    let demand_unit = demand.iter().map(|m| unit(m)).collect();

    let mut dots = vec![0.0f64; n * n];
    for j in 0..matrix.n_tokens() {
        let row = matrix.row(j);
        let nz: Vec<(usize, f64)> =
            row.iter().enumerate().filter(|(_, &c)| c > 0).map(|(k, &c)| (k, c as f64)).collect();
        for &(a, x) in &nz {
            for &(b, y) in &nz {
                dots[a * n + b] += x * y;
            }
        }
    }
    let mut expert_cos = vec![0.0f64; n * n];
    for a in 0..n {
        for b in 0..n {
            let d = (dots[a * n + a] * dots[b * n + b]).sqrt();
            expert_cos[a * n + b] = if d > 0.0 { dots[a * n + b] / d } else { 0.0 };
        }
    }
    let expert_load: Vec<f64> = matrix.column_sums().iter().map(|&c| c as f64).collect();
    let total_load = expert_load.iter().sum::<f64>();

    let p = Problem {
        e,
        n,
        top_k: requests.top_k,
        demand,
        lengths: requests.requests.iter().map(|r| r.tokens.len()).collect(),
        demand_unit,
        expert_cos,
        expert_load,
        total_load,
        config,
    };

    let mut req_labels = p.seed_requests();
    let mut best: Option<(Vec<ClusterId>, Vec<ClusterId>, f64)> = None;
    let mut history = Vec::with_capacity(config.n_steps.max(1));
    for step in 0..config.n_steps.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64);
        let experts = p.place_experts(&req_labels, &mut rng);
        req_labels = p.schedule_requests(&experts);
        let score = p.score(&req_labels, &experts);
        history.push(score);
        if best.as_ref().is_none_or(|b| score < b.2) {
            best = Some((experts, req_labels.clone(), score));
        }
    }
    let (expert_labels, request_labels, score) = best.expect("at least one iterate");

    let (token_labels, token_confidence) = token_labels_from_requests(matrix, requests, &request_labels, &expert_labels, e);
    Ok(AlternatingOutcome {
        assignment: Assignment { n_clusters: e, token_labels, expert_labels },
        token_confidence,
        request_labels,
        score,
        score_history: history,
    })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax_open(scores: &[f64], open: &[bool]) -> usize {
    let mut best = None;
    for c in 0..scores.len() {
        if open[c] && best.is_none_or(|b: usize| scores[c] > scores[b]) {
            best = Some(c);
        }
    }
    best.expect("some cluster open")
}

impl Problem<'_> {
    fn request_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.sort_by(|&a, &b| self.lengths[b].cmp(&self.lengths[a]).then(a.cmp(&b)));
        order
    }

    fn request_cap(&self) -> usize {
        self.lengths.len().div_ceil(self.e)
    }

    /// Farthest-point seeds on the unit demand vectors, then every other
    /// request (longest first) joins its most similar seed with capacity.
    fn seed_requests(&self) -> Vec<ClusterId> {
        let order = self.request_order();
        let n_seeds = self.e.min(order.len());
        let mut seeds = vec![order[0]];
        while seeds.len() < n_seeds {
            let next = order
                .iter()
                .filter(|r| !seeds.contains(r))
                .map(|&r| {
                    let sim = seeds
                        .iter()
                        .map(|&s| dot(&self.demand_unit[r], &self.demand_unit[s]))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (r, sim)
                })
                .fold((usize::MAX, f64::INFINITY), |b, (r, s)| if s < b.1 { (r, s) } else { b })
                .0;
            seeds.push(next);
        }
        let cap = self.request_cap();
        let mut labels = vec![ClusterId::MAX; self.lengths.len()];
        let mut fill = vec![0usize; self.e];
        for (c, &s) in seeds.iter().enumerate() {
            labels[s] = c as ClusterId;
            fill[c] += 1;
        }
        for &r in &order {
            if labels[r] != ClusterId::MAX {
                continue;
            }
            let open: Vec<bool> = fill.iter().map(|&f| f < cap).collect();
            let sims: Vec<f64> = (0..self.e)
                .map(|c| seeds.get(c).map_or(0.0, |&s| dot(&self.demand_unit[r], &self.demand_unit[s])))
                .collect();
            let c = argmax_open(&sims, &open);
            labels[r] = c as ClusterId;
            fill[c] += 1;
        }
        labels
    }

    /// Share of the cluster-scheduled demand on each expert: `eafr[c][e]`.
    fn expert_request_affinity(&self, req_labels: &[ClusterId]) -> Vec<Vec<f64>> {
        let mut mass = vec![vec![0.0; self.n]; self.e];
        for (r, &c) in req_labels.iter().enumerate() {
            for (x, &m) in mass[c as usize].iter_mut().zip(&self.demand[r]) {
                *x += m;
            }
        }
        let mut out = vec![vec![0.0; self.n]; self.e];
        for k in 0..self.n {
            let s: f64 = (0..self.e).map(|c| mass[c][k]).sum();
            if s > 0.0 {
                for c in 0..self.e {
                    out[c][k] = mass[c][k] / s;
                }
            }
        }
        out
    }

    /// Mean cosine of expert `k` to `members`, skipping `k` itself.
    fn expert_affinity(&self, k: usize, members: &[usize]) -> f64 {
        let (s, cnt) = members
            .iter()
            .filter(|&&m| m != k)
            .fold((0.0, 0usize), |(s, c), &m| (s + self.expert_cos[k * self.n + m], c + 1));
        if cnt == 0 {
            0.0
        } else {
            s / cnt as f64
        }
    }

    fn place_experts(&self, req_labels: &[ClusterId], rng: &mut ChaCha8Rng) -> Vec<ClusterId> {
        let cfg = self.config;
        let eafr = self.expert_request_affinity(req_labels);
        let cap = self.n / self.e;
        let total = if self.total_load > 0.0 { self.total_load } else { 1.0 };
        let mut order: Vec<usize> = (0..self.n).collect();
        order.sort_by(|&a, &b| self.expert_load[b].total_cmp(&self.expert_load[a]).then(a.cmp(&b)));
        let mut members: Vec<Vec<usize>> = vec![Vec::with_capacity(cap); self.e];
        let mut loads = vec![0.0f64; self.e];
        let mut labels = vec![0 as ClusterId; self.n];
        for k in order {
            let open: Vec<bool> = members.iter().map(|m| m.len() < cap).collect();
            let scores: Vec<f64> = (0..self.e)
                .map(|c| {
                    cfg.alpha_e * self.expert_affinity(k, &members[c]) + cfg.beta_e * eafr[c][k]
                        - cfg.gamma_e * loads[c] / total
                })
                .collect();
            let c = argmax_open(&scores, &open);
            members[c].push(k);
            loads[c] += self.expert_load[k];
            labels[k] = c as ClusterId;
        }

        if self.e > 1 {
            for _ in 0..cfg.ft_steps {
                let a = rng.gen_range(0..self.n);
                let b = rng.gen_range(0..self.n);
                let (ca, cb) = (labels[a] as usize, labels[b] as usize);
                if ca == cb {
                    continue;
                }
                let aff = |x: usize, c: usize, drop: usize, add: Option<usize>| {
                    let mut m: Vec<usize> = members[c].iter().copied().filter(|&y| y != drop).collect();
                    m.extend(add);
                    self.expert_affinity(x, &m)
                };
                let before = cfg.alpha_e * (aff(a, ca, a, None) + aff(b, cb, b, None))
                    + cfg.beta_e * (eafr[ca][a] + eafr[cb][b])
                    - cfg.gamma_e * (loads[ca] - loads[cb]).abs() / total;
                let delta = self.expert_load[a] - self.expert_load[b];
                let after = cfg.alpha_e * (aff(a, cb, b, None) + aff(b, ca, a, None))
                    + cfg.beta_e * (eafr[cb][a] + eafr[ca][b])
                    - cfg.gamma_e * ((loads[ca] - delta) - (loads[cb] + delta)).abs() / total;
                if after - before > 1e-12 {
                    members[ca].retain(|&y| y != a);
                    members[cb].retain(|&y| y != b);
                    members[ca].push(b);
                    members[cb].push(a);
                    loads[ca] -= delta;
                    loads[cb] += delta;
                    labels[a] = cb as ClusterId;
                    labels[b] = ca as ClusterId;
                }
            }
        }
        labels
    }

    fn schedule_requests(&self, experts: &[ClusterId]) -> Vec<ClusterId> {
        let cfg = self.config;
        let cap = self.request_cap();
        let mut centroid = vec![vec![0.0f64; self.n]; self.e];
        let mut fill = vec![0usize; self.e];
        let mut labels = vec![0 as ClusterId; self.lengths.len()];
        for r in self.request_order() {
            let mut rafe = vec![0.0f64; self.e];
            for (k, &m) in self.demand[r].iter().enumerate() {
                rafe[experts[k] as usize] += m;
            }
            let len = self.lengths[r].max(1) as f64;
            let scores: Vec<f64> = (0..self.e)
                .map(|c| {
                    let rafr = if fill[c] > 0 {
                        dot(&self.demand_unit[r], &centroid[c]) / fill[c] as f64
                    } else {
                        0.0
                    };
                    cfg.alpha_r * rafr + cfg.beta_r * rafe[c] / len
                })
                .collect();
            let open: Vec<bool> = fill.iter().map(|&f| f < cap).collect();
            let c = argmax_open(&scores, &open);
            labels[r] = c as ClusterId;
            fill[c] += 1;
            for (x, &u) in centroid[c].iter_mut().zip(&self.demand_unit[r]) {
                *x += u;
            }
        }
        labels
    }

    /// `max_c load_c + k * remote`, both in expected activation events.
    fn score(&self, req_labels: &[ClusterId], experts: &[ClusterId]) -> f64 {
        let mut loads = vec![0.0f64; self.e];
        let mut remote = 0.0;
        for (r, &c) in req_labels.iter().enumerate() {
            for (k, &m) in self.demand[r].iter().enumerate() {
                loads[experts[k] as usize] += m;
                if experts[k] != c {
                    remote += m;
                }
            }
        }
        let k = self.top_k as f64;
        k * loads.iter().copied().fold(0.0, f64::max) + k * remote
    }
}

/// Token label = the cluster where the token's occurrences were scheduled
/// most often; confidence = that share. Tokens absent from the requests
/// fall back to the cluster holding most of their activation mass.
fn token_labels_from_requests(
    matrix: &TokenExpertMatrix,
    requests: &RequestTrace,
    req_labels: &[ClusterId],
    expert_labels: &[ClusterId],
    e: usize,
) -> (Vec<ClusterId>, Vec<f64>) {
    let t = matrix.n_tokens();
    let mut counts = vec![0u64; t * e];
    for (req, &c) in requests.requests.iter().zip(req_labels) {
        for &tok in &req.tokens {
            if let Some(j) = matrix.row_of(tok) {
                counts[j * e + c as usize] += 1;
            }
        }
    }
    let mut labels = Vec::with_capacity(t);
    let mut conf = Vec::with_capacity(t);
    for j in 0..t {
        let mut row: Vec<u64> = counts[j * e..(j + 1) * e].to_vec();
        if row.iter().all(|&x| x == 0) {
            for (k, &c) in matrix.row(j).iter().enumerate() {
                row[expert_labels[k] as usize] += c as u64;
            }
        }
        let s: u64 = row.iter().sum();
        let best = (0..e).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        labels.push(best as ClusterId);
        conf.push(if s > 0 { row[best] as f64 / s as f64 } else { 1.0 / e as f64 });
    }
    (labels, conf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Request;

    fn tiny() -> (TokenExpertMatrix, RequestTrace) {
        let mut trace = RequestTrace::new(1, 4, 1, 4);
        let reqs = [vec![0u32, 1, 0], vec![2, 3, 3], vec![1, 1, 0], vec![3, 2, 2]];
        let route = |t: u32| [0u16, 1, 2, 3][t as usize];
        for (i, toks) in reqs.iter().enumerate() {
            trace.requests.push(Request {
                id: i as u64,
                routes: toks.iter().map(|&t| route(t)).collect(),
                tokens: toks.clone(),
            });
        }
        (trace.layer_matrices().unwrap().remove(0), trace)
    }

    #[test]
    fn pure_requests_are_separated() {
        let (m, trace) = tiny();
        let out = solve_alternating(&m, &trace, 2, &SolverConfig { n_steps: 3, ..Default::default() }).unwrap();
        let r = &out.request_labels;
        assert_eq!(r[0], r[2]);
        assert_eq!(r[1], r[3]);
        assert_ne!(r[0], r[1]);
        let x = &out.assignment.expert_labels;
        assert_eq!(x[0], x[1]);
        assert_eq!(x[2], x[3]);
        assert_eq!(x[0], r[0]);
    }

    #[test]
    fn single_cluster_is_all_zero() {
        let (m, trace) = tiny();
        let out = solve_alternating(&m, &trace, 1, &SolverConfig { n_steps: 2, ..Default::default() }).unwrap();
        assert!(out.assignment.expert_labels.iter().all(|&c| c == 0));
        assert!(out.assignment.token_labels.iter().all(|&c| c == 0));
        assert!(out.request_labels.iter().all(|&c| c == 0));
    }

    #[test]
    fn too_few_requests() {
        let (m, mut trace) = tiny();
        trace.requests.truncate(1);
        assert!(solve_alternating(&m, &trace, 2, &SolverConfig::default()).is_err());
    }
}
