mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use cosched::solver::{
    baseline_round_robin, baseline_two_stage_kmeans, check_constraints, metrics_on_matrix, objective, sample_labels,
    solve_alternating, solve_bruteforce, solve_ceo, Assignment, SampleKind, SolverConfig,
};
use cosched::trace::{synthesize_planted_profile, PlantedConfig, TokenExpertMatrix};
use cosched::{ClusterId, Topology};

fn small_config(seed: u64) -> SolverConfig {
    SolverConfig { samples: 16, n_steps: 8, ft_steps: 20, seed, ..SolverConfig::default() }
}

fn random_balanced(rng: &mut impl Rng, t: usize, n: usize, e: usize) -> Assignment {
    let mut experts: Vec<ClusterId> = (0..n).map(|x| (x / (n / e)) as ClusterId).collect();
    experts.shuffle(rng);
    Assignment {
        n_clusters: e,
        token_labels: (0..t).map(|_| rng.gen_range(0..e as ClusterId)).collect(),
        expert_labels: experts,
    }
}

/// Objective written directly from the definitions: absolute deviation of
/// every cluster's token frequency from `S/E`, plus all activation mass
/// whose expert sits outside the token's cluster.
fn reference_objective(a: &Assignment, m: &TokenExpertMatrix, theta: f64) -> f64 {
    let e = a.n_clusters;
    let s: f64 = (0..m.n_tokens()).map(|j| m.row(j).iter().map(|&c| c as f64).sum::<f64>()).sum();
    let mut l1 = 0.0;
    for c in 0..e {
        let load: f64 = (0..m.n_tokens())
            .filter(|&j| a.token_labels[j] as usize == c)
            .map(|j| m.row(j).iter().map(|&x| x as f64).sum::<f64>())
            .sum();
        l1 += (load - s / e as f64).abs();
    }
    let mut l2 = 0.0;
    for j in 0..m.n_tokens() {
        for x in 0..m.n_experts {
            if a.expert_labels[x] != a.token_labels[j] {
                l2 += m.get(j, x) as f64;
            }
        }
    }
    theta * l1 + (1.0 - theta) * l2
}

/// Exhaustive minimum over every token labeling and every balanced expert
/// labeling, enumerated as base-E counters.
fn reference_optimum(m: &TokenExpertMatrix, e: usize, theta: f64) -> f64 {
    let (t, n) = (m.n_tokens(), m.n_experts);
    let mut best = f64::INFINITY;
    for ecode in 0..e.pow(n as u32) {
        let experts: Vec<ClusterId> = (0..n).map(|i| ((ecode / e.pow(i as u32)) % e) as ClusterId).collect();
        let balanced = (0..e).all(|c| experts.iter().filter(|&&x| x as usize == c).count() == n / e);
        if !balanced {
            continue;
        }
        for tcode in 0..e.pow(t as u32) {
            let tokens = (0..t).map(|i| ((tcode / e.pow(i as u32)) % e) as ClusterId).collect();
            let a = Assignment { n_clusters: e, token_labels: tokens, expert_labels: experts.clone() };
            best = best.min(reference_objective(&a, m, theta));
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_solver_meets_hard_constraints(seed: u64, e in 1usize..5, per in 1usize..4, k_raw in 1usize..4) {
        let n = e * per;
        let k = k_raw.min(n);
        let mut rng = common::rng(seed);
        let trace = common::random_trace(&mut rng, 1, n, k, 12, e.max(2) + 2, 6);
        let m = trace.layer_matrices().unwrap().remove(0);
        let topo = Topology::new(e, n, k, 1, 12);
        let cfg = small_config(seed);
        let outputs = [
            solve_ceo(&m, e, &cfg).unwrap().assignment,
            solve_alternating(&m, &trace, e, &cfg).unwrap().assignment,
            baseline_two_stage_kmeans(&m, &topo, cfg.beta, seed).unwrap(),
            baseline_round_robin(&topo, &m.token_ids).unwrap(),
        ];
        for a in &outputs {
            let report = check_constraints(a, &topo).unwrap();
            prop_assert!(report.is_valid(), "{:?}", report.violations);
        }
    }

    #[test]
    fn ceo_best_score_never_decreases(seed: u64, eta in 0.05f64..0.95) {
        let mut rng = common::rng(seed);
        let m = common::random_matrix(&mut rng, 12, 8, 2, 6);
        let out = solve_ceo(&m, 4, &SolverConfig { eta, ..small_config(seed) }).unwrap();
        prop_assert_eq!(out.best_score_history.len(), 8);
        for w in out.best_score_history.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn no_assignment_beats_the_oracle(seed: u64, t in 1usize..6, per in 1usize..3) {
        let n = 2 * per;
        let mut rng = common::rng(seed);
        let m = common::random_matrix(&mut rng, t, n, 1, 5);
        let topo = Topology::new(2, n, 1, 1, t);
        let (_, opt) = solve_bruteforce(&m, &topo, 0.5).unwrap();
        for _ in 0..10 {
            let a = random_balanced(&mut rng, t, n, 2);
            prop_assert!(objective(&a, &m, 0.5).unwrap().combined >= opt.combined - 1e-9);
        }
        let ceo = solve_ceo(&m, 2, &small_config(seed)).unwrap();
        prop_assert!(ceo.objective.combined >= opt.combined - 1e-9);
    }

    #[test]
    fn relabeling_preserves_every_metric(seed: u64, e in 2usize..5) {
        let n = 2 * e;
        let mut rng = common::rng(seed);
        let m = common::random_matrix(&mut rng, 10, n, 2, 5);
        let a = random_balanced(&mut rng, 10, n, e);
        let mut perm: Vec<ClusterId> = (0..e as ClusterId).collect();
        perm.shuffle(&mut rng);
        let b = a.relabel(&perm);
        let (oa, ob) = (objective(&a, &m, 0.5).unwrap(), objective(&b, &m, 0.5).unwrap());
        prop_assert!((oa.l1 - ob.l1).abs() < 1e-9 && (oa.l2 - ob.l2).abs() < 1e-9);
        let (ma, mb) = (metrics_on_matrix(&a, &m).unwrap(), metrics_on_matrix(&b, &m).unwrap());
        prop_assert_eq!(ma.lar, mb.lar);
        prop_assert_eq!(ma.imbalance, mb.imbalance);
    }

    #[test]
    fn token_samples_overshoot_by_at_most_one_item(seed: u64, t in 1usize..40, e in 1usize..6, beta in 1.0f64..2.0) {
        let mut rng = common::rng(seed);
        let freq: Vec<u64> = (0..t).map(|_| rng.gen_range(1..20)).collect();
        let mut p = Vec::with_capacity(t * e);
        for _ in 0..t {
            let row: Vec<f64> = (0..e).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = row.iter().sum();
            p.extend(row.iter().map(|x| x / s));
        }
        let labels = sample_labels(&p, e, SampleKind::Token { freq: &freq, beta }, &mut rng);
        let total: u64 = freq.iter().sum();
        let bound = total as f64 / e as f64 * beta + *freq.iter().max().unwrap() as f64;
        let mut loads = vec![0u64; e];
        for (j, &c) in labels.iter().enumerate() {
            loads[c as usize] += freq[j];
        }
        for &l in &loads {
            prop_assert!(l as f64 <= bound + 1e-9, "{:?} vs {}", loads, bound);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_assignments(seed: u64) {
        let mut rng = common::rng(seed);
        let trace = common::random_trace(&mut rng, 1, 8, 2, 16, 8, 6);
        let m = trace.layer_matrices().unwrap().remove(0);
        let topo = Topology::new(4, 8, 2, 1, 16);
        let cfg = small_config(seed);
        prop_assert_eq!(solve_ceo(&m, 4, &cfg).unwrap().assignment, solve_ceo(&m, 4, &cfg).unwrap().assignment);
        prop_assert_eq!(
            solve_alternating(&m, &trace, 4, &cfg).unwrap().assignment,
            solve_alternating(&m, &trace, 4, &cfg).unwrap().assignment
        );
        prop_assert_eq!(
            baseline_two_stage_kmeans(&m, &topo, 1.1, seed).unwrap(),
            baseline_two_stage_kmeans(&m, &topo, 1.1, seed).unwrap()
        );
    }
}

#[test]
fn objective_matches_reference_evaluator() {
    let mut rng = common::rng(40);
    for _ in 0..200 {
        let m = common::random_matrix(&mut rng, 6, 4, 2, 6);
        let a = random_balanced(&mut rng, 6, 4, 2);
        for theta in [0.0, 0.5, 1.0] {
            let got = objective(&a, &m, theta).unwrap().combined;
            assert!((got - reference_objective(&a, &m, theta)).abs() < 1e-9);
        }
    }
}

#[test]
fn bruteforce_matches_second_enumerator() {
    let mut rng = common::rng(41);
    for i in 0..60 {
        let (t, n, e) = if i % 2 == 0 { (5, 4, 2) } else { (4, 6, 3) };
        let m = common::random_matrix(&mut rng, t, n, 1 + i % 2, 6);
        let topo = Topology::new(e, n, 1 + i % 2, 1, t);
        let (a, opt) = solve_bruteforce(&m, &topo, 0.5).unwrap();
        let reference = reference_optimum(&m, e, 0.5);
        assert!((opt.combined - reference).abs() < 1e-9, "instance {i}: {} vs {reference}", opt.combined);
        assert!((reference_objective(&a, &m, 0.5) - reference).abs() < 1e-9);
    }
}

#[test]
fn ceo_stays_near_the_optimum_across_seeds() {
    let mut rng = common::rng(42);
    let m = common::random_matrix(&mut rng, 6, 4, 2, 6);
    let opt = reference_optimum(&m, 2, 0.5);
    for seed in 0..10 {
        let cfg = SolverConfig { eta: 0.3, samples: 256, n_steps: 150, restarts: 4, seed, ..SolverConfig::default() };
        let got = solve_ceo(&m, 2, &cfg).unwrap().objective.combined;
        assert!(got <= opt * 1.05 + 1e-9, "seed {seed}: {got} vs optimum {opt}");
    }
}

/// Cluster of every planted token and expert must match up to one
/// bijection of cluster ids.
fn recovers(a: &Assignment, m: &TokenExpertMatrix, tokens: &[ClusterId], experts: &[ClusterId]) -> bool {
    let mut map = vec![None; a.n_clusters];
    let pairs = m
        .token_ids
        .iter()
        .enumerate()
        .map(|(j, &t)| (a.token_labels[j], tokens[t as usize]))
        .chain(a.expert_labels.iter().zip(experts).map(|(&s, &g)| (s, g)));
    for (s, g) in pairs {
        match map[s as usize] {
            None => map[s as usize] = Some(g),
            Some(x) if x != g => return false,
            _ => {}
        }
    }
    let mut seen: Vec<_> = map.iter().flatten().collect();
    seen.sort();
    seen.dedup();
    seen.len() == map.iter().flatten().count()
}

#[test]
fn ceo_recovers_small_planted_profile() {
    let topo = Topology::new(4, 8, 2, 1, 40);
    for seed in 0..10 {
        let mut cfg = PlantedConfig::new(topo, 0.0, 10, seed);
        cfg.requests = 16;
        let p = synthesize_planted_profile(&cfg).unwrap();
        let m = &p.matrices[0];
        let solver = SolverConfig { samples: 64, n_steps: 50, eta: 0.3, restarts: 4, seed, ..SolverConfig::default() };
        let out = solve_ceo(m, 4, &solver).unwrap();
        assert_eq!(metrics_on_matrix(&out.assignment, m).unwrap().lar, 1.0, "seed {seed}");
        assert!(recovers(&out.assignment, m, &p.token_labels, &p.expert_labels[0]), "seed {seed}");
    }
}

#[test]
fn alternating_recovers_pure_request_clusters() {
    let topo = Topology::new(4, 16, 2, 1, 200);
    for seed in 0..3 {
        let mut cfg = PlantedConfig::new(topo, 0.0, 50, seed);
        cfg.pure_requests = true;
        let p = synthesize_planted_profile(&cfg).unwrap();
        let out = solve_alternating(&p.matrices[0], &p.trace, 4, &SolverConfig { seed, ..SolverConfig::default() })
            .unwrap();
        let mut map = [None; 4];
        for (&s, &g) in out.request_labels.iter().zip(&p.request_labels) {
            let slot = &mut map[s as usize];
            assert!(slot.is_none_or(|x| x == g), "seed {seed}: request cluster {s} mixes planted clusters");
            *slot = Some(g);
        }
    }
}

/// Longest-processing-time placement under the `N/E` cardinality cap.
fn lpt_loads(loads: &[f64], e: usize) -> Vec<f64> {
    let cap = loads.len() / e;
    let mut order: Vec<usize> = (0..loads.len()).collect();
    order.sort_by(|&a, &b| loads[b].total_cmp(&loads[a]));
    let mut bins = vec![0.0f64; e];
    let mut fill = vec![0usize; e];
    for x in order {
        let c = (0..e).filter(|&c| fill[c] < cap).min_by(|&a, &b| bins[a].total_cmp(&bins[b])).unwrap();
        bins[c] += loads[x];
        fill[c] += 1;
    }
    bins
}

#[test]
fn load_dominated_placement_tracks_lpt() {
    let mut rng = common::rng(43);
    for seed in 0..20 {
        let e = 4;
        let n = 16;
        let trace = common::random_trace(&mut rng, 1, n, 2, 50, 40, 12);
        let m = trace.layer_matrices().unwrap().remove(0);
        let cfg = SolverConfig { gamma_e: 1e9, seed, ..SolverConfig::default() };
        let a = solve_alternating(&m, &trace, e, &cfg).unwrap().assignment;
        let col: Vec<f64> = m.column_sums().iter().map(|&c| c as f64).collect();
        let mut got = vec![0.0f64; e];
        for (x, &c) in a.expert_labels.iter().enumerate() {
            got[c as usize] += col[x];
        }
        let oracle = lpt_loads(&col, e);
        let max_item = col.iter().cloned().fold(0.0, f64::max);
        let gmax = got.iter().cloned().fold(0.0, f64::max);
        let omax = oracle.iter().cloned().fold(0.0, f64::max);
        assert!((gmax - omax).abs() <= max_item, "seed {seed}: max load {gmax} vs LPT {omax}");
        let gmin = got.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(gmax - gmin <= max_item, "seed {seed}: spread {} > one expert {max_item}", gmax - gmin);
    }
}
