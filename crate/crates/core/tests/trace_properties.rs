mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;

use cosched::trace::{ingest_reader, synthesize_planted_profile, write_trace, PlantedConfig};
use cosched::Topology;

fn emit(trace: &cosched::trace::RequestTrace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emit_then_ingest_reproduces_counts(seed: u64, layers in 1usize..4, e in 1usize..4, m in 1usize..4, k_raw in 1usize..4) {
        let n = e * m;
        let k = k_raw.min(n);
        let vocab = 20;
        let mut rng = common::rng(seed);
        let trace = common::random_trace(&mut rng, layers, n, k, vocab, 6, 8);
        let topo = Topology::new(e, n, k, layers, vocab);
        let profile = ingest_reader(emit(&trace).as_bytes(), &topo).unwrap();
        prop_assert_eq!(&profile.matrices, &trace.layer_matrices().unwrap());
        prop_assert_eq!(&profile.trace, &trace);
    }

    #[test]
    fn record_order_does_not_change_counts(seed: u64) {
        let mut rng = common::rng(seed);
        let trace = common::random_trace(&mut rng, 2, 8, 2, 30, 8, 10);
        let topo = Topology::new(4, 8, 2, 2, 30);
        let text = emit(&trace);
        let mut lines: Vec<&str> = text.lines().collect();
        lines.shuffle(&mut rng);
        let shuffled = lines.join("\n");
        let a = ingest_reader(text.as_bytes(), &topo).unwrap();
        let b = ingest_reader(shuffled.as_bytes(), &topo).unwrap();
        prop_assert_eq!(a.matrices, b.matrices);
        prop_assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn duplicated_records_aggregate(seed: u64) {
        let mut rng = common::rng(seed);
        let trace = common::random_trace(&mut rng, 1, 4, 1, 10, 5, 6);
        let topo = Topology::new(2, 4, 1, 1, 10);
        let text = emit(&trace);
        let doubled: String = text.lines().flat_map(|l| [l, "\n", l, "\n"]).collect();
        let once = ingest_reader(text.as_bytes(), &topo).unwrap().matrices.remove(0);
        let twice = ingest_reader(doubled.as_bytes(), &topo).unwrap().matrices.remove(0);
        prop_assert_eq!(&once.token_ids, &twice.token_ids);
        prop_assert_eq!(twice.total, 2 * once.total);
        for (a, b) in once.counts.iter().zip(&twice.counts) {
            prop_assert_eq!(2 * a, *b);
        }
    }

    #[test]
    fn planted_profiles_are_seed_deterministic(seed: u64, noise in 0.0f64..0.9) {
        let mut cfg = PlantedConfig::new(Topology::new(4, 8, 2, 2, 64), noise, 8, seed);
        cfg.requests = 8;
        let a = synthesize_planted_profile(&cfg).unwrap();
        let b = synthesize_planted_profile(&cfg).unwrap();
        prop_assert_eq!(a.matrices, b.matrices);
        prop_assert_eq!(a.expert_labels, b.expert_labels);
    }
}

/// Every slot stays in its block with probability `1 - noise`, so the
/// within-block share of events concentrates there.
#[test]
fn within_block_mass_matches_generator() {
    let noise = 0.3;
    let topo = Topology::new(4, 16, 2, 2, 400);
    let mut cfg = PlantedConfig::new(topo, noise, 100, 17);
    cfg.requests = 800;
    cfg.request_len = 40;
    let p = synthesize_planted_profile(&cfg).unwrap();
    let (mut inside, mut total) = (0u64, 0u64);
    for (layer, m) in p.matrices.iter().enumerate() {
        for (j, &tok) in m.token_ids.iter().enumerate() {
            let c = p.token_labels[tok as usize];
            for (x, &cnt) in m.row(j).iter().enumerate() {
                total += cnt as u64;
                if p.expert_labels[layer][x] == c {
                    inside += cnt as u64;
                }
            }
        }
    }
    assert!(total >= 100_000, "{total} samples");
    let share = inside as f64 / total as f64;
    // Two slots of one occurrence are drawn independently, so events are
    // independent Bernoulli(1 - noise) draws.
    let sigma = (noise * (1.0 - noise) / total as f64).sqrt();
    assert!((share - (1.0 - noise)).abs() <= 3.0 * sigma, "share {share}, 3 sigma {}", 3.0 * sigma);
}
