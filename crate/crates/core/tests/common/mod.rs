#![allow(dead_code)]

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cosched::trace::{Request, RequestTrace, TokenExpertMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Routed trace with uniformly random tokens and expert sets.
pub fn random_trace(
    rng: &mut ChaCha8Rng,
    layers: usize,
    n: usize,
    k: usize,
    vocab: usize,
    requests: usize,
    max_len: usize,
) -> RequestTrace {
    let mut trace = RequestTrace::new(layers, n, k, vocab);
    for id in 0..requests {
        let len = rng.gen_range(1..=max_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let routes: Vec<u16> = (0..len * layers)
            .flat_map(|_| index::sample(rng, n, k).into_iter().map(|x| x as u16).collect::<Vec<_>>())
            .collect();
        trace.requests.push(Request { id: id as u64, tokens, routes });
    }
    trace
}

/// Count matrix with tokens `0..t`, each with 1..=max_occ occurrences of
/// `k` distinct experts.
pub fn random_matrix(rng: &mut ChaCha8Rng, t: usize, n: usize, k: usize, max_occ: u32) -> TokenExpertMatrix {
    let rows: Vec<(u32, Vec<u32>)> = (0..t as u32)
        .map(|tok| {
            let mut row = vec![0u32; n];
            for _ in 0..rng.gen_range(1..=max_occ) {
                for x in index::sample(rng, n, k) {
                    row[x] += 1;
                }
            }
            (tok, row)
        })
        .collect();
    TokenExpertMatrix::from_rows(0, n, rows).unwrap()
}
