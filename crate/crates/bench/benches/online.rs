use std::hint::black_box;

use cosched::scheduler::{
    apply_expert_shuffle, rebatch_tokens, resume_tokens, schedule_request_dp, RequestScheduler,
};
use criterion::{criterion_group, criterion_main, Criterion};

fn online(c: &mut Criterion) {
    let batch: Vec<u32> = (0..4096u32).map(|i| i.wrapping_mul(2_654_435_761) % 102_400).collect();
    let clusters: Vec<u16> = batch.iter().map(|&t| (t % 8) as u16).collect();
    c.bench_function("rebatch_resume_4096_g8", |b| {
        b.iter(|| {
            let (s, idx) = rebatch_tokens(black_box(&batch), &clusters, 8).unwrap();
            resume_tokens(&s, &idx).unwrap()
        })
    });

    let labels: Vec<u16> = (0..102_400u32).map(|t| (t % 8) as u16).collect();
    let request = &batch[..512];
    c.bench_function("schedule_request_dp_512", |b| {
        let mut state = RequestScheduler::new(8);
        b.iter(|| schedule_request_dp(black_box(request), &labels, &mut state))
    });

    let table: Vec<u16> = (0..64u16).map(|j| (j * 7) % 8).collect();
    let weights: Vec<u32> = (0..64).collect();
    let gate: Vec<f32> = (0..64).map(|j| j as f32 * 0.5).collect();
    c.bench_function("expert_shuffle_n64", |b| {
        b.iter(|| apply_expert_shuffle(black_box(&weights), &gate, &table, 8).unwrap())
    });
}

criterion_group!(benches, online);
criterion_main!(benches);
