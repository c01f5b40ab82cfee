//! Exact top-k retrieval over initial-observation embeddings, cross-checked
//! against the exhaustive-scan oracle.
//!
//! Run with: cargo run --release --example retrieval_search

use gsa::datastore::index::TruncEncoder;
use gsa::datastore::{brute_force_topk, build_index, retrieve_topk, OfflineStore, RecordMeta, StoreHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let dim = 8;
    let mut store = OfflineStore::in_memory(StoreHeader {
        obs_mode: 0,
        obs_shape: vec![dim],
        action_dim: 3,
    });
    for _ in 0..1000 {
        let mut obs: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        obs.extend(vec![0.0; dim]);
        store.append(0, obs, vec![0.0; 3], None, RecordMeta::default()).unwrap();
    }
    store.freeze();

    let encoder = TruncEncoder::new(dim);
    let index = build_index(&store, &encoder).unwrap();
    let query: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();

    let fast = retrieve_topk(&index, &query, &encoder, 5).unwrap();
    let slow = brute_force_topk(&store, &query, &encoder, 5).unwrap();
    println!("rank  index-scan            exhaustive-scan");
    for (i, (a, b)) in fast.iter().zip(&slow).enumerate() {
        println!("{i}     id {:>4} d {:.4}      id {:>4} d {:.4}", a.0, a.1, b.0, b.1);
    }
    assert_eq!(fast, slow, "both paths must agree exactly");

    // A stored observation as its own query comes back at distance zero.
    let own = store.record(123).unwrap();
    let hit = retrieve_topk(&index, own.first_obs(), &encoder, 1).unwrap();
    println!("\nself-query: id {} at distance {}", hit[0].0, hit[0].1);
}
