//! Exact top-k retrieval over initial-observation embeddings.
//!
//! The index is a flat scan over contiguous embeddings with a bounded-heap
//! selection; `brute_force_topk` re-encodes straight from the store and
//! fully sorts, serving as the independent oracle for the index path.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{DataError, OfflineStore, RecordSource};

/// Deterministic observation embedder (the world model's encoder in the
/// full pipeline).
pub trait ObsEncoder {
    fn embed(&self, obs: &[f32]) -> Vec<f32>;
    fn embed_width(&self) -> usize;
    /// Identity of the encoder weights, used to tie an index file to the
    /// checkpoint that produced it.
    fn weight_checksum(&self) -> [u8; 32];
}

/// Raw-observation embedder: the first `width` entries, unchanged. Used by
/// verification harnesses where distances must be controllable exactly.
pub struct TruncEncoder {
    width: usize,
}

impl TruncEncoder {
    pub fn new(width: usize) -> Self {
        Self { width }
    }
}

impl ObsEncoder for TruncEncoder {
    fn embed(&self, obs: &[f32]) -> Vec<f32> {
        obs[..self.width].to_vec()
    }
    fn embed_width(&self) -> usize {
        self.width
    }
    fn weight_checksum(&self) -> [u8; 32] {
        let mut c = [0u8; 32];
        c[..8].copy_from_slice(&(self.width as u64).to_le_bytes());
        c
    }
}

/// Frozen map from trajectory id to initial-observation embedding.
pub struct RetrievalIndex {
    pub encoder_checksum: [u8; 32],
    pub width: usize,
    pub ids: Vec<u64>,
    /// Row-major `[len, width]`.
    pub embeddings: Vec<f32>,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embedding(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.width..(row + 1) * self.width]
    }
}

/// Embeds every trajectory's first observation. Deterministic: rebuilding
/// from the same encoder and store yields identical bytes.
pub fn build_index(store: &OfflineStore, encoder: &dyn ObsEncoder) -> Result<RetrievalIndex, DataError> {
    if store.header().obs_len() != 0 {
        // Width checked per record below via the encoder contract.
    }
    let width = encoder.embed_width();
    let mut ids = Vec::with_capacity(store.len());
    let mut embeddings = Vec::with_capacity(store.len() * width);
    for idx in 0..store.len() {
        let rec = store.fetch(idx)?;
        let e = encoder.embed(rec.first_obs());
        debug_assert_eq!(e.len(), width);
        ids.push(rec.trajectory_id);
        embeddings.extend(e);
    }
    Ok(RetrievalIndex {
        encoder_checksum: encoder.weight_checksum(),
        width,
        ids,
        embeddings,
    })
}

fn euclidean(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

#[derive(PartialEq)]
struct Candidate {
    dist: f32,
    id: u64,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Ascending by distance, ties broken by smaller id.
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The k trajectory ids nearest to `query_obs` in embedding space,
/// ascending by distance, ties by smaller id. Returns `min(k, index len)`
/// entries.
pub fn retrieve_topk(
    index: &RetrievalIndex,
    query_obs: &[f32],
    encoder: &dyn ObsEncoder,
    k: usize,
) -> Result<Vec<(u64, f32)>, DataError> {
    assert!(k >= 1, "k must be at least 1");
    if index.is_empty() {
        return Err(DataError::EmptyIndex);
    }
    let q = encoder.embed(query_obs);
    // Max-heap of the best k so far; the worst candidate sits on top.
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for row in 0..index.len() {
        let cand = Candidate {
            dist: euclidean(&q, index.embedding(row)),
            id: index.ids[row],
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
    }
    let mut out: Vec<(u64, f32)> = heap.into_iter().map(|c| (c.id, c.dist)).collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(out)
}

/// Exhaustive-scan oracle: re-encodes every stored first observation and
/// fully sorts with the same tie rule as `retrieve_topk`.
pub fn brute_force_topk(
    store: &OfflineStore,
    query_obs: &[f32],
    encoder: &dyn ObsEncoder,
    k: usize,
) -> Result<Vec<(u64, f32)>, DataError> {
    assert!(k >= 1, "k must be at least 1");
    if store.is_empty() {
        return Err(DataError::EmptyIndex);
    }
    let q = encoder.embed(query_obs);
    let mut all: Vec<(u64, f32)> = Vec::with_capacity(store.len());
    for idx in 0..store.len() {
        let rec = store.fetch(idx)?;
        let e = encoder.embed(rec.first_obs());
        all.push((rec.trajectory_id, euclidean(&q, &e)));
    }
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    Ok(all)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datastore::{OfflineStore, RecordMeta, StoreHeader};

    pub(crate) fn store_with_first_obs(points: &[Vec<f32>]) -> OfflineStore {
        let dim = points[0].len();
        let mut store = OfflineStore::in_memory(StoreHeader {
            obs_mode: 0,
            obs_shape: vec![dim],
            action_dim: 3,
        });
        for p in points {
            let mut obs = p.clone();
            obs.extend(vec![0.0; dim]); // one dummy follow-up frame
            store
                .append(0, obs, vec![0.0; 3], None, RecordMeta::default())
                .unwrap();
        }
        store.freeze();
        store
    }

    #[test]
    fn empty_store_yields_empty_index() {
        let store = {
            let mut s = OfflineStore::in_memory(StoreHeader {
                obs_mode: 0,
                obs_shape: vec![2],
                action_dim: 3,
            });
            s.freeze();
            s
        };
        let idx = build_index(&store, &TruncEncoder::new(2)).unwrap();
        assert!(idx.is_empty());
        assert!(matches!(
            retrieve_topk(&idx, &[0.0, 0.0], &TruncEncoder::new(2), 1),
            Err(DataError::EmptyIndex)
        ));
    }

    #[test]
    fn duplicate_trajectories_get_identical_embeddings() {
        let store = store_with_first_obs(&[vec![0.5, -0.5], vec![0.5, -0.5]]);
        let idx = build_index(&store, &TruncEncoder::new(2)).unwrap();
        assert_eq!(idx.embedding(0), idx.embedding(1));
    }

    #[test]
    fn self_query_ranks_first_with_zero_distance() {
        let store = store_with_first_obs(&[
            vec![0.1, 0.2],
            vec![0.9, -0.3],
            vec![-0.4, 0.7],
        ]);
        let idx = build_index(&store, &TruncEncoder::new(2)).unwrap();
        let q = store.record(1).unwrap().first_obs().to_vec();
        let got = retrieve_topk(&idx, &q, &TruncEncoder::new(2), 2).unwrap();
        assert_eq!(got[0].0, 1);
        assert_eq!(got[0].1, 0.0);
    }

    #[test]
    fn k_at_least_store_size_returns_everything_sorted() {
        let store = store_with_first_obs(&[vec![3.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]]);
        let idx = build_index(&store, &TruncEncoder::new(2)).unwrap();
        let got = retrieve_topk(&idx, &[0.0, 0.0], &TruncEncoder::new(2), 10).unwrap();
        assert_eq!(got.len(), 3);
        let ids: Vec<u64> = got.iter().map(|g| g.0).collect();
        assert_eq!(ids, vec![1, 2, 0]);
    }

    #[test]
    fn ties_break_by_smaller_id() {
        let store = store_with_first_obs(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]);
        let idx = build_index(&store, &TruncEncoder::new(2)).unwrap();
        let got = retrieve_topk(&idx, &[0.0, 0.0], &TruncEncoder::new(2), 3).unwrap();
        let ids: Vec<u64> = got.iter().map(|g| g.0).collect();
        assert_eq!(ids, vec![0, 1, 2], "equal distances must order by id");
    }

    #[test]
    fn brute_force_singleton_and_two_point_cases() {
        let store = store_with_first_obs(&[vec![5.0, 5.0]]);
        let got = brute_force_topk(&store, &[0.0, 0.0], &TruncEncoder::new(2), 3).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 0);

        let store = store_with_first_obs(&[vec![5.0, 5.0], vec![1.0, 1.0]]);
        let got = brute_force_topk(&store, &[0.9, 0.9], &TruncEncoder::new(2), 1).unwrap();
        assert_eq!(got[0].0, 1);
    }
}
