//! Trajectory persistence, replay buffers, and retrieval.
//!
//! The offline store is an append-only, file-backed collection of episodes
//! (reward-free, mixed quality, multiple embodiments). The online buffer is
//! a bounded FIFO of reward-labeled episodes collected during fine-tuning.
//! Retrieval maps trajectory ids to frozen initial-observation embeddings
//! and answers exact top-k nearest-neighbor queries, with a brute-force
//! twin used as its correctness oracle.

pub mod fileio;
pub mod index;
pub mod sampler;

use std::collections::VecDeque;

use thiserror::Error;

pub use fileio::{load_store, serialize_store, StoreFileWriter};
pub use index::{brute_force_topk, build_index, retrieve_topk, RetrievalIndex};
pub use sampler::{mixed_sample, sample_sequences, SeqBatch};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch in record {0}")]
    ChecksumMismatch(u64),
    #[error("checksum mismatch in file trailer")]
    FileChecksumMismatch,
    #[error("store is frozen; no further appends")]
    Frozen,
    #[error("record shape inconsistent: {0}")]
    RecordShape(String),
    #[error("empty data source")]
    EmptySource,
    #[error("record {0} out of range")]
    NoSuchRecord(u64),
    #[error("observation layout mismatch: store has {store:?}, encoder expects {model:?}")]
    ObsLayoutMismatch { store: Vec<usize>, model: Vec<usize> },
    #[error("retrieval index is empty")]
    EmptyIndex,
}

/// How observations in a store are laid out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreHeader {
    /// 0 = vector, 1 = square grayscale image.
    pub obs_mode: u8,
    /// [dim] for vectors, [g, g] for images.
    pub obs_shape: Vec<usize>,
    /// Unified (zero-padded) action width.
    pub action_dim: usize,
}

impl StoreHeader {
    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordMeta {
    /// Collector tag, e.g. "noisy_expert:e1-corridor" or "online".
    pub source: String,
    /// Action noise scale used during collection.
    pub sigma: f32,
}

/// One episode. Observations hold T+1 frames, actions T unified-width
/// vectors, and rewards (when present) T scalars aligned with arrivals:
/// `rewards[t]` is received together with `observations[t+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub trajectory_id: u64,
    pub embodiment_id: u16,
    pub obs_len: usize,
    pub action_dim: usize,
    pub observations: Vec<f32>,
    pub actions: Vec<f32>,
    pub rewards: Option<Vec<f32>>,
    pub meta: RecordMeta,
}

impl TrajectoryRecord {
    /// Number of transitions (T).
    pub fn len(&self) -> usize {
        self.actions.len() / self.action_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs(&self, t: usize) -> &[f32] {
        &self.observations[t * self.obs_len..(t + 1) * self.obs_len]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn first_obs(&self) -> &[f32] {
        self.obs(0)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let t = self.len();
        if self.observations.len() != (t + 1) * self.obs_len {
            return Err(DataError::RecordShape(format!(
                "record {}: {} observation scalars for T={} (obs_len {})",
                self.trajectory_id,
                self.observations.len(),
                t,
                self.obs_len
            )));
        }
        if self.actions.len() != t * self.action_dim {
            return Err(DataError::RecordShape(format!(
                "record {}: action scalars not a multiple of action_dim",
                self.trajectory_id
            )));
        }
        if let Some(r) = &self.rewards {
            if r.len() != t {
                return Err(DataError::RecordShape(format!(
                    "record {}: {} rewards for T={}",
                    self.trajectory_id,
                    r.len(),
                    t
                )));
            }
        }
        if self.actions.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(DataError::RecordShape(format!(
                "record {}: action outside [-1, 1]",
                self.trajectory_id
            )));
        }
        Ok(())
    }
}

/// Anything sequences can be sampled from.
pub trait RecordSource {
    fn num_records(&self) -> usize;
    /// Transition count per record, cheap to query without materializing.
    fn record_len(&self, idx: usize) -> usize;
    fn fetch(&self, idx: usize) -> Result<TrajectoryRecord, DataError>;
}

impl RecordSource for [TrajectoryRecord] {
    fn num_records(&self) -> usize {
        self.len()
    }
    fn record_len(&self, idx: usize) -> usize {
        self[idx].len()
    }
    fn fetch(&self, idx: usize) -> Result<TrajectoryRecord, DataError> {
        Ok(self[idx].clone())
    }
}

impl RecordSource for Vec<TrajectoryRecord> {
    fn num_records(&self) -> usize {
        self.len()
    }
    fn record_len(&self, idx: usize) -> usize {
        self[idx].len()
    }
    fn fetch(&self, idx: usize) -> Result<TrajectoryRecord, DataError> {
        Ok(self[idx].clone())
    }
}

/// Append-only episode collection with a frozen flag. Backed either by
/// memory (while being built) or by a store file (loaded lazily).
pub struct OfflineStore {
    header: StoreHeader,
    backing: Backing,
    frozen: bool,
}

enum Backing {
    Memory(Vec<TrajectoryRecord>),
    File(fileio::LazyStoreFile),
}

impl OfflineStore {
    pub fn in_memory(header: StoreHeader) -> Self {
        Self {
            header,
            backing: Backing::Memory(Vec::new()),
            frozen: false,
        }
    }

    pub(crate) fn from_file(header: StoreHeader, file: fileio::LazyStoreFile) -> Self {
        Self {
            header,
            backing: Backing::File(file),
            frozen: true,
        }
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        match &self.backing {
            Backing::Memory(v) => v.len(),
            Backing::File(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Appends a record, assigning the next dense trajectory id.
    pub fn append(
        &mut self,
        embodiment_id: u16,
        observations: Vec<f32>,
        actions: Vec<f32>,
        rewards: Option<Vec<f32>>,
        meta: RecordMeta,
    ) -> Result<u64, DataError> {
        if self.frozen {
            return Err(DataError::Frozen);
        }
        let id = self.len() as u64;
        let rec = TrajectoryRecord {
            trajectory_id: id,
            embodiment_id,
            obs_len: self.header.obs_len(),
            action_dim: self.header.action_dim,
            observations,
            actions,
            rewards,
            meta,
        };
        rec.validate()?;
        match &mut self.backing {
            Backing::Memory(v) => v.push(rec),
            Backing::File(_) => return Err(DataError::Frozen),
        }
        Ok(id)
    }

    pub fn record(&self, id: u64) -> Result<TrajectoryRecord, DataError> {
        match &self.backing {
            Backing::Memory(v) => v
                .get(id as usize)
                .cloned()
                .ok_or(DataError::NoSuchRecord(id)),
            Backing::File(f) => f.read_record(id),
        }
    }

    /// Bytes actually read from disk so far (0 for memory-backed stores).
    pub fn bytes_read(&self) -> u64 {
        match &self.backing {
            Backing::Memory(_) => 0,
            Backing::File(f) => f.bytes_read(),
        }
    }
}

impl RecordSource for OfflineStore {
    fn num_records(&self) -> usize {
        self.len()
    }
    fn record_len(&self, idx: usize) -> usize {
        match &self.backing {
            Backing::Memory(v) => v[idx].len(),
            Backing::File(f) => f.record_len(idx),
        }
    }
    fn fetch(&self, idx: usize) -> Result<TrajectoryRecord, DataError> {
        self.record(idx as u64)
    }
}

/// Bounded in-memory FIFO of labeled episodes.
pub struct OnlineBuffer {
    records: VecDeque<TrajectoryRecord>,
    capacity: usize,
    next_id: u64,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            records: VecDeque::new(),
            capacity,
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total environment steps currently held.
    pub fn total_steps(&self) -> usize {
        self.records.iter().map(|r| r.len()).sum()
    }

    pub fn push(&mut self, mut record: TrajectoryRecord) -> u64 {
        assert!(
            record.rewards.is_some(),
            "online records must carry rewards"
        );
        record.trajectory_id = self.next_id;
        self.next_id += 1;
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
        record_id_of(self.records.back().unwrap())
    }

    pub fn records(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.records.iter()
    }

    pub fn snapshot(&self) -> Vec<TrajectoryRecord> {
        self.records.iter().cloned().collect()
    }
}

fn record_id_of(r: &TrajectoryRecord) -> u64 {
    r.trajectory_id
}

impl RecordSource for OnlineBuffer {
    fn num_records(&self) -> usize {
        self.records.len()
    }
    fn record_len(&self, idx: usize) -> usize {
        self.records[idx].len()
    }
    fn fetch(&self, idx: usize) -> Result<TrajectoryRecord, DataError> {
        Ok(self.records[idx].clone())
    }
}
