//! Store and index file formats.
//!
//! Store file ("GSA1"):
//!   magic "GSA1" | version u16 | obs_mode u8 | obs_rank u8 | obs_dims u32*
//!   | action_dim u32 | record_count u64 | records...
//! Each record:
//!   trajectory_id u64 | embodiment_id u16 | T u32 | rewards_present u8
//!   | source_len u8 + utf8 | sigma f32
//!   | observations f32*(T+1)*obs_len | actions f32*T*A | rewards f32*T?
//!   | crc32 u32 (over all preceding bytes of the record)
//! All scalars little-endian, payloads 32-bit floats.
//!
//! Index file ("GSAI"):
//!   magic "GSAI" | version u16 | encoder checkpoint checksum [32]
//!   | embedding width u32 | count u64 | rows (id u64 + f32*width)

use std::cell::Cell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::index::RetrievalIndex;
use super::{DataError, OfflineStore, RecordMeta, StoreHeader, TrajectoryRecord};

pub const STORE_MAGIC: [u8; 4] = *b"GSA1";
pub const INDEX_MAGIC: [u8; 4] = *b"GSAI";
pub const STORE_VERSION: u16 = 1;
pub const INDEX_VERSION: u16 = 1;

/// CRC-32 (IEEE 802.3), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, slot) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        t
    });
    let mut crc = 0xFFFFFFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for &x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode_record(rec: &TrajectoryRecord) -> Vec<u8> {
    let mut body = Vec::with_capacity(32 + 4 * (rec.observations.len() + rec.actions.len()));
    body.extend_from_slice(&rec.trajectory_id.to_le_bytes());
    body.extend_from_slice(&rec.embodiment_id.to_le_bytes());
    body.extend_from_slice(&(rec.len() as u32).to_le_bytes());
    body.push(rec.rewards.is_some() as u8);
    let src = rec.meta.source.as_bytes();
    assert!(src.len() <= u8::MAX as usize, "source tag too long");
    body.push(src.len() as u8);
    body.extend_from_slice(src);
    body.extend_from_slice(&rec.meta.sigma.to_le_bytes());
    put_f32s(&mut body, &rec.observations);
    put_f32s(&mut body, &rec.actions);
    if let Some(r) = &rec.rewards {
        put_f32s(&mut body, r);
    }
    let crc = crc32(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

fn encode_header(header: &StoreHeader, count: u64) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&STORE_MAGIC);
    out.extend_from_slice(&STORE_VERSION.to_le_bytes());
    out.push(header.obs_mode);
    out.push(header.obs_shape.len() as u8);
    for &d in &header.obs_shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(header.action_dim as u32).to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out
}

/// Streams records straight to disk; `finish` patches the record count.
pub struct StoreFileWriter {
    file: BufWriter<File>,
    header: StoreHeader,
    next_id: u64,
    count_offset: u64,
}

impl StoreFileWriter {
    pub fn create(path: &Path, header: StoreHeader) -> Result<Self, DataError> {
        let mut file = BufWriter::new(File::create(path)?);
        let bytes = encode_header(&header, 0);
        let count_offset = (bytes.len() - 8) as u64;
        file.write_all(&bytes)?;
        Ok(Self {
            file,
            header,
            next_id: 0,
            count_offset,
        })
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn append(
        &mut self,
        embodiment_id: u16,
        observations: Vec<f32>,
        actions: Vec<f32>,
        rewards: Option<Vec<f32>>,
        meta: RecordMeta,
    ) -> Result<u64, DataError> {
        let rec = TrajectoryRecord {
            trajectory_id: self.next_id,
            embodiment_id,
            obs_len: self.header.obs_len(),
            action_dim: self.header.action_dim,
            observations,
            actions,
            rewards,
            meta,
        };
        rec.validate()?;
        self.file.write_all(&encode_record(&rec))?;
        self.next_id += 1;
        Ok(rec.trajectory_id)
    }

    pub fn finish(mut self) -> Result<(), DataError> {
        self.file.flush()?;
        let mut file = self.file.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(self.count_offset))?;
        file.write_all(&self.next_id.to_le_bytes())?;
        file.sync_all()?;
        Ok(())
    }
}

/// Writes any store to a file; round-trips bitwise.
pub fn serialize_store(store: &OfflineStore, path: &Path) -> Result<(), DataError> {
    let mut writer = StoreFileWriter::create(path, store.header().clone())?;
    for id in 0..store.len() as u64 {
        let rec = store.record(id)?;
        writer.append(
            rec.embodiment_id,
            rec.observations,
            rec.actions,
            rec.rewards,
            rec.meta,
        )?;
    }
    writer.finish()
}

struct CountingReader {
    inner: BufReader<File>,
    bytes: Cell<u64>,
}

impl CountingReader {
    fn read_exact_counted(&mut self, buf: &mut [u8]) -> std::io::Result<()> {
        self.inner.read_exact(buf)?;
        self.bytes.set(self.bytes.get() + buf.len() as u64);
        Ok(())
    }
}

/// Frozen store file with per-record offsets; payloads are read on demand
/// and checksum-verified on access.
pub struct LazyStoreFile {
    path: PathBuf,
    reader: Mutex<CountingReader>,
    header: StoreHeader,
    /// (byte offset of record start, transition count) per record.
    offsets: Vec<(u64, u32)>,
}

impl LazyStoreFile {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn record_len(&self, idx: usize) -> usize {
        self.offsets[idx].1 as usize
    }

    pub fn bytes_read(&self) -> u64 {
        self.reader.lock().unwrap().bytes.get()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read_record(&self, id: u64) -> Result<TrajectoryRecord, DataError> {
        let (offset, t) = *self
            .offsets
            .get(id as usize)
            .ok_or(DataError::NoSuchRecord(id))?;
        let obs_len = self.header.obs_len();
        let a_dim = self.header.action_dim;
        let mut guard = self.reader.lock().unwrap();
        guard.inner.seek(SeekFrom::Start(offset))?;

        let fixed = record_fixed_len(t as usize, obs_len, a_dim);
        // Fixed part + worst-case source tag; the actual boundary comes from
        // the embedded source_len.
        let mut head = vec![0u8; 15];
        guard
            .read_exact_counted(&mut head)
            .map_err(|_| DataError::Truncated(format!("record {id} header")))?;
        let trajectory_id = u64::from_le_bytes(head[0..8].try_into().unwrap());
        let embodiment_id = u16::from_le_bytes(head[8..10].try_into().unwrap());
        let t_stored = u32::from_le_bytes(head[10..14].try_into().unwrap());
        let rewards_present = head[14] != 0;
        if t_stored != t {
            return Err(DataError::Truncated(format!(
                "record {id}: offset table and record disagree on length"
            )));
        }
        let mut src_len = [0u8; 1];
        guard
            .read_exact_counted(&mut src_len)
            .map_err(|_| DataError::Truncated(format!("record {id} source tag")))?;
        let mut src = vec![0u8; src_len[0] as usize];
        guard
            .read_exact_counted(&mut src)
            .map_err(|_| DataError::Truncated(format!("record {id} source tag")))?;
        let mut sigma_b = [0u8; 4];
        guard
            .read_exact_counted(&mut sigma_b)
            .map_err(|_| DataError::Truncated(format!("record {id} sigma")))?;

        let payload_floats =
            (t as usize + 1) * obs_len + t as usize * a_dim + if rewards_present { t as usize } else { 0 };
        let mut payload = vec![0u8; payload_floats * 4 + 4];
        guard
            .read_exact_counted(&mut payload)
            .map_err(|_| DataError::Truncated(format!("record {id} payload")))?;
        drop(guard);

        // Re-assemble the exact byte stream for checksum verification.
        let body_len = 15 + 1 + src.len() + 4 + payload_floats * 4;
        let mut body = Vec::with_capacity(body_len);
        body.extend_from_slice(&head);
        body.push(src_len[0]);
        body.extend_from_slice(&src);
        body.extend_from_slice(&sigma_b);
        body.extend_from_slice(&payload[..payload_floats * 4]);
        let stored_crc = u32::from_le_bytes(payload[payload_floats * 4..].try_into().unwrap());
        if crc32(&body) != stored_crc {
            return Err(DataError::ChecksumMismatch(id));
        }
        let _ = fixed;

        let floats: Vec<f32> = payload[..payload_floats * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n_obs = (t as usize + 1) * obs_len;
        let n_act = t as usize * a_dim;
        let observations = floats[..n_obs].to_vec();
        let actions = floats[n_obs..n_obs + n_act].to_vec();
        let rewards = rewards_present.then(|| floats[n_obs + n_act..].to_vec());

        Ok(TrajectoryRecord {
            trajectory_id,
            embodiment_id,
            obs_len,
            action_dim: a_dim,
            observations,
            actions,
            rewards,
            meta: RecordMeta {
                source: String::from_utf8_lossy(&src).into_owned(),
                sigma: f32::from_le_bytes(sigma_b),
            },
        })
    }
}

fn record_fixed_len(t: usize, obs_len: usize, a_dim: usize) -> usize {
    15 + ((t + 1) * obs_len + t * a_dim) * 4
}

/// Opens a store file, reading only record headers (payloads are skipped
/// with seeks, so opening a large store touches a small fraction of it).
/// Truncated files fail closed: no partial store is returned.
pub fn load_store(path: &Path) -> Result<OfflineStore, DataError> {
    let file = File::open(path)?;
    let file_size = file.metadata()?.len();
    let mut reader = CountingReader {
        inner: BufReader::new(file),
        bytes: Cell::new(0),
    };

    let mut magic = [0u8; 4];
    reader
        .read_exact_counted(&mut magic)
        .map_err(|_| DataError::Truncated("missing magic".into()))?;
    if magic != STORE_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: STORE_MAGIC,
        });
    }
    let mut buf2 = [0u8; 2];
    reader
        .read_exact_counted(&mut buf2)
        .map_err(|_| DataError::Truncated("missing version".into()))?;
    let version = u16::from_le_bytes(buf2);
    if version != STORE_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let mut mode_rank = [0u8; 2];
    reader
        .read_exact_counted(&mut mode_rank)
        .map_err(|_| DataError::Truncated("missing header".into()))?;
    let obs_mode = mode_rank[0];
    let rank = mode_rank[1] as usize;
    let mut obs_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        reader
            .read_exact_counted(&mut b)
            .map_err(|_| DataError::Truncated("missing obs shape".into()))?;
        obs_shape.push(u32::from_le_bytes(b) as usize);
    }
    let mut b4 = [0u8; 4];
    reader
        .read_exact_counted(&mut b4)
        .map_err(|_| DataError::Truncated("missing action dim".into()))?;
    let action_dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    reader
        .read_exact_counted(&mut b8)
        .map_err(|_| DataError::Truncated("missing record count".into()))?;
    let count = u64::from_le_bytes(b8);

    let header = StoreHeader {
        obs_mode,
        obs_shape,
        action_dim,
    };
    let obs_len = header.obs_len();

    // Walk record headers, seeking over payloads.
    let mut offsets = Vec::with_capacity(count as usize);
    let mut pos = reader.inner.stream_position()?;
    for i in 0..count {
        offsets.reserve(1);
        let mut head = [0u8; 15];
        reader
            .read_exact_counted(&mut head)
            .map_err(|_| DataError::Truncated(format!("record {i} of {count} missing")))?;
        let t = u32::from_le_bytes(head[10..14].try_into().unwrap());
        let rewards_present = head[14] != 0;
        let mut src_len = [0u8; 1];
        reader
            .read_exact_counted(&mut src_len)
            .map_err(|_| DataError::Truncated(format!("record {i} source tag missing")))?;
        let payload = (src_len[0] as usize)
            + 4
            + ((t as usize + 1) * obs_len
                + t as usize * action_dim
                + if rewards_present { t as usize } else { 0 })
                * 4
            + 4;
        let end = pos + 16 + payload as u64;
        if end > file_size {
            return Err(DataError::Truncated(format!(
                "record {i} extends past end of file ({end} > {file_size})"
            )));
        }
        reader.inner.seek(SeekFrom::Start(end))?;
        offsets.push((pos, t));
        pos = end;
    }
    if pos != file_size {
        return Err(DataError::Truncated(format!(
            "{} trailing bytes after last record",
            file_size - pos
        )));
    }

    Ok(OfflineStore::from_file(
        header.clone(),
        LazyStoreFile {
            path: path.to_path_buf(),
            reader: Mutex::new(reader),
            header,
            offsets,
        },
    ))
}

/// Serializes a retrieval index.
pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&index.encoder_checksum);
    out.extend_from_slice(&(index.width as u32).to_le_bytes());
    out.extend_from_slice(&(index.ids.len() as u64).to_le_bytes());
    for (i, &id) in index.ids.iter().enumerate() {
        out.extend_from_slice(&id.to_le_bytes());
        put_f32s(&mut out, &index.embeddings[i * index.width..(i + 1) * index.width]);
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<RetrievalIndex, DataError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 2 + 32 + 4 + 8 {
        return Err(DataError::Truncated("index header".into()));
    }
    if bytes[0..4] != INDEX_MAGIC {
        return Err(DataError::BadMagic {
            found: bytes[0..4].try_into().unwrap(),
            expected: INDEX_MAGIC,
        });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != INDEX_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let mut encoder_checksum = [0u8; 32];
    encoder_checksum.copy_from_slice(&bytes[6..38]);
    let width = u32::from_le_bytes(bytes[38..42].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[42..50].try_into().unwrap()) as usize;
    let row = 8 + width * 4;
    if bytes.len() != 50 + count * row {
        return Err(DataError::Truncated(format!(
            "index body: have {} bytes, expected {}",
            bytes.len(),
            50 + count * row
        )));
    }
    let mut ids = Vec::with_capacity(count);
    let mut embeddings = Vec::with_capacity(count * width);
    for i in 0..count {
        let base = 50 + i * row;
        ids.push(u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap()));
        for j in 0..width {
            let o = base + 8 + j * 4;
            embeddings.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
        }
    }
    Ok(RetrievalIndex {
        encoder_checksum,
        width,
        ids,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store(n: usize, t: usize) -> OfflineStore {
        let header = StoreHeader {
            obs_mode: 0,
            obs_shape: vec![4],
            action_dim: 3,
        };
        let mut store = OfflineStore::in_memory(header);
        for i in 0..n {
            let obs = (0..(t + 1) * 4).map(|j| (i * 100 + j) as f32 * 0.01).collect();
            let actions = (0..t * 3).map(|j| ((j + i) % 19) as f32 / 19.0 - 0.5).collect();
            let rewards = (i % 2 == 0).then(|| (0..t).map(|j| j as f32).collect());
            store
                .append(
                    (i % 3) as u16,
                    obs,
                    actions,
                    rewards,
                    RecordMeta {
                        source: format!("unit:{i}"),
                        sigma: i as f32 * 0.1,
                    },
                )
                .unwrap();
        }
        store
    }

    #[test]
    fn roundtrip_preserves_records_bitwise() {
        let dir = std::env::temp_dir().join(format!("gsa_store_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.gsa1");
        let store = sample_store(3, 5);
        serialize_store(&store, &path).unwrap();
        let loaded = load_store(&path).unwrap();
        assert!(loaded.is_frozen());
        assert_eq!(loaded.len(), 3);
        for id in 0..3u64 {
            assert_eq!(store.record(id).unwrap(), loaded.record(id).unwrap());
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_file_fails_closed() {
        let dir = std::env::temp_dir().join(format!("gsa_store_trunc_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.gsa1");
        serialize_store(&sample_store(3, 5), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_store(&path), Err(DataError::Truncated(_))));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_and_version_reported_distinctly() {
        let dir = std::env::temp_dir().join(format!("gsa_store_magic_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic.gsa1");
        serialize_store(&sample_store(1, 2), &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_store(&path), Err(DataError::BadMagic { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'G';
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_store(&path),
            Err(DataError::UnsupportedVersion(99))
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupted_payload_fails_checksum_on_access() {
        let dir = std::env::temp_dir().join(format!("gsa_store_crc_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("crc.gsa1");
        serialize_store(&sample_store(2, 4), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Flip a byte in the middle of the first record's payload.
        let hit = 60;
        bytes[hit] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let store = load_store(&path).unwrap();
        assert!(matches!(
            store.record(0),
            Err(DataError::ChecksumMismatch(0))
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn crc32_known_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
    }
}
