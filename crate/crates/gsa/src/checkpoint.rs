//! Versioned checkpoint container shared by the world model and policies.
//!
//! Layout ("GSAC"):
//!   magic "GSAC" | version u16 | sha256 checksum of the payload [32]
//! Payload:
//!   config blob u32 len + utf8 (flat key=value lines)
//!   | set count u16 | per set: name (u16 len + utf8), param count u32,
//!     per param: name (u16 len + utf8), rank u8, dims u32*, step u64,
//!     value f32*, m f32*, v f32*
//! All scalars little-endian, arrays 32-bit floats.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GSAC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: checkpoint is corrupt")]
    ChecksumMismatch,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("missing parameter set `{0}`")]
    MissingSet(String),
}

/// A checkpoint: the run configuration snapshot plus named parameter sets.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub config_text: String,
    pub sets: Vec<(String, ParamSet<f32>)>,
}

impl Checkpoint {
    pub fn set(&self, name: &str) -> Result<&ParamSet<f32>, CheckpointError> {
        self.sets
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| CheckpointError::MissingSet(name.to_string()))
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let cfg = self.config_text.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        out.extend_from_slice(&(self.sets.len() as u16).to_le_bytes());
        for (name, set) in &self.sets {
            put_str16(&mut out, name);
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for p in set.iter() {
                put_str16(&mut out, &p.name);
                let shape = p.value.shape();
                out.push(shape.len() as u8);
                for &d in shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                out.extend_from_slice(&p.step.to_le_bytes());
                for t in [&p.value, &p.m, &p.v] {
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Content checksum over the payload; identifies the weights exactly.
    pub fn checksum(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.payload());
        digest.into()
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    out.extend_from_slice(&(b.len() as u16).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<[u8; 32], CheckpointError> {
    let payload = ckpt.payload();
    let checksum: [u8; 32] = Sha256::digest(&payload).into();
    let mut f = File::create(path)?;
    f.write_all(&CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&checksum)?;
    f.write_all(&payload)?;
    f.sync_all()?;
    Ok(checksum)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str16(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u16(what)? as usize;
        Ok(String::from_utf8_lossy(self.take(n, what)?).into_owned())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, [u8; 32]), CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 2 + 32 {
        return Err(CheckpointError::Truncated("header".into()));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let stored: [u8; 32] = bytes[6..38].try_into().unwrap();
    let payload = &bytes[38..];
    let computed: [u8; 32] = Sha256::digest(payload).into();
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut cur = Cursor {
        bytes: payload,
        pos: 0,
    };
    let cfg_len = cur.u32("config length")? as usize;
    let config_text = String::from_utf8_lossy(cur.take(cfg_len, "config blob")?).into_owned();
    let set_count = cur.u16("set count")?;
    let mut sets = Vec::with_capacity(set_count as usize);
    for _ in 0..set_count {
        let set_name = cur.str16("set name")?;
        let n_params = cur.u32("param count")?;
        let mut ps: ParamSet<f32> = ParamSet::new();
        for _ in 0..n_params {
            let name = cur.str16("param name")?;
            let rank = cur.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32("dim")? as usize);
            }
            let step = cur.u64("step")?;
            let n: usize = shape.iter().product();
            let value = Tensor::new(shape.clone(), cur.f32s(n, "value")?);
            let m = Tensor::new(shape.clone(), cur.f32s(n, "m")?);
            let v = Tensor::new(shape.clone(), cur.f32s(n, "v")?);
            let id = ps.add(name, value);
            let p = ps.get_mut(id);
            p.m = m;
            p.v = v;
            p.step = step;
        }
        sets.push((set_name, ps));
    }
    Ok((
        Checkpoint { config_text, sets },
        stored,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add(
            "layer.w",
            crate::numerics::standard_normal(&mut rng, &[3, 4]),
        );
        ps.add("layer.b", Tensor::zeros(&[1, 4]));
        let mut ps2: ParamSet<f32> = ParamSet::new();
        ps2.add("head.w", crate::numerics::standard_normal(&mut rng, &[4, 2]));
        Checkpoint {
            config_text: "worldmodel.beta=1.0\nseed=3\n".to_string(),
            sets: vec![("wm".to_string(), ps), ("actor".to_string(), ps2)],
        }
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("gsa_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ckpt = sample();
        let path = tmp("roundtrip.gsac");
        let sum = save_checkpoint(&ckpt, &path).unwrap();
        let (loaded, sum2) = load_checkpoint(&path).unwrap();
        assert_eq!(sum, sum2);
        assert_eq!(loaded.config_text, ckpt.config_text);
        assert_eq!(loaded.sets.len(), 2);
        for ((n1, s1), (n2, s2)) in ckpt.sets.iter().zip(&loaded.sets) {
            assert_eq!(n1, n2);
            for (p, q) in s1.iter().zip(s2.iter()) {
                assert_eq!(p.name, q.name);
                let b1: Vec<u32> = p.value.data().iter().map(|x| x.to_bits()).collect();
                let b2: Vec<u32> = q.value.data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(b1, b2);
            }
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corruption_fails_checksum() {
        let path = tmp("corrupt.gsac");
        save_checkpoint(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::ChecksumMismatch)
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_distinct_from_version_error() {
        let path = tmp("magic.gsac");
        save_checkpoint(&sample(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic(_))));
        bytes[0] = b'G';
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn checksum_is_content_addressed() {
        let a = sample();
        let mut b = sample();
        assert_eq!(a.checksum(), b.checksum());
        b.sets[0].1.get_mut(crate::numerics::ParamId(0)).value.data_mut()[0] += 1.0;
        assert_ne!(a.checksum(), b.checksum());
    }
}
