//! Flat checkpoint container: named f64 arrays plus a JSON metadata header.
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"PDCHK\x00";
const FORMAT_VERSION: u16 = 1;

/// Header stored in front of the weight entries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// Digest of the experiment config this artifact was produced under.
    pub config_digest: String,
    /// Whether EMA shadow weights are present (under the `ema.` prefix).
    pub ema: bool,
    pub seed: u64,
    /// Free-form extras (architecture description, normalization mode, ...).
    #[serde(default)]
    pub extra: serde_json::Map<String, Value>,
}

impl CheckpointMeta {
    pub fn new(config_digest: &str, ema: bool, seed: u64) -> Self {
        Self {
            schema_version: 1,
            config_digest: config_digest.to_string(),
            ema,
            seed,
            extra: serde_json::Map::new(),
        }
    }
}

/// Ordered collection of named tensors with a metadata header.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(CoreError::Checkpoint(format!("duplicate entry `{name}`")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.meta)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let version = read_u16(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let meta: CheckpointMeta = serde_json::from_slice(&header)?;
        let n_entries = read_u64(&mut r)? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CoreError::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { meta, entries })
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = RngStream::from_seed(5);
        let mut ckpt = Checkpoint::new(CheckpointMeta::new("digest123", true, 9));
        ckpt.insert("layer.weight", Tensor::randn(&[3, 4], &mut rng))
            .unwrap();
        ckpt.insert("layer.bias", Tensor::randn(&[4], &mut rng))
            .unwrap();
        // include values with tricky bit patterns
        ckpt.insert(
            "odd",
            Tensor::new(vec![3], vec![-0.0, f64::MIN_POSITIVE, 1.0 + f64::EPSILON]).unwrap(),
        )
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();

        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.len(), ckpt.len());
        for ((n0, t0), (n1, t1)) in ckpt.entries().iter().zip(loaded.entries()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ckpt = Checkpoint::new(CheckpointMeta::new("d", false, 0));
        ckpt.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(ckpt.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
