//! Self-describing single-file checkpoint container.
//!
//! Layout: magic, format version, a `key=value` metadata block (kind,
//! config, training provenance), then named f64 tensors. Values round-trip
//! bit for bit.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ENSD";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Checkpoint { kind: kind.into(), meta: Vec::new(), tensors: Vec::new() }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.push((key.into(), value.into()));
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Capture every tensor (parameters and buffers) of a parameter set.
    pub fn capture_params(&mut self, prefix: &str, ps: &ParamSet) {
        for (name, tensor, _) in ps.iter_named() {
            self.tensors.push((format!("{prefix}{name}"), tensor.clone()));
        }
    }

    /// Restore a parameter set captured with the same prefix.
    pub fn restore_params(&self, prefix: &str, ps: &mut ParamSet) -> Result<()> {
        let named: HashMap<String, Tensor> = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect();
        ps.load_named(&named)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&crate::FORMAT_VERSION.to_le_bytes())?;
        write_str(&mut f, &self.kind)?;
        f.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(&mut f, k)?;
            write_str(&mut f, v)?;
        }
        f.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(&mut f, name)?;
            f.write_all(&(t.shape().len() as u64).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|_| CoreError::MissingArtifact {
            artifact: path.display().to_string(),
            stage: "the producing stage".into(),
        })?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::parse("checkpoint", "bad magic"));
        }
        let ver = read_u32(&mut f)?;
        if ver != crate::FORMAT_VERSION {
            return Err(CoreError::parse("checkpoint", format!("unsupported version {ver}")));
        }
        let kind = read_str(&mut f)?;
        let n_meta = read_u64(&mut f)? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let k = read_str(&mut f)?;
            let v = read_str(&mut f)?;
            meta.push((k, v));
        }
        let n_tensors = read_u64(&mut f)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = read_str(&mut f)?;
            let ndim = read_u64(&mut f)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut f)? as usize);
            }
            let count: usize = shape.iter().product();
            let mut bytes = vec![0u8; count * 8];
            f.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)));
        }
        Ok(Checkpoint { kind, meta, tensors })
    }
}

/// Hex SHA-256 of a file's bytes (freeze contracts and artifact identity).
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex(&h.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_str(f: &mut impl Write, s: &str) -> Result<()> {
    f.write_all(&(s.len() as u64).to_le_bytes())?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(f: &mut impl Read) -> Result<String> {
    let len = read_u64(f)? as usize;
    if len > 1 << 20 {
        return Err(CoreError::parse("checkpoint", "implausible string length"));
    }
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CoreError::parse("checkpoint", "invalid utf-8"))
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut c = Checkpoint::new("mpn");
        c.set_meta("config_hash", "deadbeef");
        c.set_meta("seed", "7");
        c.tensors.push((
            "enc.w".into(),
            Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 1e300, -0.0]),
        ));
        c.save(&path).unwrap();
        let c2 = Checkpoint::load(&path).unwrap();
        assert_eq!(c2.kind, "mpn");
        assert_eq!(c2.meta_value("config_hash"), Some("deadbeef"));
        assert_eq!(c2.tensors.len(), 1);
        let (n, t) = &c2.tensors[0];
        assert_eq!(n, "enc.w");
        for (a, b) in t.data().iter().zip(c.tensors[0].1.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn param_set_round_trip() {
        let mut ps = ParamSet::new();
        let w = ps.add("layer.w", Tensor::new(&[2], vec![0.5, -0.5]));
        ps.add_buffer("layer.stat", Tensor::new(&[1], vec![3.0]));
        let before = ps.content_hash();

        let mut c = Checkpoint::new("test");
        c.capture_params("net.", &ps);
        // Perturb then restore.
        ps.set(w, Tensor::new(&[2], vec![9.0, 9.0]));
        assert_ne!(ps.content_hash(), before);
        c.restore_params("net.", &mut ps).unwrap();
        assert_eq!(ps.content_hash(), before);
    }

    #[test]
    fn missing_file_names_stage() {
        let err = Checkpoint::load(Path::new("/nonexistent/file.ckpt")).unwrap_err();
        assert!(matches!(err, CoreError::MissingArtifact { .. }));
    }
}
