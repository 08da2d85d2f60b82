//! Binary checkpoint format.
//!
//! ```text
//! "GCGM"                      magic
//! u32                         format version
//! u32 + bytes                 model config, canonical JSON
//! u32                         record count
//! per record:
//!   u32 + bytes               name (UTF-8)
//!   u32 rank, rank x u32      shape
//!   f32 x numel               values
//! ```
//!
//! All integers and floats are little-endian. Records hold every trainable
//! parameter followed by the batch-norm running statistics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"GCGM";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes the model's configuration, parameters and running statistics.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);

    let params = model.params();
    let buffers = model.buffers();
    out.extend_from_slice(&((params.len() + buffers.len()) as u32).to_le_bytes());
    let mut record = |name: &str, shape: &[usize], data: &[f64]| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for p in params {
        record(&p.name, p.shape(), p.data());
    }
    for (name, data) in buffers {
        record(&name, &[data.len()], data);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what} (need {n} bytes, {} left)",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Rebuilds a model from checkpoint bytes. `path` only labels errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic (not a GCGM checkpoint)"));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos;
    let blob = r.take(len, "config")?;
    let config: ModelConfig = serde_json::from_slice(blob).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        offset: at as u64,
        reason: format!("invalid config JSON: {e}"),
    })?;
    let mut model = Model::build(config, 0)?;

    let count = r.u32("record count")? as usize;
    let mut records: HashMap<String, (Vec<usize>, Vec<f64>, usize)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.err("record name is not UTF-8"))?
            .to_owned();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, "values")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if records.insert(name.clone(), (shape, data, start)).is_some() {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                offset: start as u64,
                reason: format!("duplicate record `{name}`"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last record"));
    }

    let mut take_record = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let (s, data, start) = records.remove(name).ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            reason: format!("missing record `{name}`"),
        })?;
        if s != shape {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                offset: start as u64,
                reason: format!("record `{name}` has shape {s:?}, model expects {shape:?}"),
            });
        }
        Ok(data)
    };
    for p in model.params_mut() {
        let data = take_record(&p.name, p.shape())?;
        p.data_mut().copy_from_slice(&data);
    }
    for (name, buf) in model.buffers_mut() {
        let data = take_record(&name, &[buf.len()])?;
        buf.copy_from_slice(&data);
    }
    if let Some((name, (_, _, start))) = records.into_iter().min_by_key(|(_, (_, _, s))| *s) {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            offset: start as u64,
            reason: format!("unexpected record `{name}`"),
        });
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: [16, 16, 3],
            backbone_channels: vec![4, 8],
            attention: AttentionKind::Gcg,
            head_widths: vec![8, 4],
            num_classes: 3,
            ..Default::default()
        }
    }

    fn perturbed_model() -> Model {
        let mut m = Model::build(tiny(), 11).unwrap();
        let mut rng = Rng::new(3);
        for (_, b) in m.buffers_mut() {
            for v in b.iter_mut() {
                *v += rng.uniform_range(0.1, 0.5);
            }
        }
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += rng.uniform_range(-0.1, 0.1);
            }
        }
        m
    }

    #[test]
    fn round_trip_preserves_f32_values_and_outputs() {
        let m = perturbed_model();
        let bytes = to_bytes(&m).unwrap();
        let loaded = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(to_bytes(&loaded).unwrap(), bytes);
        for (a, b) in m.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
        let x = Tensor::uniform(&[3, 16, 16, 3], 0.0, 1.0, &mut Rng::new(1));
        let pa = m.infer(&x).unwrap().probs;
        let pb = loaded.infer(&x).unwrap().probs;
        for (a, b) in pa.data().iter().zip(pb.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = to_bytes(&perturbed_model()).unwrap();
        for cut in [0, 3, 6, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            match from_bytes(&bytes[..cut], Path::new("t.ckpt")) {
                Err(Error::Checkpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = to_bytes(&perturbed_model()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes, Path::new("v.ckpt")),
            Err(Error::Version { found: 7, expected: 1, .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = to_bytes(&perturbed_model()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes, Path::new("m")), Err(Error::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load(Path::new("/nonexistent/x.ckpt")), Err(Error::Io { .. })));
    }
}
