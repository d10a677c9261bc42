//! Binary model files.
//!
//! Layout, all integers little-endian `u32` unless noted:
//!
//! ```text
//! "PSEG"  version  kind:u8  spec_len  spec (JSON)  param_count
//! per parameter: name_len  name  rank  extents...  data (f32 LE)
//! ```
//!
//! Loading rebuilds the model from the stored spec and checks every
//! parameter name and shape against it.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use crate::models::{Model, ModelError, ModelKind, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown model tag {0}")]
    UnknownKind(u8),
    #[error("header says {header} but spec says {spec}")]
    KindMismatch { header: ModelKind, spec: ModelKind },
    #[error("bad model spec: {0}")]
    Spec(String),
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has {got} parameters, the model has {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter {index}: expected `{expected}` {expected_shape:?}, found `{got}` {got_shape:?}")]
    ParamMismatch {
        index: usize,
        expected: String,
        expected_shape: Vec<usize>,
        got: String,
        got_shape: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes `model` to bytes.
pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.spec.kind.tag());
    let spec = serde_json::to_vec(&model.spec).expect("spec serializes");
    put_u32(&mut out, spec.len());
    out.extend_from_slice(&spec);
    let params = model.store.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank());
        for &d in p.value.shape() {
            put_u32(&mut out, d);
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Malformed(format!("missing {what}")));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let tag = r.take(1, "model tag")?[0];
    let header = ModelKind::from_tag(tag).ok_or(CheckpointError::UnknownKind(tag))?;
    let spec_len = r.u32("spec length")?;
    let spec: ModelSpec =
        serde_json::from_slice(r.take(spec_len, "spec")?).map_err(|e| CheckpointError::Spec(e.to_string()))?;
    if spec.kind != header {
        return Err(CheckpointError::KindMismatch {
            header,
            spec: spec.kind,
        });
    }
    let mut model = Model::<f32>::new(spec, 0)?;
    let count = r.u32("parameter count")?;
    if count != model.store.len() {
        return Err(CheckpointError::ParamCount {
            expected: model.store.len(),
            got: count,
        });
    }
    for index in 0..count {
        let name_len = r.u32("name length")?;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>, _>>()?;
        let expected = &model.store.params()[index];
        if expected.name != name || expected.value.shape() != shape.as_slice() {
            return Err(CheckpointError::ParamMismatch {
                index,
                expected: expected.name.clone(),
                expected_shape: expected.value.shape().to_vec(),
                got: name,
                got_shape: shape,
            });
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n, "parameter data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *model.store.value_mut(index) = Tensor::new(shape, data).expect("shape checked");
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err)?;
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&to_bytes(model)).map_err(io_err)
}

pub fn load(path: &Path) -> Result<Model<f32>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::LabelScheme;

    fn tiny() -> Model<f32> {
        let mut spec = ModelSpec::new(ModelKind::BiLstmCrf, LabelScheme::ascend()).unwrap();
        spec.hidden = 2;
        spec.depth = 1;
        Model::new(spec, 11).unwrap()
    }

    #[test]
    fn roundtrip() {
        let m = tiny();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.spec, m.spec);
        for (a, b) in back.store.params().iter().zip(m.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(&to_bytes(&m)[..4], b"PSEG");
    }

    #[test]
    fn corruption_detected() {
        let bytes = to_bytes(&tiny());
        assert!(matches!(from_bytes(b"NOPE"), Err(CheckpointError::BadMagic)));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Malformed(_))));
        let mut bad = bytes.clone();
        bad[8] = 1;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::KindMismatch { .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::Version(9))));
    }
}
