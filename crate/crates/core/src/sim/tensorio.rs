//! Tensor files: `<name>.bin` holds raw little-endian elements in row-major
//! order, `<name>.json` a `{"dtype", "shape"}` sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::machine::DataType;
use crate::program::IoBinding;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad sidecar: {msg}")]
    Sidecar { path: PathBuf, msg: String },
    #[error("missing input file {0}")]
    Missing(PathBuf),
    #[error("`{name}`: expected {want} bytes of {dtype} {shape:?}, file has {got}")]
    Size { name: String, dtype: DataType, shape: Vec<usize>, want: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dtype: String,
    pub shape: Vec<usize>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TensorIoError + '_ {
    move |source| TensorIoError::Io { path: path.to_path_buf(), source }
}

pub fn write_tensor(dir: &Path, name: &str, dtype: DataType, shape: &[usize], bytes: &[u8]) -> Result<(), TensorIoError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let bin = dir.join(format!("{name}.bin"));
    fs::write(&bin, bytes).map_err(io(&bin))?;
    let meta = dir.join(format!("{name}.json"));
    let side = Sidecar { dtype: dtype.name().into(), shape: shape.to_vec() };
    fs::write(&meta, serde_json::to_string_pretty(&side).expect("serializes")).map_err(io(&meta))
}

/// Reads one tensor, checking the sidecar (when present) against the
/// expected dtype and shape.
pub fn read_tensor(dir: &Path, name: &str, dtype: DataType, shape: &[usize]) -> Result<Vec<u8>, TensorIoError> {
    let bin = dir.join(format!("{name}.bin"));
    if !bin.exists() {
        return Err(TensorIoError::Missing(bin));
    }
    let meta = dir.join(format!("{name}.json"));
    if meta.exists() {
        let text = fs::read_to_string(&meta).map_err(io(&meta))?;
        let side: Sidecar =
            serde_json::from_str(&text).map_err(|e| TensorIoError::Sidecar { path: meta.clone(), msg: e.to_string() })?;
        if side.dtype != dtype.name() || side.shape != shape {
            return Err(TensorIoError::Sidecar {
                path: meta,
                msg: format!("declares {} {:?}, program expects {dtype} {shape:?}", side.dtype, side.shape),
            });
        }
    }
    let bytes = fs::read(&bin).map_err(io(&bin))?;
    let want = shape.iter().product::<usize>() * dtype.byte_width();
    if bytes.len() != want {
        return Err(TensorIoError::Size { name: name.into(), dtype, shape: shape.to_vec(), want, got: bytes.len() });
    }
    Ok(bytes)
}

pub fn read_inputs(dir: &Path, bindings: &[IoBinding]) -> Result<BTreeMap<String, Vec<u8>>, TensorIoError> {
    bindings
        .iter()
        .map(|b| Ok((b.name.clone(), read_tensor(dir, &b.name, b.desc.dtype, &b.desc.shape)?)))
        .collect()
}

pub fn write_outputs(dir: &Path, bindings: &[IoBinding], outputs: &BTreeMap<String, Vec<u8>>) -> Result<(), TensorIoError> {
    for b in bindings {
        if let Some(bytes) = outputs.get(&b.name) {
            write_tensor(dir, &b.name, b.desc.dtype, &b.desc.shape, bytes)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let bytes: Vec<u8> = (0..24).collect();
        write_tensor(dir.path(), "a", DataType::I32, &[2, 3], &bytes).unwrap();
        assert_eq!(read_tensor(dir.path(), "a", DataType::I32, &[2, 3]).unwrap(), bytes);
        assert!(matches!(read_tensor(dir.path(), "a", DataType::F32, &[2, 3]), Err(TensorIoError::Sidecar { .. })));
        assert!(matches!(read_tensor(dir.path(), "b", DataType::I8, &[1]), Err(TensorIoError::Missing(_))));
        fs::remove_file(dir.path().join("a.json")).unwrap();
        assert!(matches!(read_tensor(dir.path(), "a", DataType::I8, &[4]), Err(TensorIoError::Size { .. })));
    }
}
