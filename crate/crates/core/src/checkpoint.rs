//! Checkpoint container: `u64` little-endian header length, a JSON header
//! (run config, dtype, and per-tensor name/shape/byte offset), then the
//! little-endian tensor blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

const FORMAT: &str = "mmground-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub dtype: String,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, run: &RunConfig) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(store.numel() * T::BYTES);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.names().iter().zip(store.tensors()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &x in t.data() {
            x.write_le(&mut blob);
        }
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT.into(),
        dtype: T::DTYPE.into(),
        config: run.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn read_tensors<S: Scalar>(h: &Header, blob: &[u8]) -> Result<Vec<(String, Tensor<f64>)>> {
    h.tensors
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * S::BYTES;
            let bytes = blob
                .get(e.offset..end)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the end of the file", e.name)))?;
            let data = bytes.chunks_exact(S::BYTES).map(|c| S::read_le(c).f64()).collect();
            Ok((e.name.clone(), Tensor::new(&e.shape, data)?))
        })
        .collect()
}

/// Rebuilds the model from the stored config and fills in the stored
/// parameters, converting to `T` when the stored dtype differs.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(Model, ParamStore<T>, RunConfig)> {
    let len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| Error::Format("checkpoint shorter than its length prefix".into()))?;
    let header_bytes = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let h: Header = serde_json::from_slice(header_bytes)?;
    if h.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", h.format)));
    }
    let blob = &bytes[8 + len..];
    let tensors = match h.dtype.as_str() {
        "f32" => read_tensors::<f32>(&h, blob)?,
        "f64" => read_tensors::<f64>(&h, blob)?,
        other => return Err(Error::Format(format!("unknown dtype {other:?}"))),
    };
    let (model, mut store) = Model::init::<T>(&h.config.model, 0)?;
    let mut loaded = ParamStore::<T>::new();
    for (name, t) in tensors {
        loaded.push(name, t.cast())?;
    }
    if loaded.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            loaded.len(),
            store.len()
        )));
    }
    store.load_from(&loaded)?;
    Ok((model, store, h.config))
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>, run: &RunConfig) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(store, run)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model, ParamStore<T>, RunConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                dim: 8,
                heads: 2,
                image_depth: 1,
                text_depth: 1,
                freq_depth: 1,
                decoder_depth: 1,
                image_size: 16,
                patch_size: 8,
                max_text_len: 4,
                vocab_size: 8,
                ..ModelConfig::default()
            },
            seed: 9,
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let r = run();
        let (_, store) = Model::init::<f32>(&r.model, 5).unwrap();
        let bytes = to_bytes(&store, &r).unwrap();
        let (_, back, r2) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back.tensors(), store.tensors());
        assert_eq!(back.names(), store.names());
        assert_eq!(r2, r);
        // header length prefix
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let h: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        assert_eq!(h["dtype"], "f32");
        assert_eq!(bytes.len(), 8 + len + store.numel() * 4);
    }

    #[test]
    fn precision_conversion_on_load() {
        let r = run();
        let (_, store) = Model::init::<f32>(&r.model, 5).unwrap();
        let (_, wide, _) = from_bytes::<f64>(&to_bytes(&store, &r).unwrap()).unwrap();
        assert_eq!(wide.cast::<f32>().tensors(), store.tensors());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let r = run();
        let (_, store) = Model::init::<f64>(&r.model, 5).unwrap();
        let bytes = to_bytes(&store, &r).unwrap();
        assert!(matches!(from_bytes::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(from_bytes::<f64>(&bytes[..4]), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &store, &r).unwrap();
        assert_eq!(load::<f64>(&p).unwrap().1.tensors(), store.tensors());
        assert!(matches!(load::<f64>(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
