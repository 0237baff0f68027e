//! Self-describing checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "LATT"
//! version u32      currently 1
//! hlen    u64      length of the JSON header in bytes
//! header  hlen     UTF-8 JSON: dtype, config, head, meta, tensors[]
//! data             every tensor's values in header order, little-endian
//!                  f32 or f64 according to `dtype`
//! ```
//!
//! Each `tensors[]` entry holds `name`, `shape` and `trainable`; values
//! follow back to back with no padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Head, Model};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LATT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    config: EncoderConfig,
    head: Head,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// A model together with free-form metadata (run config, step, metrics).
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar = f32> {
    pub model: Model<T>,
    pub meta: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar>(mut w: impl Write, model: &Model<T>, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        dtype: T::NAME.to_string(),
        config: model.cfg.clone(),
        head: model.head,
        meta: meta.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, t, trainable)| Entry { name: name.to_string(), shape: t.shape().to_vec(), trainable })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t, _) in model.params.iter() {
        buf.clear();
        t.data().iter().for_each(|v| v.write_le(&mut buf));
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("checkpoint: {}", msg.into()))
}

fn read_values<S: Scalar, T: Scalar>(r: &mut impl Read, n: usize) -> Result<Vec<T>> {
    let mut raw = vec![0u8; n * S::BYTES];
    r.read_exact(&mut raw)?;
    Ok(raw.chunks_exact(S::BYTES).map(|c| T::c(S::read_le(c).f64())).collect())
}

/// Reads a checkpoint stored in either precision into precision `T`.
pub fn read_checkpoint<T: Scalar>(mut r: impl Read) -> Result<Checkpoint<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;

    let mut params = ParamStore::new();
    for e in &header.tensors {
        let n = e.shape.iter().product();
        let data = match header.dtype.as_str() {
            "f32" => read_values::<f32, T>(&mut r, n)?,
            "f64" => read_values::<f64, T>(&mut r, n)?,
            other => return Err(bad(format!("unknown dtype {other}"))),
        };
        let t = Tensor::new(&e.shape, data)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: format!("checkpoint tensor {}", e.name) });
        }
        params.insert(&e.name, t, e.trainable)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { model: Model { cfg: header.config, head: header.head, params }, meta: header.meta })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, meta: &serde_json::Value) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, meta)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Overlap, Variant};

    fn model() -> Model<f32> {
        let cfg = EncoderConfig::new(1, 8, 2, 16, 16, Variant::Blockwise { block: 4, overlap: Overlap::Half });
        Model::init(cfg, Head::Cls { n_classes: 4 }, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let meta = serde_json::json!({"step": 12});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, &meta).unwrap();
        assert_eq!(&buf[..4], b"LATT");
        let back: Checkpoint<f32> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.model.cfg, m.cfg);
        assert_eq!(back.model.head, m.head);
        assert_eq!(back.meta, meta);
        for ((n1, t1, tr1), (n2, t2, tr2)) in m.params.iter().zip(back.model.params.iter()) {
            assert_eq!((n1, tr1), (n2, tr2));
            assert_eq!(t1, t2);
        }
        let wide: Checkpoint<f64> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(wide.model.params.tensor(0).data()[3] as f32, m.params.tensor(0).data()[3]);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model(), &serde_json::Value::Null).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint::<f32>(bad_magic.as_slice()).is_err());
        assert!(read_checkpoint::<f32>(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint::<f32>(extra.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&path, &m, &serde_json::Value::Null).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.params.num_scalars(), m.params.num_scalars());
    }
}
