use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;
use umnmt_tensor::{Real, Tensor};

use super::config::ModelConfig;
use super::network::Model;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named float32 tensors plus a JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("checkpoint", "value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("checkpoint", "unexpected end of file"))?;
    Ok(u32::from_le_bytes(buf) as usize)
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION as usize)?;
        let blob = serde_json::to_vec(&self.meta)?;
        put_u32(&mut w, blob.len())?;
        w.write_all(&blob)?;
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            put_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, 2)?;
            put_u32(&mut w, t.rows())?;
            put_u32(&mut w, t.cols())?;
            buf.clear();
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format("checkpoint", "file too short"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = get_u32(&mut r)?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported version {version}"),
            ));
        }
        let blob_len = get_u32(&mut r)?;
        let mut blob = vec![0u8; blob_len];
        r.read_exact(&mut blob)
            .map_err(|_| Error::format("checkpoint", "truncated header"))?;
        let meta = serde_json::from_slice(&blob)?;
        let mut tensors = Vec::new();
        loop {
            let mut first = [0u8; 4];
            match r.read(&mut first[..1])? {
                0 => break,
                _ => r
                    .read_exact(&mut first[1..])
                    .map_err(|_| Error::format("checkpoint", "truncated record"))?,
            }
            let name_len = u32::from_le_bytes(first) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| Error::format("checkpoint", "truncated record name"))?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::format("checkpoint", "record name is not UTF-8"))?;
            let rank = get_u32(&mut r)?;
            let dims = (0..rank)
                .map(|_| get_u32(&mut r))
                .collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [] => (1, 1),
                [n] => (1, n),
                [a, b] => (a, b),
                _ => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("rank {rank} tensor `{name}`"),
                    ))
                }
            };
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw)
                .map_err(|_| Error::format("checkpoint", format!("truncated data for `{name}`")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real)
                .collect();
            tensors.push((name, Tensor::new(rows, cols, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = self
            .meta
            .get("model")
            .ok_or_else(|| Error::format("checkpoint", "header lacks a model config"))?;
        Ok(serde_json::from_value(cfg.clone())?)
    }
}

impl Model {
    /// Checkpoint holding every parameter, with `meta` merged into the
    /// header next to the model config.
    pub fn checkpoint(&self, meta: Value, extra: Vec<(String, Tensor)>) -> Result<Checkpoint> {
        let mut header = serde_json::Map::new();
        header.insert("model".into(), serde_json::to_value(self.config())?);
        if let Value::Object(m) = meta {
            header.extend(m);
        }
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        tensors.extend(extra);
        Ok(Checkpoint {
            meta: Value::Object(header),
            tensors,
        })
    }

    /// Rebuilds a model from a checkpoint. Every parameter of the stored
    /// config must be present with the expected shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ckpt.model_config()?)?;
        let stored: HashMap<&str, &Tensor> =
            ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (_, p) in model.params.iter_mut() {
            let t = stored.get(p.name.as_str()).ok_or_else(|| {
                Error::format("checkpoint", format!("missing tensor `{}`", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor `{}` is {} but the config needs {}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    ),
                ));
            }
            p.value = (*t).clone();
        }
        Ok(model)
    }
}
