//! SNNM checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "SNNM" | u32 version | u32 kind tag
//! u32 descriptor length | descriptor (UTF-8 JSON)
//! u64 seed
//! u32 tensor count
//! per tensor: u32 name length | name | u32 rank | rank × u32 dims | f32 data
//! ```
//!
//! The descriptor holds the architecture and configuration with every
//! tensor replaced by `{"tensor": name}`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::{Classifier, Model};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNNM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    /// Free-form provenance (training config echo, accuracies).
    pub meta: Value,
}

struct Named {
    name: String,
    shape: Vec<u32>,
    data: Vec<f32>,
}

fn as_tensor(map: &Map<String, Value>) -> Option<(&Vec<Value>, &Vec<Value>)> {
    if map.len() != 2 {
        return None;
    }
    match (map.get("shape"), map.get("data")) {
        (Some(Value::Array(s)), Some(Value::Array(d))) => Some((s, d)),
        _ => None,
    }
}

fn extract(value: &mut Value, path: &str, out: &mut Vec<Named>) -> Result<()> {
    match value {
        Value::Object(map) => {
            if let Some((shape, data)) = as_tensor(map) {
                let shape = shape
                    .iter()
                    .map(|v| v.as_u64().and_then(|d| u32::try_from(d).ok()))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Format(format!("tensor {path} has a bad shape")))?;
                let data = data
                    .iter()
                    .map(|v| v.as_f64().map(|f| f as f32))
                    .collect::<Option<Vec<_>>>()
                    .ok_or(Error::NonFinite { op: "checkpoint save" })?;
                *value = json!({ "tensor": path });
                out.push(Named {
                    name: path.to_string(),
                    shape,
                    data,
                });
                return Ok(());
            }
            for (k, v) in map.iter_mut() {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                extract(v, &child, out)?;
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                extract(v, &format!("{path}.{i}"), out)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn restore(value: &mut Value, tensors: &mut std::collections::HashMap<String, Named>) -> Result<()> {
    match value {
        Value::Object(map) => {
            if map.len() == 1 {
                if let Some(Value::String(name)) = map.get("tensor") {
                    let t = tensors
                        .remove(name.as_str())
                        .ok_or_else(|| Error::Format(format!("descriptor references missing tensor {name}")))?;
                    *value = json!({ "shape": t.shape, "data": t.data });
                    return Ok(());
                }
            }
            for v in map.values_mut() {
                restore(v, tensors)?;
            }
        }
        Value::Array(items) => {
            for v in items {
                restore(v, tensors)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model,
            seed,
            meta: Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = serde_json::to_value(&self.model)?;
        let mut tensors = Vec::new();
        extract(&mut body, "", &mut tensors)?;
        let descriptor = serde_json::to_vec(&json!({
            "kind": self.model.kind().name(),
            "model": body,
            "meta": self.meta,
        }))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u32::<LittleEndian>(self.model.kind().tag())?;
        out.write_u32::<LittleEndian>(len_u32(descriptor.len())?)?;
        out.extend_from_slice(&descriptor);
        out.write_u64::<LittleEndian>(self.seed)?;
        out.write_u32::<LittleEndian>(len_u32(tensors.len())?)?;
        for t in &tensors {
            out.write_u32::<LittleEndian>(len_u32(t.name.len())?)?;
            out.extend_from_slice(t.name.as_bytes());
            out.write_u32::<LittleEndian>(len_u32(t.shape.len())?)?;
            for &d in &t.shape {
                out.write_u32::<LittleEndian>(d)?;
            }
            for &v in &t.data {
                out.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad checkpoint magic {:?}, expected \"SNNM\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let kind = crate::model::ModelKind::from_tag(read_u32(&mut r, "kind tag")?)?;
        let len = read_u32(&mut r, "descriptor length")? as usize;
        let mut descriptor = vec![0u8; len];
        read_exact(&mut r, &mut descriptor, "descriptor")?;
        let mut descriptor: Value = serde_json::from_slice(&descriptor)
            .map_err(|e| Error::Format(format!("descriptor is not valid JSON: {e}")))?;
        let seed = r
            .read_u64::<LittleEndian>()
            .map_err(|_| truncated("seed"))?;
        let count = read_u32(&mut r, "tensor count")?;
        let mut tensors = std::collections::HashMap::new();
        for _ in 0..count {
            let n = read_u32(&mut r, "tensor name length")? as usize;
            let mut name = vec![0u8; n];
            read_exact(&mut r, &mut name, "tensor name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r, "tensor rank")?;
            let shape = (0..rank).map(|_| read_u32(&mut r, "tensor dims")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().map(|&d| d as usize).product::<usize>();
            let remaining = bytes.len() - r.position() as usize;
            if numel > remaining / 4 {
                return Err(truncated("tensor data"));
            }
            let mut data = vec![0f32; numel];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| truncated("tensor data"))?;
            tensors.insert(name.clone(), Named { name, shape, data });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        let mut body = descriptor
            .get_mut("model")
            .map(Value::take)
            .ok_or_else(|| Error::Format("descriptor has no model".into()))?;
        restore(&mut body, &mut tensors)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("tensor {extra} is not referenced by the descriptor")));
        }
        let model: Model = serde_json::from_value(body).map_err(|e| Error::Format(format!("descriptor does not describe a model: {e}")))?;
        if model.kind() != kind {
            return Err(Error::Format(format!(
                "kind tag says {} but the descriptor holds {}",
                kind.name(),
                model.kind().name()
            )));
        }
        validate_model(&model)?;
        let meta = descriptor.get_mut("meta").map(Value::take).unwrap_or(Value::Null);
        Ok(Self { model, seed, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Structural checks shared by loading and `inspect`.
pub fn validate_model(model: &Model) -> Result<()> {
    match model {
        Model::Ann(m) => {
            m.shapes()?;
        }
        Model::Snn(m) => {
            for (i, l) in m.layers.iter().enumerate() {
                if l.weights.rank() != 2 || l.bias.shape() != [l.weights.shape()[1]] {
                    return Err(Error::Format(format!("spiking layer {i} has inconsistent weight/bias shapes")));
                }
            }
            m.validate()?
        }
        Model::Attention(m) => {
            let fresh: crate::ann::TinyAttentionNet = crate::ann::TinyAttentionNet::new(m.config.clone(), 0)?;
            let ok = fresh.layers.len() == m.layers.len()
                && fresh
                    .parameters()
                    .iter()
                    .zip(m.parameters())
                    .all(|(a, b)| a.shape() == b.shape());
            if !ok {
                return Err(Error::Format("attention parameters do not match their config".into()));
            }
        }
    }
    Ok(())
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

fn truncated(what: &str) -> Error {
    Error::Format(format!("checkpoint truncated while reading {what}"))
}

fn read_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|_| truncated(what))
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated(what))
}
