//! Binary checkpoint files. The byte layout is described in
//! `docs/checkpoint-format.md`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{hex_digest, Model, ModelSpec};
use crate::engine::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SATNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    /// Epoch (1-based) the weights were taken at.
    pub epoch: usize,
    pub best_val_acc: f64,
    /// `σ(α)` per residual block; empty for variants without fusion.
    pub alphas: Vec<f64>,
    /// Every parameter and buffer of the model, in store order.
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn truncated(e: std::io::Error) -> Error {
    format_err(format!("truncated checkpoint: {e}"))
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &Model<T>, epoch: usize, best_val_acc: f64) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            epoch,
            best_val_acc,
            alphas: model.alphas().unwrap_or_default(),
            tensors: model
                .store()
                .iter()
                .map(|(_, p)| (p.name().to_string(), p.value().clone()))
                .collect(),
        }
    }

    pub fn spec_digest(&self) -> String {
        self.spec.digest()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let spec = self.spec.canonical();
        let w = &mut out;
        w.write_u32::<LE>(CHECKPOINT_VERSION).unwrap();
        w.write_u32::<LE>(spec.len() as u32).unwrap();
        w.extend_from_slice(spec.as_bytes());
        w.extend_from_slice(self.spec_digest().as_bytes());
        w.write_u64::<LE>(self.epoch as u64).unwrap();
        w.write_f64::<LE>(self.best_val_acc).unwrap();
        w.write_u32::<LE>(self.alphas.len() as u32).unwrap();
        for &a in &self.alphas {
            w.write_f64::<LE>(a).unwrap();
        }
        w.write_u32::<LE>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            w.write_u32::<LE>(name.len() as u32).unwrap();
            w.extend_from_slice(name.as_bytes());
            w.write_u8(T::DTYPE as u8).unwrap();
            w.write_u32::<LE>(t.rank() as u32).unwrap();
            for &d in t.shape() {
                w.write_u64::<LE>(d as u64).unwrap();
            }
            for &v in t.data() {
                v.write_le(w);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format_err("not a checkpoint file (bad magic)"));
        }
        let version = r.read_u32::<LE>().map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!(
                "checkpoint format version {version}; this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let spec_text = read_string(&mut r)?;
        let mut digest = [0u8; 64];
        r.read_exact(&mut digest).map_err(truncated)?;
        let stored = String::from_utf8_lossy(&digest).into_owned();
        let computed = hex_digest(spec_text.as_bytes());
        if stored != computed {
            return Err(format_err(format!(
                "spec digest mismatch: header {stored}, computed {computed}"
            )));
        }
        let spec = ModelSpec::parse(&spec_text)?;
        let epoch = r.read_u64::<LE>().map_err(truncated)? as usize;
        let best_val_acc = r.read_f64::<LE>().map_err(truncated)?;
        let n_alphas = r.read_u32::<LE>().map_err(truncated)?;
        let alphas = (0..n_alphas)
            .map(|_| r.read_f64::<LE>().map_err(truncated))
            .collect::<Result<Vec<_>>>()?;
        let n_tensors = r.read_u32::<LE>().map_err(truncated)?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let name = read_string(&mut r)?;
            let tag = r.read_u8().map_err(truncated)?;
            let dtype = DType::from_tag(tag).ok_or_else(|| format_err(format!("{name}: unknown dtype tag {tag}")))?;
            if dtype != T::DTYPE {
                return Err(format_err(format!(
                    "{name} is stored as {}, requested {}",
                    dtype.name(),
                    T::DTYPE.name()
                )));
            }
            let rank = r.read_u32::<LE>().map_err(truncated)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LE>().map(|d| d as usize).map_err(truncated))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let width = std::mem::size_of::<T>();
            let start = r.position() as usize;
            let end = n
                .checked_mul(width)
                .and_then(|b| b.checked_add(start))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| format_err(format!("truncated checkpoint in tensor {name}")))?;
            let data = bytes[start..end].chunks_exact(width).map(T::read_le).collect();
            r.set_position(end as u64);
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(format_err("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint {
            spec,
            epoch,
            best_val_acc,
            alphas,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and copies every stored tensor into it. Each
    /// parameter of the spec must appear exactly once.
    pub fn restore(&self) -> Result<Model<T>> {
        let mut model = Model::build(&self.spec, 0)?;
        let mut seen = vec![false; model.store().len()];
        for (name, t) in &self.tensors {
            let id = model
                .store()
                .id(name)
                .ok_or_else(|| format_err(format!("checkpoint tensor {name} is not part of the model")))?;
            if std::mem::replace(&mut seen[id.index()], true) {
                return Err(format_err(format!("checkpoint holds {name} twice")));
            }
            model.store_mut().set(id, t.clone())?;
        }
        if let Some(missing) = model.store().iter().find(|(id, _)| !seen[id.index()]) {
            return Err(format_err(format!("checkpoint lacks {}", missing.1.name())));
        }
        Ok(model)
    }
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LE>().map_err(truncated)? as usize;
    let start = r.position() as usize;
    let bytes = r
        .get_ref()
        .get(start..start + len)
        .ok_or_else(|| format_err("truncated checkpoint string"))?;
    r.set_position((start + len) as u64);
    String::from_utf8(bytes.to_vec()).map_err(|_| format_err("checkpoint string is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Variant;

    fn tiny() -> Model<f32> {
        let spec = ModelSpec::new(Variant::Balanced12, 3).with_channels(vec![4, 4, 8, 8]);
        Model::build(&spec, 5).unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = Checkpoint::from_model(&tiny(), 7, 0.625);
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn dtype_mismatch_and_corruption_are_reported() {
        let bytes = Checkpoint::from_model(&tiny(), 0, 0.0).to_bytes();
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
    }

    #[test]
    fn restore_requires_every_parameter() {
        let mut ck = Checkpoint::from_model(&tiny(), 0, 0.0);
        assert!(ck.restore().is_ok());
        ck.tensors.pop();
        assert!(matches!(ck.restore(), Err(Error::Format(_))));
    }
}
