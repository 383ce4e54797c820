//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PRDK"  u32 version  u8 role  u32 layers  u32 heads
//! per layer/head: u32 inputs  u32 outputs  u8 activation
//! u64 seed  u64 epoch  u64 config_hash
//! per layer/head: f64 weight[outputs*inputs]  f64 bias[outputs]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Activation, Layer, MlpModel, Parameter, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRDK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: u64,
    pub config_hash: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub meta: CheckpointMeta,
}

pub fn encode(model: &MlpModel, meta: &CheckpointMeta) -> Vec<u8> {
    let all: Vec<&Layer> = model.layers.iter().chain(&model.heads).collect();
    let mut out = Vec::with_capacity(64 + model.param_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.role.tag());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(model.heads.len() as u32).to_le_bytes());
    for l in &all {
        out.extend_from_slice(&(l.inputs() as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs() as u32).to_le_bytes());
        out.push(l.activation.tag());
    }
    for v in [meta.seed, meta.epoch, meta.config_hash] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &all {
        for v in l.weight.value.data().iter().chain(l.bias.value.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("not a checkpoint: bad magic {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let role = Role::from_tag(r.u8("role")?).map_err(|e| Error::Format(e.to_string()))?;
    let n_layers = r.u32("layer count")? as usize;
    let n_heads = r.u32("head count")? as usize;
    // Every descriptor takes 9 bytes; reject counts the file cannot hold.
    if (n_layers + n_heads).saturating_mul(9) > bytes.len() {
        return Err(Error::Format("checkpoint truncated in architecture descriptor".into()));
    }
    let mut shapes = Vec::with_capacity(n_layers + n_heads);
    for _ in 0..n_layers + n_heads {
        let inputs = r.u32("layer inputs")? as usize;
        let outputs = r.u32("layer outputs")? as usize;
        let act = Activation::from_tag(r.u8("activation")?).map_err(|e| Error::Format(e.to_string()))?;
        if inputs == 0 || outputs == 0 {
            return Err(Error::Format("checkpoint layer with zero width".into()));
        }
        shapes.push((inputs, outputs, act));
    }
    let meta = CheckpointMeta {
        seed: r.u64("seed")?,
        epoch: r.u64("epoch")?,
        config_hash: r.u64("config hash")?,
    };
    let mut layers = Vec::with_capacity(shapes.len());
    for (inputs, outputs, act) in shapes {
        let w = r.f64s(inputs.saturating_mul(outputs), "weights")?;
        let b = r.f64s(outputs, "bias")?;
        let weight = Tensor::new(vec![outputs, inputs], w).map_err(|e| Error::Format(e.to_string()))?;
        let bias = Tensor::new(vec![outputs], b).map_err(|e| Error::Format(e.to_string()))?;
        layers.push(Layer {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
            activation: act,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let heads = layers.split_off(n_layers);
    let model = MlpModel::from_layers(role, layers, heads).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint { model, meta })
}

pub fn save(path: impl AsRef<Path>, model: &MlpModel, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(model, meta))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
