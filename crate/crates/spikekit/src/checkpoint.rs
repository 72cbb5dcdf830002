//! Single-file checkpoints: `SBKT`, u16 version, u64 manifest length, JSON
//! manifest, then a little-endian payload.
//!
//! Linear weights are stored as `i8` with an `f32` scale vector when the
//! model runs in spike mode, and as `f32` otherwise.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use spikekit_core::model::{build_model, Model, ModelConfig, Param, ParamMut};
use spikekit_core::quant::QuantizedMatrix;
use spikekit_core::Tensor;

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBKT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    I8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
    /// Name of the per-row `f32` scale record for `i8` tensors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<String>,
}

impl TensorRecord {
    fn nbytes(&self) -> Option<u64> {
        self.shape.iter().try_fold(self.dtype.width() as u64, |a, &d| a.checked_mul(d as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    pub payload_bytes: u64,
}

struct PayloadWriter {
    records: Vec<TensorRecord>,
    bytes: Vec<u8>,
}

impl PayloadWriter {
    fn f32(&mut self, name: String, t: &Tensor) {
        self.records.push(TensorRecord {
            name,
            dtype: Dtype::F32,
            shape: t.shape().to_vec(),
            offset: self.bytes.len() as u64,
            scale: None,
        });
        for &x in t.data() {
            self.bytes.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn i8(&mut self, name: String, q: &QuantizedMatrix) {
        let scale = format!("{name}.scale");
        self.records.push(TensorRecord {
            name,
            dtype: Dtype::I8,
            shape: vec![q.rows, q.cols],
            offset: self.bytes.len() as u64,
            scale: Some(scale.clone()),
        });
        self.bytes.extend(q.q.iter().map(|&v| v as u8));
        let s = Tensor::from_parts(vec![q.rows], q.scale.clone()).expect("one scale per row");
        self.f32(scale, &s);
    }
}

/// Serializes `model`; identical models give identical bytes.
pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    let mut p = PayloadWriter { records: Vec::new(), bytes: Vec::new() };
    for (name, param) in model.params() {
        match param {
            Param::Tensor(t) => p.f32(name, t),
            Param::Linear(l) => match &l.quant {
                Some(q) => p.i8(name, q),
                None => p.f32(name, &l.w),
            },
        }
    }
    let manifest = Manifest { config: model.config.clone(), tensors: p.records, payload_bytes: p.bytes.len() as u64 };
    let json = serde_json::to_vec(&manifest)?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    w.write_all(&p.bytes).map_err(io)?;
    Ok(())
}

pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, model)?;
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

/// Splits a checkpoint into its manifest and payload after validating the
/// header and every record's extent.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let mut buf = bytes;
    let magic = take(&mut buf, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = u16::from_le_bytes(take(&mut buf, 2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut buf, 8, "manifest length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Format("manifest length overflows".into()))?;
    let manifest: Manifest = serde_json::from_slice(take(&mut buf, len, "manifest")?)?;
    if manifest.payload_bytes != buf.len() as u64 {
        return Err(Error::Format(format!(
            "payload has {} bytes, manifest declares {}",
            buf.len(),
            manifest.payload_bytes
        )));
    }
    for r in &manifest.tensors {
        let end = r.nbytes().and_then(|n| r.offset.checked_add(n));
        if end.map_or(true, |e| e > manifest.payload_bytes) {
            return Err(Error::Format(format!("tensor `{}` lies outside the payload", r.name)));
        }
    }
    Ok((manifest, buf))
}

fn f32_data(payload: &[u8], r: &TensorRecord) -> Vec<f32> {
    let n = r.nbytes().unwrap() as usize;
    let at = r.offset as usize;
    payload[at..at + n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<checkpoint>", e))?;
    load_checkpoint(&bytes)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    let (manifest, payload) = parse_checkpoint(bytes)?;
    let spike = manifest.config.spike;
    let mut skeleton = manifest.config.clone();
    skeleton.spike = None;
    let mut model = build_model(skeleton, 0)?;
    let records: BTreeMap<&str, &TensorRecord> = manifest.tensors.iter().map(|r| (r.name.as_str(), r)).collect();
    let mut used = 0usize;

    let lookup = |name: &str, dtype: Dtype, shape: &[usize]| -> Result<&TensorRecord> {
        let r = records.get(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        if r.dtype != dtype || r.shape != shape {
            return Err(Error::Format(format!(
                "tensor `{name}` is {:?} {:?}, expected {dtype:?} {shape:?}",
                r.dtype, r.shape
            )));
        }
        Ok(r)
    };

    for (name, param) in model.params_mut() {
        match param {
            ParamMut::Tensor(t) => {
                let r = lookup(&name, Dtype::F32, t.shape())?;
                *t = Tensor::new(t.shape().to_vec(), f32_data(payload, r))?;
                used += 1;
            }
            ParamMut::Linear(l) => {
                let shape = l.w.shape().to_vec();
                let r = records.get(name.as_str()).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
                match r.dtype {
                    Dtype::F32 => {
                        let r = lookup(&name, Dtype::F32, &shape)?;
                        l.w = Tensor::new(shape, f32_data(payload, r))?;
                        used += 1;
                    }
                    Dtype::I8 => {
                        let r = lookup(&name, Dtype::I8, &shape)?;
                        let scale_name =
                            r.scale.as_deref().ok_or_else(|| Error::Format(format!("`{name}` has no scale")))?;
                        let sr = lookup(scale_name, Dtype::F32, &shape[..1])?;
                        let at = r.offset as usize;
                        let q: Vec<i8> = payload[at..at + shape[0] * shape[1]].iter().map(|&b| b as i8).collect();
                        if q.contains(&i8::MIN) {
                            return Err(Error::Format(format!("`{name}` holds -128, outside the symmetric range")));
                        }
                        let qm = QuantizedMatrix { rows: shape[0], cols: shape[1], q, scale: f32_data(payload, sr) };
                        l.w = qm.dequantize();
                        if !l.w.is_finite() {
                            return Err(spikekit_core::Error::NonFinite.into());
                        }
                        l.quant = Some(qm);
                        used += 2;
                    }
                }
            }
        }
    }
    if used != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, the model uses {used}",
            manifest.tensors.len()
        )));
    }
    if spike.is_some() {
        // float-stored linears still need an INT8 copy
        model.config.spike = spike;
        for (_, p) in model.params_mut() {
            if let ParamMut::Linear(l) = p {
                if l.quant.is_none() {
                    l.quantize()?;
                }
            }
        }
    }
    Ok(model)
}
