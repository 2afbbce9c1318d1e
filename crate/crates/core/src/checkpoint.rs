//! Binary checkpoints: magic, format version, endianness tag, a TOML header
//! with the config, then named tensors (name, rank, extents, little-endian
//! data). Router biases travel as `router.<name>.bias`, optimizer moments as
//! `optim.m.<param>` and `optim.v.<param>`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{layout, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::train::AdamW;

pub const MAGIC: &[u8; 8] = b"DREAMCKP";
pub const FORMAT_VERSION: u32 = 1;
const ENDIAN_TAG: u32 = 0x0102_0304;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub crate_version: String,
    /// Element type of the stored tensors: `f32` or `f64`.
    pub dtype: String,
    pub step: u64,
    pub folded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_step: Option<u64>,
    pub config: ModelConfig,
}

/// Adam moments in parameter-store order.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: Model<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64], dtype: &str) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &x in data {
        if dtype == "f64" {
            out.extend_from_slice(&x.to_le_bytes());
        } else {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    optimizer: Option<&AdamW<T>>,
    step: u64,
) -> Result<()> {
    let dtype = if T::BYTES == 8 { "f64" } else { "f32" };
    let header = CheckpointHeader {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        dtype: dtype.into(),
        step,
        folded: model.folded,
        optimizer_step: optimizer.map(|o| o.step),
        config: model.config.clone(),
    };
    let header_text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, ENDIAN_TAG);
    put_u64(&mut out, header_text.len() as u64);
    out.extend_from_slice(header_text.as_bytes());

    let mut count = model.params.len() + model.routers.len();
    if let Some(o) = optimizer {
        count += o.m.len() + o.v.len();
    }
    put_u32(&mut out, count as u32);
    for p in model.params.iter() {
        put_tensor(&mut out, &p.name, p.tensor.shape(), &p.tensor.to_f64_vec(), dtype);
    }
    for (name, r) in &model.routers {
        put_tensor(&mut out, &format!("router.{}.bias", name), &[r.bias.len()], &r.bias, dtype);
    }
    if let Some(o) = optimizer {
        for (p, (m, v)) in model.params.iter().zip(o.m.iter().zip(&o.v)) {
            put_tensor(&mut out, &format!("optim.m.{}", p.name), m.shape(), &m.to_f64_vec(), dtype);
            put_tensor(&mut out, &format!("optim.v.{}", p.name), v.shape(), &v.to_f64_vec(), dtype);
        }
    }

    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads only the header; cheap for inspecting a checkpoint.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = fs::File::open(path)?;
    let mut fixed = [0u8; 24];
    f.read_exact(&mut fixed)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    let mut r = Reader { buf: &fixed, pos: 0 };
    let len = check_preamble(&mut r)?;
    let mut text = vec![0u8; len];
    f.read_exact(&mut text)
        .map_err(|_| Error::Format("checkpoint truncated".into()))?;
    parse_header(&text)
}

fn check_preamble(r: &mut Reader<'_>) -> Result<usize> {
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} is not supported (expected {})",
            version, FORMAT_VERSION
        )));
    }
    if r.u32()? != ENDIAN_TAG {
        return Err(Error::Format("checkpoint endianness tag mismatch".into()));
    }
    Ok(r.u64()? as usize)
}

fn parse_header(text: &[u8]) -> Result<CheckpointHeader> {
    let text = std::str::from_utf8(text).map_err(|e| Error::Format(e.to_string()))?;
    let header: CheckpointHeader = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if header.dtype != "f32" && header.dtype != "f64" {
        return Err(Error::Format(format!("unknown dtype {}", header.dtype)));
    }
    header.config.validate()?;
    Ok(header)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let len = check_preamble(&mut r)?;
    let header = parse_header(r.take(len)?)?;
    let width = if header.dtype == "f64" { 8 } else { 4 };

    let count = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    let mut order = Vec::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Format(e.to_string()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let data: Vec<f64> = if width == 8 {
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect()
        } else {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect()
        };
        if tensors.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", name)));
        }
        order.push(name);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }

    let mut take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("tensor {} missing", name)))
    };
    let mut params = ParamStore::new();
    for (name, _, init) in layout(&header.config) {
        let (shape, data) = take(&name)?;
        params.insert(name, Tensor::from_f64(&shape, &data)?, init)?;
    }
    let mut model = Model::from_params(header.config.clone(), params)?;
    model.folded = header.folded;
    for (name, router) in model.routers.iter_mut() {
        let (shape, data) = take(&format!("router.{}.bias", name))?;
        if shape != [router.bias.len()] {
            return Err(Error::Format(format!("router {} bias has shape {:?}", name, shape)));
        }
        router.bias = data;
    }
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in model.params.iter() {
                for (prefix, dst) in [("optim.m.", &mut m), ("optim.v.", &mut v)] {
                    let (shape, data) = take(&format!("{}{}", prefix, p.name))?;
                    if shape != p.tensor.shape() {
                        return Err(Error::Format(format!("{}{} has shape {:?}", prefix, p.name, shape)));
                    }
                    dst.push(Tensor::from_f64(&shape, &data)?);
                }
            }
            Some(OptimizerState { step, m, v })
        }
    };
    if let Some(extra) = order.iter().find(|n| tensors.contains_key(*n)) {
        return Err(Error::Format(format!("unexpected tensor {}", extra)));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}

impl<T: Scalar> AdamW<T> {
    pub fn restore(&mut self, state: OptimizerState<T>) -> Result<()> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(Error::Format("optimizer state does not match the parameters".into()));
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }
}
