//! Binary checkpoint: magic, version, a JSON header (model config, decoder
//! slots in creation order, free-form metadata) and named tensor records.

use std::fs;
use std::path::Path;

use coss_numerics::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};

use super::{DecoderKey, Model, ModelConfig};
use crate::error::{io_err, Error, Result};
use crate::tokenizers::Modality;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COSSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    decoders: Vec<(DecoderKey, Modality)>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Summary of a checkpoint without materializing a model.
#[derive(Clone, Debug, Serialize)]
pub struct CheckpointInfo {
    pub version: u32,
    pub model: ModelConfig,
    pub decoders: Vec<(DecoderKey, Modality)>,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, &'static str)>,
    pub param_count: usize,
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

pub(super) fn save_model<F: Element>(model: &Model<F>, path: &Path, meta: serde_json::Value) -> Result<()> {
    let header = Header {
        model: model.config.clone(),
        decoders: model.decoders().iter().map(|(k, d)| (*k, d.modality())).collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| fail(path, e.to_string()))?;
    let mut out = Vec::with_capacity(model.param_count() * F::DTYPE.size() + json.len() + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        if !p.value.is_finite() {
            return Err(fail(path, format!("parameter {} is not finite", p.name)));
        }
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in p.value.data() {
            x.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.bytes.get(self.pos..end))
            .ok_or_else(|| fail(self.path, "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Record {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    payload: std::ops::Range<usize>,
}

fn parse<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(u32, Header, Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8).map_err(|_| fail(path, "bad magic"))? != CHECKPOINT_MAGIC {
        return Err(fail(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(fail(path, format!("unsupported version {version}")));
    }
    let json_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(json_len)?).map_err(|e| fail(path, format!("header: {e}")))?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| fail(path, "parameter name is not UTF-8"))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| fail(path, format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| fail(path, "truncated"))?;
        let start = r.pos;
        r.take(numel.checked_mul(dtype.size()).ok_or_else(|| fail(path, "truncated"))?)?;
        records.push(Record { name, dtype, shape, payload: start..r.pos });
    }
    if r.pos != bytes.len() {
        return Err(fail(path, "trailing bytes"));
    }
    Ok((version, header, records))
}

pub(super) fn load_model<F: Element>(path: &Path) -> Result<(Model<F>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (_, header, records) = parse(&bytes, path)?;
    let mut model = Model::<F>::new(header.model.clone(), 0).map_err(|e| fail(path, e.to_string()))?;
    for &(key, modality) in &header.decoders {
        model.add_decoder(key, modality, 0)?;
    }
    if records.len() != model.params.len() {
        return Err(fail(path, format!("{} tensors for a model with {} parameters", records.len(), model.params.len())));
    }
    for rec in records {
        let id = model.params.id(&rec.name).ok_or_else(|| fail(path, format!("unexpected parameter {}", rec.name)))?;
        let param = model.params.get_mut(id);
        if param.value.shape() != rec.shape.as_slice() {
            return Err(fail(
                path,
                format!("{}: shape {:?}, expected {:?}", rec.name, rec.shape, param.value.shape()),
            ));
        }
        let payload = &bytes[rec.payload];
        let data: Vec<F> = match rec.dtype {
            DType::F32 => payload.chunks(4).map(|b| F::from_f32(f32::read_le(b)).unwrap()).collect(),
            DType::F64 => payload.chunks(8).map(|b| F::from_f64(f64::read_le(b)).unwrap()).collect(),
        };
        param.value = Tensor::new(rec.shape, data)?;
    }
    Ok((model, header.meta))
}

pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (version, header, records) = parse(&bytes, path)?;
    let param_count = records.iter().map(|r| r.shape.iter().product::<usize>()).sum();
    Ok(CheckpointInfo {
        version,
        model: header.model,
        decoders: header.decoders,
        meta: header.meta,
        tensors: records
            .into_iter()
            .map(|r| {
                let dtype = match r.dtype {
                    DType::F32 => "f32",
                    DType::F64 => "f64",
                };
                (r.name, r.shape, dtype)
            })
            .collect(),
        param_count,
    })
}

