//! Checkpoint persistence, bit-exact.
//!
//! Layout: the magic bytes `LRMOE001`; a little-endian u32 record count;
//! per record a u16 name length, the UTF-8 name, a u8 rank, `rank`
//! little-endian u32 extents, then the raw little-endian f32 data; finally
//! a u32-length-prefixed UTF-8 JSON blob holding the model configuration.
//!
//! The same container carries optimizer state in a training-state sidecar,
//! with the JSON blob holding the optimizer step instead.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{build, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"LRMOE001";

pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_records(path: &Path, records: &[Record], json_blob: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(records.len() as u32).to_le_bytes()).map_err(io)?;
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Internal(format!("record name too long: {}", r.name)));
        }
        if r.dims.len() > u8::MAX as usize {
            return Err(Error::Internal(format!("record rank too high: {}", r.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&[r.dims.len() as u8]).map_err(io)?;
        for &d in &r.dims {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in &r.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    let blob = json_blob.as_bytes();
    w.write_all(&(blob.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(blob).map_err(io)?;
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<(Vec<Record>, String)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("not a checkpoint (file too short)"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated record count"))?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut u16buf = [0u8; 2];
        r.read_exact(&mut u16buf)
            .map_err(|_| bad(&format!("truncated record {i}")))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| bad(&format!("truncated name of record {i}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| bad(&format!("record {i} name is not UTF-8")))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)
            .map_err(|_| bad(&format!("truncated rank of {name}")))?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            r.read_exact(&mut u32buf)
                .map_err(|_| bad(&format!("truncated dims of {name}")))?;
            dims.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u32buf)
                .map_err(|_| bad(&format!("truncated data of {name}")))?;
            data.push(f32::from_le_bytes(u32buf));
        }
        records.push(Record { name, dims, data });
    }
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated config length"))?;
    let blob_len = u32::from_le_bytes(u32buf) as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob).map_err(|_| bad("truncated config blob"))?;
    let json = String::from_utf8(blob).map_err(|_| bad("config blob is not UTF-8"))?;
    Ok((records, json))
}

/// Save every named parameter plus the model configuration.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let records: Vec<Record> = model
        .named_params()
        .iter()
        .map(|(name, t)| Record {
            name: name.clone(),
            dims: t.dims().to_vec(),
            data: t.data().clone(),
        })
        .collect();
    let json = serde_json::to_string(&model.config)?;
    write_records(path, &records, &json)
}

/// Rebuild the model from the embedded configuration and restore every
/// tensor. Missing, extra, or misshapen records are data errors.
pub fn load(path: &Path) -> Result<Model> {
    let (records, json) = read_records(path)?;
    let config: ModelConfig = serde_json::from_str(&json)?;
    let model = build(&config)?;
    restore_params(&model, records, path)?;
    Ok(model)
}

fn restore_params(model: &Model, records: Vec<Record>, path: &Path) -> Result<()> {
    let mut by_name: std::collections::BTreeMap<String, Record> =
        records.into_iter().map(|r| (r.name.clone(), r)).collect();
    for (name, tensor) in model.named_params() {
        let record = by_name.remove(name).ok_or_else(|| {
            Error::Data(format!("{}: missing parameter {name}", path.display()))
        })?;
        if record.dims != tensor.dims() {
            return Err(Error::Data(format!(
                "{}: parameter {name} has dims {:?}, expected {:?}",
                path.display(),
                record.dims,
                tensor.dims()
            )));
        }
        tensor.data_mut().copy_from_slice(&record.data);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Data(format!(
            "{}: unknown parameter {extra}",
            path.display()
        )));
    }
    Ok(())
}

/// Optimizer moments and step count, stored next to a model checkpoint.
pub struct TrainState {
    pub step: usize,
    /// first moment per parameter, model order
    pub m: Vec<Vec<f32>>,
    /// second moment per parameter, model order
    pub v: Vec<Vec<f32>>,
}

pub fn save_train_state(model: &Model, state: &TrainState, path: &Path) -> Result<()> {
    let mut records = Vec::new();
    for ((name, t), buf) in model.named_params().iter().zip(&state.m) {
        records.push(Record {
            name: format!("adam.m.{name}"),
            dims: t.dims().to_vec(),
            data: buf.clone(),
        });
    }
    for ((name, t), buf) in model.named_params().iter().zip(&state.v) {
        records.push(Record {
            name: format!("adam.v.{name}"),
            dims: t.dims().to_vec(),
            data: buf.clone(),
        });
    }
    write_records(path, &records, &format!("{{\"step\":{}}}", state.step))
}

pub fn load_train_state(model: &Model, path: &Path) -> Result<TrainState> {
    let (records, json) = read_records(path)?;
    let meta: serde_json::Value = serde_json::from_str(&json)?;
    let step = meta["step"]
        .as_u64()
        .ok_or_else(|| Error::Data(format!("{}: missing step", path.display())))? as usize;
    let by_name: std::collections::BTreeMap<String, Record> =
        records.into_iter().map(|r| (r.name.clone(), r)).collect();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in model.named_params() {
        for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
            let key = format!("{prefix}{name}");
            let r = by_name
                .get(&key)
                .ok_or_else(|| Error::Data(format!("{}: missing {key}", path.display())))?;
            if r.data.len() != t.numel() {
                return Err(Error::Data(format!("{}: size mismatch for {key}", path.display())));
            }
            out.push(r.data.clone());
        }
    }
    Ok(TrainState { step, m, v })
}
