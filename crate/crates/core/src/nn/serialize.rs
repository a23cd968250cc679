//! Versioned binary weight container.
//!
//! Layout: magic, format version, architecture hash, layer list (JSON),
//! input signature, head marker, then one record per tensor with its name,
//! trainable flag, shape, and little-endian f64 values. Round-trips are
//! bit-exact.

use std::io::{Read, Write};

use super::graph::arch_hash_of;
use super::{InputSig, LayerSpec, ModelGraph, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DGCW";
const FORMAT_VERSION: u32 = 1;

pub fn write_model<W: Write>(w: &mut W, model: &ModelGraph) -> Result<()> {
    let specs = model.specs();
    let specs_json = serde_json::to_vec(&specs)
        .map_err(|e| Error::WeightFormat(format!("layer list serialization: {e}")))?;

    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_bytes(w, model.arch_hash().as_bytes())?;
    write_bytes(w, &specs_json)?;
    let sig = model.input_sig();
    w.write_all(&(sig.width as u64).to_le_bytes())?;
    w.write_all(&(sig.vocab as u64).to_le_bytes())?;
    w.write_all(&sig.tag.to_le_bytes())?;
    w.write_all(&(model.head_marker() as u64).to_le_bytes())?;

    let entries = model.store().entries();
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for entry in entries {
        write_bytes(w, entry.name.as_bytes())?;
        w.write_all(&[entry.trainable as u8])?;
        w.write_all(&(entry.tensor.shape().len() as u32).to_le_bytes())?;
        for &d in entry.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in entry.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<ModelGraph> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::WeightFormat("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported format version {version}"
        )));
    }
    let stored_hash = String::from_utf8(read_bytes(r)?)
        .map_err(|_| Error::WeightFormat("arch hash not utf-8".into()))?;
    let specs: Vec<LayerSpec> = serde_json::from_slice(&read_bytes(r)?)
        .map_err(|e| Error::WeightFormat(format!("layer list parse: {e}")))?;
    if arch_hash_of(&specs) != stored_hash {
        return Err(Error::WeightFormat(
            "architecture hash does not match layer list".into(),
        ));
    }
    let width = read_u64(r)? as usize;
    let vocab = read_u64(r)? as usize;
    let tag = read_u64(r)?;
    let head_marker = read_u64(r)? as usize;

    let mut model =
        ModelGraph::from_specs_zeroed(&specs, head_marker, InputSig { width, vocab, tag })?;

    let count = read_u32(r)? as usize;
    if count != model.store().len() {
        return Err(Error::WeightFormat(format!(
            "tensor count {count} != {} expected by architecture",
            model.store().len()
        )));
    }
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(r)?)
            .map_err(|_| Error::WeightFormat("tensor name not utf-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        model
            .store_mut()
            .install(&name, Tensor::from_vec(&shape, data)?, flag[0] != 0)?;
    }
    Ok(model)
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > 1 << 30 {
        return Err(Error::WeightFormat(format!("oversized field ({len} bytes)")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
