//! Little-endian binary checkpoints.
//!
//! Layout: magic `ATTRCKPT`, `u32` version, length-prefixed config JSON,
//! `u64` seed, lab means and stds, then every parameter as a
//! length-prefixed name, its shape and raw `f64` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::{Model, ModelConfig};
use crate::autodiff::Tensor;
use crate::data::LabStats;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ATTRCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    write_bytes(&mut out, &serde_json::to_vec(&model.config)?)?;
    out.write_all(&model.seed.to_le_bytes())?;
    write_f64s(&mut out, &model.lab_stats.mean)?;
    write_f64s(&mut out, &model.lab_stats.std)?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        write_bytes(&mut out, name.as_bytes())?;
        out.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for d in tensor.shape() {
            out.write_all(&(*d as u64).to_le_bytes())?;
        }
        write_f64s(&mut out, tensor.data())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Model> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_slice(&read_bytes(&mut input)?)?;
    config.validate()?;
    let seed = read_u64(&mut input)?;
    let mean = read_f64s(&mut input)?;
    let std = read_f64s(&mut input)?;
    let n = read_u64(&mut input)?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(&mut input)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u64(&mut input)? as usize;
        if rank > 2 {
            return Err(Error::Checkpoint(format!("parameter '{name}' has rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut input).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = read_f64s(&mut input)?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    let expected = super::forward::init_params(&config, &mut ChaCha8Rng::seed_from_u64(0));
    for (name, t) in expected.iter() {
        match params.position(name) {
            Some(k) if params.tensors()[k].shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("parameter '{name}' missing or misshapen"))),
        }
    }
    Ok(Model { config, params, lab_stats: LabStats { mean, std }, seed })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn write_bytes<W: Write>(out: &mut W, bytes: &[u8]) -> Result<()> {
    out.write_all(&(bytes.len() as u64).to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> Result<()> {
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(input: &mut R) -> Result<usize> {
    let n = read_u64(input)?;
    if n > (1 << 32) {
        return Err(Error::Checkpoint(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn read_bytes<R: Read>(input: &mut R) -> Result<Vec<u8>> {
    let n = read_len(input)?;
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_f64s<R: Read>(input: &mut R) -> Result<Vec<f64>> {
    let n = read_len(input)?;
    (0..n).map(|_| read_u64(input).map(f64::from_bits)).collect()
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("unexpected end of file".into())
}
