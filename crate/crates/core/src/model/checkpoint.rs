//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "OLNMTCKP"
//! version  u32
//! config   u32 length + UTF-8 JSON of ModelConfig
//! count    u32 number of parameters
//! per parameter:
//!   name   u32 length + UTF-8
//!   rank   u32, then rank x u64 dims
//!   data   product(dims) x f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NmtModel};
use crate::tensor::{ParameterSet, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OLNMTCKP";

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, model: &NmtModel<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, model).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_to<T: Real>(w: &mut impl Write, model: &NmtModel<T>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).map_err(std::io::Error::other)?;
    write_bytes(w, &cfg)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.params.iter() {
        write_bytes(w, name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<NmtModel<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_from(&mut r).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated file ({e})"))
}

fn read_from<T: Real>(r: &mut impl Read) -> Result<NmtModel<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config: ModelConfig =
        serde_json::from_slice(&read_bytes(r)?).map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
    config.validate()?;
    let expected = config.parameter_shapes();
    let count = read_u32(r)? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {count}",
            expected.len()
        )));
    }
    let mut params = ParameterSet::new();
    for (want_name, want_shape) in expected {
        let name =
            String::from_utf8(read_bytes(r)?).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!(
                "expected parameter {want_name}, found {name}"
            )));
        }
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {want_shape:?}, found {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(truncated)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.push(name, Tensor::new(shape, values)?);
    }
    Ok(NmtModel { config, params })
}
