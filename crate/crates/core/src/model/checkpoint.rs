//! Checkpoints: one little-endian file per tensor plus `config.json`.
//!
//! Tensor file layout: `u32` name length, UTF-8 name, `u32` rank, `rank`
//! `u32` extents, then the `f64` payload in row-major order.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParamSet, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    tensors: Vec<String>,
}

fn file_name(name: &str) -> String {
    format!("{name}.tensor")
}

pub fn save_checkpoint(dir: impl AsRef<Path>, cfg: &ModelConfig, params: &ParamSet) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (name, t) in params.iter() {
        let mut w = BufWriter::new(fs::File::create(dir.join(file_name(name)))?);
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    let manifest = Manifest {
        model: cfg.clone(),
        tensors: params.names().map(String::from).collect(),
    };
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelConfig, ParamSet)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let mut params = ParamSet::new();
    for name in &manifest.tensors {
        let mut r = BufReader::new(fs::File::open(dir.join(file_name(name)))?);
        let n = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)?;
        let stored = String::from_utf8(buf).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if &stored != name {
            return Err(ModelError::Checkpoint(format!(
                "file for {name} holds {stored}"
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        if r.read(&mut b)? != 0 {
            return Err(ModelError::Checkpoint(format!("trailing bytes in {name}")));
        }
        params.insert(name.clone(), Tensor::new(shape, data)?);
    }
    params.check_against(&manifest.model)?;
    Ok((manifest.model, params))
}
