//! Versioned binary checkpoint container: canonical parameter names
//! mapped to float32 tensors plus the embedded network configuration.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::params::ModelParams;
use crate::error::{PriqaError, Result};

const MAGIC: &[u8; 8] = b"PRQCKPT1";

#[derive(Serialize, Deserialize)]
struct Meta {
    config: NetConfig,
    iteration: u64,
}

fn io_err(path: &Path, e: std::io::Error) -> PriqaError {
    PriqaError::io(path.display().to_string(), e)
}

/// Writes parameters and config; tensors are stored as little-endian
/// float32 in name order, so identical models give identical bytes.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &NetConfig,
    iteration: u64,
    path: &Path,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    let meta = serde_json::to_vec(&Meta {
        config: config.clone(),
        iteration,
    })
    .expect("meta serialization is infallible");
    w.write_u32::<LittleEndian>(meta.len() as u32)
        .map_err(|e| io_err(path, e))?;
    w.write_all(&meta).map_err(|e| io_err(path, e))?;
    w.write_u32::<LittleEndian>(params.len() as u32)
        .map_err(|e| io_err(path, e))?;
    for (name, tensor) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)
            .map_err(|e| io_err(path, e))?;
        w.write_all(name.as_bytes()).map_err(|e| io_err(path, e))?;
        let (rows, cols) = tensor.dim();
        w.write_u32::<LittleEndian>(rows as u32)
            .map_err(|e| io_err(path, e))?;
        w.write_u32::<LittleEndian>(cols as u32)
            .map_err(|e| io_err(path, e))?;
        for v in tensor.iter() {
            w.write_f32::<LittleEndian>(*v as f32)
                .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a checkpoint back; tensor shapes are validated against the
/// embedded configuration.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, NetConfig, u64)> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(PriqaError::Format(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let meta_len = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(|e| io_err(path, e))?;
    let meta: Meta = serde_json::from_slice(&meta_buf)
        .map_err(|e| PriqaError::Format(format!("bad checkpoint meta: {e}")))?;

    let n_tensors = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..n_tensors {
        let name_len = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| PriqaError::Format(format!("bad tensor name: {e}")))?;
        let rows = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize;
        let mut tensor = Array2::zeros((rows, cols));
        for v in tensor.iter_mut() {
            *v = r.read_f32::<LittleEndian>().map_err(|e| io_err(path, e))? as f64;
        }
        tensors.insert(name, tensor);
    }
    let params = ModelParams::from_tensors(tensors);
    params.check_matches(&meta.config)?;
    Ok((params, meta.config, meta.iteration))
}
