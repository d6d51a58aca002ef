//! Binary parameter files: magic, version, JSON config, then named tensors
//! as little-endian f32 with their shapes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::autodiff::Mat;
use crate::Scalar;

const MAGIC: &[u8; 8] = b"NPSMODEL";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint architecture does not match the configured model")]
    ConfigMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).expect("config serialises");
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, p) in model.names.iter().zip(&model.params) {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(p.nrows() as u32).to_le_bytes())?;
        w.write_all(&(p.ncols() as u32).to_le_bytes())?;
        for x in p.iter() {
            w.write_all(&x.to_f32().unwrap().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Loads parameters; with `expected`, refuses a different architecture.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<T>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig =
        serde_json::from_slice(&cfg).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if let Some(e) = expected {
        if !e.same_architecture(&config) {
            return Err(CheckpointError::ConfigMismatch);
        }
    }
    let mut model = Model::<T>::new(config)?;
    let count = read_u32(&mut r)? as usize;
    if count != model.params.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{count} tensors, expected {}",
            model.params.len()
        )));
    }
    for i in 0..count {
        let mut nl = [0u8; 2];
        r.read_exact(&mut nl)?;
        let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
        r.read_exact(&mut name)?;
        if name != model.names[i].as_bytes() {
            return Err(CheckpointError::Corrupt(format!("tensor {i} is misnamed")));
        }
        let (rows, cols) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        if (rows, cols) != model.params[i].dim() {
            return Err(CheckpointError::Corrupt(format!("tensor {} has shape {rows}x{cols}", model.names[i])));
        }
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
            .collect();
        model.params[i] = Mat::from_shape_vec((rows, cols), data).expect("shape checked");
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(model)
}
