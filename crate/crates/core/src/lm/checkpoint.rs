//! Self-describing checkpoint files.
//!
//! ```text
//! "TGCK" | u32 LE version | u64 LE header length | JSON header | f64 LE tensors
//! ```
//!
//! The header carries the model configuration, step, seed and the name and
//! shape of every tensor in storage order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::config::ModelConfig;
use super::model::Model;
use super::params::ModelParams;
use super::LmError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    pub seed: u64,
    pub tensors: Vec<TensorInfo>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, model: &Model<T>, step: usize, seed: u64) -> Result<(), LmError> {
    let named = model.params.named();
    let header = Checkpoint {
        config: model.config.clone(),
        step,
        seed,
        tensors: named.iter().map(|(n, m)| TensorInfo { name: n.clone(), rows: m.rows(), cols: m.cols() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, m) in &named {
        buf.clear();
        for &x in m.as_slice() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &Model<T>, step: usize, seed: u64) -> Result<(), LmError> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, step, seed)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<(Model<T>, Checkpoint), LmError> {
    let bad = |m: &str| LmError::Checkpoint(m.to_string());
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| bad("file shorter than its fixed header"))?;
    if head[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(LmError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let meta: Checkpoint = serde_json::from_slice(&json).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    meta.config.validate()?;
    let mut params = ModelParams::<T>::init(&meta.config, 0);
    let expected: Vec<TensorInfo> =
        params.named().into_iter().map(|(name, m)| TensorInfo { name, rows: m.rows(), cols: m.cols() }).collect();
    if expected != meta.tensors {
        return Err(bad("tensor table does not match the embedded configuration"));
    }
    for t in params.tensors_mut() {
        let mut raw = vec![0u8; t.len() * 8];
        r.read_exact(&mut raw).map_err(|_| bad("truncated tensor data"))?;
        let vals: Vec<T> = raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
        *t = Matrix::from_vec(t.rows(), t.cols(), vals);
    }
    let model = Model::from_params(meta.config.clone(), params)?;
    Ok((model, meta))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, Checkpoint), LmError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Mechanism;

    #[test]
    fn round_trip_is_bit_identical() {
        for mech in [Mechanism::Linear, Mechanism::Rwkv] {
            let cfg = ModelConfig { embed_dim: 6, ..ModelConfig::tiny(8, 2, 16) }.with_mechanism(mech);
            let model = Model::<f64>::new(cfg, 4).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &model, 17, 99).unwrap();
            let (back, meta): (Model<f64>, _) = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(meta.step, 17);
            assert_eq!(meta.seed, 99);
            assert_eq!(back, model);
            let ids = [256, 1, 2, 3];
            assert_eq!(back.forward(&ids).unwrap(), model.forward(&ids).unwrap());
        }
    }

    #[test]
    fn f32_models_survive_the_f64_container() {
        let model = Model::<f32>::new(ModelConfig::tiny(8, 1, 16), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, 0, 0).unwrap();
        let (back, _): (Model<f32>, _) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = Model::<f64>::new(ModelConfig::tiny(8, 1, 16), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, 0, 0).unwrap();
        assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint::<f64, _>(&buf[..]).is_err());
    }
}
