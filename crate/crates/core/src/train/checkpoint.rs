use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Every parameter tensor with its name and shape, plus the configuration
/// needed to rebuild the model around them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub method: String,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(method: &str, config: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            method: method.to_string(),
            config,
            tensors: store
                .names()
                .iter()
                .zip(store.tensors())
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor `{}` has inconsistent shape",
                    t.name
                )));
            }
            s.add(t.name.clone(), Tensor::new(&t.shape, t.data.clone()));
        }
        Ok(s)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok(ckpt)
}
