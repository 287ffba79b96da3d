//! Model checkpoints in safetensors format.
//!
//! Tensors are stored as F64 under their parameter names. The header metadata
//! carries the encoder config, the strategy, the trainable set and, when
//! known, the vocabulary, normalization and run config (all as JSON strings).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;

use crate::data::{Normalization, Vocab};
use crate::encoder::{DualEncoderModel, EncoderConfig};
use crate::error::{PetlError, Result};
use crate::petl::PetlStrategy;

const FORMAT: &str = "petl-lab-checkpoint";
const VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoderModel,
    pub vocab: Option<Vocab>,
    pub normalization: Option<Normalization>,
    pub run_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: DualEncoderModel) -> Self {
        Checkpoint {
            model,
            vocab: None,
            normalization: None,
            run_config: None,
        }
    }
}

fn fmt_err(e: impl std::fmt::Display) -> PetlError {
    PetlError::Format(e.to_string())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let model = &ckpt.model;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), VERSION.to_string());
    meta.insert("encoder_config".to_string(), serde_json::to_string(model.config())?);
    meta.insert("strategy".to_string(), serde_json::to_string(&model.strategy())?);
    meta.insert(
        "trainable".to_string(),
        serde_json::to_string(&model.trainable_names())?,
    );
    if let Some(v) = &ckpt.vocab {
        meta.insert("vocab".to_string(), serde_json::to_string(v)?);
    }
    if let Some(n) = &ckpt.normalization {
        meta.insert("normalization".to_string(), serde_json::to_string(n)?);
    }
    if let Some(c) = &ckpt.run_config {
        meta.insert("run_config".to_string(), serde_json::to_string(c)?);
    }

    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = model
        .params()
        .iter()
        .map(|(name, p)| {
            let bytes = p.value.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), p.value.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            Ok((
                name.as_str(),
                TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(fmt_err)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(meta)).map_err(fmt_err)?;

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn meta_json<T: DeserializeOwned>(meta: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    meta.get(key)
        .map(|s| serde_json::from_str(s).map_err(|e| PetlError::Format(format!("metadata {key}: {e}"))))
        .transpose()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(fmt_err)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| PetlError::Format("checkpoint has no metadata".into()))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(PetlError::Format(format!("{} is not a {FORMAT} file", path.display())));
    }
    if meta.get("version").map(String::as_str) != Some(VERSION) {
        return Err(PetlError::Format(format!(
            "unsupported checkpoint version {:?}",
            meta.get("version")
        )));
    }
    let config: EncoderConfig =
        meta_json(&meta, "encoder_config")?.ok_or_else(|| PetlError::Format("missing encoder_config".into()))?;
    let strategy: Option<PetlStrategy> = meta_json(&meta, "strategy")?.flatten();
    let trainable: Vec<String> = meta_json(&meta, "trainable")?.unwrap_or_default();

    let st = SafeTensors::deserialize(&bytes).map_err(fmt_err)?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 || view.shape().len() != 2 {
            return Err(PetlError::Format(format!(
                "tensor {name}: expected 2-D F64, found {:?} {:?}",
                view.dtype(),
                view.shape()
            )));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Array2::from_shape_vec((view.shape()[0], view.shape()[1]), values).map_err(fmt_err)?;
        tensors.insert(name, m);
    }
    let model = DualEncoderModel::from_tensors(config, strategy, tensors, &trainable)
        .map_err(|e| PetlError::Format(e.to_string()))?;
    Ok(Checkpoint {
        model,
        vocab: meta_json(&meta, "vocab")?,
        normalization: meta_json(&meta, "normalization")?,
        run_config: meta_json(&meta, "run_config")?,
    })
}
