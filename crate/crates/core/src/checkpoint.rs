//! Parameter dumps: `params.bin` holds every value as little-endian f64,
//! layer by layer (weight row-major, then retention logits); `params.json`
//! describes the layout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DropoutStrategy, LayerParams, ModelParams};
use crate::tensor::Matrix;

pub const DATA_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "params.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub weight_shape: [usize; 2],
    pub retention_len: usize,
    /// Offset of the weight block, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub strategy: DropoutStrategy,
    pub layers: Vec<LayerEntry>,
}

const FORMAT: &str = "f64-le";

pub fn save_checkpoint(dir: &Path, params: &ModelParams, strategy: DropoutStrategy) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut layers = Vec::new();
    let mut offset = 0;
    for l in &params.layers {
        layers.push(LayerEntry {
            weight_shape: [l.weight.rows(), l.weight.cols()],
            retention_len: l.retention_logits.len(),
            offset,
        });
        for v in l.weight.data().iter().chain(l.retention_logits.data()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += l.weight.len() + l.retention_logits.len();
    }
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        strategy,
        layers,
    };
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(man_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, DropoutStrategy)> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::validation(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::validation("checkpoint data is not a whole number of f64 values"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let expected: usize = manifest
        .layers
        .iter()
        .map(|l| l.weight_shape[0] * l.weight_shape[1] + l.retention_len)
        .sum();
    if values.len() != expected {
        return Err(Error::validation(format!(
            "checkpoint holds {} values, manifest describes {expected}",
            values.len()
        )));
    }
    let layers = manifest
        .layers
        .iter()
        .map(|l| {
            let [r, c] = l.weight_shape;
            if l.retention_len != r {
                return Err(Error::validation("retention length must equal weight rows"));
            }
            let w_end = l.offset + r * c;
            let z_end = w_end + l.retention_len;
            if z_end > values.len() {
                return Err(Error::validation("layer block runs past end of data"));
            }
            Ok(LayerParams {
                weight: Matrix::from_vec(r, c, values[l.offset..w_end].to_vec())?,
                retention_logits: Matrix::row_vector(values[w_end..z_end].to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ModelParams { layers }, manifest.strategy))
}
