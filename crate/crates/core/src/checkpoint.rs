//! Self-describing archive: named f64 arrays plus string metadata, stored
//! in the safetensors layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use canvasinfill_tensor::{ParamSet, Tensor};
use ndarray::IxDyn;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: ParamSet,
    pub metadata: BTreeMap<String, String>,
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    /// Metadata value that must be present; `path` is for the error message.
    pub fn require_meta(&self, path: &Path, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| ckpt_err(path, format!("missing metadata key `{key}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let data = t.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.to_string(), data, t.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, data, shape)| Ok((name.clone(), TensorView::new(Dtype::F64, shape.clone(), data)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| ckpt_err(path, e.to_string()))?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
        }
        safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| ckpt_err(path, e.to_string()))
    }

    /// Reads an archive; `F32` arrays are widened to f64.
    pub fn load(path: &Path) -> Result<Archive> {
        if !path.exists() {
            return Err(ckpt_err(path, "file does not exist"));
        }
        let bytes = std::fs::read(path).map_err(crate::error::io_err(path))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
        let mut tensors = ParamSet::new();
        for (name, view) in st.tensors() {
            let values: Vec<f64> = match view.dtype() {
                Dtype::F64 => view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                Dtype::F32 => view.data().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                other => return Err(ckpt_err(path, format!("tensor `{name}` has unsupported dtype {other:?}"))),
            };
            let t = Tensor::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| ckpt_err(path, e.to_string()))?;
            tensors.insert(name, t);
        }
        let metadata = header.metadata().clone().unwrap_or_default().into_iter().collect();
        Ok(Archive { tensors, metadata })
    }
}
