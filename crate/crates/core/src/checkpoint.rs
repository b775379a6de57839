//! Parameter checkpoints in the safetensors container.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use famnet_tensor::{ParamKind, ParamStore, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

const FORMAT: &str = "famnet";
const VERSION: &str = "1";

/// Everything needed to rebuild the network and its input pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub image_size: usize,
    pub depth: usize,
    pub au_vocabulary: Vec<String>,
    /// Held-out subject of the fold this checkpoint was trained for.
    pub fold: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(name, p)| {
                let raw = p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.to_string(), raw, p.value.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(n, raw, shape)| Ok((n.as_str(), TensorView::new(Dtype::F32, shape.clone(), raw)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| fail(e.to_string()))?;
        let buffers: Vec<&str> = self
            .params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Buffer)
            .map(|(n, _)| n)
            .collect();
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("version".to_string(), VERSION.to_string()),
            ("config".to_string(), serde_json::to_string(&self.meta).expect("meta serialises")),
            ("buffers".to_string(), serde_json::to_string(&buffers).expect("names serialise")),
        ]);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| fail(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
        }
        let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| fail(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).ok_or_else(|| fail(format!("missing metadata `{k}`")));
        if field("format")? != FORMAT {
            return Err(fail("not a famnet checkpoint".into()));
        }
        if field("version")? != VERSION {
            return Err(fail(format!("unsupported version {}", field("version")?)));
        }
        let info: CheckpointMeta = serde_json::from_str(field("config")?).map_err(|e| fail(e.to_string()))?;
        let buffers: Vec<String> = serde_json::from_str(field("buffers")?).map_err(|e| fail(e.to_string()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| fail(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(fail(format!("{name}: expected F32, found {:?}", view.dtype())));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let kind = if buffers.contains(&name) { ParamKind::Buffer } else { ParamKind::Trainable };
            params.insert(name, Tensor::new(view.shape().to_vec(), data)?, kind);
        }
        Ok(Checkpoint { meta: info, params })
    }
}
