//! Versioned checkpoint container.
//!
//! A checkpoint is a single UTF-8 JSON document:
//!
//! ```json
//! {
//!   "format": "cmkt-checkpoint",
//!   "version": 1,
//!   "step": 120,
//!   "epoch": 2,
//!   "config": { ... echo of the run configuration ... },
//!   "text_encoder": { "vocab_size": 64, "dim": 32, ... },
//!   "tensors": {
//!     "text.tok_emb": { "rows": 64, "cols": 32, "data": [ ... row-major f64 ... ] },
//!     "image.proj_w": { ... },
//!     "extra.voken_w": { ... }
//!   }
//! }
//! ```
//!
//! Tensor names are `text.*` for the text encoder, `image.*` for the image
//! projection head and `extra.*` for task heads and adapters. Keys are sorted
//! and floats are written in shortest round-trip form, so equal models give
//! byte-identical files.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEncoder, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const FORMAT: &str = "cmkt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub text_encoder: TextEncoderConfig,
    pub tensors: BTreeMap<String, TensorRecord>,
}

/// Everything a training run owns.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub text: TextEncoder,
    pub image: Option<ImageEncoder>,
    pub extra: ParamStore,
}

impl ModelState {
    pub fn text_only(text: TextEncoder) -> Self {
        Self {
            text,
            image: None,
            extra: ParamStore::new(),
        }
    }

    pub fn to_checkpoint(&self, step: u64, epoch: usize, config: serde_json::Value) -> Checkpoint {
        let mut all = self.text.params().prefixed("text");
        if let Some(img) = &self.image {
            all.extend(img.head().prefixed("image"));
        }
        all.extend(self.extra.prefixed("extra"));
        let tensors = all
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    TensorRecord {
                        rows: v.nrows(),
                        cols: v.ncols(),
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            step,
            epoch,
            config,
            text_encoder: *self.text.config(),
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut all = ParamStore::new();
        for (name, rec) in &ckpt.tensors {
            let arr = Array2::from_shape_vec((rec.rows, rec.cols), rec.data.clone())
                .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            all.insert(name.clone(), arr);
        }
        let text = TextEncoder::from_parts(ckpt.text_encoder, all.strip_prefix("text"))?;
        let image_head = all.strip_prefix("image");
        let image = if image_head.is_empty() {
            None
        } else {
            Some(ImageEncoder::from_head(image_head)?)
        };
        Ok(Self {
            text,
            image,
            extra: all.strip_prefix("extra"),
        })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serialises")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if ckpt.format != FORMAT {
            return Err(Error::Format(format!("not a checkpoint (format `{}`)", ckpt.format)));
        }
        if ckpt.version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        for (name, rec) in &ckpt.tensors {
            if rec.rows * rec.cols != rec.data.len() {
                return Err(Error::Format(format!("tensor `{name}` has wrong element count")));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
