//! JSON checkpoint format shared by every stored network.
//!
//! ```json
//! {"format_version": 1, "dtype": "f32",
//!  "layers": [{"w": [[...], ...], "b": [...], "act": "silu"}, ...],
//!  "meta": {...}}
//! ```
//!
//! `w` is stored row-major with shape `(in_dim, out_dim)`. Values are rounded
//! to `f32` on save and widened back to `f64` on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, MlpNet, Tensor2};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub w: Vec<Vec<f32>>,
    pub b: Vec<f32>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dtype: String,
    pub layers: Vec<LayerRecord>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_net(net: &MlpNet, meta: serde_json::Value) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                w: (0..l.w.rows())
                    .map(|r| l.w.row(r).iter().map(|&x| x as f32).collect())
                    .collect(),
                b: l.b.iter().map(|&x| x as f32).collect(),
                act: l.act,
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            layers,
            meta,
        }
    }

    pub fn to_net(&self) -> Result<MlpNet> {
        let layers = self
            .layers
            .iter()
            .map(|rec| {
                let rows: Vec<Vec<f64>> = rec
                    .w
                    .iter()
                    .map(|r| r.iter().map(|&x| f64::from(x)).collect())
                    .collect();
                let w = Tensor2::from_rows(&rows)?;
                Layer::new(w, rec.b.iter().map(|&x| f64::from(x)).collect(), rec.act)
            })
            .collect::<Result<Vec<_>>>()?;
        MlpNet::from_layers(layers)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        match raw.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported format_version {v}"))),
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        let ck: Checkpoint =
            serde_json::from_value(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {:?}", ck.dtype)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
