use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::unet::{is_head_key, UNet};
use super::NetworkSpec;
use crate::{Error, Result};

/// Sole header metadata key. The safetensors header takes a `HashMap`,
/// whose iteration order varies between instances; a single entry keeps
/// the file bytes reproducible.
const HEADER_KEY: &str = "nucleiseg-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: SnapshotMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub spec: NetworkSpec,
    /// Free-form description of how the weights were produced, e.g.
    /// `"n2v"` or `"sequential_unet/seg"`.
    pub provenance: String,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Immutable copy of every parameter and buffer of a [`UNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub tensors: BTreeMap<String, StoredTensor>,
    pub meta: SnapshotMeta,
}

impl WeightSnapshot {
    pub fn capture(net: &mut UNet, provenance: impl Into<String>, epoch: usize) -> Self {
        let spec = *net.spec();
        let tensors = net
            .slots()
            .into_iter()
            .map(|(name, slot)| {
                (
                    name,
                    StoredTensor {
                        shape: slot.shape().to_vec(),
                        data: slot.value().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            tensors,
            meta: SnapshotMeta {
                spec,
                provenance: provenance.into(),
                epoch,
            },
        }
    }

    /// Rebuilds the network; the result's parameters equal the snapshot bitwise.
    pub fn restore(&self) -> Result<UNet> {
        let mut net = UNet::new(self.meta.spec, 0)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    /// Overwrites every tensor of `net`; the key sets and shapes must match.
    pub fn load_into(&self, net: &mut UNet) -> Result<()> {
        let mut slots = net.slots();
        if slots.len() != self.tensors.len() {
            let missing = slots
                .iter()
                .map(|(n, _)| n)
                .find(|n| !self.tensors.contains_key(*n))
                .cloned()
                .unwrap_or_else(|| "<extra tensors in snapshot>".into());
            return Err(Error::IncompatibleWeights {
                layer: missing,
                msg: "tensor sets differ".into(),
            });
        }
        for (name, slot) in slots.iter_mut() {
            let stored = self.tensors.get(name.as_str()).ok_or_else(|| Error::IncompatibleWeights {
                layer: name.clone(),
                msg: "missing from snapshot".into(),
            })?;
            if stored.shape != slot.shape() {
                return Err(Error::IncompatibleWeights {
                    layer: name.clone(),
                    msg: format!("shape {:?} vs {:?}", stored.shape, slot.shape()),
                });
            }
            slot.value_mut().copy_from_slice(&stored.data);
        }
        Ok(())
    }

    pub fn body(&self) -> impl Iterator<Item = (&String, &StoredTensor)> {
        self.tensors.iter().filter(|(k, _)| !is_head_key(k))
    }

    pub fn head(&self) -> impl Iterator<Item = (&String, &StoredTensor)> {
        self.tensors.iter().filter(|(k, _)| is_head_key(k))
    }

    /// Single-file safetensors archive; the metadata travels as JSON in the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let raw = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.clone(), raw, t.shape.clone())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, raw, shape)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::Encode {
                        path: path.to_path_buf(),
                        msg: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let header = serde_json::to_string(&Header {
            version: VERSION,
            meta: self.meta.clone(),
        })
        .expect("metadata serializes");
        let info = HashMap::from([(HEADER_KEY.to_string(), header)]);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        safetensors::serialize_to_file(views, Some(info), path).map_err(|e| Error::Encode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |msg: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            msg,
        };
        let (_, header) = SafeTensors::read_metadata(&buf).map_err(|e| corrupt(e.to_string()))?;
        let info = header
            .metadata()
            .as_ref()
            .ok_or_else(|| corrupt("missing metadata".into()))?;
        let raw = info
            .get(HEADER_KEY)
            .ok_or_else(|| corrupt("not a nucleiseg checkpoint".into()))?;
        let Header { version, meta } = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let st = SafeTensors::deserialize(&buf).map_err(|e| corrupt(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(corrupt(format!("tensor {name} is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                name,
                StoredTensor {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { tensors, meta })
    }
}
