//! Named-tensor container on disk (safetensors layout). Values are written
//! as little-endian f64 so round trips are bit-exact; f32/f16/bf16 are
//! accepted on read for imported weights.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sam3unet_tensor::Array;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Array>,
    pub metadata: BTreeMap<String, String>,
}

fn decode(name: &str, view: &TensorView<'_>) -> Result<Array> {
    let bytes = view.data();
    let values: Vec<f64> = match view.dtype() {
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F16 => bytes.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64()).collect(),
        Dtype::BF16 => bytes.chunks_exact(2).map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64()).collect(),
        other => {
            return Err(Error::Load { name: name.to_string(), reason: format!("unsupported dtype {other:?}") });
        }
    };
    ArrayD::from_shape_vec(IxDyn(view.shape()), values)
        .map_err(|e| Error::Load { name: name.to_string(), reason: e.to_string() })
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let parse_err = |e: safetensors::SafeTensorError| Error::Parse { context: context.to_string(), reason: e.to_string() };
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(parse_err)?;
        let file = SafeTensors::deserialize(bytes).map_err(parse_err)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in file.tensors() {
            let value = decode(&name, &view)?;
            tensors.insert(name, value);
        }
        let metadata = meta.metadata().clone().unwrap_or_default().into_iter().collect();
        Ok(TensorFile { tensors, metadata })
    }

    /// Serializes with sorted header keys, so equal contents give equal
    /// bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            let meta = self.metadata.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
            header.insert("__metadata__".into(), serde_json::Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = offset + 8 * t.len();
            header.insert(
                name.clone(),
                serde_json::json!({ "dtype": "F64", "shape": t.shape(), "data_offsets": [offset, end] }),
            );
            offset = end;
        }
        let mut json = serde_json::to_vec(&serde_json::Value::Object(header))
            .map_err(|e| Error::Parse { context: "tensor header".into(), reason: e.to_string() })?;
        json.resize(json.len().next_multiple_of(8), b' ');
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            out.extend(t.iter().flat_map(|v| v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
