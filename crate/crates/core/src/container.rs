//! Named `f32` array files (safetensors layout) with a string metadata block.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct F32Array {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Serializes arrays and metadata. Output bytes depend only on the inputs.
pub fn encode(arrays: &BTreeMap<String, F32Array>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(name, a)| {
            let bytes = a.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), a.shape.clone(), bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("array {name}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let info: Option<HashMap<String, String>> = if metadata.is_empty() {
        None
    } else {
        // A single key keeps the header byte order independent of hashing.
        let packed = serde_json::to_string(metadata).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Some(HashMap::from([("metadata".to_string(), packed)]))
    };
    safetensors::serialize(views, info).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<(BTreeMap<String, F32Array>, BTreeMap<String, String>)> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata = match header.metadata().as_ref().and_then(|m| m.get("metadata")) {
        Some(packed) => serde_json::from_str(packed).map_err(|e| Error::Checkpoint(e.to_string()))?,
        None => BTreeMap::new(),
    };
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut arrays = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("array {name} is {:?}, expected F32", view.dtype())));
        }
        let values = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        arrays.insert(
            name,
            F32Array {
                shape: view.shape().to_vec(),
                values,
            },
        );
    }
    Ok((arrays, metadata))
}

pub fn read(path: &Path) -> Result<(BTreeMap<String, F32Array>, BTreeMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let mut arrays = BTreeMap::new();
        for i in 0..20 {
            arrays.insert(
                format!("p{i}"),
                F32Array {
                    shape: vec![2, 3],
                    values: (0..6).map(|k| (k * i) as f32 * 0.25).collect(),
                },
            );
        }
        let meta = BTreeMap::from([("config".to_string(), "{\"a\":1}".to_string())]);
        let a = encode(&arrays, &meta).unwrap();
        let b = encode(&arrays, &meta).unwrap();
        assert_eq!(a, b);
        let (back, m) = decode(&a).unwrap();
        assert_eq!(back, arrays);
        assert_eq!(m, meta);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode(b"not a container").is_err());
    }
}
