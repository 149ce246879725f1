//! `FCROP1` checkpoint format: magic string, JSON header (layout + metadata),
//! then raw little-endian f32 values.

use crate::error::{Error, Result};
use crate::model::{Layout, ParameterVector};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"FCROP1";

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    layout: Layout,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Write a parameter vector with attached JSON metadata.
pub fn save_checkpoint(path: &Path, params: &ParameterVector, meta: &serde_json::Value) -> Result<()> {
    let header = Header {
        version: 1,
        layout: params.layout.clone(),
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(params.values.len() * 4);
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Read a checkpoint back, returning the parameters and their metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParameterVector, serde_json::Value)> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 6];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; expected FCROP1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let expected = header.layout.param_count();
    let mut value_bytes = Vec::new();
    file.read_to_end(&mut value_bytes)?;
    if value_bytes.len() != expected * 4 {
        return Err(Error::Checkpoint(format!(
            "value section holds {} bytes, layout expects {}",
            value_bytes.len(),
            expected * 4
        )));
    }
    let values: Vec<f32> = value_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((
        ParameterVector {
            values,
            layout: header.layout,
        },
        header.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelSpec};
    use serde_json::json;

    #[test]
    fn round_trip_preserves_bits_and_meta() {
        let spec = ModelSpec::new(Architecture::Smallcnn, (3, 16, 16), 10);
        let pv = spec.init_params(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcrop");
        let meta = json!({"arch": "smallcnn", "input_shape": [3, 16, 16], "n_classes": 10});
        save_checkpoint(&path, &pv, &meta).unwrap();
        let (back, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(back.values, pv.values);
        assert_eq!(back.layout, pv.layout);
        assert_eq!(meta2["arch"], "smallcnn");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.fcrop");
        fs::write(&path, b"NOTFCROP000000000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_values_are_rejected() {
        let spec = ModelSpec::new(Architecture::Smallcnn, (3, 16, 16), 10);
        let pv = spec.init_params(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fcrop");
        save_checkpoint(&path, &pv, &serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
