//! Minimal reader for the safetensors weight format: an 8-byte
//! little-endian header length, a JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}`, then a flat byte buffer.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

/// A loaded tensor: its shape and row-major values widened to `f64`.
#[derive(Debug, Clone)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Read every tensor in a safetensors file. Supports F32 and F64 payloads.
pub fn read_safetensors(path: &Path) -> Result<HashMap<String, RawTensor>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if bytes.len() < 8 {
        return Err("file too short for safetensors header".into());
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let data_start = 8 + header_len;
    if bytes.len() < data_start {
        return Err(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        ));
    }
    let header: HashMap<String, serde_json::Value> =
        serde_json::from_slice(&bytes[8..data_start]).map_err(|e| format!("bad header: {e}"))?;
    let data = &bytes[data_start..];

    let mut out = HashMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(value)
            .map_err(|e| format!("tensor `{name}`: bad entry: {e}"))?;
        let (start, end) = entry.data_offsets;
        if end < start || end > data.len() {
            return Err(format!("tensor `{name}`: offsets {start}..{end} out of range"));
        }
        let raw = &data[start..end];
        let count: usize = entry.shape.iter().product::<usize>().max(1);
        let values: Vec<f64> = match entry.dtype.as_str() {
            "F32" => {
                if raw.len() != count * 4 {
                    return Err(format!(
                        "tensor `{name}`: {} bytes for {count} f32 values",
                        raw.len()
                    ));
                }
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            "F64" => {
                if raw.len() != count * 8 {
                    return Err(format!(
                        "tensor `{name}`: {} bytes for {count} f64 values",
                        raw.len()
                    ));
                }
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            other => {
                return Err(format!(
                    "tensor `{name}`: unsupported dtype {other} (convert weights to F32)"
                ));
            }
        };
        out.insert(
            name,
            RawTensor {
                shape: entry.shape,
                values,
            },
        );
    }
    Ok(out)
}
