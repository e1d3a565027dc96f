//! Binary container for named arrays.
//!
//! Layout: the 8-byte magic `RCLRECAR`, a little-endian `u32` version, a
//! little-endian `u64` header length, a UTF-8 JSON header, then the values of
//! every array as little-endian `f64` in header order. The header carries
//! caller metadata plus an `arrays` list of `{name, shape}`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Array;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RCLRECAR";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_container(path: &Path, meta: &Value, arrays: &[(&str, &Array)]) -> Result<()> {
    let mut header = match meta {
        Value::Object(m) => m.clone(),
        _ => return Err(Error::Format("container metadata must be a JSON object".into())),
    };
    let entries: Vec<ArrayEntry> = arrays
        .iter()
        .map(|(n, a)| ArrayEntry {
            name: n.to_string(),
            shape: a.shape().to_vec(),
        })
        .collect();
    header.insert("arrays".into(), serde_json::to_value(entries)?);
    let header = serde_json::to_vec(&Value::Object(header))?;
    let total: usize = arrays.iter().map(|(_, a)| a.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + total * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in arrays {
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Returns the header (including `arrays`) and the named arrays.
pub fn read_container(path: &Path) -> Result<(Value, Vec<(String, Array)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not an array container"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Value = serde_json::from_slice(&bytes[20..body_start])?;
    let entries: Vec<ArrayEntry> = serde_json::from_value(header.get("arrays").cloned().ok_or_else(|| bad("no array list"))?)?;
    let mut pos = body_start;
    let mut arrays = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let end = pos + n * 8;
        if end > bytes.len() {
            return Err(bad(&format!("truncated data for {}", e.name)));
        }
        let data = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((e.name, Array::new(e.shape, data)?));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after array data"));
    }
    Ok((header, arrays))
}
