//! Checkpoint files: a UTF-8 manifest terminated by `end\n`, then the raw
//! little-endian `f64` payload of every parameter in manifest order.
//!
//! ```text
//! hypercqa-checkpoint v1
//! meta\t<key>\t<value>
//! param\t<name>\t<d0,d1,...>\t<count>
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "hypercqa-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

pub fn encode(params: &ParamStore, meta: &BTreeMap<String, String>) -> Result<Vec<u8>, CheckpointError> {
    let mut head = format!("{CHECKPOINT_MAGIC} v{VERSION}\n");
    for (k, v) in meta {
        if k.contains(['\t', '\n']) || v.contains('\n') {
            return Err(CheckpointError::Format(format!("meta entry `{k}` has a tab or newline")));
        }
        head.push_str(&format!("meta\t{k}\t{v}\n"));
    }
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        head.push_str(&format!("param\t{name}\t{}\t{}\n", dims.join(","), t.len()));
    }
    head.push_str("end\n");
    let mut bytes = head.into_bytes();
    for (_, t) in params.iter() {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| fmt("missing end of manifest"))?;
    let head = std::str::from_utf8(&bytes[..end]).map_err(|_| fmt("manifest is not UTF-8"))?;
    let mut payload = &bytes[end + 5..];
    let mut lines = head.lines();
    let first = lines.next().ok_or_else(|| fmt("empty manifest"))?;
    let version = first
        .strip_prefix(CHECKPOINT_MAGIC)
        .and_then(|r| r.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| fmt("bad magic line"))?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut meta = BTreeMap::new();
    let mut params = ParamStore::new();
    for line in lines {
        let fields: Vec<&str> = line.splitn(4, '\t').collect();
        match fields.as_slice() {
            ["meta", k, v] => {
                meta.insert(k.to_string(), v.to_string());
            }
            ["param", name, dims, count] => {
                let shape: Vec<usize> = if dims.is_empty() {
                    Vec::new()
                } else {
                    dims.split(',')
                        .map(|d| d.parse().map_err(|_| fmt("bad dimension")))
                        .collect::<Result<_, _>>()?
                };
                let count: usize = count.parse().map_err(|_| fmt("bad count"))?;
                if payload.len() < count * 8 {
                    return Err(fmt("payload truncated"));
                }
                let data = payload[..count * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                payload = &payload[count * 8..];
                let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
                params
                    .add(*name, t)
                    .map_err(|e| CheckpointError::Format(e.to_string()))?;
            }
            _ => return Err(fmt(&format!("unexpected manifest line `{line}`"))),
        }
    }
    if !payload.is_empty() {
        return Err(fmt("trailing bytes after payload"));
    }
    Ok(Checkpoint { meta, params })
}

pub fn write_checkpoint(
    path: &Path,
    params: &ParamStore,
    meta: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    fs::write(path, encode(params, meta)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore, BTreeMap<String, String>) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_rows(&[vec![1.0, -2.5], vec![3.25, 0.0]])).unwrap();
        store.add("s", Tensor::scalar(f64::MIN_POSITIVE)).unwrap();
        let meta = [("config".to_string(), "{\"d\":8}".to_string())].into_iter().collect();
        (store, meta)
    }

    #[test]
    fn round_trip() {
        let (store, meta) = sample();
        let bytes = encode(&store, &meta).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.params, store);
        assert_eq!(ck.meta, meta);
        assert!(bytes.starts_with(b"hypercqa-checkpoint v1\nmeta\tconfig\t"));
    }

    #[test]
    fn rejects_other_versions_and_truncation() {
        let (store, meta) = sample();
        let mut bytes = encode(&store, &meta).unwrap();
        let text = String::from_utf8_lossy(&bytes).replace(" v1\n", " v9\n");
        let other = text.into_bytes();
        assert!(matches!(decode(&other), Err(CheckpointError::Version(9))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Format(_))));
    }
}
