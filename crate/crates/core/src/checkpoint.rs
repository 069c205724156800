//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "LGNCKPT\0"
//! version    u32       currently 1
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON
//! count      u32       number of tensors
//! count times:
//!   name_len u32
//!   name     name_len bytes of UTF-8
//!   ndim     u32
//!   dims     ndim x u64
//!   payload  prod(dims) x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use lgn_tensor::Tensor;
use rand::SeedableRng;
use serde_json::{json, Value};

use crate::error::{io_err, LgnError, Result};
use crate::unfolded::{NetworkConfig, UnfoldedNetwork};

pub const MAGIC: &[u8; 8] = b"LGNCKPT\0";
pub const VERSION: u32 = 1;

/// Serialises `tensors` with JSON metadata.
pub fn encode(meta: &Value, tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    let meta = serde_json::to_vec(meta).map_err(|e| LgnError::Checkpoint(e.to_string()))?;
    out.extend((meta.len() as u32).to_le_bytes());
    out.extend(meta);
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            LgnError::Checkpoint(format!("file ends inside {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(LgnError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(LgnError::Checkpoint(format!(
            "unsupported version {version}, this build reads version {VERSION}"
        )));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: Value =
        serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| LgnError::Checkpoint(e.to_string()))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|e| LgnError::Checkpoint(format!("tensor name: {e}")))?;
        let ndim = r.u32("rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let payload = r.take(len.checked_mul(8).ok_or_else(|| LgnError::Checkpoint("tensor too large".into()))?, &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(LgnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((meta, tensors))
}

/// Writes every parameter and running statistic of `net`.
pub fn save_network(path: &Path, net: &UnfoldedNetwork, extra: Value) -> Result<()> {
    let meta = json!({ "network": net.config, "extra": extra });
    let buffers = net.buffers();
    let mut tensors = net.parameters();
    tensors.extend(buffers.iter().map(|(n, t)| (n.clone(), t)));
    let bytes = encode(&meta, &tensors)?;
    let mut f = std::fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    f.write_all(&bytes).map_err(io_err(format!("writing {}", path.display())))
}

/// Rebuilds a network written by [`save_network`], with its extra metadata.
pub fn load_network(path: &Path) -> Result<(UnfoldedNetwork, Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(format!("reading {}", path.display())))?;
    let (meta, tensors) = decode(&bytes)?;
    let config: NetworkConfig = serde_json::from_value(meta["network"].clone())
        .map_err(|e| LgnError::Checkpoint(format!("network configuration: {e}")))?;
    let mut net = UnfoldedNetwork::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    let mut stored: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = stored
            .remove(name)
            .ok_or_else(|| LgnError::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(LgnError::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let names: Vec<(String, Vec<usize>)> = net
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let values = names
        .iter()
        .map(|(n, s)| fetch(n, s))
        .collect::<Result<Vec<_>>>()?;
    for (slot, v) in net.parameters_mut().into_iter().zip(values) {
        *slot = v;
    }
    for l in 0..net.norms.len() {
        let c = net.norms[l].running_mean.len();
        net.norms[l].running_mean = fetch(&format!("norm{l}.running_mean"), &[c])?;
        net.norms[l].running_var = fetch(&format!("norm{l}.running_var"), &[c])?;
        net.norms[l].batches_tracked = fetch(&format!("norm{l}.batches_tracked"), &[])?.item()? as u64;
    }
    if let Some(name) = stored.keys().next() {
        return Err(LgnError::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok((net, meta["extra"].clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encode_decode_roundtrip() {
        let a = Tensor::new([2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap();
        let s = Tensor::scalar(4.0);
        let bytes = encode(&json!({"k": 1}), &[("a".into(), &a), ("s".into(), &s)]).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let (meta, tensors) = decode(&bytes).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(tensors[0], ("a".to_string(), a));
        assert_eq!(tensors[1].1, s);
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = encode(&json!({}), &[("x".into(), &Tensor::ones([4]))]).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 2;
        assert!(decode(&wrong_version).unwrap_err().to_string().contains("unsupported version 2"));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
    }

    #[test]
    fn network_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let cfg = NetworkConfig {
            layers: 2,
            groups: 2,
            order: 2,
            filter_rows: 3,
            filter_cols: 3,
            ..NetworkConfig::default()
        };
        let mut net = UnfoldedNetwork::new(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        net.norms[0].batches_tracked = 3;
        net.norms[0].running_mean = Tensor::full([4], 0.25);
        save_network(&path, &net, json!({"epoch": 5})).unwrap();
        let (back, extra) = load_network(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(extra["epoch"], 5);
    }
}
