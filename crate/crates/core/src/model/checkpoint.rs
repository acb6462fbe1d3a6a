//! Single-file checkpoints: a text manifest followed by raw little-endian
//! float64 blocks.
//!
//! ```text
//! RPCCKPT1
//! meta epoch=12
//! tensor encoder.0.weight 32 64 0
//! tensor encoder.0.bias 1 64 16384
//! end
//! <binary blocks>
//! ```
//!
//! Tensor offsets are in bytes from the first byte after the `end` line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "RPCCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k}={v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            manifest.push_str(&format!("tensor {name} {} {} {offset}\n", t.rows(), t.cols()));
            offset += 8 * t.len();
        }
        manifest.push_str("end\n");
        let mut bytes = manifest.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = |what: &str| -> Result<(usize, &str)> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(format!("byte {pos}"), format!("unterminated {what}")))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::parse(format!("byte {pos}"), "manifest is not UTF-8"))?;
            let start = pos;
            pos += end + 1;
            Ok((start, line))
        };

        let (_, magic) = next_line("magic")?;
        if magic != MAGIC {
            return Err(Error::parse("byte 0", format!("bad magic, expected {MAGIC}")));
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let (at, line) = next_line("manifest")?;
            if line == "end" {
                break;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::parse(format!("byte {at}"), "meta without `=`"))?;
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(spec) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = spec.split(' ').collect();
                let bad = || Error::parse(format!("byte {at}"), format!("bad tensor entry `{line}`"));
                if parts.len() != 4 {
                    return Err(bad());
                }
                let rows: usize = parts[1].parse().map_err(|_| bad())?;
                let cols: usize = parts[2].parse().map_err(|_| bad())?;
                let off: usize = parts[3].parse().map_err(|_| bad())?;
                entries.push((parts[0].to_string(), rows, cols, off, at));
            } else {
                return Err(Error::parse(format!("byte {at}"), format!("unknown manifest line `{line}`")));
            }
        }
        let body = &bytes[pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, rows, cols, off, at) in entries {
            let len = rows * cols * 8;
            let block = body.get(off..off + len).ok_or_else(|| {
                Error::parse(
                    format!("byte {at}"),
                    format!("tensor `{name}` runs past end of file"),
                )
            })?;
            let data = block
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(rows, cols, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_bit_exact(
            values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let t = Tensor::new(rows, cols, values[..rows * cols].to_vec()).unwrap();
            let ck = Checkpoint {
                meta: vec![("epoch".into(), "3".into())],
                tensors: vec![("a".into(), t.clone()), ("b".into(), Tensor::scalar(-0.0))],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(&back.meta, &ck.meta);
            let (a, b) = (back.tensor("a").unwrap(), back.tensor("b").unwrap());
            prop_assert!(a.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert_eq!(b.data()[0].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn truncated_body_rejected() {
        let ck = Checkpoint {
            meta: vec![],
            tensors: vec![("a".into(), Tensor::zeros(2, 2))],
        };
        let mut bytes = ck.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(Checkpoint::from_bytes(b"NOPE\nend\n").is_err());
    }
}
