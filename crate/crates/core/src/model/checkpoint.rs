//! Checkpoint files: a UTF-8 `key = value` manifest terminated by an `end`
//! line, followed by the tensors as little-endian f32 in manifest order.
//!
//! ```text
//! cats-checkpoint 1
//! config.k = 16
//! ...
//! seed = 7
//! meta.embeddings = data/e.vec
//! tensor.token.pos_emb = 51x10 @ 0
//! ...
//! end
//! <blob>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::S0;
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "cats-checkpoint 1";

/// Free-form string annotations stored alongside the weights.
pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ModelParams<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        let config = serde_json::to_value(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        for (key, value) in config.as_object().expect("config serializes to an object") {
            head.push_str(&format!("config.{key} = {value}\n"));
        }
        head.push_str(&format!("seed = {}\n", self.seed));
        for (key, value) in &self.meta {
            if key.contains(['\n', '=', ' ']) || value.contains('\n') {
                return Err(Error::Checkpoint(format!("meta entry {key:?} cannot be stored")));
            }
            head.push_str(&format!("meta.{key} = {value}\n"));
        }
        let mut offset = 0usize;
        let tensors = self.params.iter().chain(std::iter::once((S0, self.params.s0())));
        let mut blob = Vec::new();
        for (name, t) in tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("tensor.{name} = {} @ {offset}\n", dims.join("x")));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel() * 4;
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut pos = 0usize;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest is not terminated by an end line".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let blob = &bytes[pos..];
        let mut lines = lines.into_iter();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing checkpoint header".into()));
        }

        let mut config = serde_json::Map::new();
        let mut seed = None;
        let mut meta = CheckpointMeta::new();
        let mut named = Vec::new();
        let mut s0 = None;
        let mut expected_offset = 0usize;
        for line in lines {
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
            if let Some(field) = key.strip_prefix("config.") {
                let v = serde_json::from_str(value).map_err(|e| bad(format!("{key}: {e}")))?;
                config.insert(field.to_string(), v);
            } else if key == "seed" {
                seed = Some(value.parse::<u64>().map_err(|e| bad(format!("seed: {e}")))?);
            } else if let Some(k) = key.strip_prefix("meta.") {
                meta.insert(k.to_string(), value.to_string());
            } else if let Some(name) = key.strip_prefix("tensor.") {
                let (dims, offset) = value
                    .split_once(" @ ")
                    .ok_or_else(|| bad(format!("malformed tensor entry {line:?}")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| bad(format!("{name}: bad shape: {e}")))?;
                let offset: usize = offset.parse().map_err(|e| bad(format!("{name}: bad offset: {e}")))?;
                if offset != expected_offset {
                    return Err(bad(format!("{name}: offset {offset}, expected {expected_offset}")));
                }
                let len = shape.iter().product::<usize>() * 4;
                let raw = blob
                    .get(offset..offset + len)
                    .ok_or_else(|| bad(format!("{name}: data truncated")))?;
                expected_offset += len;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
                if name == S0 {
                    s0 = Some(t);
                } else {
                    named.push((name.to_string(), t));
                }
            } else {
                return Err(bad(format!("unknown manifest key {key:?}")));
            }
        }
        if expected_offset != blob.len() {
            return Err(bad(format!(
                "{} trailing bytes after tensor data",
                blob.len().saturating_sub(expected_offset)
            )));
        }
        let config: ModelConfig =
            serde_json::from_value(config.into()).map_err(|e| bad(format!("config: {e}")))?;
        config.validate()?;
        let seed = seed.ok_or_else(|| bad("missing seed".into()))?;
        let s0 = s0.ok_or_else(|| bad(format!("missing {S0}")))?;
        let params = ModelParams::from_parts(named, s0)?;
        params.check_against(&config)?;
        Ok(Checkpoint {
            config,
            seed,
            params,
            meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            k: 4,
            t: 3,
            d_e: 6,
            d_p: 2,
            n_tt: 1,
            n_ts: 1,
            heads: 2,
            ff_dim: 5,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&config, 11).unwrap();
        let mut meta = CheckpointMeta::new();
        meta.insert("embeddings".into(), "some dir/e.vec".into());
        Checkpoint {
            config,
            seed: 11,
            params,
            meta,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = sample();
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_key_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        let at = bytes.windows(9).position(|w| w == b"seed = 11").unwrap();
        bytes[at..at + 4].copy_from_slice(b"sead");
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unknown manifest key"), "{err}");
    }
}
