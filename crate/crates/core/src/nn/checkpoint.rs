//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "ESCORE\0\x01"
//! length    u64       byte length M of the manifest
//! manifest  M bytes   UTF-8 JSON (see `Manifest`)
//! payload   8·N bytes f64 values of every parameter, in manifest order
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::ParamStore;

pub const MAGIC: &[u8; 8] = b"ESCORE\0\x01";
pub const FORMAT: &str = "escore-checkpoint";
const MAX_MANIFEST: u64 = 64 << 20;
const MAX_SCALARS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config_digest: String,
    pub seed: u64,
    pub step: u64,
    /// Resolved configuration of the model that produced the weights.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("manifest is not valid: {0}")]
    Manifest(String),
    #[error("payload has {found} bytes, manifest requires {expected}")]
    PayloadSize { expected: usize, found: usize },
    #[error("parameter '{0}' contains non-finite values")]
    NonFinite(String),
    #[error("duplicate parameter '{0}'")]
    Duplicate(String),
}

impl Checkpoint {
    pub fn new(params: ParamStore, config: serde_json::Value, config_digest: String, step: u64) -> Self {
        let manifest = Manifest {
            format: FORMAT.to_string(),
            config_digest,
            seed: params.seed(),
            step,
            config,
            params: params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        Self { manifest, params }
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for entry in &self.manifest.params {
            let t = self.params.get(&entry.name).expect("manifest lists stored params");
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated("magic"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("manifest length"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if mlen > MAX_MANIFEST || mlen > (bytes.len() - 16) as u64 {
            return Err(CheckpointError::Truncated("manifest"));
        }
        let mend = 16 + mlen as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..mend])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(CheckpointError::Manifest(format!(
                "unknown format '{}'",
                manifest.format
            )));
        }
        let mut total = 0usize;
        for p in &manifest.params {
            let n = p
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= MAX_SCALARS)
                .ok_or_else(|| CheckpointError::Manifest(format!("shape of '{}' too large", p.name)))?;
            total = total
                .checked_add(n)
                .filter(|&t| t <= MAX_SCALARS)
                .ok_or_else(|| CheckpointError::Manifest("too many parameters".into()))?;
        }
        let payload = &bytes[mend..];
        if payload.len() != total * 8 {
            return Err(CheckpointError::PayloadSize {
                expected: total * 8,
                found: payload.len(),
            });
        }
        let mut params = ParamStore::new(manifest.seed);
        let mut offset = 0;
        for p in &manifest.params {
            if params.get(&p.name).is_some() {
                return Err(CheckpointError::Duplicate(p.name.clone()));
            }
            let n: usize = p.shape.iter().product();
            let data: Vec<f64> = payload[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(p.name.clone()));
            }
            params.insert(&p.name, Tensor::from_vec(&p.shape, data));
        }
        Ok(Self { manifest, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn sample() -> Checkpoint {
        let mut s = ParamStore::new(42);
        s.register("a.weight", &[2, 3], Init::KaimingUniform { fan_in: 2 });
        s.register("a.bias", &[3], Init::Zeros);
        s.register("empty", &[0], Init::Zeros);
        Checkpoint::new(s, serde_json::json!({"kind": "energy"}), "abc".into(), 17)
    }

    #[test]
    fn encode_decode_round_trip() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        for p in ck.params.iter() {
            assert_eq!(back.params.get(&p.name).unwrap(), &p.tensor);
        }
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode();
        assert_eq!(Checkpoint::decode(&bytes[..4]).unwrap_err(), CheckpointError::Truncated("magic"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Checkpoint::decode(&bad).unwrap_err(), CheckpointError::BadMagic);
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 8]).unwrap_err(),
            CheckpointError::PayloadSize { .. }
        ));
        let mut bad = bytes.clone();
        bad[8] = 0xff;
        bad[9] = 0xff;
        assert!(Checkpoint::decode(&bad).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&nan).unwrap_err(),
            CheckpointError::NonFinite(_)
        ));
    }
}
