//! Minimal feed-forward network stack: dense layers, exact backpropagation,
//! Adam, and the three losses the assistants train with.

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub mod loss;

pub use adam::{AdamConfig, AdamState};
pub use dense::{Activation, Dense, DenseGrads, DenseNet, Trace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything exposing its trainable parameters as a fixed sequence of slices.
pub trait Parameters {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for DenseNet {
    fn param_slices(&self) -> Vec<&[f64]> {
        DenseNet::param_slices(self)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        DenseNet::param_slices_mut(self)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing on-disk form of a [`DenseNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub net: DenseNet,
}

impl NetCheckpoint {
    pub fn new(net: DenseNet) -> Self {
        NetCheckpoint {
            version: CHECKPOINT_VERSION,
            net,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<DenseNet> {
        let value: serde_json::Value =
            serde_json::from_str(json).map_err(|e| Error::MalformedRecord(e.to_string()))?;
        check_version(&value)?;
        let ckpt: NetCheckpoint =
            serde_json::from_value(value).map_err(|e| Error::MalformedRecord(e.to_string()))?;
        ckpt.net.validate()?;
        Ok(ckpt.net)
    }
}

/// Reads the mandatory `version` field of a JSON document.
pub(crate) fn check_version(value: &serde_json::Value) -> Result<()> {
    let found = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::MalformedRecord("missing version field".into()))?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(Error::Version {
            found: found as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let net = DenseNet::new(&[3, 4, 2], Activation::Identity, &mut rng);
        let json = NetCheckpoint::new(net.clone()).to_json();
        assert_eq!(NetCheckpoint::from_json(&json).unwrap(), net);
        let bumped = json.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(NetCheckpoint::from_json(&bumped), Err(Error::Version { found: 9, .. })));
        assert!(NetCheckpoint::from_json(&json[..json.len() / 2]).is_err());
    }
}
