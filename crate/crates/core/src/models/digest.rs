use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::ParamSet;
use crate::scalar::Scalar;

/// SHA-256 over names, shapes and little-endian values of a parameter set,
/// in registration order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterDigest(String);

impl ParameterDigest {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParameterDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn digest<T: Scalar>(params: &ParamSet<T>) -> ParameterDigest {
    let mut h = Sha256::new();
    h.update(T::NAME.as_bytes());
    for (name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape.len() as u64).to_le_bytes());
        for &d in &t.shape {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
        for &x in &t.data {
            x.write_le(&mut buf);
        }
        h.update(&buf);
    }
    ParameterDigest(hex::encode(h.finalize()))
}
