use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Overrides every seed when set.
pub const SEED_ENV: &str = "EDITPROBE_SEED";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub editprobe: String,
    pub dump_format: u8,
    pub model_format: u32,
    pub manifest_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            editprobe: env!("CARGO_PKG_VERSION").into(),
            dump_format: super::dump::DUMP_VERSION,
            model_format: crate::probe::MODEL_VERSION,
            manifest_format: super::manifest::MANIFEST_VERSION,
        }
    }
}

/// Attached to every output document. Contains no wall-clock data so that
/// repeated runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub command: String,
    pub seed: u64,
    /// Hex SHA-256 of the compact JSON of the effective configuration.
    pub config_hash: String,
    pub versions: Versions,
}

impl Reproducibility {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            seed,
            config_hash: config_hash(config)?,
            versions: Versions::default(),
        })
    }
}

pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `EDITPROBE_SEED` if set and parseable, else `fallback`.
pub fn effective_seed(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| {
            crate::Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
        }),
        Err(_) => Ok(fallback),
    }
}
