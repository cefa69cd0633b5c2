//! Model checkpoints: a parameter file next to a JSON config, tied together
//! by the SHA-256 of the config.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConfigFile<C> {
    config: C,
    seed: u64,
    config_hash: String,
}

/// Writes `dir/config.json` and `dir/params.bin`, creating `dir`.
pub fn save_checkpoint<C: Serialize>(dir: &Path, config: &C, store: &ParameterStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hash = config_hash(config)?;
    let file = ConfigFile {
        config,
        seed: store.seed(),
        config_hash: hash.clone(),
    };
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&file)?)?;
    store.save(&dir.join(PARAMS_FILE), &hash)
}

/// Reads a checkpoint written by [`save_checkpoint`]. Fails if the config
/// was edited or belongs to a different parameter file.
pub fn load_checkpoint<C: Serialize + DeserializeOwned>(dir: &Path) -> Result<(C, ParameterStore)> {
    let file: ConfigFile<C> = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let (store, stored_hash) = ParameterStore::load(&dir.join(PARAMS_FILE))?;
    let actual = config_hash(&file.config)?;
    if actual != file.config_hash || actual != stored_hash {
        return Err(Error::Format(format!(
            "config hash mismatch: config {actual}, recorded {}, parameters {stored_hash}",
            file.config_hash
        )));
    }
    Ok((file.config, store))
}
