//! Tool identification and configuration hashes embedded in output files.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL_NAME: &str = "klue";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Short hex digest of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes to JSON");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Header carried by every file the tool writes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
}

impl FileHeader {
    pub fn new(config_hash: String) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            config_hash,
        }
    }

    pub fn for_config<T: Serialize>(config: &T) -> Self {
        Self::new(config_hash(config))
    }

    /// `# klue 0.1.0 config_hash=…`, for line-oriented text outputs.
    pub fn comment_line(&self) -> String {
        format!("# {} {} config_hash={}", self.tool, self.version, self.config_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1}));
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})));
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})));
        assert_eq!(a.len(), 16);
    }
}
