use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::Deserialize;

use super::HostingProfile;
use crate::ids::ServiceId;

/// Node configuration file (TOML).
///
/// ```toml
/// name = "X"
/// hosted = ["A", "C"]
/// archival_peer = "R"
/// data_dir = "data/X"
/// poll_interval = 4
/// parallel = false
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    #[serde(default)]
    pub hosted: BTreeSet<ServiceId>,
    #[serde(default)]
    pub archival: bool,
    pub archival_peer: Option<String>,
    pub data_dir: Option<PathBuf>,
    /// Steps between effect pulls from the archival peer.
    #[serde(default = "default_poll")]
    pub poll_interval: u64,
    #[serde(default)]
    pub parallel: bool,
}

fn default_poll() -> u64 {
    4
}

impl NodeConfig {
    pub fn parse(text: &str) -> Result<NodeConfig, String> {
        let cfg: NodeConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.archival && !cfg.hosted.is_empty() {
            return Err("an archival node hosts every service; leave `hosted` empty".into());
        }
        if cfg.poll_interval == 0 {
            return Err("poll_interval must be positive".into());
        }
        Ok(cfg)
    }

    pub fn profile(&self) -> HostingProfile {
        HostingProfile {
            hosted: self.hosted.clone(),
            archival: self.archival,
        }
    }
}
