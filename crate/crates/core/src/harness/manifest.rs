//! Run manifest: what was run, with which config, from which source tree.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::Result;

use super::config::ExperimentConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub wallclock_unix: u64,
}

/// SHA-256 of the canonical config text with the output directory left
/// out, so identical experiments written to different places share a hash.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text: String = cfg
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("out "))
        .map(|l| format!("{l}\n"))
        .collect();
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            git_describe: git_describe(),
            wallclock_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "command = {}\nconfig_hash = {}\nseed = {}\ngit_describe = {}\nwallclock_unix = {}\n",
            self.command, self.config_hash, self.seed, self.git_describe, self.wallclock_unix
        )
    }

    /// File-name stem of the command, e.g. `train` or `ablate_curriculum`.
    pub fn stem(&self) -> String {
        self.command.replace(' ', "_")
    }

    /// Writes `manifest_<command>.txt` and `config_<command>.txt` into
    /// `dir`, creating it.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("manifest_{}.txt", self.stem())), self.to_text())?;
        fs::write(dir.join(format!("config_{}.txt", self.stem())), cfg.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out: PathBuf::from("elsewhere"), ..a.clone() };
        let c = ExperimentConfig { seed: 9, ..a.clone() };
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
