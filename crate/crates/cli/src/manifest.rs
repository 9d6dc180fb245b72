//! Run manifests: one `key = value` file per artifact-producing command,
//! written next to its outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use vffc_core::Result;

pub const BUILD_ID: &str = env!("VFFC_BUILD_ID");

/// Keys whose values change between otherwise identical runs.
pub const VOLATILE_KEYS: [&str; 2] = ["started_unix", "finished_unix"];

pub struct Manifest {
    command: String,
    started: u64,
    entries: Vec<(String, String)>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl Manifest {
    pub fn start(command: &str) -> Manifest {
        Manifest {
            command: command.into(),
            started: now(),
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    /// Embeds a multi-line config as `config.<key>` entries.
    pub fn config(&mut self, text: &str) -> &mut Self {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("config.{}", k.trim()), v.trim());
            }
        }
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.set("output", path.display())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = format!("command = {}\nbuild = {BUILD_ID}\n", self.command);
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        let [started, finished] = VOLATILE_KEYS;
        s.push_str(&format!("{started} = {}\n{finished} = {}\n", self.started, now()));
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// `DIR/manifest.txt` for directory outputs.
pub fn in_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

/// `FILE.manifest` for single-file outputs.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest");
    file.with_file_name(name)
}
