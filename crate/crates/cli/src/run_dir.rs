use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use semgen::config::RunConfig;
use serde_json::json;

/// Marker left in a run directory whose command did not finish.
pub const FAILED_MARKER: &str = "FAILED";

/// Output directory of one command, stamped with its provenance.
pub struct RunDir {
    path: PathBuf,
    pub command: String,
    pub digest: String,
    pub seed: u64,
}

impl RunDir {
    /// Creates the directory and records the resolved config. A failure
    /// marker stays in place until [`RunDir::finish`] sees success.
    pub fn create(path: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))?;
        let dir = RunDir {
            path: path.to_path_buf(),
            command: command.to_string(),
            digest: cfg.digest(),
            seed: cfg.seed,
        };
        dir.write(FAILED_MARKER, "incomplete: command still running or interrupted\n")?;
        dir.write("config.toml", &format!("{}{}", dir.text_header(), cfg.to_toml()))?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    pub fn provenance(&self) -> serde_json::Value {
        json!({
            "command": self.command,
            "config_digest": self.digest,
            "seed": self.seed,
        })
    }

    /// First line of every JSON-lines artifact.
    pub fn json_header(&self) -> String {
        let mut v = self.provenance();
        v["record"] = "run".into();
        v.to_string() + "\n"
    }

    /// Leading comment lines of every text artifact.
    pub fn text_header(&self) -> String {
        format!("# command: {}\n# config: {}\n", self.command, self.digest)
    }

    /// Writes `run.json` and clears or fills the failure marker.
    pub fn finish(&self, outcome: &Result<()>) -> Result<()> {
        let mut v = self.provenance();
        match outcome {
            Ok(()) => {
                v["status"] = "ok".into();
                let marker = self.file(FAILED_MARKER);
                if marker.exists() {
                    fs::remove_file(&marker).with_context(|| format!("cannot remove {}", marker.display()))?;
                }
            }
            Err(e) => {
                let cause = format!("{e:#}").replace('\n', " ");
                v["status"] = "failed".into();
                v["error"] = cause.clone().into();
                self.write(FAILED_MARKER, &format!("{cause}\n"))?;
            }
        }
        self.write("run.json", &(serde_json::to_string_pretty(&v)? + "\n"))
    }
}
