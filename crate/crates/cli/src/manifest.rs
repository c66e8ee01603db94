//! The JSON record written beside every command's outputs.

use std::path::{Path, PathBuf};

use emodarts_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub manifest: u32,
    pub emodarts_core: String,
    pub emodarts_cli: String,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            manifest: MANIFEST_VERSION,
            emodarts_core: emodarts_core::VERSION.to_string(),
            emodarts_cli: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// An output file and the flag that named it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub flag: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Arguments after the program name, with the seed always explicit.
    pub argv: Vec<String>,
    pub seed: u64,
    pub jobs: usize,
    /// Full run configuration as config-file text.
    pub config: Option<String>,
    pub versions: Versions,
    pub outputs: Vec<Output>,
    /// `ok` or `numeric_fault`.
    pub status: String,
    /// Command-specific facts such as degeneracy flags or skipped files.
    pub details: serde_json::Value,
}

impl Manifest {
    /// Where the manifest for a command whose first output is `primary` lives.
    pub fn path_for(primary: &Path) -> PathBuf {
        let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        primary.with_file_name(name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Contract(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            field: "manifest".into(),
            message: e.to_string(),
        })
    }

    /// The recorded argv with every output flag pointed into `dir`, keeping
    /// file names.
    pub fn argv_redirected(&self, dir: &Path) -> Vec<String> {
        let mut argv = self.argv.clone();
        for out in &self.outputs {
            let target = match out.path.file_name() {
                Some(name) if out.flag != "--out-dir" => dir.join(name),
                _ => dir.to_path_buf(),
            };
            let target = target.to_string_lossy().into_owned();
            let mut i = 0;
            while i < argv.len() {
                if argv[i] == out.flag && i + 1 < argv.len() {
                    argv[i + 1] = target.clone();
                    i += 1;
                } else if argv[i].starts_with(&format!("{}=", out.flag)) {
                    argv[i] = format!("{}={target}", out.flag);
                }
                i += 1;
            }
        }
        argv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use emodarts_core::config::RunConfig;

    fn sample() -> Manifest {
        Manifest {
            command: "search".into(),
            argv: ["search", "--out-genome", "a/g.json", "--out-history=a/h.csv", "--seed", "3"]
                .map(String::from)
                .to_vec(),
            seed: 3,
            jobs: 1,
            config: Some(RunConfig::default().to_text()),
            versions: Versions::default(),
            outputs: vec![
                Output { flag: "--out-genome".into(), path: "a/g.json".into() },
                Output { flag: "--out-history".into(), path: "a/h.csv".into() },
            ],
            status: "ok".into(),
            details: serde_json::json!({"degenerate": false}),
        }
    }

    #[test]
    fn redirect_rewrites_both_flag_styles() {
        let argv = sample().argv_redirected(Path::new("b"));
        assert_eq!(argv[2], "b/g.json");
        assert_eq!(argv[3], "--out-history=b/h.csv");
        assert_eq!(argv[5], "3");
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = sample();
        m.save(&p).unwrap();
        assert_eq!(Manifest::load(&p).unwrap(), m);
        assert_eq!(Manifest::path_for(Path::new("x/g.json")), PathBuf::from("x/g.json.manifest.json"));
    }
}
