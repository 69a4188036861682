//! The append-only run directory. Every JSON artifact is wrapped in an
//! envelope carrying the resolved config, its hash and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spg_core::config::ExperimentConfig;

use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub config: ExperimentConfig,
    pub payload: T,
}

pub struct RunDir {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub hash: String,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunDir {
    /// `out/<run_id>`, defaulting the run id to a prefix of the config hash.
    pub fn open(out: &Path, run_id: Option<&str>, config: &ExperimentConfig) -> CliResult<Self> {
        let hash = config.hash();
        let id = run_id.map(str::to_owned).unwrap_or_else(|| format!("cfg-{}", &hash[..12]));
        let dir = RunDir {
            root: out.join(id),
            config: config.provenance(),
            hash,
        };
        let text = format!("# config_hash = \"{}\"\n{}", dir.hash, dir.config.to_toml()?);
        dir.write("config.toml", text.as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Write `bytes` unless the file already holds them; any other existing
    /// content is a conflict. Files appear atomically via a rename.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(rel);
        if path.exists() {
            let old = fs::read(&path).map_err(io(&path))?;
            return if old == bytes {
                Ok(())
            } else {
                Err(CliError::Conflict { path })
            };
        }
        let parent = path.parent().expect("artifact paths have a parent");
        fs::create_dir_all(parent).map_err(io(parent))?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, kind: &str, seed: Option<u64>, payload: &T) -> CliResult<()> {
        let env = Envelope {
            kind: kind.into(),
            config_hash: self.hash.clone(),
            seed,
            config: self.config.clone(),
            payload,
        };
        let mut text = serde_json::to_string_pretty(&env).map_err(|source| CliError::Json {
            path: self.path(rel),
            source,
        })?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Read an upstream artifact; a missing file names the subcommand that
    /// produces it.
    pub fn read_json<T: DeserializeOwned>(&self, rel: &str, producer: &'static str) -> CliResult<T> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::Dependency {
                artifact: path,
                subcommand: producer,
            });
        }
        let text = fs::read_to_string(&path).map_err(io(&path))?;
        let env: Envelope<T> = serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.clone(),
            source,
        })?;
        if env.config_hash != self.hash {
            return Err(CliError::Provenance {
                path,
                found: env.config_hash,
                expected: self.hash.clone(),
            });
        }
        Ok(env.payload)
    }
}
