//! Output directories, manifests and the dataset bundle written by
//! `gen-data`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mmvl_core::data::{PairedDataset, ToyDatasetConfig};
use mmvl_core::dataset_io::load_dataset;
use mmvl_core::eval::OracleClassifier;
use mmvl_core::pipeline::{config_hash, sha256_hex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::render;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "effective.conf";
pub const SPLITS: [&str; 3] = ["train.mmds", "val.mmds", "test.mmds"];

pub fn oracle_file(m: usize) -> String {
    format!("oracle_{m}.json")
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    /// Effective configuration of the command.
    pub config: Value,
    pub config_hash: String,
    /// Hash of the dataset configuration the artifacts derive from.
    pub data_hash: Option<String>,
    pub threads: usize,
    /// SHA-256 of every file written next to the manifest.
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: Value,
}

/// An output directory that refuses to overwrite earlier artifacts unless
/// forced.
pub struct OutDir {
    pub path: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(path: &Path, force: bool, planned: &[String]) -> Result<Self, CliError> {
        if !force {
            for name in planned.iter().map(String::as_str).chain([MANIFEST, CONFIG_ECHO]) {
                let p = path.join(name);
                if p.exists() {
                    return Err(CliError::usage(format!(
                        "{} already exists; pass --force to overwrite",
                        p.display()
                    )));
                }
            }
        }
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(OutDir {
            path: path.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path.join(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.files.insert(name.to_string(), sha256_hex(bytes));
        Ok(p)
    }

    pub fn finish<C: Serialize>(
        mut self,
        kind: &str,
        config: &C,
        data_hash: Option<String>,
        threads: usize,
        summary: Value,
    ) -> Result<(), CliError> {
        // the flat rendering can be passed back through --config
        self.write(CONFIG_ECHO, render(config).as_bytes())?;
        let manifest = Manifest {
            kind: kind.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            config_hash: config_hash(config),
            data_hash,
            threads,
            files: std::mem::take(&mut self.files),
            summary,
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let p = self.path.join(MANIFEST);
        fs::write(&p, json).map_err(|e| CliError::io(&p, e))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| CliError::mismatch(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::mismatch(format!("{}: {e}", p.display())))
}

/// A dataset directory written by `gen-data`, checked against its manifest.
pub struct DataBundle {
    pub dir: PathBuf,
    pub config: ToyDatasetConfig,
    pub data_hash: String,
    manifest: Manifest,
}

impl DataBundle {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let manifest = read_manifest(dir)?;
        if manifest.kind != "dataset" {
            return Err(CliError::mismatch(format!("{} is not a dataset directory", dir.display())));
        }
        let config: ToyDatasetConfig = serde_json::from_value(manifest.config.clone())
            .map_err(|e| CliError::mismatch(format!("dataset manifest config: {e}")))?;
        let data_hash = config_hash(&config);
        if data_hash != manifest.config_hash {
            return Err(CliError::mismatch("dataset manifest hash does not match its config"));
        }
        Ok(DataBundle {
            dir: dir.to_path_buf(),
            config,
            data_hash,
            manifest,
        })
    }

    fn checked_bytes(&self, name: &str) -> Result<Vec<u8>, CliError> {
        let p = self.dir.join(name);
        let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        match self.manifest.files.get(name) {
            Some(h) if *h == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(CliError::mismatch(format!("{} does not match the manifest digest", p.display()))),
            None => Err(CliError::mismatch(format!("{name} is not listed in the dataset manifest"))),
        }
    }

    pub fn split(&self, name: &str) -> Result<PairedDataset, CliError> {
        let file = format!("{name}.mmds");
        self.checked_bytes(&file)?;
        Ok(load_dataset(&self.dir.join(file))?)
    }

    pub fn oracles(&self) -> Result<Vec<OracleClassifier>, CliError> {
        (0..2)
            .map(|m| {
                let name = oracle_file(m);
                self.checked_bytes(&name)?;
                Ok(OracleClassifier::load(&self.dir.join(name))?)
            })
            .collect()
    }
}
