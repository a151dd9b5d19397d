//! Append-only run logs and run manifests.
//!
//! A log is line-delimited JSON. The first line is a [`LogHeader`]; every
//! further line is one record. Nothing time-dependent is written, so a
//! re-run with the same manifest produces byte-identical logs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const LOG_SCHEMA: &str = "esdrl-runlog";
pub const LOG_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA: &str = "esdrl-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    /// What the records are, e.g. `curve` or `trace`.
    pub kind: String,
}

pub struct RunLog {
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(path: &Path, kind: &str) -> Result<Self> {
        let mut log = Self {
            out: BufWriter::new(File::create(path)?),
        };
        log.append(&LogHeader {
            schema: LOG_SCHEMA.into(),
            version: LOG_VERSION,
            kind: kind.into(),
        })?;
        Ok(log)
    }

    /// Opens an existing log for appending after checking its header.
    pub fn append_to(path: &Path, kind: &str) -> Result<Self> {
        let header = read_header(path)?;
        if header.kind != kind {
            return Err(Error::Config(format!(
                "{} holds `{}` records, expected `{kind}`",
                path.display(),
                header.kind
            )));
        }
        let file = std::fs::OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

fn check_header(header: &LogHeader, path: &Path) -> Result<()> {
    if header.schema != LOG_SCHEMA || header.version != LOG_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported log schema {} v{}",
            path.display(),
            header.schema,
            header.version
        )));
    }
    Ok(())
}

pub fn read_header(path: &Path) -> Result<LogHeader> {
    let file = File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("log {}: {e}", path.display())))?;
    let mut line = String::new();
    BufReader::new(file).read_line(&mut line)?;
    let header: LogHeader = serde_json::from_str(&line)?;
    check_header(&header, path)?;
    Ok(header)
}

pub fn read_log<T: DeserializeOwned>(path: &Path) -> Result<(LogHeader, Vec<T>)> {
    let file = File::open(path)
        .map_err(|e| Error::MissingArtifact(format!("log {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{} is empty", path.display())))??;
    let header: LogHeader = serde_json::from_str(&first)?;
    check_header(&header, path)?;
    let records = lines
        .filter(|l| l.as_ref().map_or(true, |l| !l.is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()?;
    Ok((header, records))
}

/// What a run did, as recorded in its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    Simulate,
    Train {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        resume: Option<String>,
    },
    Evaluate,
    Experiment,
    Export {
        run: String,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Simulate => "simulate",
            Job::Train { .. } => "train",
            Job::Evaluate => "evaluate",
            Job::Experiment => "experiment",
            Job::Export { .. } => "export",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run: the fully resolved configuration, the
/// overrides that produced it, and digests of the files it read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub code_version: String,
    pub job: Job,
    pub seed: u64,
    pub overrides: Vec<String>,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, InputDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl Manifest {
    pub fn new(job: Job, config: &RunConfig, overrides: &[String]) -> Result<Self> {
        let mut inputs = BTreeMap::new();
        let mut files: Vec<(String, PathBuf)> = config
            .input_files()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        if let Job::Train { resume: Some(p) } = &job {
            files.push(("train.resume".into(), PathBuf::from(p)));
        }
        for (role, path) in files {
            if path.exists() {
                inputs.insert(
                    role,
                    InputDigest {
                        path: path.to_string_lossy().into_owned(),
                        sha256: sha256_file(&path)?,
                    },
                );
            }
        }
        Ok(Self {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
            code_version: env!("CARGO_PKG_VERSION").into(),
            job,
            seed: config.seed,
            overrides: overrides.to_vec(),
            config: config.clone(),
            inputs,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// Reads a manifest from a file or from a run directory.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::MissingArtifact(format!("manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema != MANIFEST_SCHEMA || m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest schema {} v{}",
                m.schema, m.version
            )));
        }
        Ok(m)
    }

    /// Checks that every recorded input still has the recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for (role, input) in &self.inputs {
            let now = sha256_file(Path::new(&input.path))?;
            if now != input.sha256 {
                return Err(Error::Config(format!(
                    "input `{role}` ({}) changed since the run was recorded",
                    input.path
                )));
            }
        }
        Ok(())
    }
}
