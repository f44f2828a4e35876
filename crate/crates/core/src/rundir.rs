//! Run directories: every stage writes its artifacts under one root and
//! records their SHA-256 digests in `manifest.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::sha256_hex;

pub const MANIFEST: &str = "manifest.json";

pub fn write_jsonl<'a, T, I>(path: &Path, rows: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(shown.clone(), e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(shown.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: shown.clone(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        w.write_all(bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    tmp.persist(path)
        .map_err(|e| Error::io(path.display().to_string(), e.error))?;
    Ok(())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digests of the inputs the stage consumed, keyed by relative path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Relative path → SHA-256 of every produced artifact.
    pub artifacts: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

/// A directory holding the artifacts of one evaluation run.
#[derive(Clone, Debug)]
pub struct RunDirectory {
    root: PathBuf,
}

impl RunDirectory {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::MissingArtifact {
                path: root,
                stage: "prepare",
            });
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of an artifact that a previous stage must have produced.
    pub fn require(&self, rel: &str, stage: &'static str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, stage })
        }
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        if p.exists() {
            read_json(&p)
        } else {
            Ok(Manifest::default())
        }
    }

    fn digests(&self, rels: &[&str]) -> Result<BTreeMap<String, String>> {
        rels.iter()
            .map(|r| Ok(((*r).to_owned(), file_digest(&self.path(r))?)))
            .collect()
    }

    /// True when the stage already ran on identical inputs and its outputs
    /// are intact on disk.
    pub fn is_up_to_date(&self, stage: &str, inputs: &[&str]) -> Result<bool> {
        let manifest = self.manifest()?;
        let Some(record) = manifest.stages.get(stage) else {
            return Ok(false);
        };
        if inputs.iter().any(|r| !self.path(r).exists()) {
            return Ok(false);
        }
        if record.inputs != self.digests(inputs)? {
            return Ok(false);
        }
        for out in &record.outputs {
            let p = self.path(out);
            if !p.exists() || manifest.artifacts.get(out) != Some(&file_digest(&p)?) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Record a finished stage and the digests of its outputs.
    pub fn record_stage(&self, stage: &str, inputs: &[&str], outputs: &[&str]) -> Result<()> {
        let mut manifest = self.manifest()?;
        let input_digests = self.digests(inputs)?;
        for out in outputs {
            manifest
                .artifacts
                .insert((*out).to_owned(), file_digest(&self.path(out))?);
        }
        manifest.stages.insert(
            stage.to_owned(),
            StageRecord {
                inputs: input_digests,
                outputs: outputs.iter().map(|s| (*s).to_owned()).collect(),
            },
        );
        write_json(&self.path(MANIFEST), &manifest)
    }

    /// Every manifest entry whose file is missing or has a different digest.
    pub fn verify(&self) -> Result<Vec<String>> {
        let manifest = self.manifest()?;
        let mut bad = Vec::new();
        for (rel, digest) in &manifest.artifacts {
            let p = self.path(rel);
            if !p.exists() || &file_digest(&p)? != digest {
                bad.push(rel.clone());
            }
        }
        Ok(bad)
    }
}
