//! Output directory bookkeeping: atomic writes and the artifact manifest.
//!
//! Every file a step writes is recorded in `manifest.json` with its own hash,
//! the hash of the step's parameters and the hashes of the inputs it read.
//! A step whose outputs all match their records is skipped; a step that
//! would replace existing outputs needs `--force`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of any serializable parameter set.
pub fn params_hash<T: Serialize>(params: &T) -> String {
    sha256_hex(&serde_json::to_vec(params).expect("parameters serialize"))
}

/// A file written under a temporary name and renamed into place on
/// [`AtomicFile::finish`]. Dropping it unfinished removes the partial file.
pub struct AtomicFile {
    tmp: PathBuf,
    dest: PathBuf,
    writer: Option<BufWriter<File>>,
}

impl AtomicFile {
    pub fn create(dest: &Path) -> anyhow::Result<Self> {
        if let Some(dir) = dest.parent() {
            fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        }
        let mut name = dest.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let tmp = dest.with_file_name(name);
        let file =
            File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            writer: Some(BufWriter::new(file)),
        })
    }

    pub fn finish(mut self) -> anyhow::Result<()> {
        let w = self.writer.take().expect("writer present until finish");
        let file = w.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        fs::rename(&self.tmp, &self.dest)
            .with_context(|| format!("cannot move {} into place", self.dest.display()))?;
        Ok(())
    }
}

impl Write for AtomicFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.writer.as_mut().expect("not finished").write(buf)
    }
    fn flush(&mut self) -> io::Result<()> {
        self.writer.as_mut().expect("not finished").flush()
    }
}

impl Drop for AtomicFile {
    fn drop(&mut self) {
        if self.writer.take().is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

pub fn write_atomic(dest: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut f = AtomicFile::create(dest)?;
    f.write_all(bytes)?;
    f.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRecord {
    pub sha256: String,
    pub step: String,
    pub seed: u64,
    pub params_hash: String,
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, ArtifactRecord>,
}

/// What a step must do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plan {
    UpToDate,
    Run,
}

/// One step's identity: its name, parameters and input hashes.
#[derive(Debug, Clone)]
pub struct StepKey {
    pub step: String,
    pub seed: u64,
    pub params_hash: String,
    pub inputs: BTreeMap<String, String>,
}

pub struct Store {
    root: PathBuf,
    force: bool,
    manifest: Manifest,
}

impl Store {
    pub fn open(root: &Path, force: bool, config_hash: String, seed: u64) -> anyhow::Result<Self> {
        let path = root.join(MANIFEST);
        let mut manifest = if path.exists() {
            let text = fs::read_to_string(&path)?;
            serde_json::from_str(&text)
                .with_context(|| format!("corrupt manifest {}", path.display()))?
        } else {
            Manifest::default()
        };
        manifest.config_hash = config_hash;
        manifest.seed = seed;
        Ok(Self {
            root: root.to_path_buf(),
            force,
            manifest,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Hash of an input file, or an error naming it and the step that
    /// produces it.
    pub fn require(&self, rel: &str, produced_by: &str) -> anyhow::Result<String> {
        let p = self.path(rel);
        if !p.is_file() {
            bail!(
                "missing input {} (run `posbias {produced_by}` first)",
                p.display()
            );
        }
        file_sha256(&p).with_context(|| format!("cannot read {}", p.display()))
    }

    pub fn plan(&self, key: &StepKey, outputs: &[String]) -> anyhow::Result<Plan> {
        let mut all_current = true;
        let mut existing = Vec::new();
        for rel in outputs {
            let p = self.path(rel);
            if !p.exists() {
                all_current = false;
                continue;
            }
            existing.push(p.clone());
            let current = match self.manifest.artifacts.get(rel) {
                Some(r) => {
                    r.step == key.step
                        && r.seed == key.seed
                        && r.params_hash == key.params_hash
                        && r.inputs == key.inputs
                        && file_sha256(&p).map(|h| h == r.sha256).unwrap_or(false)
                }
                None => false,
            };
            all_current &= current;
        }
        if all_current && !self.force {
            return Ok(Plan::UpToDate);
        }
        if !existing.is_empty() && !self.force {
            bail!(
                "refusing to overwrite {} (out of date for this config); rerun with --force",
                existing[0].display()
            );
        }
        Ok(Plan::Run)
    }

    /// Records the finished outputs of a step and saves the manifest.
    pub fn commit(&mut self, key: &StepKey, outputs: &[String]) -> anyhow::Result<()> {
        for rel in outputs {
            let sha = file_sha256(&self.path(rel)).with_context(|| format!("cannot hash {rel}"))?;
            self.manifest.artifacts.insert(
                rel.clone(),
                ArtifactRecord {
                    sha256: sha,
                    step: key.step.clone(),
                    seed: key.seed,
                    params_hash: key.params_hash.clone(),
                    inputs: key.inputs.clone(),
                },
            );
        }
        self.save()
    }

    fn save(&self) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.path(MANIFEST), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropped_atomic_file_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("a.txt");
        {
            let mut f = AtomicFile::create(&dest).unwrap();
            f.write_all(b"half").unwrap();
        }
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        write_atomic(&dest, b"whole").unwrap();
        assert_eq!(fs::read(&dest).unwrap(), b"whole");
    }

    #[test]
    fn plan_skips_current_and_guards_stale_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let key = StepKey {
            step: "s".into(),
            seed: 1,
            params_hash: "p".into(),
            inputs: BTreeMap::new(),
        };
        let outs = vec!["o.txt".to_string()];
        let mut store = Store::open(dir.path(), false, "c".into(), 1).unwrap();
        assert_eq!(store.plan(&key, &outs).unwrap(), Plan::Run);
        write_atomic(&store.path("o.txt"), b"x").unwrap();
        store.commit(&key, &outs).unwrap();
        let store = Store::open(dir.path(), false, "c".into(), 1).unwrap();
        assert_eq!(store.plan(&key, &outs).unwrap(), Plan::UpToDate);
        let changed = StepKey {
            params_hash: "q".into(),
            ..key.clone()
        };
        assert!(store.plan(&changed, &outs).is_err());
        let forced = Store::open(dir.path(), true, "c".into(), 1).unwrap();
        assert_eq!(forced.plan(&changed, &outs).unwrap(), Plan::Run);
        assert_eq!(forced.plan(&key, &outs).unwrap(), Plan::Run);
    }
}
