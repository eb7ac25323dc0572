use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// What a stage consumed and produced. `inputs_hash` covers the relevant
/// config fragment and the digests of every input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub slice: Option<String>,
    pub inputs_hash: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}

/// Digest of `path`, recorded relative to `root` when it lies inside it.
pub fn digest(path: &Path, root: &Path) -> Result<FileDigest> {
    let (sha256, bytes) = sha256_file(path)?;
    let shown = path.strip_prefix(root).unwrap_or(path);
    Ok(FileDigest {
        path: shown.to_string_lossy().replace('\\', "/"),
        sha256,
        bytes,
    })
}

pub fn inputs_hash(stage: &str, slice: Option<&str>, fragment: &serde_json::Value, inputs: &[FileDigest]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(slice.unwrap_or("").as_bytes());
    h.update([0]);
    h.update(fragment.to_string().as_bytes());
    for d in inputs {
        h.update([0]);
        h.update(d.path.as_bytes());
        h.update([0]);
        h.update(d.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

impl Manifest {
    pub fn load(path: &Path) -> Option<Manifest> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(
            path,
            (serde_json::to_string_pretty(self).expect("serializable") + "\n").as_bytes(),
        )
    }

    /// True when every recorded output still exists with its recorded
    /// digest.
    pub fn outputs_intact(&self, root: &Path) -> bool {
        self.outputs.iter().all(|o| {
            let p = root.join(&o.path);
            matches!(sha256_file(&p), Ok((sha, _)) if sha == o.sha256)
        })
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(output_dir: &Path) -> Result<RunLock> {
        std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
        let path = output_dir.join(".lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Other(format!(
                        "{} is in use by another run; delete {} if that run is gone",
                        output_dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn hash_depends_on_every_input() {
        let d = |s: &str| FileDigest {
            path: "a".into(),
            sha256: s.into(),
            bytes: 1,
        };
        let frag = serde_json::json!({"x": 1});
        let h = inputs_hash("slice", None, &frag, &[d("00")]);
        assert_eq!(h, inputs_hash("slice", None, &frag, &[d("00")]));
        assert_ne!(h, inputs_hash("slice", None, &frag, &[d("01")]));
        assert_ne!(h, inputs_hash("slice", Some("a"), &frag, &[d("00")]));
        assert_ne!(h, inputs_hash("slice", None, &serde_json::json!({"x": 2}), &[d("00")]));
    }
}
