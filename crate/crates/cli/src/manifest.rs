//! Per-stage provenance: configuration hash plus hashes of every input and
//! output file.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use anyhow::Context;
use saber_core::dataset::{DATA_FILE, EVENTS_FILE, META_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut r = BufReader::with_capacity(1 << 20, f);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = r.read(&mut buf).with_context(|| format!("cannot read {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Hashes of the three dataset files.
pub fn dataset_hashes(dir: &Path) -> anyhow::Result<Vec<FileHash>> {
    [META_FILE, DATA_FILE, EVENTS_FILE]
        .iter()
        .map(|f| {
            Ok(FileHash {
                path: dir.join(f).display().to_string(),
                sha256: sha256_file(&dir.join(f))?,
            })
        })
        .collect()
}

/// One digest for a whole dataset, independent of where it is stored.
pub fn dataset_digest(hashes: &[FileHash]) -> String {
    let mut h = Sha256::new();
    for f in hashes {
        h.update(f.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Write `<out>/manifests/<stage>.json`; `outputs` are relative to `out`.
pub fn write_manifest(
    out: &Path,
    stage: &str,
    config_sha256: &str,
    seed: u64,
    inputs: Vec<FileHash>,
    outputs: &[String],
) -> anyhow::Result<()> {
    let outputs = outputs
        .iter()
        .map(|p| {
            Ok(FileHash {
                path: p.clone(),
                sha256: sha256_file(&out.join(p))?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let m = Manifest {
        stage: stage.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config_sha256.to_string(),
        seed,
        inputs,
        outputs,
    };
    let dir = out.join(MANIFEST_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(format!("{stage}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), b"x\n").unwrap();
        write_manifest(dir.path(), "erp", "h", 7, vec![], &["a.csv".into()]).unwrap();
        let m: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifests/erp.json")).unwrap()).unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m.seed, 7);
    }
}
