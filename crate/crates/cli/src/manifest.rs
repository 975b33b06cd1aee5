//! Dataset manifest: what `gen` produced, where the files live, and a
//! content hash so reruns can be compared at a glance.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use decopt::problems::{read_instance, ProblemInstance};
use decopt::topology::Graph;
use decopt::Real;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub seed: u64,
    pub dimension: usize,
    pub node_count: usize,
    /// Relative to the manifest's directory.
    pub graph_file: String,
    pub instances: Vec<ManifestEntry>,
    /// FNV-1a over the graph and instance files, in listing order.
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub file: String,
    /// Certification residual of the stored optimum at labeling time.
    pub residual: Real,
}

fn fnv1a64(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Content hash over the graph file and every instance file, in order.
pub fn content_hash(dir: &Path, graph_file: &str, entries: &[ManifestEntry]) -> anyhow::Result<String> {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let graph_bytes = std::fs::read(dir.join(graph_file))
        .with_context(|| format!("cannot hash graph file `{graph_file}`"))?;
    hash = fnv1a64(&graph_bytes, hash);
    for entry in entries {
        hash = fnv1a64(entry.id.as_bytes(), hash);
        let bytes = std::fs::read(dir.join(&entry.file))
            .with_context(|| format!("cannot hash instance file `{}`", entry.file))?;
        hash = fnv1a64(&bytes, hash);
    }
    Ok(format!("{hash:016x}"))
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
            .with_context(|| format!("cannot write manifest in `{}`", dir.display()))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> anyhow::Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| {
            format!(
                "cannot read manifest `{}`; run the gen command first",
                path.display()
            )
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .with_context(|| format!("malformed manifest `{}`", path.display()))?;
        Ok(manifest)
    }

    pub fn graph(&self, dir: &Path) -> anyhow::Result<Graph> {
        Graph::read_edge_list(&dir.join(&self.graph_file))
            .with_context(|| format!("cannot load graph `{}`", self.graph_file))
    }

    /// Loads every instance of one split, in manifest order.
    pub fn split(&self, dir: &Path, split: &str) -> anyhow::Result<Vec<ProblemInstance<Real>>> {
        let mut out = Vec::new();
        for entry in self.instances.iter().filter(|e| e.split == split) {
            let inst = read_instance(&dir.join(&entry.file))
                .with_context(|| format!("cannot load instance `{}`", entry.file))?;
            out.push(inst);
        }
        if out.is_empty() {
            bail!("manifest lists no `{split}` instances");
        }
        Ok(out)
    }

    pub fn entry_path(&self, dir: &Path, entry: &ManifestEntry) -> PathBuf {
        dir.join(&entry.file)
    }
}
