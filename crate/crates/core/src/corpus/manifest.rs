use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::Provenance;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Frame file path as written; relative paths resolve against the manifest directory.
    pub frames_path: PathBuf,
    pub target: Option<String>,
    /// Only written for self-training manifests.
    pub provenance: Option<Provenance>,
}

/// One corpus split: `id<TAB>frames_path[<TAB>target[<TAB>provenance]]` per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineManifest {
    pub split_name: String,
    pub base_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl PipelineManifest {
    pub fn new(split_name: impl Into<String>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            split_name: split_name.into(),
            base_dir: base_dir.into(),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.frames_path.is_absolute() {
            entry.frames_path.clone()
        } else {
            self.base_dir.join(&entry.frames_path)
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.entries.iter().all(|e| e.target.is_some())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            write!(s, "{}\t{}", e.id, e.frames_path.display()).unwrap();
            match (&e.target, e.provenance) {
                (Some(t), Some(p)) => write!(s, "\t{t}\t{}", p.as_str()).unwrap(),
                (None, Some(p)) => write!(s, "\t\t{}", p.as_str()).unwrap(),
                (Some(t), None) => write!(s, "\t{t}").unwrap(),
                (None, None) => {}
            }
            s.push('\n');
        }
        s
    }
}

pub fn write_manifest(m: &PipelineManifest, path: &Path) -> Result<()> {
    std::fs::write(path, m.to_text()).map_err(|e| Error::io(path, e))
}

/// Loads a manifest and checks ids are unique and every frame file exists.
pub fn load_manifest(path: &Path) -> Result<PipelineManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let split_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut m = PipelineManifest::new(split_name, base_dir);
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 4 || cols[0].is_empty() || cols[1].is_empty() {
            return Err(Error::parse(path, i + 1, "expected id<TAB>frames_path[<TAB>target[<TAB>provenance]]"));
        }
        let id = cols[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::parse(path, i + 1, format!("duplicate id {id}")));
        }
        let target = cols.get(2).filter(|t| !t.is_empty()).map(|t| t.to_string());
        let provenance = match cols.get(3) {
            Some(p) => Some(
                Provenance::parse(p)
                    .ok_or_else(|| Error::parse(path, i + 1, format!("unknown provenance {p:?}")))?,
            ),
            None => None,
        };
        let entry = ManifestEntry {
            id,
            frames_path: PathBuf::from(cols[1]),
            target,
            provenance,
        };
        let resolved = m.resolve(&entry);
        if !resolved.is_file() {
            return Err(Error::MissingArtifact(resolved));
        }
        m.entries.push(entry);
    }
    Ok(m)
}
