use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMap;
use crate::pseudo_label::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// One sample. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            root: root.into(),
            entries,
        };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        Ok(())
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        for e in &self.entries {
            for p in std::iter::once(&e.features).chain(e.label.as_ref()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn load_features(&self, e: &ManifestEntry) -> Result<FeatureMap> {
        FeatureMap::load(&self.resolve(&e.features))
    }

    /// The entry's label mask, or `None` for unlabeled entries.
    pub fn load_label(&self, e: &ManifestEntry) -> Result<Option<LabelMask>> {
        e.label
            .as_ref()
            .map(|p| LabelMask::load_pgm(&self.resolve(p)))
            .transpose()
    }

    /// Adds an entry, keeping ids unique.
    pub fn push(&mut self, entry: ManifestEntry) -> Result<()> {
        if self.get(&entry.id).is_some() {
            return Err(Error::DuplicateId(entry.id));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Re-roots every path so the manifest can be written into `dir`.
    pub fn rebased(&self, dir: &Path) -> DatasetManifest {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let base = abs(dir);
        let rel = |p: &Path| {
            let full = abs(&self.resolve(p));
            match full.strip_prefix(&base) {
                Ok(r) => r.to_path_buf(),
                Err(_) => full,
            }
        };
        DatasetManifest {
            root: dir.to_path_buf(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    id: e.id.clone(),
                    features: rel(&e.features),
                    label: e.label.as_deref().map(rel),
                    domain: e.domain,
                })
                .collect(),
        }
    }

    /// Parses a manifest rooted at `root` without touching referenced files.
    pub fn from_json(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: DatasetManifest = serde_json::from_str(text)?;
        m.root = root.into();
        m.check_unique()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = DatasetManifest::from_json(&text, root)?;
        m.check_files()?;
        Ok(m)
    }

    /// Writes the manifest with paths relative to the file's directory where possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = if dir == self.root { self.clone() } else { self.rebased(&dir) };
        let text = serde_json::to_string_pretty(&out)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: Option<&str>) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            features: format!("{id}.ilmf").into(),
            label: label.map(PathBuf::from),
            domain: Domain::Target,
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = DatasetManifest::new(".", vec![entry("a", None), entry("a", None)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(id) if id == "a"));
        let text = r#"{"entries":[{"id":"x","features":"x.ilmf","domain":"source"},
                                   {"id":"x","features":"y.ilmf","domain":"source"}]}"#;
        assert!(matches!(DatasetManifest::from_json(text, "."), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn missing_label_is_unlabeled() {
        let text = r#"{"entries":[{"id":"x","features":"x.ilmf","domain":"target"}]}"#;
        let m = DatasetManifest::from_json(text, ".").unwrap();
        assert_eq!(m.entries()[0].label, None);
        assert!(!serde_json::to_string(&m).unwrap().contains("label"));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"entries":[{"id":"x","features":"x.ilmf","domain":"target","extra":1}]}"#;
        assert!(DatasetManifest::from_json(text, ".").is_err());
    }
}
