use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::CITYSCAPES_CLASSES;
use crate::pseudo_label::IGNORE;

/// Label name that maps to the ignore value.
pub const UNLABELED: &str = "unlabeled";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub index: u8,
}

/// Ordered class names. Indices run `0..len` in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassMap {
    entries: Vec<ClassEntry>,
}

impl ClassMap {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() || entries.len() >= IGNORE as usize {
            return Err(Error::invalid(format!(
                "class map needs 1..={} classes, got {}",
                IGNORE - 1,
                entries.len()
            )));
        }
        let mut names = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.index as usize != i {
                return Err(Error::invalid(format!(
                    "class `{}` has index {}, expected {i} (indices must be contiguous from 0)",
                    e.name, e.index
                )));
            }
            if e.name == UNLABELED {
                return Err(Error::invalid(format!("`{UNLABELED}` is reserved for the ignore value")));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::DuplicateId(e.name.clone()));
            }
        }
        Ok(ClassMap { entries })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        ClassMap::new(
            names
                .iter()
                .enumerate()
                .map(|(i, n)| ClassEntry {
                    name: n.as_ref().to_string(),
                    index: i as u8,
                })
                .collect(),
        )
    }

    pub fn cityscapes() -> Self {
        ClassMap::from_names(&CITYSCAPES_CLASSES).expect("static class list is valid")
    }

    /// `class_0`, `class_1`, ...
    pub fn synthetic(classes: usize) -> Result<Self> {
        let names: Vec<String> = (0..classes).map(|c| format!("class_{c}")).collect();
        ClassMap::from_names(&names)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Mask value for a label name; `unlabeled` gives the ignore value.
    pub fn index_of(&self, name: &str) -> Result<u8> {
        if name == UNLABELED {
            return Ok(IGNORE);
        }
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.index)
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn name_of(&self, index: u8) -> Result<&str> {
        if index == IGNORE {
            return Ok(UNLABELED);
        }
        self.entries
            .get(index as usize)
            .map(|e| e.name.as_str())
            .ok_or_else(|| Error::UnknownLabel(format!("class index {index}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<Vec<ClassEntry>> for ClassMap {
    type Error = Error;

    fn try_from(entries: Vec<ClassEntry>) -> Result<Self> {
        ClassMap::new(entries)
    }
}

impl From<ClassMap> for Vec<ClassEntry> {
    fn from(cm: ClassMap) -> Self {
        cm.entries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        let cm = ClassMap::cityscapes();
        assert_eq!(cm.len(), 19);
        assert_eq!(cm.index_of("road").unwrap(), 0);
        assert_eq!(cm.index_of("bicycle").unwrap(), 18);
        assert_eq!(cm.index_of(UNLABELED).unwrap(), IGNORE);
        assert!(matches!(cm.index_of("dragon"), Err(Error::UnknownLabel(n)) if n == "dragon"));
        assert_eq!(cm.name_of(IGNORE).unwrap(), UNLABELED);
    }

    #[test]
    fn validation() {
        assert!(ClassMap::from_names(&["a", "a"]).is_err());
        assert!(ClassMap::from_names(&["a", UNLABELED]).is_err());
        let gap = vec![ClassEntry {
            name: "a".into(),
            index: 1,
        }];
        assert!(ClassMap::new(gap).is_err());
    }

    #[test]
    fn json_preserves_order() {
        let cm = ClassMap::from_names(&["sky", "road", "car"]).unwrap();
        let text = serde_json::to_string(&cm).unwrap();
        assert_eq!(
            text,
            r#"[{"name":"sky","index":0},{"name":"road","index":1},{"name":"car","index":2}]"#
        );
        assert_eq!(serde_json::from_str::<ClassMap>(&text).unwrap(), cm);
        assert!(serde_json::from_str::<ClassMap>(r#"[{"name":"a","index":3}]"#).is_err());
    }
}
