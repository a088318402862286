//! Labelme polygon files, class maps and dataset manifests.

mod classmap;
mod labelme;
mod manifest;

pub use classmap::{ClassEntry, ClassMap, UNLABELED};
pub use labelme::{
    load_labelme, read_labelme, save_labelme, write_labelme, LabelmeDocument, LabelmeShape, LABELME_VERSION,
};
pub use manifest::{DatasetManifest, Domain, ManifestEntry};
