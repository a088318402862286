//! Resumable on-disk loop state.
//!
//! A snapshot directory holds `snapshot.json`, the `init`, `student` and
//! `teacher` checkpoints, and one PGM per annotated image under
//! `annotations/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LoopConfig, LoopData, LoopRunner, PoolState, RoundMetrics};
use crate::annotation_io::{DatasetManifest, Domain, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::ModelParams;

const SNAPSHOT_FILE: &str = "snapshot.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub format: u32,
    pub config: LoopConfig,
    pub pool: PoolState,
    /// Selected ids still waiting for annotation.
    pub pending: Vec<String>,
    pub completed: bool,
    pub initial_miou: Option<f64>,
    pub history: Vec<RoundMetrics>,
    /// Annotated target images, labels relative to the snapshot directory.
    pub manifest: DatasetManifest,
    /// Paths of the run's inputs, recorded by the front end for resuming.
    #[serde(default)]
    pub inputs: BTreeMap<String, PathBuf>,
}

fn checkpoint(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ilmw"))
}

impl Snapshot {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(SNAPSHOT_FILE)
    }

    pub fn exists(dir: &Path) -> bool {
        Snapshot::path(dir).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Snapshot::path(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut snap: Snapshot = serde_json::from_str(&text)?;
        if snap.format != FORMAT {
            return Err(Error::format("snapshot", format!("unsupported format {}", snap.format)));
        }
        snap.manifest = DatasetManifest::new(dir, snap.manifest.entries().to_vec())?;
        snap.pool.validate()?;
        Ok(snap)
    }
}

impl LoopRunner<'_> {
    /// Writes the full loop state into `dir`, replacing any earlier snapshot.
    pub fn save_snapshot(&self, dir: &Path, inputs: BTreeMap<String, PathBuf>) -> Result<()> {
        let ann_dir = dir.join("annotations");
        fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        let mut entries = Vec::with_capacity(self.annotations.len());
        for (id, mask) in &self.annotations {
            let rel = PathBuf::from("annotations").join(format!("{id}.pgm"));
            mask.save_pgm(&dir.join(&rel))?;
            let sample = self.target(id);
            entries.push(ManifestEntry {
                id: id.clone(),
                features: sample.features_path.clone().unwrap_or_default(),
                label: Some(rel),
                domain: Domain::Target,
            });
        }
        self.init.save(&checkpoint(dir, "init"))?;
        self.student.save(&checkpoint(dir, "student"))?;
        self.teacher.save(&checkpoint(dir, "teacher"))?;
        let snap = Snapshot {
            format: FORMAT,
            config: self.config.clone(),
            pool: self.state.clone(),
            pending: self.pending.clone(),
            completed: self.completed,
            initial_miou: self.initial_miou,
            history: self.history.clone(),
            manifest: DatasetManifest::new(dir, entries)?,
            inputs,
        };
        let path = Snapshot::path(dir);
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&snap)? + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

impl<'d> LoopRunner<'d> {
    /// Restores a runner from a snapshot directory over the same data.
    pub fn resume(dir: &Path, data: &'d LoopData) -> Result<(Self, Snapshot)> {
        let snap = Snapshot::load(dir)?;
        let init = ModelParams::load(&checkpoint(dir, "init"))?;
        let student = ModelParams::load(&checkpoint(dir, "student"))?;
        let teacher = ModelParams::load(&checkpoint(dir, "teacher"))?;
        let mut runner = LoopRunner::assemble(snap.config.clone(), data, snap.pool.clone(), init, student, teacher)?;
        let known: std::collections::BTreeSet<&str> = data.target.iter().map(|s| s.id.as_str()).collect();
        for id in runner.state.target_labeled.iter().chain(&runner.state.target_unlabeled) {
            if !known.contains(id.as_str()) {
                return Err(Error::invalid(format!("snapshot refers to `{id}`, which is not in the target pool")));
            }
        }
        if known.len() != runner.state.initial_pool {
            return Err(Error::invalid("target pool differs from the snapshot"));
        }
        let mut annotations = BTreeMap::new();
        for e in snap.manifest.entries() {
            let label = snap
                .manifest
                .load_label(e)?
                .ok_or_else(|| Error::format("snapshot", format!("annotation `{}` has no label path", e.id)))?;
            annotations.insert(e.id.clone(), label);
        }
        if annotations.keys().ne(runner.state.target_labeled.iter()) {
            return Err(Error::format("snapshot", "annotations do not match the labeled target set"));
        }
        runner.annotations = annotations;
        runner.pending = snap.pending.clone();
        runner.history = snap.history.clone();
        runner.initial_miou = snap.initial_miou;
        runner.completed = snap.completed;
        Ok((runner, snap))
    }
}
