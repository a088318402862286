//! Sources of corrected labels for selected images.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::annotation_io::{load_labelme, read_labelme, save_labelme, write_labelme, ClassMap};
use crate::error::{Error, Result};
use crate::pseudo_label::LabelMask;

/// Turns a model prediction for an image into a corrected mask.
pub trait Annotator {
    fn annotate(&mut self, id: &str, prediction: &LabelMask) -> Result<LabelMask>;

    /// Annotates several images; fails as a whole if any image fails.
    fn annotate_batch(&mut self, items: &[(String, LabelMask)]) -> Result<Vec<LabelMask>> {
        items.iter().map(|(id, p)| self.annotate(id, p)).collect()
    }
}

/// Looks up the stored ground truth for `id`.
pub fn simulated_annotator<'a>(id: &str, ground_truth: &'a HashMap<String, LabelMask>) -> Result<&'a LabelMask> {
    ground_truth
        .get(id)
        .ok_or_else(|| Error::MissingGroundTruth(id.to_string()))
}

/// Answers every request with the stored ground truth.
#[derive(Debug, Clone, Default)]
pub struct OracleAnnotator {
    ground_truth: HashMap<String, LabelMask>,
}

impl OracleAnnotator {
    pub fn new(ground_truth: HashMap<String, LabelMask>) -> Self {
        OracleAnnotator { ground_truth }
    }

    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }
}

impl Annotator for OracleAnnotator {
    fn annotate(&mut self, id: &str, _prediction: &LabelMask) -> Result<LabelMask> {
        simulated_annotator(id, &self.ground_truth).cloned()
    }
}

/// Exports predictions as Labelme files and waits for corrected copies.
///
/// For image `id` the prediction goes to `<export_dir>/<id>.json` and the
/// corrected file is expected at `<corrected_dir>/<id>.json`. Files that do
/// not parse yet are retried until the timeout, since an editor may still be
/// writing them.
#[derive(Debug, Clone)]
pub struct FileAnnotator {
    pub export_dir: PathBuf,
    pub corrected_dir: PathBuf,
    pub class_map: ClassMap,
    pub timeout: Duration,
    pub poll_interval: Duration,
}

impl FileAnnotator {
    pub fn new(export_dir: PathBuf, corrected_dir: PathBuf, class_map: ClassMap, timeout: Duration) -> Self {
        FileAnnotator {
            export_dir,
            corrected_dir,
            class_map,
            timeout,
            poll_interval: Duration::from_millis(200),
        }
    }

    /// Writes the prediction for `id` without waiting.
    pub fn export(&self, id: &str, prediction: &LabelMask) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.export_dir).map_err(|e| Error::io(&self.export_dir, e))?;
        let mut doc = write_labelme(prediction, &self.class_map)?;
        doc.image_path = format!("{id}.png");
        let path = self.export_dir.join(format!("{id}.json"));
        save_labelme(&path, &doc)?;
        Ok(path)
    }

    fn try_read(&self, id: &str, like: &LabelMask) -> std::result::Result<Option<LabelMask>, String> {
        let path = self.corrected_dir.join(format!("{id}.json"));
        if !path.is_file() {
            return Ok(None);
        }
        let doc = load_labelme(&path).map_err(|e| e.to_string())?;
        read_labelme(&doc, &self.class_map, like.height(), like.width())
            .map(Some)
            .map_err(|e| e.to_string())
    }

    fn wait_for(&self, items: &[(String, LabelMask)]) -> Result<Vec<LabelMask>> {
        let deadline = Instant::now() + self.timeout;
        let mut done: Vec<Option<LabelMask>> = vec![None; items.len()];
        let mut last_error: Vec<Option<String>> = vec![None; items.len()];
        loop {
            for (k, (id, pred)) in items.iter().enumerate() {
                if done[k].is_some() {
                    continue;
                }
                match self.try_read(id, pred) {
                    Ok(m) => done[k] = m,
                    Err(e) => last_error[k] = Some(e),
                }
            }
            if done.iter().all(Option::is_some) {
                return Ok(done.into_iter().flatten().collect());
            }
            if Instant::now() >= deadline {
                let k = done.iter().position(Option::is_none).expect("some item is missing");
                let reason = match &last_error[k] {
                    Some(e) => format!("corrected file is invalid: {e}"),
                    None => format!(
                        "no corrected file in {} after {:?}",
                        self.corrected_dir.display(),
                        self.timeout
                    ),
                };
                return Err(Error::Annotation {
                    id: items[k].0.clone(),
                    reason,
                });
            }
            std::thread::sleep(self.poll_interval);
        }
    }
}

impl Annotator for FileAnnotator {
    fn annotate(&mut self, id: &str, prediction: &LabelMask) -> Result<LabelMask> {
        let items = [(id.to_string(), prediction.clone())];
        self.annotate_batch(&items).map(|mut v| v.remove(0))
    }

    fn annotate_batch(&mut self, items: &[(String, LabelMask)]) -> Result<Vec<LabelMask>> {
        for (id, pred) in items {
            self.export(id, pred)?;
        }
        if !items.is_empty() {
            log::info!(
                "exported {} predictions to {}; waiting for corrections in {}",
                items.len(),
                self.export_dir.display(),
                self.corrected_dir.display()
            );
        }
        self.wait_for(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_returns_stored_masks() {
        let m = LabelMask::new(1, 2, vec![0, 1]).unwrap();
        let mut a = OracleAnnotator::new(HashMap::from([("x".to_string(), m.clone())]));
        assert_eq!(a.annotate("x", &LabelMask::filled(1, 2, 0)).unwrap(), m);
        assert!(matches!(a.annotate("y", &m), Err(Error::MissingGroundTruth(id)) if id == "y"));
    }

    #[test]
    fn file_annotator_round_trip_and_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let cm = ClassMap::synthetic(2).unwrap();
        let mut a = FileAnnotator::new(
            dir.path().join("out"),
            dir.path().join("in"),
            cm.clone(),
            Duration::from_millis(50),
        );
        a.poll_interval = Duration::from_millis(5);
        let pred = LabelMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let err = a.annotate("img", &pred).unwrap_err();
        assert!(matches!(err, Error::Annotation { ref id, .. } if id == "img"));
        assert!(dir.path().join("out/img.json").is_file());

        // Accept the exported prediction unchanged.
        std::fs::create_dir_all(dir.path().join("in")).unwrap();
        std::fs::copy(dir.path().join("out/img.json"), dir.path().join("in/img.json")).unwrap();
        assert_eq!(a.annotate("img", &pred).unwrap(), pred);

        std::fs::write(dir.path().join("in/bad.json"), "{").unwrap();
        let err = a.annotate("bad", &pred).unwrap_err();
        assert!(err.to_string().contains("invalid"));
    }
}
