//! Seeded source/target segmentation datasets with a controllable domain shift.
//!
//! Each image is a Voronoi partition of the canvas; every cell takes one
//! class from a long-tailed distribution and every pixel's feature is the
//! class mean plus Gaussian noise. Target-domain means are translated by a
//! per-class offset of fixed length.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation_io::{ClassMap, DatasetManifest, Domain, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::FeatureMap;
use crate::pseudo_label::LabelMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    /// Voronoi cells per image.
    pub patches: usize,
    /// Norm of every source class mean.
    pub separation: f64,
    /// Length of the per-class target translation.
    pub shift: f64,
    /// Class `c` is drawn with weight `(c + 1)^-skew`.
    pub skew: f64,
    pub noise_sigma: f64,
    pub n_source: usize,
    /// Unlabeled target pool size.
    pub n_target: usize,
    /// Held-out labeled target images for evaluation.
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 8,
            feature_dim: 8,
            height: 16,
            width: 16,
            patches: 6,
            separation: 3.0,
            shift: 2.0,
            skew: 1.0,
            noise_sigma: 1.0,
            n_source: 64,
            n_target: 200,
            n_eval: 400,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::invalid(format!("classes must be in 2..=254, got {}", self.classes)));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("height", self.height),
            ("width", self.width),
            ("patches", self.patches),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("separation", self.separation),
            ("shift", self.shift),
            ("skew", self.skew),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.noise_sigma == 0.0 && self.separation == 0.0 {
            return Err(Error::invalid("separation and noise_sigma cannot both be zero"));
        }
        Ok(())
    }

    /// Normalized class-sampling probabilities.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.classes).map(|c| ((c + 1) as f64).powf(-self.skew)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    Target,
    Eval,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Source => "src",
            Split::Target => "tgt",
            Split::Eval => "evl",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            Split::Target | Split::Eval => Domain::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub split: Split,
    pub features: FeatureMap,
    pub labels: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub source_means: Vec<Vec<f64>>,
    pub target_means: Vec<Vec<f64>>,
    pub source: Vec<SynthImage>,
    pub target: Vec<SynthImage>,
    pub eval: Vec<SynthImage>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates the whole dataset in memory.
pub fn generate_data(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut global = stream_rng(cfg.seed, 0);
    let source_means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| unit_vector(&mut global, cfg.feature_dim).into_iter().map(|v| v * cfg.separation).collect())
        .collect();
    let target_means: Vec<Vec<f64>> = source_means
        .iter()
        .map(|m| {
            let d = unit_vector(&mut global, cfg.feature_dim);
            m.iter().zip(d).map(|(a, b)| a + cfg.shift * b).collect()
        })
        .collect();
    let weights = WeightedIndex::new(cfg.class_probabilities()).map_err(|e| Error::invalid(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;

    let jobs: Vec<(Split, usize, usize)> = [(Split::Source, cfg.n_source), (Split::Target, cfg.n_target), (Split::Eval, cfg.n_eval)]
        .into_iter()
        .flat_map(|(s, n)| (0..n).map(move |i| (s, i)))
        .enumerate()
        .map(|(k, (s, i))| (s, i, k))
        .collect();
    let images: Vec<SynthImage> = jobs
        .into_par_iter()
        .map(|(split, i, k)| {
            let mut rng = stream_rng(cfg.seed, k as u64 + 1);
            let means = if split == Split::Source { &source_means } else { &target_means };
            render_image(cfg, &mut rng, &weights, &noise, means, split, i)
        })
        .collect::<Result<_>>()?;

    let mut data = SynthData {
        source_means,
        target_means,
        source: Vec::with_capacity(cfg.n_source),
        target: Vec::with_capacity(cfg.n_target),
        eval: Vec::with_capacity(cfg.n_eval),
    };
    for img in images {
        match img.split {
            Split::Source => data.source.push(img),
            Split::Target => data.target.push(img),
            Split::Eval => data.eval.push(img),
        }
    }
    Ok(data)
}

fn render_image(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    weights: &WeightedIndex<f64>,
    noise: &Normal<f64>,
    means: &[Vec<f64>],
    split: Split,
    index: usize,
) -> Result<SynthImage> {
    let (h, w, f) = (cfg.height, cfg.width, cfg.feature_dim);
    let cells: Vec<(f64, f64, u8)> = (0..cfg.patches)
        .map(|_| {
            let y = rng.random::<f64>() * h as f64;
            let x = rng.random::<f64>() * w as f64;
            (y, x, weights.sample(rng) as u8)
        })
        .collect();
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
            let nearest = cells
                .iter()
                .map(|&(y, x, class)| ((y - py).powi(2) + (x - px).powi(2), class))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("at least one patch");
            labels.push(nearest.1);
        }
    }
    let mut values = Vec::with_capacity(h * w * f);
    for &class in &labels {
        for &m in &means[class as usize] {
            values.push((m + noise.sample(rng)) as f32 as f64);
        }
    }
    Ok(SynthImage {
        id: format!("{}_{index:04}", split.prefix()),
        split,
        features: FeatureMap::new(h, w, f, values)?,
        labels: LabelMask::new(h, w, labels)?,
    })
}

/// Manifests written by [`generate`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Labeled source images.
    pub source: DatasetManifest,
    /// Unlabeled target pool.
    pub target: DatasetManifest,
    /// Target pool with its hidden ground truth.
    pub target_ground_truth: DatasetManifest,
    /// Held-out labeled target images.
    pub eval: DatasetManifest,
    pub class_map: ClassMap,
}

/// Generates the dataset and writes it under `dir`.
///
/// Layout: `features/<id>.ilmf`, `labels/<id>.pgm`, and the manifests
/// `source.json`, `target.json`, `target_gt.json`, `eval.json` plus
/// `classes.json`.
pub fn generate(cfg: &SynthConfig, dir: &Path) -> Result<SynthOutput> {
    let data = generate_data(cfg)?;
    let feat_dir = dir.join("features");
    let label_dir = dir.join("labels");
    for d in [&feat_dir, &label_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let all: Vec<&SynthImage> = data.source.iter().chain(&data.target).chain(&data.eval).collect();
    all.par_iter().try_for_each(|img| {
        img.features.save(&feat_dir.join(format!("{}.ilmf", img.id)))?;
        img.labels.save_pgm(&label_dir.join(format!("{}.pgm", img.id)))
    })?;

    let manifest = |images: &[SynthImage], with_labels: bool| {
        let entries = images
            .iter()
            .map(|img| ManifestEntry {
                id: img.id.clone(),
                features: format!("features/{}.ilmf", img.id).into(),
                label: with_labels.then(|| format!("labels/{}.pgm", img.id).into()),
                domain: img.split.domain(),
            })
            .collect();
        DatasetManifest::new(dir, entries)
    };
    let out = SynthOutput {
        source: manifest(&data.source, true)?,
        target: manifest(&data.target, false)?,
        target_ground_truth: manifest(&data.target, true)?,
        eval: manifest(&data.eval, true)?,
        class_map: ClassMap::synthetic(cfg.classes)?,
    };
    out.source.save(&dir.join("source.json"))?;
    out.target.save(&dir.join("target.json"))?;
    out.target_ground_truth.save(&dir.join("target_gt.json"))?;
    out.eval.save(&dir.join("eval.json"))?;
    out.class_map.save(&dir.join("classes.json"))?;
    let cfg_path = dir.join("synth.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    Ok(out)
}
