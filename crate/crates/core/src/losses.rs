//! Supervised, pseudo-label and pixel-contrastive losses.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EmbeddingMap;
use crate::numerics::{ProbMap, PROB_FLOOR};
use crate::pseudo_label::{LabelMask, IGNORE};

const UNIT_TOLERANCE: f64 = 1e-6;

/// Weights of the combined objective `Ls + λu·Lu + λc·Lc`, plus the
/// contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_c: f64,
    pub omega: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_u: 1.0,
            lambda_c: 0.1,
            omega: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_u: f64, lambda_c: f64, omega: f64) -> Result<Self> {
        let w = LossWeights { lambda_u, lambda_c, omega };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_u", self.lambda_u), ("lambda_c", self.lambda_c)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::invalid(format!("omega must be finite and > 0, got {}", self.omega)));
        }
        Ok(())
    }

    /// True when unlabeled data contributes to the objective at all.
    pub fn uses_unlabeled(&self) -> bool {
        self.lambda_u > 0.0 || self.lambda_c > 0.0
    }
}

/// Anchor/negative counts for contrastive sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub anchors_per_class: usize,
    pub negatives_per_anchor: usize,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            anchors_per_class: 16,
            negatives_per_anchor: 32,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_class == 0 || self.negatives_per_anchor == 0 {
            return Err(Error::invalid("anchors_per_class and negatives_per_anchor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchors {
    pub class: u8,
    pub anchors: Vec<AnchorSample>,
}

/// Unit-norm anchors grouped by class, each with one positive and exactly
/// `negatives_per_anchor` negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBatch {
    dim: usize,
    negatives_per_anchor: usize,
    classes: Vec<ClassAnchors>,
}

impl ContrastBatch {
    pub fn new(dim: usize, negatives_per_anchor: usize, classes: Vec<ClassAnchors>) -> Result<Self> {
        let check = |v: &[f64], what: &str| -> Result<()> {
            if v.len() != dim {
                return Err(Error::ShapeMismatch(format!("{what} has dim {}, expected {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!("{what} has norm {norm}, expected 1")));
            }
            Ok(())
        };
        for ca in &classes {
            for a in &ca.anchors {
                check(&a.anchor, "anchor")?;
                check(&a.positive, "positive")?;
                if a.negatives.len() != negatives_per_anchor {
                    return Err(Error::invalid(format!(
                        "anchor has {} negatives, expected {negatives_per_anchor}",
                        a.negatives.len()
                    )));
                }
                for n in &a.negatives {
                    check(n, "negative")?;
                }
            }
        }
        Ok(ContrastBatch {
            dim,
            negatives_per_anchor,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn negatives_per_anchor(&self) -> usize {
        self.negatives_per_anchor
    }

    pub fn classes(&self) -> &[ClassAnchors] {
        &self.classes
    }

    pub fn num_anchors(&self) -> usize {
        self.classes.iter().map(|c| c.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.num_anchors() == 0
    }
}

/// Mean of `−ln p(y)` over non-ignored pixels; 0 when every pixel is ignored.
pub fn ce_loss(p: &ProbMap, y: &LabelMask) -> Result<f64> {
    if p.height() != y.height() || p.width() != y.width() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {}x{} vs labels {}x{}",
            p.height(),
            p.width(),
            y.height(),
            y.width()
        )));
    }
    y.check_classes(p.classes())?;
    let (sum, n) = ce_sum(p, y);
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Sum of per-pixel cross-entropy and the number of contributing pixels.
pub(crate) fn ce_sum(p: &ProbMap, y: &LabelMask) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (px, &label) in p.pixels().zip(y.values()) {
        if label == IGNORE {
            continue;
        }
        sum -= px[label as usize].max(PROB_FLOOR).ln();
        n += 1;
    }
    (sum, n)
}

/// Per-anchor InfoNCE term `−ln(e^{s⁺/ω} / (e^{s⁺/ω} + Σ e^{s⁻/ω}))`.
///
/// Returns the loss and the softmax weights over `[positive, negatives...]`.
pub(crate) fn anchor_term<'a>(
    anchor: &[f64],
    positive: &[f64],
    negatives: impl Iterator<Item = &'a [f64]>,
    omega: f64,
    weights: &mut Vec<f64>,
) -> f64 {
    weights.clear();
    weights.push(dot(anchor, positive) / omega);
    weights.extend(negatives.map(|n| dot(anchor, n) / omega));
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        z += *w;
    }
    let loss = -((weights[0]).ln() - z.ln());
    for w in weights.iter_mut() {
        *w /= z;
    }
    loss
}

/// Mean InfoNCE loss over all anchors in the batch.
pub fn contrastive_loss(b: &ContrastBatch, omega: f64) -> Result<f64> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {omega}")));
    }
    if b.is_empty() {
        return Err(Error::invalid("contrastive loss over an empty batch"));
    }
    let mut weights = Vec::new();
    let mut total = 0.0;
    for ca in &b.classes {
        for a in &ca.anchors {
            total += anchor_term(
                &a.anchor,
                &a.positive,
                a.negatives.iter().map(Vec::as_slice),
                omega,
                &mut weights,
            );
        }
    }
    Ok(total / b.num_anchors() as f64)
}

pub fn total_loss(ls: f64, lu: f64, lc: f64, w: &LossWeights) -> f64 {
    ls + w.lambda_u * lu + w.lambda_c * lc
}

/// Pixel indices chosen for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PlannedAnchor {
    pub class: u8,
    pub pixel: usize,
    pub negatives: Vec<usize>,
}

/// Chooses anchors and negatives by pixel index. Depends only on the labels
/// and the seed, so the same plan can be replayed against any embeddings.
pub(crate) fn plan_contrast(labels: &[u8], cfg: &ContrastConfig, seed: u64) -> Result<Vec<PlannedAnchor>> {
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        let c = l as usize;
        if by_class.len() <= c {
            by_class.resize_with(c + 1, Vec::new);
        }
        by_class[c].push(i);
    }
    let labeled: usize = by_class.iter().map(Vec::len).sum();
    if labeled == 0 {
        return Err(Error::invalid("contrastive sampling needs at least one labeled pixel"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::new();
    for (c, pixels) in by_class.iter().enumerate() {
        let others = labeled - pixels.len();
        if pixels.len() < 2 || others == 0 || cfg.negatives_per_anchor == 0 {
            continue;
        }
        let m = cfg.anchors_per_class.min(pixels.len());
        let mut picks = index::sample(&mut rng, pixels.len(), m).into_vec();
        picks.sort_unstable();
        for k in picks {
            let negatives = (0..cfg.negatives_per_anchor)
                .map(|_| nth_other(&by_class, c, rng.random_range(0..others)))
                .collect();
            plan.push(PlannedAnchor {
                class: c as u8,
                pixel: pixels[k],
                negatives,
            });
        }
    }
    Ok(plan)
}

/// The `k`-th labeled pixel outside class `skip`, in class-major order.
fn nth_other(by_class: &[Vec<usize>], skip: usize, mut k: usize) -> usize {
    for (c, pixels) in by_class.iter().enumerate() {
        if c == skip {
            continue;
        }
        if k < pixels.len() {
            return pixels[k];
        }
        k -= pixels.len();
    }
    unreachable!("index within the other-class pool")
}

/// Per-class sums of embeddings over labeled pixels.
pub(crate) fn class_sums(emb: &[f64], dim: usize, labels: &[u8]) -> Vec<Vec<f64>> {
    let classes = labels.iter().filter(|&&l| l != IGNORE).map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut sums = vec![vec![0.0; dim]; classes];
    for (e, &l) in emb.chunks_exact(dim).zip(labels) {
        if l == IGNORE {
            continue;
        }
        for (s, v) in sums[l as usize].iter_mut().zip(e) {
            *s += v;
        }
    }
    sums
}

/// Class prototype for an anchor: the normalized mean of its class excluding itself.
pub(crate) fn prototype(class_sum: &[f64], anchor: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = class_sum.iter().zip(anchor).map(|(s, a)| s - a).collect();
    normalize_or_basis(&mut v);
    v
}

/// Materializes a plan against concrete embeddings with the given positives.
pub(crate) fn batch_from_plan(
    plan: &[PlannedAnchor],
    emb: &[f64],
    dim: usize,
    positives: &[Vec<f64>],
    negatives_per_anchor: usize,
) -> Result<ContrastBatch> {
    let row = |i: usize| emb[i * dim..(i + 1) * dim].to_vec();
    let mut classes: Vec<ClassAnchors> = Vec::new();
    for (pa, pos) in plan.iter().zip(positives) {
        let sample = AnchorSample {
            anchor: row(pa.pixel),
            positive: pos.clone(),
            negatives: pa.negatives.iter().map(|&i| row(i)).collect(),
        };
        match classes.last_mut() {
            Some(ca) if ca.class == pa.class => ca.anchors.push(sample),
            _ => classes.push(ClassAnchors {
                class: pa.class,
                anchors: vec![sample],
            }),
        }
    }
    ContrastBatch::new(dim, negatives_per_anchor, classes)
}

/// Samples anchors, class-prototype positives and other-class negatives.
///
/// Per class with at least two labeled pixels and at least one labeled
/// pixel elsewhere: up to `anchors_per_class` anchors without replacement,
/// and `negatives_per_anchor` negatives drawn uniformly with replacement
/// from the pixels of all other classes.
pub fn sample_contrast_batch(
    features: &EmbeddingMap,
    y: &LabelMask,
    cfg: &ContrastConfig,
    seed: u64,
) -> Result<ContrastBatch> {
    if features.height() != y.height() || features.width() != y.width() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings {}x{} vs labels {}x{}",
            features.height(),
            features.width(),
            y.height(),
            y.width()
        )));
    }
    let dim = features.dim();
    let plan = plan_contrast(y.values(), cfg, seed)?;
    let sums = class_sums(features.values(), dim, y.values());
    let positives: Vec<Vec<f64>> = plan
        .iter()
        .map(|pa| prototype(&sums[pa.class as usize], features.pixel(pa.pixel)))
        .collect();
    batch_from_plan(&plan, features.values(), dim, &positives, cfg.negatives_per_anchor)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit length and returns the original norm. A zero vector
/// becomes the first basis vector.
pub(crate) fn normalize_or_basis(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
    }
    norm
}
