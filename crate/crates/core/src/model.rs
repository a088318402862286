//! Reference per-pixel segmentation model: a linear classifier and a linear
//! projection head over precomputed per-pixel features.
//!
//! Parameters are stored flat as `[classifier (F×C) | bias (C) | projection (F×E)]`,
//! each matrix row-major by feature. The same layout is used for gradients
//! and optimizer velocity so updates are plain elementwise loops.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::losses::{
    self, anchor_term, batch_from_plan, ce_sum, class_sums, contrastive_loss, normalize_or_basis, plan_contrast,
    prototype, ContrastConfig, LossWeights, PlannedAnchor,
};
use crate::numerics::{softmax_in_place, LogitMap, ProbMap};
use crate::pseudo_label::{LabelMask, IGNORE};

const FEATURE_MAGIC: &[u8; 4] = b"ILMF";
const WEIGHTS_MAGIC: &[u8; 4] = b"ILMW";

/// Per-pixel input features, `height × width × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height.checked_mul(width).and_then(|n| n.checked_mul(dim)) != Some(values.len()) {
            return Err(Error::ShapeMismatch(format!(
                "feature map {height}x{width}x{dim} vs {} values",
                values.len()
            )));
        }
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::encode(
            FEATURE_MAGIC,
            [self.height as u32, self.width as u32, self.dim as u32],
            self.values.iter().copied(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (d, values) = binio::decode(bytes, FEATURE_MAGIC, "ILMF file", binio::product)?;
        FeatureMap::new(d[0] as usize, d[1] as usize, d[2] as usize, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureMap::from_bytes(&binio::read_file(path)?)
    }
}

/// Unit-norm per-pixel embeddings from the projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height.checked_mul(width).and_then(|n| n.checked_mul(dim)) != Some(values.len()) || dim == 0 {
            return Err(Error::ShapeMismatch(format!(
                "embedding map {height}x{width}x{dim} vs {} values",
                values.len()
            )));
        }
        Ok(EmbeddingMap {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }
}

/// Weights of the classifier (`F×C` plus bias) and projection head (`F×E`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    features: usize,
    classes: usize,
    embed_dim: usize,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(features: usize, classes: usize, embed_dim: usize) -> Self {
        ModelParams {
            features,
            classes,
            embed_dim,
            data: vec![0.0; features * classes + classes + features * embed_dim],
        }
    }

    /// Small random classifier, zero bias, projection scaled by `1/sqrt(F)`.
    pub fn init(features: usize, classes: usize, embed_dim: usize, seed: u64) -> Self {
        let mut p = ModelParams::zeros(features, classes, embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 0.01).expect("valid sigma");
        let proj = Normal::new(0.0, 1.0 / (features.max(1) as f64).sqrt()).expect("valid sigma");
        for v in p.classifier_mut() {
            *v = w.sample(&mut rng);
        }
        for v in p.projection_mut() {
            *v = proj.sample(&mut rng);
        }
        p
    }

    pub fn from_parts(
        features: usize,
        classes: usize,
        embed_dim: usize,
        classifier: &[f64],
        bias: &[f64],
        projection: &[f64],
    ) -> Result<Self> {
        if classifier.len() != features * classes || bias.len() != classes || projection.len() != features * embed_dim
        {
            return Err(Error::ShapeMismatch(format!(
                "parameter parts do not match F={features} C={classes} E={embed_dim}"
            )));
        }
        let data: Vec<f64> = classifier.iter().chain(bias).chain(projection).copied().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        Ok(ModelParams {
            features,
            classes,
            embed_dim,
            data,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn bias_offset(&self) -> usize {
        self.features * self.classes
    }

    fn projection_offset(&self) -> usize {
        self.bias_offset() + self.classes
    }

    /// Classifier weights, index `f * C + c`.
    pub fn classifier(&self) -> &[f64] {
        &self.data[..self.bias_offset()]
    }

    pub fn classifier_mut(&mut self) -> &mut [f64] {
        let end = self.bias_offset();
        &mut self.data[..end]
    }

    pub fn bias(&self) -> &[f64] {
        &self.data[self.bias_offset()..self.projection_offset()]
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.bias_offset(), self.projection_offset());
        &mut self.data[a..b]
    }

    /// Projection weights, index `f * E + e`.
    pub fn projection(&self) -> &[f64] {
        &self.data[self.projection_offset()..]
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        let a = self.projection_offset();
        &mut self.data[a..]
    }

    /// All parameters in checkpoint order.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.features == other.features && self.classes == other.classes && self.embed_dim == other.embed_dim
    }

    fn check_shape(&self, other: &ModelParams, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: ({}, {}, {}) vs ({}, {}, {})",
                self.features, self.classes, self.embed_dim, other.features, other.classes, other.embed_dim
            )))
        }
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.dim() != self.features {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} vs model input dim {}",
                x.dim(),
                self.features
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::encode(
            WEIGHTS_MAGIC,
            [self.features as u32, self.classes as u32, self.embed_dim as u32],
            self.data.iter().copied(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (d, data) = binio::decode(bytes, WEIGHTS_MAGIC, "ILMW checkpoint", |d| {
            let (f, c, e) = (d[0] as usize, d[1] as usize, d[2] as usize);
            f.checked_mul(c)?.checked_add(c)?.checked_add(f.checked_mul(e)?)
        })?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("ILMW checkpoint", "non-finite weight"));
        }
        Ok(ModelParams {
            features: d[0] as usize,
            classes: d[1] as usize,
            embed_dim: d[2] as usize,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ModelParams::from_bytes(&binio::read_file(path)?)
    }

    /// Rounds every weight to `f32` precision, matching what a checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.bias());
        let w = self.classifier();
        for (f, &xf) in x.iter().enumerate() {
            let row = &w[f * self.classes..(f + 1) * self.classes];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xf * wv;
            }
        }
    }

    fn project_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.projection();
        for (f, &xf) in x.iter().enumerate() {
            let row = &p[f * self.embed_dim..(f + 1) * self.embed_dim];
            for (o, &pv) in out.iter_mut().zip(row) {
                *o += xf * pv;
            }
        }
    }
}

pub fn logits(params: &ModelParams, x: &FeatureMap) -> Result<LogitMap> {
    params.check_input(x)?;
    let c = params.classes;
    let mut values = vec![0.0; x.num_pixels() * c];
    for (px, out) in x.pixels().zip(values.chunks_exact_mut(c)) {
        params.logits_into(px, out);
    }
    LogitMap::new(x.height, x.width, c, values)
}

/// Per-pixel class probabilities `softmax(Wᵀx + b)`.
pub fn predict(params: &ModelParams, x: &FeatureMap) -> Result<ProbMap> {
    params.check_input(x)?;
    let c = params.classes;
    let mut values = vec![0.0; x.num_pixels() * c];
    for (px, out) in x.pixels().zip(values.chunks_exact_mut(c)) {
        params.logits_into(px, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        softmax_in_place(out);
    }
    Ok(ProbMap::from_softmax(x.height, x.width, c, values))
}

/// Hard predictions (argmax, lowest class on ties).
pub fn predict_labels(params: &ModelParams, x: &FeatureMap) -> Result<LabelMask> {
    let p = predict(params, x)?;
    let values = p.pixels().map(|px| crate::numerics::argmax(px) as u8).collect();
    LabelMask::new(x.height, x.width, values)
}

/// Unit-normalized projections `Pᵀx`; zero projections map to `e₁`.
pub fn embed(params: &ModelParams, x: &FeatureMap) -> Result<EmbeddingMap> {
    params.check_input(x)?;
    let e = params.embed_dim;
    let mut values = vec![0.0; x.num_pixels() * e];
    for (px, out) in x.pixels().zip(values.chunks_exact_mut(e)) {
        params.project_into(px, out);
        normalize_or_basis(out);
    }
    EmbeddingMap::new(x.height, x.width, e, values)
}

/// One image with its (true or pseudo) labels.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImage<'a> {
    pub features: &'a FeatureMap,
    pub labels: &'a LabelMask,
}

/// Loss components of one evaluation of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    pub contrastive: f64,
    pub total: f64,
}

struct ContrastState {
    plan: Vec<PlannedAnchor>,
    /// Class prototypes captured at construction; treated as constants.
    positives: Vec<Vec<f64>>,
    negatives_per_anchor: usize,
}

/// The combined objective on one training batch.
///
/// Contrastive anchors, negatives and the class-prototype positives are
/// fixed when the objective is built, so [`Objective::loss`] and
/// [`Objective::gradient`] describe the same function of the parameters
/// with the positives under stop-gradient.
pub struct Objective<'a> {
    labeled: &'a [LabeledImage<'a>],
    pseudo: &'a [LabeledImage<'a>],
    weights: LossWeights,
    /// Maps a position in the concatenated pixel list to (image, pixel).
    offsets: Vec<usize>,
    labeled_valid: usize,
    pseudo_valid: usize,
    contrast: Option<ContrastState>,
}

impl<'a> Objective<'a> {
    pub fn new(
        params: &ModelParams,
        labeled: &'a [LabeledImage<'a>],
        pseudo: &'a [LabeledImage<'a>],
        weights: &LossWeights,
        contrast: &ContrastConfig,
        seed: u64,
    ) -> Result<Self> {
        weights.validate()?;
        let mut offsets = Vec::with_capacity(labeled.len() + pseudo.len() + 1);
        offsets.push(0);
        for img in labeled.iter().chain(pseudo) {
            params.check_input(img.features)?;
            if img.features.height() != img.labels.height() || img.features.width() != img.labels.width() {
                return Err(Error::ShapeMismatch(format!(
                    "features {}x{} vs labels {}x{}",
                    img.features.height(),
                    img.features.width(),
                    img.labels.height(),
                    img.labels.width()
                )));
            }
            img.labels.check_classes(params.classes)?;
            offsets.push(offsets.last().unwrap() + img.features.num_pixels());
        }
        let labeled_valid: usize = labeled.iter().map(|i| i.labels.num_valid()).sum();
        let pseudo_valid: usize = pseudo.iter().map(|i| i.labels.num_valid()).sum();
        if labeled_valid + pseudo_valid == 0 {
            return Err(Error::invalid("every pixel in both batches is ignored"));
        }

        let mut obj = Objective {
            labeled,
            pseudo,
            weights: *weights,
            offsets,
            labeled_valid,
            pseudo_valid,
            contrast: None,
        };
        if weights.lambda_c > 0.0 {
            let labels: Vec<u8> = obj.images().flat_map(|i| i.labels.values().iter().copied()).collect();
            let plan = plan_contrast(&labels, contrast, seed)?;
            if !plan.is_empty() {
                let emb = obj.embed_all(params);
                let sums = class_sums(&emb, params.embed_dim, &labels);
                let e = params.embed_dim;
                let positives = plan
                    .iter()
                    .map(|pa| prototype(&sums[pa.class as usize], &emb[pa.pixel * e..(pa.pixel + 1) * e]))
                    .collect();
                obj.contrast = Some(ContrastState {
                    plan,
                    positives,
                    negatives_per_anchor: contrast.negatives_per_anchor,
                });
            }
        }
        Ok(obj)
    }

    fn images(&self) -> impl Iterator<Item = &LabeledImage<'a>> {
        self.labeled.iter().chain(self.pseudo)
    }

    fn feature_at(&self, flat: usize) -> &[f64] {
        let img = self.offsets.partition_point(|&o| o <= flat) - 1;
        let local = flat - self.offsets[img];
        let image = if img < self.labeled.len() {
            &self.labeled[img]
        } else {
            &self.pseudo[img - self.labeled.len()]
        };
        image.features.pixel(local)
    }

    fn embed_all(&self, params: &ModelParams) -> Vec<f64> {
        let e = params.embed_dim;
        let mut out = vec![0.0; self.offsets.last().unwrap() * e];
        let mut chunks = out.chunks_exact_mut(e);
        for img in self.images() {
            for px in img.features.pixels() {
                let o = chunks.next().expect("sized to pixel count");
                params.project_into(px, o);
                normalize_or_basis(o);
            }
        }
        out
    }

    /// Number of contrastive anchors in the fixed plan.
    pub fn num_anchors(&self) -> usize {
        self.contrast.as_ref().map_or(0, |c| c.plan.len())
    }

    /// Evaluates the objective through the public forward kernels.
    pub fn loss(&self, params: &ModelParams) -> Result<LossBreakdown> {
        let mean_ce = |images: &[LabeledImage<'_>], valid: usize| -> Result<f64> {
            if valid == 0 {
                return Ok(0.0);
            }
            let mut sum = 0.0;
            for img in images {
                sum += ce_sum(&predict(params, img.features)?, img.labels).0;
            }
            Ok(sum / valid as f64)
        };
        let supervised = mean_ce(self.labeled, self.labeled_valid)?;
        let unsupervised = mean_ce(self.pseudo, self.pseudo_valid)?;
        let contrastive = match &self.contrast {
            Some(cs) => {
                let emb = self.embed_all(params);
                let batch = batch_from_plan(&cs.plan, &emb, params.embed_dim, &cs.positives, cs.negatives_per_anchor)?;
                contrastive_loss(&batch, self.weights.omega)?
            }
            None => 0.0,
        };
        Ok(LossBreakdown {
            supervised,
            unsupervised,
            contrastive,
            total: losses::total_loss(supervised, unsupervised, contrastive, &self.weights),
        })
    }

    /// Analytic gradient of the objective, with the loss at `params`.
    pub fn gradient(&self, params: &ModelParams) -> Result<(ModelParams, LossBreakdown)> {
        let mut grad = ModelParams::zeros(params.features, params.classes, params.embed_dim);
        let (c, f_dim) = (params.classes, params.features);
        let bias_off = grad.bias_offset();
        let mut z = vec![0.0; c];

        let mut ce_part = |images: &[LabeledImage<'_>], valid: usize, weight: f64| -> Result<f64> {
            if valid == 0 {
                return Ok(0.0);
            }
            let scale = weight / valid as f64;
            let mut sum = 0.0;
            for img in images {
                for (x, &label) in img.features.pixels().zip(img.labels.values()) {
                    if label == IGNORE {
                        continue;
                    }
                    params.logits_into(x, &mut z);
                    if z.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric("non-finite logits".into()));
                    }
                    softmax_in_place(&mut z);
                    let y = label as usize;
                    sum -= z[y].max(crate::numerics::PROB_FLOOR).ln();
                    if weight == 0.0 {
                        continue;
                    }
                    // d(−ln p_y)/dz = p − onehot(y)
                    z[y] -= 1.0;
                    let g = grad.as_mut_slice();
                    for (fi, &xf) in x.iter().enumerate() {
                        let row = &mut g[fi * c..(fi + 1) * c];
                        for (r, &dz) in row.iter_mut().zip(&z) {
                            *r += scale * xf * dz;
                        }
                    }
                    for (b, &dz) in g[bias_off..bias_off + c].iter_mut().zip(&z) {
                        *b += scale * dz;
                    }
                }
            }
            Ok(sum / valid as f64)
        };
        let supervised = ce_part(self.labeled, self.labeled_valid, 1.0)?;
        let unsupervised = ce_part(self.pseudo, self.pseudo_valid, self.weights.lambda_u)?;

        let contrastive = match &self.contrast {
            Some(cs) => self.contrast_gradient(cs, params, &mut grad, f_dim)?,
            None => 0.0,
        };
        let breakdown = LossBreakdown {
            supervised,
            unsupervised,
            contrastive,
            total: losses::total_loss(supervised, unsupervised, contrastive, &self.weights),
        };
        Ok((grad, breakdown))
    }

    fn contrast_gradient(
        &self,
        cs: &ContrastState,
        params: &ModelParams,
        grad: &mut ModelParams,
        f_dim: usize,
    ) -> Result<f64> {
        let e = params.embed_dim;
        let omega = self.weights.omega;
        let scale = self.weights.lambda_c / cs.plan.len() as f64;
        let proj_off = grad.projection_offset();

        let mut anchor = vec![0.0; e];
        let mut neg_emb = vec![0.0; cs.negatives_per_anchor * e];
        let mut neg_norm = vec![0.0; cs.negatives_per_anchor];
        let mut weights = Vec::with_capacity(cs.negatives_per_anchor + 1);
        let mut g_anchor = vec![0.0; e];
        let mut g_neg = vec![0.0; e];
        let mut total = 0.0;

        for (pa, positive) in cs.plan.iter().zip(&cs.positives) {
            let xa = self.feature_at(pa.pixel);
            params.project_into(xa, &mut anchor);
            let anchor_norm = normalize_or_basis(&mut anchor);
            for (k, &n) in pa.negatives.iter().enumerate() {
                let slot = &mut neg_emb[k * e..(k + 1) * e];
                params.project_into(self.feature_at(n), slot);
                neg_norm[k] = normalize_or_basis(slot);
            }
            total += anchor_term(&anchor, positive, neg_emb.chunks_exact(e), omega, &mut weights);
            if scale == 0.0 {
                continue;
            }

            // dℓ/da = ((q⁺ − 1)·a⁺ + Σ q_j·n_j) / ω,  dℓ/dn_j = q_j·a / ω
            for (g, &p) in g_anchor.iter_mut().zip(positive) {
                *g = (weights[0] - 1.0) * p / omega;
            }
            for (k, nj) in neg_emb.chunks_exact(e).enumerate() {
                let q = weights[k + 1] / omega;
                for (g, &v) in g_anchor.iter_mut().zip(nj) {
                    *g += q * v;
                }
            }
            backprop_normalized(&anchor, anchor_norm, &mut g_anchor);
            accumulate_projection(grad, proj_off, e, xa, &g_anchor, scale);

            for (k, &n) in pa.negatives.iter().enumerate() {
                let q = weights[k + 1] / omega;
                let nj = &neg_emb[k * e..(k + 1) * e];
                for (g, &a) in g_neg.iter_mut().zip(&anchor) {
                    *g = q * a;
                }
                backprop_normalized(nj, neg_norm[k], &mut g_neg);
                accumulate_projection(grad, proj_off, e, self.feature_at(n), &g_neg, scale);
            }
        }
        debug_assert_eq!(grad.projection().len(), f_dim * e);
        Ok(total / cs.plan.len() as f64)
    }
}

/// Chain rule through `v = u / |u|`: `dL/du = (g − v⟨v, g⟩) / |u|`, in place.
fn backprop_normalized(v: &[f64], norm: f64, g: &mut [f64]) {
    if norm == 0.0 {
        // The zero-vector fallback is constant.
        g.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let vg = losses::dot(v, g);
    for (gi, &vi) in g.iter_mut().zip(v) {
        *gi = (*gi - vi * vg) / norm;
    }
}

fn accumulate_projection(grad: &mut ModelParams, offset: usize, e: usize, x: &[f64], du: &[f64], scale: f64) {
    let g = grad.as_mut_slice();
    for (fi, &xf) in x.iter().enumerate() {
        let row = &mut g[offset + fi * e..offset + (fi + 1) * e];
        for (r, &d) in row.iter_mut().zip(du) {
            *r += scale * xf * d;
        }
    }
}

/// Gradient of `Ls + λu·Lu + λc·Lc` on one batch, plus the loss value.
pub fn grad_total_loss(
    params: &ModelParams,
    labeled: &[LabeledImage<'_>],
    pseudo: &[LabeledImage<'_>],
    weights: &LossWeights,
    contrast: &ContrastConfig,
    seed: u64,
) -> Result<(ModelParams, LossBreakdown)> {
    Objective::new(params, labeled, pseudo, weights, contrast, seed)?.gradient(params)
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    velocity: ModelParams,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            config,
            velocity: ModelParams::zeros(params.features, params.classes, params.embed_dim),
        })
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }
}

/// `v ← μ·v + g + λ·θ;  θ ← θ − η·v`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, opt: &mut OptimState) -> Result<()> {
    params.check_shape(grads, "sgd gradient")?;
    params.check_shape(&opt.velocity, "sgd velocity")?;
    let OptimConfig {
        learning_rate,
        momentum,
        weight_decay,
    } = opt.config;
    for ((p, &g), v) in params.data.iter_mut().zip(&grads.data).zip(&mut opt.velocity.data) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= learning_rate * *v;
    }
    if params.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("parameters diverged to non-finite values".into()));
    }
    Ok(())
}

/// `teacher ← m·teacher + (1 − m)·student`.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, momentum: f64) -> Result<()> {
    teacher.check_shape(student, "ema")?;
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    for (t, &s) in teacher.data.iter_mut().zip(&student.data) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_scalar(w: f64) -> ModelParams {
        ModelParams::from_parts(1, 1, 0, &[w], &[0.0], &[]).unwrap()
    }

    #[test]
    fn predict_zero_params_is_uniform() {
        let p = ModelParams::zeros(3, 4, 2);
        let x = FeatureMap::new(2, 2, 3, vec![1.5; 12]).unwrap();
        assert!(predict(&p, &x).unwrap().values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn predict_bias_only() {
        let p = ModelParams::from_parts(2, 2, 1, &[0.0; 4], &[0.0, 3f64.ln()], &[0.0; 2]).unwrap();
        let x = FeatureMap::new(1, 3, 2, vec![0.3, -2.0, 1.0, 4.0, 7.0, 0.0]).unwrap();
        for px in predict(&p, &x).unwrap().pixels() {
            assert!((px[0] - 0.25).abs() < 1e-12 && (px[1] - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_rejects_dim_mismatch() {
        let p = ModelParams::zeros(3, 2, 2);
        let x = FeatureMap::new(1, 1, 2, vec![0.0; 2]).unwrap();
        assert!(matches!(predict(&p, &x), Err(Error::ShapeMismatch(_))));
        assert!(embed(&p, &x).is_err());
    }

    #[test]
    fn embed_identity_and_degenerate() {
        let mut p = ModelParams::zeros(3, 2, 3);
        for i in 0..3 {
            p.projection_mut()[i * 3 + i] = 1.0;
        }
        let x = FeatureMap::new(1, 2, 3, vec![0.6, 0.0, 0.8, 0.0, 0.0, 0.0]).unwrap();
        let e = embed(&p, &x).unwrap();
        assert!((e.pixel(0)[0] - 0.6).abs() < 1e-15 && (e.pixel(0)[2] - 0.8).abs() < 1e-15);
        assert_eq!(e.pixel(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sgd_examples() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = params_scalar(1.0);
        let mut opt = OptimState::new(cfg, &p).unwrap();
        sgd_step(&mut p, &params_scalar(1.0), &mut opt).unwrap();
        assert!((p.as_slice()[0] - 0.9).abs() < 1e-15);

        let mut p = params_scalar(0.7);
        let mut opt = OptimState::new(OptimConfig { momentum: 0.5, ..cfg }, &p).unwrap();
        sgd_step(&mut p, &ModelParams::zeros(1, 1, 0), &mut opt).unwrap();
        assert_eq!(p.as_slice()[0], 0.7);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let cfg = OptimConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = params_scalar(0.0);
        let g = params_scalar(1.0);
        let mut opt = OptimState::new(cfg, &p).unwrap();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert!((p.as_slice()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut opt).unwrap();
        assert!((p.as_slice()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn optim_config_validation() {
        let ok = OptimConfig::default();
        assert!(ok.validate().is_ok());
        assert!(OptimConfig { momentum: 1.0, ..ok }.validate().is_err());
        assert!(OptimConfig { learning_rate: 0.0, ..ok }.validate().is_err());
    }

    #[test]
    fn ema_examples() {
        let student = params_scalar(1.0);
        let mut t = params_scalar(0.0);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);
        let mut t = params_scalar(0.3);
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.as_slice()[0], 0.3);
        let mut t = params_scalar(0.0);
        ema_update(&mut t, &student, 0.99).unwrap();
        assert!((t.as_slice()[0] - 0.01).abs() < 1e-15);
        assert!(ema_update(&mut t, &ModelParams::zeros(2, 1, 0), 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut p = ModelParams::init(3, 4, 2, 7);
        p.quantize_f32();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"ILMW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 4 * (12 + 4 + 6));
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), p);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let x = FeatureMap::new(1, 2, 2, vec![0.5, -1.25, 3.0, 0.0]).unwrap();
        assert_eq!(FeatureMap::from_bytes(&x.to_bytes()).unwrap(), x);
        assert!(ModelParams::from_bytes(&x.to_bytes()).is_err());
    }

    #[test]
    fn all_ignored_batches_error() {
        let p = ModelParams::zeros(2, 2, 2);
        let x = FeatureMap::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let y = LabelMask::filled(1, 2, IGNORE);
        let img = [LabeledImage {
            features: &x,
            labels: &y,
        }];
        let r = grad_total_loss(&p, &img, &img, &LossWeights::default(), &ContrastConfig::default(), 0);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
