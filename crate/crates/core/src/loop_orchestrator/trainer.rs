//! One semi-supervised training stage: student by SGD, teacher by EMA.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ContrastConfig, LossWeights};
use crate::model::{ema_update, predict, sgd_step, FeatureMap, LabeledImage, ModelParams, Objective, OptimConfig, OptimState};
use crate::numerics::{entropy_map, EntropyMap, ProbMap};
use crate::pseudo_label::{alpha_at, gamma_threshold, generate_pseudolabels, LabelMask, Schedule, ThresholdScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per step from each of the labeled and unlabeled sets.
    pub batch_size: usize,
    pub weights: LossWeights,
    pub contrast: ContrastConfig,
    /// Ignored-pixel schedule; `total_epochs` of 0 means "the stage length".
    pub alpha0: f64,
    pub schedule_epochs: usize,
    pub threshold_scope: ThresholdScope,
    pub ema_momentum: f64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            weights: LossWeights::default(),
            contrast: ContrastConfig::default(),
            alpha0: 0.2,
            schedule_epochs: 0,
            threshold_scope: ThresholdScope::default(),
            ema_momentum: 0.99,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        let total = if self.schedule_epochs == 0 { self.epochs } else { self.schedule_epochs };
        Schedule::new(self.alpha0, total.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        self.weights.validate()?;
        self.contrast.validate()?;
        self.optim.validate()?;
        let s = self.schedule()?;
        if self.epochs > s.total_epochs {
            return Err(Error::invalid(format!(
                "{} epochs exceed the schedule length {}",
                self.epochs, s.total_epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::invalid(format!("ema_momentum {} outside [0, 1]", self.ema_momentum)));
        }
        Ok(())
    }
}

/// Mean losses over the steps of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub alpha: f64,
    pub steps: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Share of unlabeled pixels that received a pseudo-label.
    pub pseudo_fraction: f64,
}

const LABELED_STREAM: u64 = 1;
const UNLABELED_STREAM: u64 = 2;
const CONTRAST_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains `student` in place and returns the EMA teacher, which starts as a
/// copy of the student. The optimizer starts from zero velocity.
///
/// Unlabeled images are only used when `λu` or `λc` is positive; otherwise
/// the stage is plain supervised training on `labeled`.
pub fn train_stage(
    student: &mut ModelParams,
    labeled: &[LabeledImage<'_>],
    unlabeled: &[&FeatureMap],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let unlabeled: &[&FeatureMap] = if cfg.weights.uses_unlabeled() { unlabeled } else { &[] };
    let (n_l, n_u) = (labeled.len(), unlabeled.len());
    if n_l + n_u == 0 {
        return Err(Error::invalid("training stage has no images"));
    }
    let mut teacher = student.clone();
    let mut opt = OptimState::new(cfg.optim, student)?;
    let mut rng_l = stream(seed, LABELED_STREAM);
    let mut rng_u = stream(seed, UNLABELED_STREAM);
    let mut rng_c = stream(seed, CONTRAST_STREAM);
    let b = cfg.batch_size;
    let steps = n_l.max(n_u).div_ceil(b);
    let mut perm_l: Vec<usize> = (0..n_l).collect();
    let mut perm_u: Vec<usize> = (0..n_u).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let alpha = alpha_at(&schedule, epoch)?;
        perm_l.shuffle(&mut rng_l);
        perm_u.shuffle(&mut rng_u);
        let epoch_gamma = match (cfg.threshold_scope, n_u) {
            (ThresholdScope::Epoch, n) if n > 0 => {
                let ents: Vec<EntropyMap> = unlabeled
                    .par_iter()
                    .map(|x| predict(&teacher, x).map(|p| entropy_map(&p)))
                    .collect::<Result<_>>()?;
                Some(gamma_threshold(&ents.iter().collect::<Vec<_>>(), alpha)?)
            }
            _ => None,
        };

        let mut sums = [0.0; 4];
        let (mut done, mut pseudo_px, mut unlabeled_px) = (0usize, 0usize, 0usize);
        for s in 0..steps {
            let lab: Vec<LabeledImage<'_>> = (0..b.min(n_l)).map(|k| labeled[perm_l[(s * b + k) % n_l]]).collect();
            let ux: Vec<&FeatureMap> = (0..b.min(n_u)).map(|k| unlabeled[perm_u[(s * b + k) % n_u]]).collect();
            let pseudo = pseudo_labels(&teacher, &ux, alpha, epoch_gamma)?;
            pseudo_px += pseudo.iter().map(LabelMask::num_valid).sum::<usize>();
            unlabeled_px += pseudo.iter().map(LabelMask::num_pixels).sum::<usize>();
            let pl: Vec<LabeledImage<'_>> = ux
                .iter()
                .zip(&pseudo)
                .map(|(x, y)| LabeledImage { features: x, labels: y })
                .collect();
            let contrast_seed: u64 = rng_c.random();
            if lab.iter().chain(&pl).all(|i| i.labels.num_valid() == 0) {
                continue;
            }
            let obj = Objective::new(student, &lab, &pl, &cfg.weights, &cfg.contrast, contrast_seed)?;
            let (grad, loss) = obj.gradient(student)?;
            sgd_step(student, &grad, &mut opt)?;
            ema_update(&mut teacher, student, cfg.ema_momentum)?;
            for (acc, v) in sums.iter_mut().zip([loss.supervised, loss.unsupervised, loss.contrastive, loss.total]) {
                *acc += v;
            }
            done += 1;
        }
        let mean = |v: f64| if done > 0 { v / done as f64 } else { 0.0 };
        let m = EpochMetrics {
            epoch,
            alpha,
            steps: done,
            supervised: mean(sums[0]),
            unsupervised: mean(sums[1]),
            contrastive: mean(sums[2]),
            total: mean(sums[3]),
            pseudo_fraction: if unlabeled_px > 0 { pseudo_px as f64 / unlabeled_px as f64 } else { 0.0 },
        };
        log::debug!(
            "epoch {epoch}: alpha {alpha:.4} loss {:.6} (ls {:.6} lu {:.6} lc {:.6})",
            m.total,
            m.supervised,
            m.unsupervised,
            m.contrastive
        );
        history.push(m);
    }
    Ok((teacher, history))
}

fn pseudo_labels(teacher: &ModelParams, xs: &[&FeatureMap], alpha: f64, gamma: Option<f64>) -> Result<Vec<LabelMask>> {
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let probs: Vec<ProbMap> = xs.par_iter().map(|x| predict(teacher, x)).collect::<Result<_>>()?;
    let gamma = match gamma {
        Some(g) => g,
        None => {
            let ents: Vec<EntropyMap> = probs.iter().map(entropy_map).collect();
            gamma_threshold(&ents.iter().collect::<Vec<_>>(), alpha)?
        }
    };
    Ok(probs.iter().map(|p| generate_pseudolabels(p, gamma)).collect())
}
