//! The iterative loop: semi-supervised training, uncertainty selection,
//! annotation, retraining, under a per-round image budget.

mod annotator;
mod snapshot;
mod trainer;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use annotator::{simulated_annotator, Annotator, FileAnnotator, OracleAnnotator};
pub use snapshot::Snapshot;
pub use trainer::{train_stage, EpochMetrics, TrainConfig};

use crate::active_selection::{select_count, uncertainty_score, SelectionBudget, UncertaintyRecord};
use crate::annotation_io::DatasetManifest;
use crate::error::{Error, Result};
use crate::evaluation::{accumulate, miou, ConfusionMatrix};
use crate::model::{predict, predict_labels, FeatureMap, LabeledImage, ModelParams};
use crate::pseudo_label::LabelMask;
use crate::synthetic_data::{SynthData, SynthImage};

/// Sample sets and budget ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolState {
    pub source_labeled: BTreeSet<String>,
    pub target_labeled: BTreeSet<String>,
    pub target_unlabeled: BTreeSet<String>,
    pub budget_spent: usize,
    pub round: usize,
    /// Unlabeled pool size before any annotation; percentage budgets refer to it.
    pub initial_pool: usize,
    pub ledger: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub round: usize,
    pub strategy: Strategy,
    pub requested: usize,
    pub granted: usize,
    pub ids: Vec<String>,
}

impl PoolState {
    pub fn new<S: Into<String>>(
        source: impl IntoIterator<Item = S>,
        target: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let source_labeled: BTreeSet<String> = source.into_iter().map(Into::into).collect();
        let target_unlabeled: BTreeSet<String> = target.into_iter().map(Into::into).collect();
        let state = PoolState {
            initial_pool: target_unlabeled.len(),
            source_labeled,
            target_labeled: BTreeSet::new(),
            target_unlabeled,
            budget_spent: 0,
            round: 0,
            ledger: Vec::new(),
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        let sets = [&self.source_labeled, &self.target_labeled, &self.target_unlabeled];
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                if let Some(id) = a.intersection(b).next() {
                    return Err(Error::DuplicateId(id.clone()));
                }
            }
        }
        let granted: usize = self.ledger.iter().map(|e| e.granted).sum();
        if granted != self.budget_spent || self.budget_spent != self.target_labeled.len() {
            return Err(Error::invalid(format!(
                "budget ledger ({granted}) / spent ({}) / labeled target ({}) disagree",
                self.budget_spent,
                self.target_labeled.len()
            )));
        }
        if self.target_labeled.len() + self.target_unlabeled.len() != self.initial_pool {
            return Err(Error::invalid("target pool size changed"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.source_labeled.len() + self.target_labeled.len() + self.target_unlabeled.len()
    }

    /// Moves annotated ids to the labeled set and records the round.
    fn commit(&mut self, strategy: Strategy, requested: usize, ids: Vec<String>) -> Result<()> {
        for id in &ids {
            if !self.target_unlabeled.remove(id) {
                return Err(Error::invalid(format!("`{id}` is not in the unlabeled pool")));
            }
            self.target_labeled.insert(id.clone());
        }
        self.budget_spent += ids.len();
        self.ledger.push(LedgerEntry {
            round: self.round,
            strategy,
            requested,
            granted: ids.len(),
            ids,
        });
        self.round += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    #[default]
    Uncertainty,
}

/// Which model's predictions drive uncertainty scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    #[default]
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub rounds: Vec<SelectionBudget>,
    /// Training settings for every stage; `train.epochs` is the epochs per round.
    pub train: TrainConfig,
    pub embed_dim: usize,
    pub seed: u64,
    pub source_free: bool,
    /// Draw the first round uniformly at random before any training.
    pub random_first_round: bool,
    /// Selection rule for the remaining rounds.
    pub strategy: Strategy,
    pub score_model: ScoreModel,
    /// Restart every stage from the initial parameters instead of fine-tuning.
    pub reinit_each_round: bool,
    /// Train once more after the last annotation round.
    pub final_stage: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            rounds: vec![SelectionBudget::Fraction(0.01), SelectionBudget::Fraction(0.012)],
            train: TrainConfig::default(),
            embed_dim: 16,
            seed: 0,
            source_free: false,
            random_first_round: true,
            strategy: Strategy::Uncertainty,
            score_model: ScoreModel::Teacher,
            reinit_each_round: false,
            final_stage: true,
        }
    }
}

const INIT_TAG: u64 = 0x1;
const TRAIN_TAG: u64 = 0x2;
const SELECT_TAG: u64 = 0x3;

/// Independent seed for a (purpose, index) pair.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(Error::invalid("at least one round budget is required"));
        }
        for b in &self.rounds {
            b.validate()?;
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        self.train.validate()
    }

    /// Freshly initialized parameters for this run's seed.
    pub fn initial_params(&self, features: usize, classes: usize) -> ModelParams {
        ModelParams::init(features, classes, self.embed_dim, derive_seed(self.seed, INIT_TAG, 0))
    }
}

/// `count` ids drawn uniformly without replacement, in draw order.
pub fn random_selection(pool: &BTreeSet<String>, count: usize, seed: u64) -> Vec<String> {
    let ids: Vec<&String> = pool.iter().collect();
    let count = count.min(ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, ids.len(), count)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect()
}

/// Random first-round selection from an untouched pool.
pub fn initial_seed_selection(state: &PoolState, budget: SelectionBudget, seed: u64) -> Result<Vec<String>> {
    if !state.target_labeled.is_empty() {
        return Err(Error::invalid("initial selection needs an unannotated target pool"));
    }
    budget.validate()?;
    let requested = budget.resolve(state.initial_pool);
    if requested > state.target_unlabeled.len() {
        log::warn!(
            "budget of {requested} images exceeds the pool of {}; selecting all",
            state.target_unlabeled.len()
        );
    }
    Ok(random_selection(&state.target_unlabeled, requested, seed))
}

/// One image known to the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: FeatureMap,
    pub labels: Option<LabelMask>,
    /// Where the features came from, if they were loaded from disk.
    pub features_path: Option<std::path::PathBuf>,
}

/// Images the loop draws on: labeled source, the target pool, and held-out
/// labeled target images for evaluation.
#[derive(Debug, Clone, Default)]
pub struct LoopData {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl LoopData {
    pub fn from_synth(d: &SynthData) -> Self {
        let conv = |v: &[SynthImage], keep_labels: bool| {
            v.iter()
                .map(|i| Sample {
                    id: i.id.clone(),
                    features: i.features.clone(),
                    labels: keep_labels.then(|| i.labels.clone()),
                    features_path: None,
                })
                .collect()
        };
        LoopData {
            source: conv(&d.source, true),
            target: conv(&d.target, false),
            eval: conv(&d.eval, true),
        }
    }

    /// Loads features and labels. Target labels are never read.
    pub fn from_manifests(
        source: Option<&DatasetManifest>,
        target: &DatasetManifest,
        eval: Option<&DatasetManifest>,
    ) -> Result<Self> {
        let load = |m: &DatasetManifest, want_labels: bool| -> Result<Vec<Sample>> {
            m.entries()
                .par_iter()
                .map(|e| {
                    let labels = if want_labels {
                        Some(m.load_label(e)?.ok_or_else(|| {
                            Error::invalid(format!("`{}` needs a label in a labeled manifest", e.id))
                        })?)
                    } else {
                        None
                    };
                    Ok(Sample {
                        id: e.id.clone(),
                        features: m.load_features(e)?,
                        labels,
                        features_path: Some(m.resolve(&e.features)),
                    })
                })
                .collect()
        };
        Ok(LoopData {
            source: source.map(|m| load(m, true)).transpose()?.unwrap_or_default(),
            target: load(target, false)?,
            eval: eval.map(|m| load(m, true)).transpose()?.unwrap_or_default(),
        })
    }

    /// Ground-truth masks of the eval set in the form an oracle needs.
    pub fn labels_by_id(samples: &[Sample]) -> HashMap<String, LabelMask> {
        samples
            .iter()
            .filter_map(|s| s.labels.clone().map(|l| (s.id.clone(), l)))
            .collect()
    }
}

/// Mean IoU of `params` over labeled samples, or `None` without samples.
pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let preds: Vec<LabelMask> = samples
        .par_iter()
        .map(|s| predict_labels(params, &s.features))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(params.classes());
    for (s, p) in samples.iter().zip(&preds) {
        let gt = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("evaluation sample `{}` has no label", s.id)))?;
        accumulate(&mut cm, p, gt)?;
    }
    Ok(Some(miou(&cm, None)?.mean))
}

/// What happened in one round or the final stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Empty when the round did not train.
    pub epochs: Vec<EpochMetrics>,
    pub strategy: Option<Strategy>,
    pub selected: Vec<String>,
    /// Teacher mIoU on the eval set after this round's training.
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub initial_miou: Option<f64>,
    pub final_miou: Option<f64>,
    pub rounds: Vec<RoundMetrics>,
    pub state: PoolState,
}

/// Drives the loop over in-memory data.
pub struct LoopRunner<'d> {
    config: LoopConfig,
    data: &'d LoopData,
    target_index: HashMap<String, usize>,
    state: PoolState,
    init: ModelParams,
    student: ModelParams,
    teacher: ModelParams,
    annotations: BTreeMap<String, LabelMask>,
    pending: Vec<String>,
    history: Vec<RoundMetrics>,
    initial_miou: Option<f64>,
    completed: bool,
}

impl<'d> LoopRunner<'d> {
    pub fn new(config: LoopConfig, data: &'d LoopData, mut init: ModelParams) -> Result<Self> {
        config.validate()?;
        init.quantize_f32();
        let source_ids: Vec<&str> = if config.source_free {
            Vec::new()
        } else {
            data.source.iter().map(|s| s.id.as_str()).collect()
        };
        let state = PoolState::new(source_ids, data.target.iter().map(|s| s.id.as_str()))?;
        if state.target_unlabeled.len() != data.target.len() {
            return Err(Error::invalid("duplicate id in the target pool"));
        }
        let mut runner = LoopRunner::assemble(config, data, state, init.clone(), init.clone(), init)?;
        runner.initial_miou = evaluate(&runner.teacher, &data.eval)?;
        Ok(runner)
    }

    fn assemble(
        config: LoopConfig,
        data: &'d LoopData,
        state: PoolState,
        init: ModelParams,
        student: ModelParams,
        teacher: ModelParams,
    ) -> Result<Self> {
        config.validate()?;
        state.validate()?;
        let (f, c) = (init.features(), init.classes());
        if init.embed_dim() != config.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "initial parameters have embedding dim {}, config says {}",
                init.embed_dim(),
                config.embed_dim
            )));
        }
        for s in data.source.iter().chain(&data.target).chain(&data.eval) {
            if s.features.dim() != f {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` has feature dim {}, model expects {f}",
                    s.id,
                    s.features.dim()
                )));
            }
            if let Some(l) = &s.labels {
                if (l.height(), l.width()) != (s.features.height(), s.features.width()) {
                    return Err(Error::ShapeMismatch(format!("`{}`: label and feature sizes differ", s.id)));
                }
                l.check_classes(c)?;
            }
        }
        if !config.source_free && data.source.iter().any(|s| s.labels.is_none()) {
            return Err(Error::invalid("every source sample needs a label"));
        }
        let target_index = data
            .target
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        Ok(LoopRunner {
            config,
            data,
            target_index,
            state,
            init,
            student,
            teacher,
            annotations: BTreeMap::new(),
            pending: Vec::new(),
            history: Vec::new(),
            initial_miou: None,
            completed: false,
        })
    }

    pub fn config(&self) -> &LoopConfig {
        &self.config
    }

    pub fn state(&self) -> &PoolState {
        &self.state
    }

    pub fn student(&self) -> &ModelParams {
        &self.student
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    pub fn history(&self) -> &[RoundMetrics] {
        &self.history
    }

    pub fn annotations(&self) -> &BTreeMap<String, LabelMask> {
        &self.annotations
    }

    /// Ids selected in the current round but not yet annotated.
    pub fn pending(&self) -> &[String] {
        &self.pending
    }

    pub fn initial_miou(&self) -> Option<f64> {
        self.initial_miou
    }

    pub fn is_complete(&self) -> bool {
        self.completed
    }

    fn target(&self, id: &str) -> &'d Sample {
        &self.data.target[self.target_index[id]]
    }

    fn train(&mut self, stage: usize) -> Result<Vec<EpochMetrics>> {
        let mut labeled: Vec<LabeledImage<'_>> = Vec::new();
        if !self.config.source_free {
            for s in &self.data.source {
                labeled.push(LabeledImage {
                    features: &s.features,
                    labels: s.labels.as_ref().expect("checked at construction"),
                });
            }
        }
        for (id, mask) in &self.annotations {
            labeled.push(LabeledImage {
                features: &self.target(id).features,
                labels: mask,
            });
        }
        let unlabeled: Vec<&FeatureMap> = self
            .state
            .target_unlabeled
            .iter()
            .map(|id| &self.target(id).features)
            .collect();
        let mut student = if self.config.reinit_each_round {
            self.init.clone()
        } else {
            self.student.clone()
        };
        let seed = derive_seed(self.config.seed, TRAIN_TAG, stage as u64);
        let (mut teacher, epochs) = train_stage(&mut student, &labeled, &unlabeled, &self.config.train, seed)?;
        // Keep in-memory weights identical to what a checkpoint stores, so a
        // resumed run continues exactly.
        student.quantize_f32();
        teacher.quantize_f32();
        self.student = student;
        self.teacher = teacher;
        Ok(epochs)
    }

    fn score_pool(&self) -> Result<Vec<UncertaintyRecord>> {
        let model = match self.config.score_model {
            ScoreModel::Teacher => &self.teacher,
            ScoreModel::Student => &self.student,
        };
        let ids: Vec<&String> = self.state.target_unlabeled.iter().collect();
        ids.par_iter()
            .map(|id| {
                let p = predict(model, &self.target(id).features)?;
                Ok(UncertaintyRecord {
                    image_id: (*id).clone(),
                    score: uncertainty_score(&p),
                })
            })
            .collect()
    }

    fn strategy_for(&self, round: usize) -> Strategy {
        if round == 0 && self.config.random_first_round {
            Strategy::Random
        } else {
            self.config.strategy
        }
    }

    /// Runs the next round: train (except for a random first round), select,
    /// annotate. On annotation failure the selection stays pending and the
    /// state is unchanged, so the round can be retried or snapshotted.
    pub fn run_round(&mut self, annotator: &mut dyn Annotator) -> Result<&RoundMetrics> {
        let round = self.state.round;
        let budget = *self
            .config
            .rounds
            .get(round)
            .ok_or_else(|| Error::invalid(format!("all {} rounds are done", self.config.rounds.len())))?;
        let strategy = self.strategy_for(round);
        let requested = budget.resolve(self.state.initial_pool);

        if self.pending.is_empty() {
            let trains = !(round == 0 && self.config.random_first_round);
            let epochs = if trains { self.train(round)? } else { Vec::new() };
            let miou = if trains { evaluate(&self.teacher, &self.data.eval)? } else { None };
            let selected = match strategy {
                Strategy::Random => {
                    let seed = derive_seed(self.config.seed, SELECT_TAG, round as u64);
                    if round == 0 {
                        initial_seed_selection(&self.state, budget, seed)?
                    } else {
                        if requested > self.state.target_unlabeled.len() {
                            log::warn!(
                                "budget of {requested} images exceeds the pool of {}; selecting all",
                                self.state.target_unlabeled.len()
                            );
                        }
                        random_selection(&self.state.target_unlabeled, requested, seed)
                    }
                }
                Strategy::Uncertainty => select_count(&self.score_pool()?, requested)?.ids,
            };
            log::info!("round {round}: {strategy:?} selected {} of {requested} requested", selected.len());
            self.pending = selected.clone();
            self.history.push(RoundMetrics {
                round,
                epochs,
                strategy: Some(strategy),
                selected,
                miou,
            });
        }

        let items: Vec<(String, LabelMask)> = self
            .pending
            .par_iter()
            .map(|id| Ok((id.clone(), predict_labels(&self.teacher, &self.target(id).features)?)))
            .collect::<Result<_>>()?;
        let masks = annotator.annotate_batch(&items)?;
        if masks.len() != items.len() {
            return Err(Error::Annotation {
                id: items.first().map(|i| i.0.clone()).unwrap_or_default(),
                reason: format!("annotator returned {} masks for {} images", masks.len(), items.len()),
            });
        }
        for ((id, pred), mask) in items.iter().zip(&masks) {
            if (mask.height(), mask.width()) != (pred.height(), pred.width()) {
                return Err(Error::Annotation {
                    id: id.clone(),
                    reason: format!(
                        "mask is {}x{}, image is {}x{}",
                        mask.height(),
                        mask.width(),
                        pred.height(),
                        pred.width()
                    ),
                });
            }
            mask.check_classes(self.init.classes()).map_err(|e| Error::Annotation {
                id: id.clone(),
                reason: e.to_string(),
            })?;
        }
        let ids = std::mem::take(&mut self.pending);
        for (id, mask) in ids.iter().zip(masks) {
            self.annotations.insert(id.clone(), mask);
        }
        self.state.commit(strategy, requested, ids)?;
        Ok(self.history.last().expect("round recorded"))
    }

    /// Final training stage after the last round.
    pub fn finish(&mut self) -> Result<()> {
        if self.completed {
            return Ok(());
        }
        if self.state.round < self.config.rounds.len() {
            return Err(Error::invalid("rounds remain before the final stage"));
        }
        if self.config.final_stage {
            let stage = self.config.rounds.len();
            let epochs = self.train(stage)?;
            let miou = evaluate(&self.teacher, &self.data.eval)?;
            self.history.push(RoundMetrics {
                round: stage,
                epochs,
                strategy: None,
                selected: Vec::new(),
                miou,
            });
        }
        self.completed = true;
        Ok(())
    }

    /// Runs every remaining round and the final stage.
    pub fn run(&mut self, annotator: &mut dyn Annotator) -> Result<LoopReport> {
        while self.state.round < self.config.rounds.len() {
            self.run_round(annotator)?;
        }
        self.finish()?;
        Ok(self.report())
    }

    pub fn final_miou(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|r| r.miou).or(self.initial_miou)
    }

    pub fn report(&self) -> LoopReport {
        LoopReport {
            initial_miou: self.initial_miou,
            final_miou: self.final_miou(),
            rounds: self.history.clone(),
            state: self.state.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossWeights;
    use crate::model::OptimConfig;
    use crate::synthetic_data::{generate_data, SynthConfig};

    fn tiny() -> (SynthData, LoopConfig) {
        let d = generate_data(&SynthConfig {
            n_source: 6,
            n_target: 20,
            n_eval: 4,
            height: 6,
            width: 6,
            classes: 3,
            feature_dim: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = LoopConfig {
            rounds: vec![SelectionBudget::Fraction(0.1), SelectionBudget::Count(3)],
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                optim: OptimConfig {
                    learning_rate: 0.05,
                    ..OptimConfig::default()
                },
                ..TrainConfig::default()
            },
            embed_dim: 4,
            ..LoopConfig::default()
        };
        (d, cfg)
    }

    #[test]
    fn loop_runs_and_accounts() {
        let (d, cfg) = tiny();
        let data = LoopData::from_synth(&d);
        let gt: HashMap<String, LabelMask> = d.target.iter().map(|i| (i.id.clone(), i.labels.clone())).collect();
        let mut oracle = OracleAnnotator::new(gt);
        let init = cfg.initial_params(4, 3);
        let mut r = LoopRunner::new(cfg, &data, init).unwrap();
        let report = r.run(&mut oracle).unwrap();
        assert_eq!(report.state.budget_spent, 5);
        assert_eq!(report.state.ledger[0].granted, 2);
        assert_eq!(report.state.ledger[0].strategy, Strategy::Random);
        assert_eq!(report.state.ledger[1].granted, 3);
        assert_eq!(report.state.total(), 26);
        assert_eq!(report.rounds.len(), 3);
        assert!(report.initial_miou.is_some() && report.final_miou.is_some());
        report.state.validate().unwrap();
    }

    #[test]
    fn failed_annotation_keeps_pending() {
        let (d, cfg) = tiny();
        let data = LoopData::from_synth(&d);
        let mut empty = OracleAnnotator::default();
        let init = cfg.initial_params(4, 3);
        let mut r = LoopRunner::new(cfg, &data, init).unwrap();
        let before = r.state().clone();
        assert!(matches!(r.run_round(&mut empty), Err(Error::MissingGroundTruth(_))));
        assert_eq!(r.state(), &before);
        assert_eq!(r.pending().len(), 2);
        let gt: HashMap<String, LabelMask> = d.target.iter().map(|i| (i.id.clone(), i.labels.clone())).collect();
        let pending = r.pending().to_vec();
        r.run_round(&mut OracleAnnotator::new(gt)).unwrap();
        assert_eq!(r.state().ledger[0].ids, pending);
    }

    #[test]
    fn zero_budget_supervised_keeps_pool() {
        let (d, mut cfg) = tiny();
        cfg.rounds = vec![SelectionBudget::Count(0); 3];
        cfg.train.weights = LossWeights::new(0.0, 0.0, 0.1).unwrap();
        let data = LoopData::from_synth(&d);
        let init = cfg.initial_params(4, 3);
        let mut r = LoopRunner::new(cfg, &data, init).unwrap();
        let start = r.state().clone();
        let rep = r.run(&mut OracleAnnotator::default()).unwrap();
        assert_eq!(rep.state.round, 3);
        assert_eq!(rep.state.target_unlabeled, start.target_unlabeled);
        assert_eq!(rep.state.budget_spent, 0);
    }

    #[test]
    fn seed_selection_is_deterministic() {
        let ids: Vec<String> = (0..100).map(|i| format!("t{i:03}")).collect();
        let s = PoolState::new(Vec::<String>::new(), ids).unwrap();
        let a = initial_seed_selection(&s, SelectionBudget::Fraction(0.05), 9).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, initial_seed_selection(&s, SelectionBudget::Fraction(0.05), 9).unwrap());
        assert!(initial_seed_selection(&s, SelectionBudget::Count(0), 9).unwrap().is_empty());
        assert_eq!(initial_seed_selection(&s, SelectionBudget::Count(500), 9).unwrap().len(), 100);
    }

    #[test]
    fn pool_rejects_overlap() {
        assert!(matches!(PoolState::new(["a", "b"], ["b"]), Err(Error::DuplicateId(id)) if id == "b"));
    }
}
