use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Duration;

use ilm_core::active_selection::{
    load_score_table, save_score_table, select_count, uncertainty_score, SelectionBudget, UncertaintyRecord,
};
use ilm_core::annotation_io::{
    load_labelme, read_labelme, save_labelme, write_labelme, ClassMap, DatasetManifest, ManifestEntry,
};
use ilm_core::evaluation::{accumulate, format_report, miou, parse_subset, report_json, ConfusionMatrix};
use ilm_core::loop_orchestrator::Snapshot;
use ilm_core::loop_orchestrator::{
    train_stage, Annotator, FileAnnotator, LoopData, LoopRunner, OracleAnnotator, Strategy, TrainConfig,
};
use ilm_core::model::{predict, predict_labels, FeatureMap, LabeledImage, ModelParams};
use ilm_core::pseudo_label::LabelMask;
use ilm_core::synthetic_data::generate;
use ilm_core::Error;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{Cli, Command, EvalArgs, IngestArgs, LoopArgs, ScoreArgs, SelectArgs, SynthArgs, TrainArgs, TrainOverrides};

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?.finalize(cli.seed)?;
    if let Some(n) = cli.threads.or(cfg.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    let force = cli.force;
    match cli.command {
        Command::Synth(a) => synth(a, cfg, force),
        Command::Train(a) => train(a, cfg, force),
        Command::Score(a) => score(a, force),
        Command::Select(a) => select(a, force),
        Command::Ingest(a) => ingest(a, force),
        Command::Loop(a) => run_loop(a, cfg, force),
        Command::Eval(a) => eval(a, force),
    }
}

/// Refuses to replace an existing file unless forced.
fn claim(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &(text + "\n"))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn apply_overrides(tc: &mut TrainConfig, o: &TrainOverrides) -> CliResult<()> {
    if let Some(e) = o.epochs {
        tc.epochs = e;
    }
    if let Some(b) = o.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = o.lr {
        tc.optim.learning_rate = lr;
    }
    if o.no_unsup {
        tc.weights.lambda_u = 0.0;
    }
    if o.no_contrast {
        tc.weights.lambda_c = 0.0;
    }
    tc.validate()?;
    Ok(())
}

fn load_labeled(m: &DatasetManifest) -> CliResult<Vec<(FeatureMap, LabelMask)>> {
    let out = m
        .entries()
        .par_iter()
        .map(|e| {
            let label = m
                .load_label(e)?
                .ok_or_else(|| Error::InvalidInput(format!("`{}` has no label in a labeled manifest", e.id)))?;
            Ok((m.load_features(e)?, label))
        })
        .collect::<ilm_core::Result<_>>()?;
    Ok(out)
}

fn load_features(m: &DatasetManifest) -> CliResult<Vec<FeatureMap>> {
    let out = m
        .entries()
        .par_iter()
        .map(|e| m.load_features(e))
        .collect::<ilm_core::Result<_>>()?;
    Ok(out)
}

fn load_checkpoint(path: &Path, classes: Option<usize>) -> CliResult<ModelParams> {
    let p = ModelParams::load(path)?;
    if let Some(c) = classes {
        if p.classes() != c {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint {} has {} classes, class map has {c}",
                path.display(),
                p.classes()
            ))
            .into());
        }
    }
    Ok(p)
}

fn synth(a: SynthArgs, cfg: RunConfig, force: bool) -> CliResult<()> {
    let mut sc = cfg.synth;
    let set = |dst: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut sc.classes, a.classes);
    set(&mut sc.feature_dim, a.feature_dim);
    set(&mut sc.height, a.height);
    set(&mut sc.width, a.width);
    set(&mut sc.n_source, a.n_source);
    set(&mut sc.n_target, a.n_target);
    set(&mut sc.n_eval, a.n_eval);
    if let Some(s) = a.shift {
        sc.shift = s;
    }
    if let Some(s) = a.skew {
        sc.skew = s;
    }
    sc.validate()?;
    claim(&a.out.join("synth.json"), force)?;
    let out = generate(&sc, &a.out)?;
    println!(
        "wrote {} source, {} target and {} eval images to {}",
        out.source.len(),
        out.target.len(),
        out.eval.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, cfg: RunConfig, force: bool) -> CliResult<()> {
    let cm = ClassMap::load(&a.classes)?;
    let mut tc = cfg.loop_config.train.clone();
    apply_overrides(&mut tc, &a.train)?;
    let outputs = ["student.ilmw", "teacher.ilmw", "trace.json"].map(|n| a.out.join(n));
    for p in &outputs {
        claim(p, force)?;
    }

    let mut labeled_data = Vec::new();
    for path in &a.labeled {
        labeled_data.extend(load_labeled(&DatasetManifest::load(path)?)?);
    }
    let unlabeled_data = match &a.unlabeled {
        Some(p) => load_features(&DatasetManifest::load(p)?)?,
        None => Vec::new(),
    };
    let features = labeled_data
        .first()
        .map(|(f, _)| f.dim())
        .or_else(|| unlabeled_data.first().map(FeatureMap::dim))
        .ok_or_else(|| CliError::config("no training images"))?;
    let mut student = match &a.init {
        Some(p) => load_checkpoint(p, Some(cm.len()))?,
        None => cfg.loop_config.initial_params(features, cm.len()),
    };
    student.quantize_f32();

    let labeled: Vec<LabeledImage<'_>> = labeled_data
        .iter()
        .map(|(f, l)| LabeledImage { features: f, labels: l })
        .collect();
    let unlabeled: Vec<&FeatureMap> = unlabeled_data.iter().collect();
    let (teacher, trace) = train_stage(&mut student, &labeled, &unlabeled, &tc, cfg.loop_config.seed)?;

    create_dir(&a.out)?;
    student.save(&outputs[0])?;
    teacher.save(&outputs[1])?;
    write_json(&outputs[2], &trace)?;
    if let Some(last) = trace.last() {
        println!(
            "epoch {}: total {:.6} (supervised {:.6}, unsupervised {:.6}, contrastive {:.6})",
            last.epoch, last.total, last.supervised, last.unsupervised, last.contrastive
        );
    }
    Ok(())
}

fn score(a: ScoreArgs, force: bool) -> CliResult<()> {
    claim(&a.out, force)?;
    let params = load_checkpoint(&a.checkpoint, None)?;
    let m = DatasetManifest::load(&a.manifest)?;
    let records: Vec<UncertaintyRecord> = m
        .entries()
        .par_iter()
        .map(|e| {
            let p = predict(&params, &m.load_features(e)?)?;
            UncertaintyRecord::new(e.id.clone(), uncertainty_score(&p))
        })
        .collect::<ilm_core::Result<_>>()?;
    save_score_table(&a.out, &records)?;
    println!("scored {} images", records.len());
    Ok(())
}

fn select(a: SelectArgs, force: bool) -> CliResult<()> {
    let records = load_score_table(&a.scores)?;
    let budget = SelectionBudget::parse(&a.budget)?;
    let requested = budget.resolve(a.pool_size.unwrap_or(records.len()));
    let sel = select_count(&records, requested)?;
    let list = a.out.join("selected.txt");
    claim(&list, force)?;
    create_dir(&a.out)?;

    if let (Some(ckpt), Some(manifest), Some(classes)) = (&a.checkpoint, &a.manifest, &a.classes) {
        let cm = ClassMap::load(classes)?;
        let params = load_checkpoint(ckpt, Some(cm.len()))?;
        let m = DatasetManifest::load(manifest)?;
        sel.ids.par_iter().try_for_each(|id| -> CliResult<()> {
            let e = m
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("`{id}` is not in {}", manifest.display())))?;
            let pred = predict_labels(&params, &m.load_features(e)?)?;
            let mut doc = write_labelme(&pred, &cm)?;
            doc.image_path = format!("{id}.png");
            let path = a.out.join(format!("{id}.json"));
            claim(&path, force)?;
            save_labelme(&path, &doc)?;
            Ok(())
        })?;
    }
    let mut text = sel.ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_text(&list, &text)?;
    println!("selected {} of {} requested", sel.ids.len(), sel.requested);
    Ok(())
}

fn ingest(a: IngestArgs, force: bool) -> CliResult<()> {
    claim(&a.out, force)?;
    let cm = ClassMap::load(&a.classes)?;
    let m = DatasetManifest::load(&a.manifest)?;
    let out_dir = absolute(a.out.parent().unwrap_or(Path::new(".")));
    let label_dir = out_dir.join("ingested");

    let known: std::collections::HashSet<&str> = m.ids().collect();
    let listing = std::fs::read_dir(&a.corrected).map_err(|e| CliError::io(&a.corrected, e))?;
    for entry in listing {
        let path = entry.map_err(|e| CliError::io(&a.corrected, e))?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if path.extension().is_some_and(|x| x == "json") && !known.contains(stem) {
            log::warn!("{} does not match any manifest entry; skipped", path.display());
        }
    }

    let mut entries: Vec<ManifestEntry> = m.rebased(&out_dir).entries().to_vec();
    let mut count = 0;
    for (e, orig) in entries.iter_mut().zip(m.entries()) {
        let path = a.corrected.join(format!("{}.json", e.id));
        if !path.is_file() {
            continue;
        }
        let feats = m.load_features(orig)?;
        let mask = read_labelme(&load_labelme(&path)?, &cm, feats.height(), feats.width())?;
        create_dir(&label_dir)?;
        let rel = PathBuf::from("ingested").join(format!("{}.pgm", e.id));
        mask.save_pgm(&out_dir.join(&rel))?;
        e.label = Some(rel);
        count += 1;
    }
    DatasetManifest::new(&out_dir, entries)?.save(&out_dir.join(a.out.file_name().unwrap_or_default()))?;
    println!("ingested {count} annotations");
    Ok(())
}

fn ground_truth_labels(path: &Path) -> CliResult<HashMap<String, LabelMask>> {
    let m = DatasetManifest::load(path)?;
    let out = m
        .entries()
        .par_iter()
        .filter_map(|e| m.load_label(e).transpose().map(|l| l.map(|l| (e.id.clone(), l))))
        .collect::<ilm_core::Result<_>>()?;
    Ok(out)
}

/// Input paths of a loop run, as recorded in its snapshot.
struct LoopInputs(BTreeMap<String, PathBuf>);

impl LoopInputs {
    fn from_args(a: &LoopArgs, base: BTreeMap<String, PathBuf>) -> Self {
        let mut map = base;
        let given = [
            ("source", &a.source),
            ("target", &a.target),
            ("eval", &a.eval),
            ("classes", &a.classes),
            ("ground_truth", &a.ground_truth),
            ("annotation_dir", &a.annotation_dir),
        ];
        for (k, v) in given {
            if let Some(p) = v {
                map.insert(k.to_string(), absolute(p));
            }
        }
        if a.ground_truth.is_some() {
            map.remove("annotation_dir");
        }
        if a.annotation_dir.is_some() {
            map.remove("ground_truth");
        }
        LoopInputs(map)
    }

    fn get(&self, key: &str) -> Option<&Path> {
        self.0.get(key).map(PathBuf::as_path)
    }

    fn require(&self, key: &str) -> CliResult<&Path> {
        self.get(key)
            .ok_or_else(|| CliError::config(format!("--{} is required", key.replace('_', "-"))))
    }
}

fn run_loop(a: LoopArgs, cfg: RunConfig, force: bool) -> CliResult<()> {
    let (dir, snapshot) = match &a.resume {
        Some(d) => (d.clone(), Some(Snapshot::load(d)?)),
        None => (a.out.clone().expect("required by clap"), None),
    };
    let inputs = LoopInputs::from_args(&a, snapshot.as_ref().map(|s| s.inputs.clone()).unwrap_or_default());
    let source_free = snapshot.as_ref().map_or(a.source_free || cfg.loop_config.source_free, |s| s.config.source_free);

    let cm = ClassMap::load(inputs.require("classes")?)?;
    let target = DatasetManifest::load(inputs.require("target")?)?;
    let source = if source_free {
        None
    } else {
        Some(DatasetManifest::load(inputs.require("source")?)?)
    };
    let eval = inputs.get("eval").map(DatasetManifest::load).transpose()?;
    let data = LoopData::from_manifests(source.as_ref(), &target, eval.as_ref())?;

    let mut annotator: Box<dyn Annotator> = if let Some(gt) = inputs.get("ground_truth") {
        Box::new(OracleAnnotator::new(ground_truth_labels(gt)?))
    } else if let Some(ann) = inputs.get("annotation_dir") {
        let timeout = a.annotation_timeout.unwrap_or(cfg.annotation.timeout_secs);
        if !(timeout.is_finite() && timeout >= 0.0) {
            return Err(CliError::config("--annotation-timeout must be >= 0"));
        }
        let mut f = FileAnnotator::new(dir.join("export"), ann.to_path_buf(), cm.clone(), Duration::from_secs_f64(timeout));
        f.poll_interval = Duration::from_millis(cfg.annotation.poll_ms.max(1));
        Box::new(f)
    } else {
        return Err(CliError::config("either --ground-truth or --annotation-dir is required"));
    };

    let mut runner = match snapshot {
        Some(_) => LoopRunner::resume(&dir, &data)?.0,
        None => {
            claim(&Snapshot::path(&dir), force)?;
            let mut lc = cfg.loop_config.clone();
            lc.source_free = source_free;
            if let Some(r) = &a.rounds {
                lc.rounds = r.iter().map(|s| SelectionBudget::parse(s)).collect::<ilm_core::Result<_>>()?;
            }
            if let Some(s) = &a.strategy {
                lc.strategy = if s == "random" { Strategy::Random } else { Strategy::Uncertainty };
            }
            apply_overrides(&mut lc.train, &a.train)?;
            lc.validate()?;
            let features = data
                .target
                .first()
                .map(|s| s.features.dim())
                .ok_or_else(|| CliError::config("the target pool is empty"))?;
            let init = match &a.init {
                Some(p) => load_checkpoint(p, Some(cm.len()))?,
                None => lc.initial_params(features, cm.len()),
            };
            create_dir(&dir)?;
            LoopRunner::new(lc, &data, init)?
        }
    };
    if a.resume.is_some() && (a.strategy.is_some() || a.train.epochs.is_some()) {
        log::warn!("training and strategy options are taken from the snapshot when resuming");
    }

    let rounds = runner.config().rounds.len();
    while runner.state().round < rounds {
        if let Err(e) = runner.run_round(annotator.as_mut()) {
            runner.save_snapshot(&dir, inputs.0.clone())?;
            log::error!("round {} stopped; resume with --resume {}", runner.state().round, dir.display());
            return Err(e.into());
        }
        runner.save_snapshot(&dir, inputs.0.clone())?;
        let r = runner.history().last().expect("round recorded");
        println!(
            "round {}: selected {} images{}",
            r.round,
            r.selected.len(),
            r.miou.map(|m| format!(", mIoU {m:.4}")).unwrap_or_default()
        );
    }
    runner.finish()?;
    runner.save_snapshot(&dir, inputs.0.clone())?;
    let report = runner.report();
    write_json(&dir.join("report.json"), &report)?;
    let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "mIoU {} -> {} with {} target labels",
        fmt(report.initial_miou),
        fmt(report.final_miou),
        report.state.budget_spent
    );
    Ok(())
}

fn eval(a: EvalArgs, force: bool) -> CliResult<()> {
    if let Some(j) = &a.json {
        claim(j, force)?;
    }
    let cm = a.classes.as_deref().map(ClassMap::load).transpose()?;
    let gt_manifest = DatasetManifest::load(&a.gt)?;
    let gt = load_labeled(&gt_manifest)?;
    let (classes, preds): (usize, Vec<LabelMask>) = if let Some(ckpt) = &a.checkpoint {
        let params = load_checkpoint(ckpt, cm.as_ref().map(ClassMap::len))?;
        let preds = gt
            .par_iter()
            .map(|(f, _)| predict_labels(&params, f))
            .collect::<ilm_core::Result<_>>()?;
        (params.classes(), preds)
    } else {
        let pm = DatasetManifest::load(a.pred.as_deref().expect("required by clap"))?;
        let preds: Vec<LabelMask> = gt_manifest
            .entries()
            .par_iter()
            .map(|e| {
                let pe = pm
                    .get(&e.id)
                    .ok_or_else(|| Error::InvalidInput(format!("no prediction for `{}`", e.id)))?;
                pm.load_label(pe)?
                    .ok_or_else(|| Error::InvalidInput(format!("prediction for `{}` has no label", e.id)))
            })
            .collect::<ilm_core::Result<_>>()?;
        let classes = match &cm {
            Some(cm) => cm.len(),
            None => gt
                .iter()
                .map(|(_, l)| l)
                .chain(&preds)
                .flat_map(|l| l.values().iter().copied().filter(|&v| v != ilm_core::pseudo_label::IGNORE))
                .max()
                .map_or(1, |m| m as usize + 1),
        };
        (classes, preds)
    };
    let mut confusion = ConfusionMatrix::new(classes);
    for ((_, g), p) in gt.iter().zip(&preds) {
        accumulate(&mut confusion, p, g)?;
    }
    let subset = a.subset.as_deref().map(|s| parse_subset(s, classes)).transpose()?;
    let report = miou(&confusion, subset.as_deref())?;
    let names: Vec<String> = match &cm {
        Some(cm) => (0..classes)
            .map(|c| cm.name_of(c as u8).map(str::to_string).unwrap_or_else(|_| format!("class_{c}")))
            .collect(),
        None => (0..classes).map(|c| format!("class_{c}")).collect(),
    };
    print!("{}", format_report(&report, &names));
    if let Some(j) = &a.json {
        write_json(j, &report_json(&report, &names))?;
    }
    Ok(())
}
