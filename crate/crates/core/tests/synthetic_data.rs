use ilm_core::annotation_io::DatasetManifest;
use ilm_core::synthetic_data::{generate, generate_data, SynthConfig};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        n_source: 4,
        n_target: 6,
        n_eval: 3,
        height: 5,
        width: 7,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn skewed_class_frequencies_decrease() {
    let cfg = SynthConfig {
        classes: 5,
        skew: 1.0,
        height: 8,
        width: 8,
        n_source: 1500,
        n_target: 0,
        n_eval: 0,
        seed: 4,
        ..SynthConfig::default()
    };
    let d = generate_data(&cfg).unwrap();
    let mut counts = [0usize; 5];
    for img in &d.source {
        for &v in img.labels.values() {
            counts[v as usize] += 1;
        }
    }
    assert!(counts.windows(2).all(|w| w[0] > w[1]), "{counts:?}");
    let p = cfg.class_probabilities();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn zero_skew_is_uniform() {
    let cfg = SynthConfig {
        skew: 0.0,
        ..SynthConfig::default()
    };
    assert!(cfg.class_probabilities().iter().all(|&p| (p - 1.0 / 8.0).abs() < 1e-15));
}

#[test]
fn target_means_are_shifted_by_the_configured_length() {
    let d = generate_data(&small(1)).unwrap();
    for (s, t) in d.source_means.iter().zip(&d.target_means) {
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = s.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 3.0).abs() < 1e-9);
        assert!((dist - 2.0).abs() < 1e-9);
    }
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate_data(&small(9)).unwrap())
    };
    let (a, b) = (run(1), run(3));
    for (x, y) in a.source.iter().chain(&a.target).zip(b.source.iter().chain(&b.target)) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.labels, y.labels);
        assert_eq!(x.features, y.features);
    }
    assert_ne!(generate_data(&small(10)).unwrap().source[0].features, a.source[0].features);
}

#[test]
fn written_files_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(&small(2), dir.path()).unwrap();
    for (name, labeled, n) in [("source", true, 4), ("target", false, 6), ("target_gt", true, 6), ("eval", true, 3)] {
        let m = DatasetManifest::load(&dir.path().join(format!("{name}.json"))).unwrap();
        assert_eq!(m.len(), n);
        for e in m.entries() {
            let f = m.load_features(e).unwrap();
            assert_eq!((f.height(), f.width(), f.dim()), (5, 7, 8));
            let label = m.load_label(e).unwrap();
            assert_eq!(label.is_some(), labeled);
            if let Some(l) = label {
                l.check_classes(8).unwrap();
            }
        }
    }
    assert_eq!(out.class_map.len(), 8);
    assert!(SynthConfig {
        classes: 1,
        ..SynthConfig::default()
    }
    .validate()
    .is_err());
}
