use ilm_core::losses::{ce_loss, ContrastConfig, LossWeights};
use ilm_core::model::{
    ema_update, embed, grad_total_loss, predict, predict_labels, sgd_step, FeatureMap, LabeledImage, ModelParams,
    Objective, OptimConfig, OptimState,
};
use ilm_core::pseudo_label::{LabelMask, IGNORE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_image(rng: &mut ChaCha8Rng, f: usize, c: usize, ignore: f64) -> (FeatureMap, LabelMask) {
    let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
    let x = FeatureMap::new(h, w, f, normal_vec(rng, h * w * f)).unwrap();
    let labels = (0..h * w)
        .map(|_| if rng.random_bool(ignore) { IGNORE } else { rng.random_range(0..c as u8) })
        .collect();
    (x, LabelMask::new(h, w, labels).unwrap())
}

fn pairs(v: &[(FeatureMap, LabelMask)]) -> Vec<LabeledImage<'_>> {
    v.iter().map(|(x, y)| LabeledImage { features: x, labels: y }).collect()
}

/// Central differences of the frozen objective, step 1e-5.
fn finite_difference(obj: &Objective<'_>, params: &ModelParams) -> Vec<f64> {
    let h = 1e-5;
    (0..params.as_slice().len())
        .map(|i| {
            let mut p = params.clone();
            p.as_mut_slice()[i] += h;
            let up = obj.loss(&p).unwrap().total;
            p.as_mut_slice()[i] -= 2.0 * h;
            let down = obj.loss(&p).unwrap().total;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, c, e) = (rng.random_range(1..=8), rng.random_range(2..=5), rng.random_range(1..=4));
        let mut params = ModelParams::zeros(f, c, e);
        let init = normal_vec(&mut rng, params.as_slice().len());
        params.as_mut_slice().copy_from_slice(&init);
        let labeled: Vec<_> = (0..2).map(|_| random_image(&mut rng, f, c, 0.1)).collect();
        let pseudo: Vec<_> = (0..2).map(|_| random_image(&mut rng, f, c, 0.4)).collect();
        let (l, u) = (pairs(&labeled), pairs(&pseudo));
        let weights = LossWeights::new(0.7, 0.5, 0.5).unwrap();
        let contrast = ContrastConfig {
            anchors_per_class: 3,
            negatives_per_anchor: 5,
        };
        let obj = Objective::new(&params, &l, &u, &weights, &contrast, seed).unwrap();
        let (grad, breakdown) = obj.gradient(&params).unwrap();
        let value = obj.loss(&params).unwrap();
        assert!((breakdown.total - value.total).abs() <= 1e-12 * value.total.abs().max(1.0));
        let fd = finite_difference(&obj, &params);
        let diff = grad.as_slice().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.norm().max(fd.iter().map(|v| v * v).sum::<f64>().sqrt()).max(1e-12);
        assert!(diff / scale <= 1e-4, "seed {seed}: relative error {}", diff / scale);

        let (direct, _) = grad_total_loss(&params, &l, &u, &weights, &contrast, seed).unwrap();
        assert_eq!(direct, grad);
    }
}

#[test]
fn sgd_lowers_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<_> = (0..3).map(|_| random_image(&mut rng, 4, 3, 0.0)).collect();
    let l = pairs(&data);
    let weights = LossWeights::new(0.0, 0.0, 0.1).unwrap();
    let mut params = ModelParams::init(4, 3, 2, 1);
    let mean_ce = |p: &ModelParams| {
        data.iter()
            .map(|(x, y)| ce_loss(&predict(p, x).unwrap(), y).unwrap())
            .sum::<f64>()
    };
    let before = mean_ce(&params);
    let mut opt = OptimState::new(
        OptimConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        },
        &params,
    )
    .unwrap();
    for _ in 0..20 {
        let (g, _) = grad_total_loss(&params, &l, &[], &weights, &ContrastConfig::default(), 0).unwrap();
        sgd_step(&mut params, &g, &mut opt).unwrap();
    }
    assert!(mean_ce(&params) < before);
}

#[test]
fn momentum_two_steps() {
    let mut p = ModelParams::from_parts(1, 1, 0, &[0.0], &[0.0], &[]).unwrap();
    let g = ModelParams::from_parts(1, 1, 0, &[1.0], &[0.0], &[]).unwrap();
    let cfg = OptimConfig {
        learning_rate: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let mut opt = OptimState::new(cfg, &p).unwrap();
    sgd_step(&mut p, &g, &mut opt).unwrap();
    assert!((p.classifier()[0] + 0.1).abs() < 1e-15);
    sgd_step(&mut p, &g, &mut opt).unwrap();
    assert!((p.classifier()[0] + 0.29).abs() < 1e-15);

    let before = p.clone();
    let mut fresh = OptimState::new(cfg, &p).unwrap();
    sgd_step(&mut p, &ModelParams::zeros(1, 1, 0), &mut fresh).unwrap();
    assert_eq!(p, before);
}

#[test]
fn checkpoint_round_trip() {
    let mut p = ModelParams::init(5, 3, 4, 11);
    p.quantize_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ilmw");
    p.save(&path).unwrap();
    assert_eq!(ModelParams::load(&path).unwrap(), p);
    let bytes = p.to_bytes();
    assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());

    let x = FeatureMap::new(2, 3, 2, (0..12).map(f64::from).collect()).unwrap();
    x.save(&dir.path().join("x.ilmf")).unwrap();
    assert_eq!(FeatureMap::load(&dir.path().join("x.ilmf")).unwrap(), x);
}

fn params_and_input() -> impl Strategy<Value = (ModelParams, FeatureMap)> {
    (1usize..6, 2usize..6, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(f, c, e, h, w)| {
        (
            prop::collection::vec(-3.0..3.0f64, f * c + c + f * e),
            prop::collection::vec(-3.0..3.0f64, h * w * f),
        )
            .prop_map(move |(p, x)| {
                let mut params = ModelParams::zeros(f, c, e);
                params.as_mut_slice().copy_from_slice(&p);
                (params, FeatureMap::new(h, w, f, x).unwrap())
            })
    })
}

proptest! {
    #[test]
    fn ema_is_the_scalar_formula(
        pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3),
        m in 0.0..=1.0f64,
    ) {
        let t: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let s: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let mut teacher = ModelParams::from_parts(1, 1, 1, &t[..1], &t[1..2], &t[2..]).unwrap();
        let student = ModelParams::from_parts(1, 1, 1, &s[..1], &s[1..2], &s[2..]).unwrap();
        ema_update(&mut teacher, &student, m).unwrap();
        for (k, &v) in teacher.as_slice().iter().enumerate() {
            prop_assert_eq!(v, m * t[k] + (1.0 - m) * s[k]);
        }
        let mut copy = teacher.clone();
        ema_update(&mut copy, &student, 0.0).unwrap();
        prop_assert_eq!(copy, student);
    }

    #[test]
    fn embeddings_have_unit_norm((params, x) in params_and_input()) {
        let e = embed(&params, &x).unwrap();
        for i in 0..x.num_pixels() {
            let n = e.pixel(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn positive_scaling_keeps_predictions((params, x) in params_and_input(), k in 0.1..10.0f64) {
        let mut scaled = params.clone();
        scaled.classifier_mut().iter_mut().for_each(|v| *v *= k);
        scaled.bias_mut().iter_mut().for_each(|v| *v *= k);
        let a = predict(&params, &x).unwrap();
        let b = predict_labels(&scaled, &x).unwrap();
        for (px, &l) in a.pixels().zip(b.values()) {
            let best = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // Near-ties may flip by rounding; anything clearly ahead must win.
            prop_assert!(px[l as usize] >= best - 1e-9);
        }
    }

    #[test]
    fn prediction_is_bitwise_reproducible((params, x) in params_and_input()) {
        let a = predict(&params, &x).unwrap();
        let b = predict(&params.clone(), &x.clone()).unwrap();
        prop_assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
