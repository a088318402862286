mod common;

use common::{oracle_argmax, oracle_entropy, oracle_percentile, prob_map};
use ilm_core::numerics::{entropy_map, EntropyMap, ProbMap};
use ilm_core::pseudo_label::{
    alpha_at, gamma_threshold, generate_pseudolabels, pseudolabel_batch, LabelMask, Schedule, IGNORE,
};
use proptest::prelude::*;

#[test]
fn threshold_examples() {
    let e = EntropyMap::new(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    assert!((gamma_threshold(&[&e], 0.25).unwrap() - 0.325).abs() < 1e-12);
    assert_eq!(gamma_threshold(&[&e], 1.0).unwrap(), 0.1);
    assert_eq!(gamma_threshold(&[&e], 0.0).unwrap(), 0.4);

    let p = ProbMap::constant(1, 1, &[0.9, 0.1]).unwrap();
    assert_eq!(generate_pseudolabels(&p, 0.5).values(), [0]);
    assert_eq!(generate_pseudolabels(&p, 0.1).values(), [IGNORE]);
    let half = ProbMap::constant(1, 1, &[0.5, 0.5]).unwrap();
    assert_eq!(generate_pseudolabels(&half, 2f64.ln()).values(), [IGNORE]);
}

#[test]
fn pgm_round_trip() {
    let m = LabelMask::new(2, 3, vec![0, 1, IGNORE, 4, 4, 0]).unwrap();
    assert_eq!(LabelMask::from_pgm(&m.to_pgm()).unwrap(), m);
    assert!(LabelMask::from_pgm(b"P2\n1 1\n255\n0").is_err());
}

proptest! {
    #[test]
    fn labels_match_oracle(p in prob_map(), gamma in 0.0..2.0f64) {
        let labels = generate_pseudolabels(&p, gamma);
        for (px, &l) in p.pixels().zip(labels.values()) {
            let h = oracle_entropy(px);
            if (h - gamma).abs() > 1e-9 {
                let expect = if h < gamma { oracle_argmax(px) as u8 } else { IGNORE };
                prop_assert_eq!(l, expect);
            }
        }
    }

    #[test]
    fn labeled_set_grows_with_gamma(p in prob_map(), a in 0.0..2.0f64, b in 0.0..2.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = generate_pseudolabels(&p, lo);
        let large = generate_pseudolabels(&p, hi);
        for (s, l) in small.values().iter().zip(large.values()) {
            if *s != IGNORE {
                prop_assert_eq!(s, l);
            }
        }
    }

    #[test]
    fn threshold_is_entropy_percentile(p in prob_map(), alpha in 0.0..=1.0f64) {
        let e = entropy_map(&p);
        let (gamma, masks) = pseudolabel_batch(std::slice::from_ref(&p), alpha).unwrap();
        prop_assert!((gamma - oracle_percentile(e.values(), 100.0 * (1.0 - alpha))).abs() <= 1e-12);
        // With a positive alpha the most uncertain pixel is never labeled.
        let ignored = masks[0].values().iter().filter(|&&v| v == IGNORE).count();
        if alpha > 0.0 {
            prop_assert!(ignored >= 1);
        }
    }

    #[test]
    fn schedule_is_affine(alpha0 in 0.01..=1.0f64, total in 1usize..200, t in 0usize..200, u in 0usize..200) {
        let s = Schedule::new(alpha0, total).unwrap();
        let (t, u) = (t % (total + 1), u % (total + 1));
        let at = |t| alpha_at(&s, t).unwrap();
        prop_assert_eq!(at(0), alpha0);
        prop_assert_eq!(at(total), 0.0);
        prop_assert!(at(t) >= 0.0 && at(t) <= alpha0);
        // Equal steps change alpha by equal amounts.
        let slope = alpha0 / total as f64;
        prop_assert!((at(t) - at(u) - slope * (u as f64 - t as f64)).abs() <= 1e-12);
        if t <= u {
            prop_assert!(at(t) >= at(u));
        }
    }
}
