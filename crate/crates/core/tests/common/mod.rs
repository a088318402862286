#![allow(dead_code)]

use ilm_core::numerics::ProbMap;
use ilm_core::pseudo_label::{LabelMask, IGNORE};
use proptest::prelude::*;

/// Normalized probability maps up to 8×8×7, with occasional exact zeros.
pub fn prob_map() -> impl Strategy<Value = ProbMap> {
    (1usize..=8, 1usize..=8, 2usize..=7).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(prop_oneof![1 => Just(0.0), 6 => 0.0..1.0f64], h * w * c).prop_map(move |mut v| {
            for px in v.chunks_exact_mut(c) {
                if px.iter().all(|&x| x == 0.0) {
                    px[0] = 1.0;
                }
                let s: f64 = px.iter().sum();
                px.iter_mut().for_each(|x| *x /= s);
            }
            ProbMap::new(h, w, c, v).unwrap()
        })
    })
}

/// A mask over `classes` classes with about one pixel in five ignored.
pub fn mask(h: usize, w: usize, classes: u8) -> impl Strategy<Value = LabelMask> {
    prop::collection::vec(prop_oneof![1 => Just(IGNORE), 4 => 0..classes], h * w)
        .prop_map(move |v| LabelMask::new(h, w, v).unwrap())
}

pub fn oracle_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
}

pub fn oracle_argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..p.len() {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

/// Sort, then interpolate linearly between closest ranks.
pub fn oracle_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
