//! Dense per-pixel maps and the elementary kernels built on them.
//!
//! Every map stores its values row-major with the per-pixel vector
//! contiguous (`pixel * depth + channel`). All arithmetic is `f64`; the
//! binary file formats store `f32`.

use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the per-pixel probability sum.
pub const SUM_TOLERANCE: f64 = 1e-6;

const PROB_MAGIC: &[u8; 4] = b"ILMP";

/// Per-pixel softmax probabilities, `height × width × classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        check_len(height, width, classes, values.len(), "ProbMap")?;
        if classes == 0 {
            return Err(Error::invalid("ProbMap needs at least one class"));
        }
        for (i, px) in values.chunks_exact(classes).enumerate() {
            let mut sum = 0.0;
            for &v in px {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::invalid(format!("pixel {i}: probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::invalid(format!("pixel {i}: probabilities sum to {sum}")));
            }
        }
        Ok(ProbMap { height, width, classes, values })
    }

    /// Caller guarantees the invariants (used for freshly computed softmax output).
    pub(crate) fn from_softmax(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width * classes);
        ProbMap { height, width, classes, values }
    }

    /// A map where every pixel has the same distribution.
    pub fn constant(height: usize, width: usize, pixel: &[f64]) -> Result<Self> {
        let values = pixel.iter().copied().cycle().take(height * width * pixel.len()).collect();
        ProbMap::new(height, width, pixel.len(), values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.values[index * self.classes..(index + 1) * self.classes]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.classes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::encode(
            PROB_MAGIC,
            [self.height as u32, self.width as u32, self.classes as u32],
            self.values.iter().copied(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, values) = binio::decode(bytes, PROB_MAGIC, "ILMP file", binio::product)?;
        ProbMap::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::dim_u32(self.classes.max(self.height).max(self.width), "ILMP file")?;
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ProbMap::from_bytes(&binio::read_file(path)?)
    }
}

/// Pre-softmax scores, same layout as [`ProbMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        check_len(height, width, classes, values.len(), "LogitMap")?;
        if classes == 0 {
            return Err(Error::invalid("LogitMap needs at least one class"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite logit {} at flat index {i}", values[i])));
        }
        Ok(LogitMap { height, width, classes, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        binio::encode(
            PROB_MAGIC,
            [self.height as u32, self.width as u32, self.classes as u32],
            self.values.iter().copied(),
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, values) = binio::decode(bytes, PROB_MAGIC, "ILMP file", binio::product)?;
        LogitMap::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, values)
    }
}

/// Per-pixel Shannon entropy in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_len(height, width, 1, values.len(), "EntropyMap")?;
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("entropy {v} is not a finite non-negative value")));
        }
        Ok(EntropyMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_len(height: usize, width: usize, depth: usize, len: usize, what: &str) -> Result<()> {
    let expected = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(depth))
        .ok_or_else(|| Error::invalid(format!("{what} dimensions overflow")))?;
    if expected != len {
        return Err(Error::ShapeMismatch(format!(
            "{what} {height}x{width}x{depth} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

/// Max-shifted softmax of one pixel, in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(logits: &LogitMap) -> ProbMap {
    let mut values = logits.values.clone();
    for px in values.chunks_exact_mut(logits.classes) {
        softmax_in_place(px);
    }
    ProbMap::from_softmax(logits.height, logits.width, logits.classes, values)
}

/// `-Σ p ln p` for one pixel, with `0 · ln 0 = 0`.
pub fn pixel_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.max(PROB_FLOOR).ln();
        }
    }
    h
}

pub fn entropy_map(p: &ProbMap) -> EntropyMap {
    EntropyMap {
        height: p.height,
        width: p.width,
        values: p.pixels().map(pixel_entropy).collect(),
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// The `q`-th percentile (`q` in `[0, 100]`) with linear interpolation
/// between closest ranks, bit-compatible with NumPy's default `percentile`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty set"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile {q} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("quantile input contains NaN"));
    }
    let n = values.len();
    let pos = (q / 100.0) * (n - 1) as f64;
    let lo = (pos.floor() as usize).min(n - 1);
    let t = pos - lo as f64;

    let mut scratch = values.to_vec();
    let (_, &mut a, upper) = scratch.select_nth_unstable_by(lo, f64::total_cmp);
    if lo + 1 >= n || t == 0.0 {
        return Ok(a);
    }
    // The next order statistic is the minimum of everything above `lo`.
    let b = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(lerp(a, b, t))
}

/// NumPy's two-sided linear interpolation.
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let diff = b - a;
    if t >= 0.5 {
        b - diff * (1.0 - t)
    } else {
        a + diff * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm(classes: usize, values: Vec<f64>) -> ProbMap {
        let n = values.len() / classes;
        ProbMap::new(1, n, classes, values).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let l = LogitMap::new(1, 1, 4, vec![0.0; 4]).unwrap();
        assert_eq!(softmax(&l).values(), &[0.25; 4]);

        let l = LogitMap::new(1, 1, 2, vec![-3.7, -3.7]).unwrap();
        assert_eq!(softmax(&l).values(), &[0.5, 0.5]);

        // Scalar oracle: e^0 / (e^0 + e^{ln 3}) = 1/4.
        let l = LogitMap::new(1, 1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let p = softmax(&l);
        assert!((p.values()[0] - 0.25).abs() < 1e-12);
        assert!((p.values()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let l = LogitMap::new(1, 1, 3, vec![1000.0, 999.0, -1000.0]).unwrap();
        let p = softmax(&l);
        assert!(p.values().iter().all(|v| v.is_finite()));
        assert!((p.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let err = LogitMap::new(1, 1, 2, vec![0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        assert!(LogitMap::new(1, 1, 2, vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let e = entropy_map(&pm(2, vec![1.0, 0.0, 0.5, 0.5, 0.9, 0.1]));
        assert_eq!(e.values()[0], 0.0);
        assert!((e.values()[1] - 2f64.ln()).abs() < 1e-12);
        assert!((e.values()[2] - 0.325_082_973_391_448_2).abs() < 1e-9);
    }

    #[test]
    fn probmap_rejects_bad_rows() {
        assert!(ProbMap::new(1, 1, 2, vec![0.6, 0.6]).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![1.5, -0.5]).is_err());
        assert!(matches!(
            ProbMap::new(2, 2, 2, vec![0.5; 6]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[5.0], 0.0).unwrap(), 5.0);
        assert_eq!(quantile(&[5.0], 37.5).unwrap(), 5.0);
        assert!((quantile(&[0.4, 0.1, 0.3, 0.2], 75.0).unwrap() - 0.325).abs() < 1e-12);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 100.0).unwrap(), 3.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
    }

    #[test]
    fn quantile_errors() {
        assert!(matches!(quantile(&[], 50.0), Err(Error::InvalidInput(_))));
        assert!(quantile(&[1.0], 100.5).is_err());
        assert!(quantile(&[1.0, f64::NAN], 50.0).is_err());
    }

    #[test]
    fn ilmp_round_trip_and_length_check() {
        let p = pm(2, vec![0.25, 0.75, 1.0, 0.0]);
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..4], b"ILMP");
        assert_eq!(ProbMap::from_bytes(&bytes).unwrap(), p);
        assert!(ProbMap::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(ProbMap::from_bytes(&longer).is_err());
    }
}
