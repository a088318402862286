//! Class-index masks and entropy-thresholded pseudo-labelling.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, entropy_map, pixel_entropy, quantile, EntropyMap, ProbMap};

/// Reserved mask value for pixels that carry no label.
pub const IGNORE: u8 = 255;

/// `height × width` raster of class indices or [`IGNORE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height.checked_mul(width) != Some(values.len()) {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(LabelMask { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMask {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.values[row * self.width + col] = value;
    }

    pub fn num_pixels(&self) -> usize {
        self.values.len()
    }

    pub fn num_valid(&self) -> usize {
        self.values.iter().filter(|&&v| v != IGNORE).count()
    }

    /// Checks every value is a class index below `classes` or [`IGNORE`].
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            Some(v) => Err(Error::invalid(format!("mask value {v} is not a class index below {classes}"))),
            None => Ok(()),
        }
    }

    /// Binary PGM (`P5`, maxval 255), one byte per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.values);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = pgm_token(bytes, &mut pos)?;
        if magic != b"P5" {
            return Err(Error::format("PGM file", "expected P5 magic"));
        }
        let width = pgm_number(bytes, &mut pos)?;
        let height = pgm_number(bytes, &mut pos)?;
        let maxval = pgm_number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::format("PGM file", format!("maxval {maxval}, expected 255")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::format("PGM file", "missing raster separator")),
        }
        let raster = &bytes[pos..];
        if raster.len() != width * height {
            return Err(Error::format(
                "PGM file",
                format!("raster has {} bytes, header says {width}x{height}", raster.len()),
            ));
        }
        LabelMask::new(height, width, raster.to_vec())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        LabelMask::from_pgm(&bytes)
    }
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PGM file", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn pgm_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = pgm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PGM file", "bad header number"))
}

/// Linear decay of the ignored-pixel fraction over training epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha0: f64,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn new(alpha0: f64, total_epochs: usize) -> Result<Self> {
        let s = Schedule { alpha0, total_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return Err(Error::invalid(format!("alpha0 {} outside (0, 1]", self.alpha0)));
        }
        if self.total_epochs == 0 {
            return Err(Error::invalid("total_epochs must be at least 1"));
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            alpha0: 0.2,
            total_epochs: 10,
        }
    }
}

/// `alpha0 · (1 − t / total_epochs)`.
pub fn alpha_at(s: &Schedule, t: usize) -> Result<f64> {
    if t > s.total_epochs {
        return Err(Error::invalid(format!("epoch {t} beyond schedule length {}", s.total_epochs)));
    }
    Ok(s.alpha0 * (1.0 - t as f64 / s.total_epochs as f64))
}

/// Which pixels the entropy quantile is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    /// Unlabeled images of the current training step.
    #[default]
    Batch,
    /// All unlabeled images, recomputed at the start of each epoch.
    Epoch,
}

/// Entropy threshold leaving the most uncertain `alpha` fraction unlabeled:
/// the `100·(1 − alpha)` percentile of all pixel entropies.
pub fn gamma_threshold(entropies: &[&EntropyMap], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let flat: Vec<f64> = entropies.iter().flat_map(|e| e.values().iter().copied()).collect();
    if flat.is_empty() {
        return Err(Error::invalid("entropy threshold over zero pixels"));
    }
    quantile(&flat, 100.0 * (1.0 - alpha))
}

/// Argmax class where the pixel entropy is strictly below `gamma`, [`IGNORE`] elsewhere.
pub fn generate_pseudolabels(p: &ProbMap, gamma: f64) -> LabelMask {
    let values = p
        .pixels()
        .map(|px| {
            if pixel_entropy(px) < gamma {
                argmax(px) as u8
            } else {
                IGNORE
            }
        })
        .collect();
    LabelMask {
        height: p.height(),
        width: p.width(),
        values,
    }
}

/// Pseudo-labels for a set of teacher predictions sharing one threshold.
pub fn pseudolabel_batch(probs: &[ProbMap], alpha: f64) -> Result<(f64, Vec<LabelMask>)> {
    let ents: Vec<EntropyMap> = probs.iter().map(entropy_map).collect();
    let refs: Vec<&EntropyMap> = ents.iter().collect();
    let gamma = gamma_threshold(&refs, alpha)?;
    Ok((gamma, probs.iter().map(|p| generate_pseudolabels(p, gamma)).collect()))
}
