//! Image-level uncertainty scoring and budgeted top-k selection.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{pixel_entropy, ProbMap};

/// One image id with its mean prediction entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub image_id: String,
    pub score: f64,
}

impl UncertaintyRecord {
    pub fn new(image_id: impl Into<String>, score: f64) -> Result<Self> {
        if !(score.is_finite() && score >= 0.0) {
            return Err(Error::invalid(format!("uncertainty score {score} must be finite and >= 0")));
        }
        Ok(UncertaintyRecord {
            image_id: image_id.into(),
            score,
        })
    }
}

/// How many images to take from the pool.
///
/// Serialized as an integer for counts, a float for fractions, and
/// accepted as a string such as `"30"` or `"1.2%"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, try_from = "BudgetRepr")]
pub enum SelectionBudget {
    Count(usize),
    /// Fraction of a reference pool size, in `[0, 1]`.
    Fraction(f64),
}

impl SelectionBudget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionBudget::Count(_) => Ok(()),
            SelectionBudget::Fraction(f) if (0.0..=1.0).contains(&f) => Ok(()),
            SelectionBudget::Fraction(f) => Err(Error::invalid(format!("budget fraction {f} outside [0, 1]"))),
        }
    }

    /// Image count against a pool of `pool` images, rounding half away from zero.
    pub fn resolve(&self, pool: usize) -> usize {
        match *self {
            SelectionBudget::Count(n) => n,
            SelectionBudget::Fraction(f) => (f * pool as f64).round() as usize,
        }
    }

    /// Parses `"30"`, `"1%"` or `"1.2%"`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let b = if let Some(p) = s.strip_suffix('%') {
            let pct: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad percentage budget `{s}`")))?;
            SelectionBudget::Fraction(pct / 100.0)
        } else {
            SelectionBudget::Count(
                s.parse()
                    .map_err(|_| Error::invalid(format!("bad budget `{s}`: expected a count or a percentage")))?,
            )
        };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Count(u64),
    Fraction(f64),
    Text(String),
}

impl TryFrom<BudgetRepr> for SelectionBudget {
    type Error = Error;

    fn try_from(r: BudgetRepr) -> Result<Self> {
        let b = match r {
            BudgetRepr::Count(n) => SelectionBudget::Count(n as usize),
            BudgetRepr::Fraction(f) => SelectionBudget::Fraction(f),
            BudgetRepr::Text(s) => return SelectionBudget::parse(&s),
        };
        b.validate()?;
        Ok(b)
    }
}

impl std::fmt::Display for SelectionBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionBudget::Count(n) => write!(f, "{n}"),
            SelectionBudget::Fraction(x) => write!(f, "{}%", x * 100.0),
        }
    }
}

/// Mean per-pixel entropy of a prediction map.
pub fn uncertainty_score(p: &ProbMap) -> f64 {
    let n = p.num_pixels();
    if n == 0 {
        return 0.0;
    }
    p.pixels().map(pixel_entropy).sum::<f64>() / n as f64
}

/// Scores many predictions in parallel. Output order follows the input.
pub fn score_all<'a, I>(items: I) -> Vec<UncertaintyRecord>
where
    I: IntoParallelIterator<Item = (&'a str, &'a ProbMap)>,
{
    items
        .into_par_iter()
        .map(|(id, p)| UncertaintyRecord {
            image_id: id.to_string(),
            score: uncertainty_score(p),
        })
        .collect()
}

/// Result of [`rank_and_select`].
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ids: Vec<String>,
    pub requested: usize,
    /// Set when the request exceeded the pool and was clamped.
    pub clamped: bool,
}

fn ranking_order(a: &UncertaintyRecord, b: &UncertaintyRecord) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id))
}

/// Sorts records by score descending, ties by ascending id.
pub fn rank(records: &mut [UncertaintyRecord]) {
    records.sort_by(ranking_order);
}

/// Top of the ranking under `budget`. Fractions resolve against `records.len()`.
pub fn rank_and_select(records: &[UncertaintyRecord], budget: SelectionBudget) -> Result<Selection> {
    budget.validate()?;
    let requested = budget.resolve(records.len());
    select_count(records, requested)
}

/// Top `requested` ids of the ranking, clamped to the number of records.
pub fn select_count(records: &[UncertaintyRecord], requested: usize) -> Result<Selection> {
    if let Some(r) = records.iter().find(|r| !(r.score.is_finite() && r.score >= 0.0)) {
        return Err(Error::invalid(format!("record `{}` has invalid score {}", r.image_id, r.score)));
    }
    let clamped = requested > records.len();
    if clamped {
        log::warn!(
            "budget of {requested} images exceeds the pool of {}; selecting all",
            records.len()
        );
    }
    let mut sorted = records.to_vec();
    rank(&mut sorted);
    let ids = sorted
        .into_iter()
        .take(requested)
        .map(|r| r.image_id)
        .collect();
    Ok(Selection {
        ids,
        requested,
        clamped,
    })
}

/// Tab-separated score table, one ranked line per image.
pub fn format_score_table(records: &[UncertaintyRecord]) -> String {
    let mut sorted = records.to_vec();
    rank(&mut sorted);
    let mut out = String::new();
    for r in &sorted {
        let _ = writeln!(out, "{}\t{:.9}", r.image_id, r.score);
    }
    out
}

pub fn parse_score_table(text: &str) -> Result<Vec<UncertaintyRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line
            .split_once('\t')
            .ok_or_else(|| Error::format("score table", format!("line {}: expected `<id>\\t<score>`", n + 1)))?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| Error::format("score table", format!("line {}: bad score `{score}`", n + 1)))?;
        out.push(UncertaintyRecord::new(id, score)?);
    }
    Ok(out)
}

pub fn save_score_table(path: &Path, records: &[UncertaintyRecord]) -> Result<()> {
    std::fs::write(path, format_score_table(records)).map_err(|e| Error::io(path, e))
}

pub fn load_score_table(path: &Path) -> Result<Vec<UncertaintyRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_score_table(&text)
}
