//! Labelme JSON polygons to and from label masks.
//!
//! Pixel `(row, col)` has its center at `x = col`, `y = row` and covers the
//! unit square around it. A pixel belongs to a polygon when its center is
//! inside under the even-odd rule or lies on the polygon outline.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::classmap::ClassMap;
use crate::error::{Error, Result};
use crate::pseudo_label::{LabelMask, IGNORE};

/// Version string written into exported files.
pub const LABELME_VERSION: &str = "5.2.1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelmeShape {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub group_id: Option<Value>,
    #[serde(default = "polygon")]
    pub shape_type: String,
    #[serde(default)]
    pub flags: Map<String, Value>,
    /// Fields this crate does not interpret, kept for read-modify-write.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

fn polygon() -> String {
    "polygon".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelmeDocument {
    pub version: String,
    #[serde(default)]
    pub flags: Map<String, Value>,
    pub shapes: Vec<LabelmeShape>,
    #[serde(rename = "imagePath", default)]
    pub image_path: String,
    #[serde(rename = "imageData", default)]
    pub image_data: Option<String>,
    #[serde(rename = "imageHeight")]
    pub image_height: usize,
    #[serde(rename = "imageWidth")]
    pub image_width: usize,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl LabelmeDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("Labelme file", e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn load_labelme(path: &Path) -> Result<LabelmeDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabelmeDocument::from_json(&text)
}

pub fn save_labelme(path: &Path, doc: &LabelmeDocument) -> Result<()> {
    std::fs::write(path, doc.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

/// Rasterizes the document's shapes in file order onto an all-IGNORE canvas.
pub fn read_labelme(doc: &LabelmeDocument, cm: &ClassMap, height: usize, width: usize) -> Result<LabelMask> {
    if doc.image_height != height || doc.image_width != width {
        return Err(Error::ShapeMismatch(format!(
            "annotation is {}x{}, expected {height}x{width}",
            doc.image_height, doc.image_width
        )));
    }
    let mut mask = LabelMask::filled(height, width, IGNORE);
    if height == 0 || width == 0 {
        return Ok(mask);
    }
    let (xmax, ymax) = (width as f64 - 0.5, height as f64 - 0.5);
    for (n, shape) in doc.shapes.iter().enumerate() {
        let value = cm.index_of(&shape.label)?;
        let raw = match shape.shape_type.as_str() {
            "polygon" => shape.points.clone(),
            "rectangle" if shape.points.len() == 2 => {
                let [[x0, y0], [x1, y1]] = [shape.points[0], shape.points[1]];
                vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
            }
            other => {
                return Err(Error::format(
                    "Labelme file",
                    format!("shape {n} (`{}`): unsupported shape type `{other}`", shape.label),
                ))
            }
        };
        if raw.len() < 3 {
            return Err(Error::format(
                "Labelme file",
                format!("shape {n} (`{}`) has {} points, need at least 3", shape.label, raw.len()),
            ));
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::format("Labelme file", format!("shape {n} has non-finite coordinates")));
        }
        let pts: Vec<[f64; 2]> = raw
            .iter()
            .map(|&[x, y]| [x.clamp(-0.5, xmax), y.clamp(-0.5, ymax)])
            .collect();
        fill_polygon(&mut mask, &pts, value);
    }
    Ok(mask)
}

/// Scanline fill: even-odd interior plus pixel centers on the outline.
fn fill_polygon(mask: &mut LabelMask, pts: &[[f64; 2]], value: u8) {
    let (h, w) = (mask.height(), mask.width());
    let edges: Vec<([f64; 2], [f64; 2])> = (0..pts.len()).map(|i| (pts[i], pts[(i + 1) % pts.len()])).collect();
    let ylo = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let yhi = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let rows = (ylo.ceil().max(0.0) as usize)..=(yhi.floor().min(h as f64 - 1.0) as usize);
    let last_col = w as f64 - 1.0;
    let mut paint = |row: usize, a: f64, b: f64| {
        let (lo, hi) = (a.ceil().max(0.0), b.floor().min(last_col));
        if lo <= hi {
            for c in lo as usize..=hi as usize {
                mask.set(row, c, value);
            }
        }
    };
    let mut xs = Vec::new();
    for row in rows {
        let y = row as f64;
        xs.clear();
        for &([x0, y0], [x1, y1]) in &edges {
            if y0 == y1 {
                if y0 == y {
                    paint(row, x0.min(x1), x0.max(x1));
                }
                continue;
            }
            if y < y0.min(y1) || y > y0.max(y1) {
                continue;
            }
            let x = x0 + (y - y0) * (x1 - x0) / (y1 - y0);
            if x == x.round() {
                paint(row, x, x);
            }
            // Half-open in y so shared vertices count once.
            if (y0 <= y && y < y1) || (y1 <= y && y < y0) {
                xs.push(x);
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            paint(row, pair[0], pair[1]);
        }
    }
}

/// Exports each 4-connected same-class region as one polygon along pixel
/// boundaries. IGNORE pixels produce no shape.
pub fn write_labelme(mask: &LabelMask, cm: &ClassMap) -> Result<LabelmeDocument> {
    let (h, w) = (mask.height(), mask.width());
    let mut region = vec![usize::MAX; h * w];
    let mut shapes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        let value = mask.values()[start];
        if value == IGNORE || region[start] != usize::MAX {
            continue;
        }
        let label = cm.name_of(value)?.to_string();
        let id = shapes.len();
        let mut members = Vec::new();
        region[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (r, c) = (i / w, i % w);
            let neighbors = [
                (r > 0).then(|| i - w),
                (r + 1 < h).then(|| i + w),
                (c > 0).then(|| i - 1),
                (c + 1 < w).then(|| i + 1),
            ];
            for j in neighbors.into_iter().flatten() {
                if region[j] == usize::MAX && mask.values()[j] == value {
                    region[j] = id;
                    queue.push_back(j);
                }
            }
        }
        shapes.push(LabelmeShape {
            label,
            points: trace_region(&members, &region, id, h, w),
            group_id: None,
            shape_type: polygon(),
            flags: Map::new(),
            extra: Map::new(),
        });
    }
    Ok(LabelmeDocument {
        version: LABELME_VERSION.to_string(),
        flags: Map::new(),
        shapes,
        image_path: String::new(),
        image_data: None,
        image_height: h,
        image_width: w,
        extra: Map::new(),
    })
}

/// Corner `(i, j)` sits at `x = j − 0.5`, `y = i − 0.5`.
type Corner = (usize, usize);

/// Boundary loops of one region, stitched into a single point list.
///
/// Loops are joined by L-shaped bridges along half-integer lines, each
/// walked once out and once back, so they hold no pixel centers and add an
/// even number of crossings to any scanline.
fn trace_region(members: &[usize], region: &[usize], id: usize, h: usize, w: usize) -> Vec<[f64; 2]> {
    let inside = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && region[r as usize * w + c as usize] == id
    };
    // Clockwise (in image coordinates) directed boundary edges.
    let mut out: HashMap<Corner, Vec<Corner>> = HashMap::new();
    let mut edge_count = 0;
    for &i in members {
        let (r, c) = (i / w, i % w);
        let (ri, ci) = (r as isize, c as isize);
        let sides = [
            (inside(ri - 1, ci), (r, c), (r, c + 1)),
            (inside(ri, ci + 1), (r, c + 1), (r + 1, c + 1)),
            (inside(ri + 1, ci), (r + 1, c + 1), (r + 1, c)),
            (inside(ri, ci - 1), (r + 1, c), (r, c)),
        ];
        for (covered, a, b) in sides {
            if !covered {
                out.entry(a).or_default().push(b);
                edge_count += 1;
            }
        }
    }
    // Deterministic walk order.
    let mut starts: Vec<Corner> = out.keys().copied().collect();
    starts.sort_unstable();
    for v in out.values_mut() {
        v.sort_unstable_by(|a, b| b.cmp(a));
    }

    let mut loops: Vec<Vec<Corner>> = Vec::new();
    let mut used = 0;
    for s in starts {
        while out.get(&s).is_some_and(|v| !v.is_empty()) {
            let mut lp = vec![s];
            let mut cur = s;
            loop {
                let next = out.get_mut(&cur).and_then(Vec::pop).expect("balanced boundary degrees");
                used += 1;
                if next == s {
                    break;
                }
                lp.push(next);
                cur = next;
            }
            loops.push(lp);
        }
    }
    debug_assert_eq!(used, edge_count);

    let origin = loops[0][0];
    let mut path: Vec<Corner> = loops[0].clone();
    path.push(origin);
    for lp in &loops[1..] {
        let target = lp[0];
        let bridge = [(origin.0, target.1), target];
        path.extend_from_slice(&bridge);
        path.extend_from_slice(&lp[1..]);
        path.push(target);
        path.push((origin.0, target.1));
        path.push(origin);
    }
    // The closing vertex repeats the first.
    path.pop();
    simplify(&mut path);
    path.into_iter()
        .map(|(i, j)| [j as f64 - 0.5, i as f64 - 0.5])
        .collect()
}

/// Drops repeated points and interior points of straight runs.
fn simplify(path: &mut Vec<Corner>) {
    path.dedup();
    while path.len() > 1 && path.first() == path.last() {
        path.pop();
    }
    let dir = |a: Corner, b: Corner| {
        (
            (b.0 as isize - a.0 as isize).signum(),
            (b.1 as isize - a.1 as isize).signum(),
        )
    };
    let mut changed = true;
    while changed && path.len() > 3 {
        changed = false;
        let n = path.len();
        let mut keep = vec![true; n];
        for k in 0..n {
            let (prev, cur, next) = (path[(k + n - 1) % n], path[k], path[(k + 1) % n]);
            if dir(prev, cur) == dir(cur, next) && (k == 0 || keep[k - 1]) {
                keep[k] = false;
                changed = true;
            }
        }
        let mut it = keep.iter();
        path.retain(|_| *it.next().unwrap());
    }
}
