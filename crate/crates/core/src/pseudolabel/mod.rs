//! Pseudo-label generation for non-base classes.
//!
//! Pipeline per image: take the adapted model's full-category score map;
//! drop every pixel whose raw argmax lands on a base class (base classes act
//! as background); per non-base class, threshold the (min-max normalized)
//! score column at `delta` and extract connected regions; score each
//! surviving proposal against each region by rasterized mask IoU; emit one
//! label per proposal — its best class — when the IoU clears `gamma`.

pub mod rpn;

use crate::error::{Error, Result};
use crate::geom::{BoxF, PixelBox};
use crate::synthdata::CategorySet;
use crate::vlm::DenseScoreMap;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Class-agnostic box proposal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoxF,
    pub objectness: f64,
}

/// A 4-connected (or 8-connected, behind the flag) component of a
/// thresholded score column.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectedRegion {
    pub class_index: usize,
    /// Grid pixel indices (`p = y * grid_w + x`), ascending.
    pub pixels: Vec<u32>,
    /// Tight hull of the mask in image coordinates.
    pub hull: PixelBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreNormalization {
    /// Per-column min-max rescale to [0,1] before thresholding.
    MinMax,
    /// Threshold raw scores directly.
    None,
}

impl std::fmt::Display for ScoreNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreNormalization::MinMax => write!(f, "minmax"),
            ScoreNormalization::None => write!(f, "none"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub delta: f64,
    pub gamma: f64,
    pub objectness_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            delta: 0.6,
            gamma: 0.4,
            objectness_min: 0.98,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("gamma", self.gamma),
            ("objectness_min", self.objectness_min),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0,1)")));
            }
        }
        Ok(())
    }
}

/// A class-tagged box with IoU-derived confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub image_id: u32,
    pub bbox: BoxF,
    pub class_index: usize,
    pub confidence: f64,
}

/// Connected components of `{pixel : score >= delta}` on a score column.
///
/// Components are enumerated in row-major order of their first pixel; pixel
/// lists are ascending. The hull is expressed in image coordinates via
/// `stride`.
pub fn connected_regions(
    scores: &[f64],
    delta: f64,
    grid: (usize, usize),
    stride: usize,
    class_index: usize,
    connectivity: Connectivity,
) -> Vec<ConnectedRegion> {
    connected_regions_masked(scores, delta, None, grid, stride, class_index, connectivity)
}

/// Same, with an eligibility mask (used for base-as-background suppression).
pub fn connected_regions_masked(
    scores: &[f64],
    delta: f64,
    eligible: Option<&[bool]>,
    grid: (usize, usize),
    stride: usize,
    class_index: usize,
    connectivity: Connectivity,
) -> Vec<ConnectedRegion> {
    let (h, w) = grid;
    assert_eq!(scores.len(), h * w, "score column does not match grid");
    let in_set = |p: usize| -> bool {
        scores[p] >= delta && eligible.map_or(true, |e| e[p]) && scores[p].is_finite()
    };

    let mut visited = vec![false; h * w];
    let mut regions = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if visited[start] || !in_set(start) {
            continue;
        }
        let mut pixels = Vec::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            pixels.push(p as u32);
            let (y, x) = (p / w, p % w);
            let mut push = |ny: isize, nx: isize| {
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    return;
                }
                let np = ny as usize * w + nx as usize;
                if !visited[np] && in_set(np) {
                    visited[np] = true;
                    queue.push_back(np);
                }
            };
            push(y as isize - 1, x as isize);
            push(y as isize + 1, x as isize);
            push(y as isize, x as isize - 1);
            push(y as isize, x as isize + 1);
            if connectivity == Connectivity::Eight {
                push(y as isize - 1, x as isize - 1);
                push(y as isize - 1, x as isize + 1);
                push(y as isize + 1, x as isize - 1);
                push(y as isize + 1, x as isize + 1);
            }
        }
        pixels.sort_unstable();
        let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for &p in &pixels {
            let (y, x) = (p as usize / w, p as usize % w);
            x1 = x1.min(x as u32);
            y1 = y1.min(y as u32);
            x2 = x2.max(x as u32 + 1);
            y2 = y2.max(y as u32 + 1);
        }
        regions.push(ConnectedRegion {
            class_index,
            pixels,
            hull: PixelBox::new(
                x1 * stride as u32,
                y1 * stride as u32,
                x2 * stride as u32,
                y2 * stride as u32,
            ),
        });
    }
    regions
}

/// Grid cells covered by a box rasterized half-open at `stride`.
/// Cells are clamped to the grid; a box collapsing to zero cells is signalled
/// by an empty range.
fn rasterize_box(bbox: &BoxF, grid: (usize, usize), stride: usize) -> (usize, usize, usize, usize) {
    let (h, w) = grid;
    let s = stride as f64;
    let gx1 = (bbox.x1 / s).floor().max(0.0) as usize;
    let gy1 = (bbox.y1 / s).floor().max(0.0) as usize;
    let gx2 = ((bbox.x2 / s).ceil().max(0.0) as usize).min(w);
    let gy2 = ((bbox.y2 / s).ceil().max(0.0) as usize).min(h);
    (gx1.min(w), gy1.min(h), gx2, gy2)
}

/// Mask IoU between a rasterized proposal box and a region's pixel set.
/// A box rasterizing to zero cells yields 0 with a warning.
pub fn mask_iou(
    proposal: &BoxF,
    region: &ConnectedRegion,
    grid: (usize, usize),
    stride: usize,
) -> f64 {
    let (gx1, gy1, gx2, gy2) = rasterize_box(proposal, grid, stride);
    if gx2 <= gx1 || gy2 <= gy1 {
        log::warn!("degenerate box {proposal:?} rasterizes to zero grid cells");
        return 0.0;
    }
    let w = grid.1;
    let box_cells = (gx2 - gx1) * (gy2 - gy1);
    let mut inter = 0usize;
    for &p in &region.pixels {
        let (y, x) = (p as usize / w, p as usize % w);
        if x >= gx1 && x < gx2 && y >= gy1 && y < gy2 {
            inter += 1;
        }
    }
    let union = box_cells + region.pixels.len() - inter;
    inter as f64 / union as f64
}

/// End-to-end pseudo-label generation for one image.
pub fn generate_pseudo_labels(
    s_full: &DenseScoreMap,
    image_id: u32,
    proposals: &[Proposal],
    thresholds: &Thresholds,
    categories: &CategorySet,
    stride: usize,
    normalization: ScoreNormalization,
    connectivity: Connectivity,
) -> Result<Vec<PseudoLabel>> {
    thresholds.validate()?;
    if s_full.n_categories() != categories.len()
        || s_full.names != categories.names()
    {
        return Err(Error::Input(
            "score map categories do not match the category set".into(),
        ));
    }

    // base-as-background: pixels whose raw argmax is a base class drop out
    let mut eligible = vec![false; s_full.values.nrows()];
    for (p, row) in s_full.values.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (c, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        eligible[p] = !categories.is_base(best);
    }

    let thresh_scores = match normalization {
        ScoreNormalization::MinMax => s_full.min_max_normalized(),
        ScoreNormalization::None => s_full.clone(),
    };

    let mut regions = Vec::new();
    for class in categories.novel_indices() {
        let column: Vec<f64> = thresh_scores.values.column(class).iter().copied().collect();
        regions.extend(connected_regions_masked(
            &column,
            thresholds.delta,
            Some(&eligible),
            s_full.grid,
            stride,
            class,
            connectivity,
        ));
    }

    let mut labels = Vec::new();
    for proposal in proposals {
        if proposal.objectness < thresholds.objectness_min {
            continue;
        }
        // best class for this proposal; ties fall to the earlier region
        let mut best: Option<(f64, usize)> = None;
        for (ri, region) in regions.iter().enumerate() {
            let score = mask_iou(&proposal.bbox, region, s_full.grid, stride);
            if score < thresholds.gamma {
                continue;
            }
            let better = match best {
                None => true,
                Some((s, bi)) => {
                    score > s
                        || (score == s && region.class_index < regions[bi].class_index)
                }
            };
            if better {
                best = Some((score, ri));
            }
        }
        if let Some((score, ri)) = best {
            labels.push(PseudoLabel {
                image_id,
                bbox: proposal.bbox,
                class_index: regions[ri].class_index,
                confidence: score,
            });
        }
    }
    Ok(labels)
}

// ---- pseudo-label file -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub bbox: [f64; 4],
    pub category_index: usize,
    pub confidence: f64,
}

/// One JSON line per image in the pseudo-label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub image_id: u32,
    pub labels: Vec<LabelEntry>,
    pub thresholds: Thresholds,
    pub normalization: String,
}

impl PseudoLabelRecord {
    pub fn from_labels(
        image_id: u32,
        labels: &[PseudoLabel],
        thresholds: Thresholds,
        normalization: ScoreNormalization,
    ) -> Self {
        Self {
            image_id,
            labels: labels
                .iter()
                .map(|l| LabelEntry {
                    bbox: [l.bbox.x1, l.bbox.y1, l.bbox.x2, l.bbox.y2],
                    category_index: l.class_index,
                    confidence: l.confidence,
                })
                .collect(),
            thresholds,
            normalization: normalization.to_string(),
        }
    }
}

pub fn write_pseudo_label_file(path: &Path, records: &[PseudoLabelRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(std::fs::write(path, out)?)
}

pub fn read_pseudo_label_file(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

// ---- score-map container -------------------------------------------------------

pub const SCOREMAP_MAGIC: &[u8; 8] = b"P3SMAP1\0";

/// Binary score-map exchange format: magic, `H'`, `W'`, `|C|` (u32 LE), then
/// row-major (pixel-major) little-endian f32 scores.
pub fn write_score_map(path: &Path, s: &DenseScoreMap) -> Result<()> {
    let (h, w) = s.grid;
    let c = s.n_categories();
    let mut out = Vec::with_capacity(20 + h * w * c * 4);
    out.extend_from_slice(SCOREMAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for v in s.values.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_score_map(path: &Path, names: Vec<String>) -> Result<DenseScoreMap> {
    let bytes = std::fs::read(path)?;
    let err = |m: &str| Error::Codec {
        path: path.display().to_string(),
        message: m.into(),
    };
    if bytes.len() < 20 || &bytes[..8] != SCOREMAP_MAGIC {
        return Err(err("bad magic"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let payload = &bytes[20..];
    if payload.len() != h * w * c * 4 {
        return Err(err("payload size mismatch"));
    }
    if !names.is_empty() && names.len() != c {
        return Err(err("category name count mismatch"));
    }
    let mut values = Vec::with_capacity(h * w * c);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(DenseScoreMap {
        values: ndarray::Array2::from_shape_vec((h * w, c), values)
            .map_err(|e| err(&e.to_string()))?,
        grid: (h, w),
        names,
    })
}

#[cfg(test)]
mod tests;
