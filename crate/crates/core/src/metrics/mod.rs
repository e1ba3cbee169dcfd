//! Segmentation quality metrics over hard label grids.
//!
//! Conventions shared by every metric:
//! - ground-truth label 0 is background, every other label is an instance;
//! - predicted labels are arbitrary ids, only the induced partition matters;
//! - distances are in grid-cell units between cell centers.

mod hungarian;
mod report;

pub use hungarian::assign_max;
pub use report::{mean_std, MetricReport, MetricRow, SceneMetrics, METRIC_NAMES};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Gt,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub provenance: Provenance,
}

impl MaskSet {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, provenance: Provenance) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Length {
                what: "mask labels",
                expected: height * width,
                got: labels.len(),
            });
        }
        Ok(MaskSet {
            height,
            width,
            labels,
            provenance,
        })
    }

    pub fn gt(height: usize, width: usize, mask: &[u8]) -> Result<Self> {
        Self::new(height, width, mask.iter().map(|&l| l as u32).collect(), Provenance::Gt)
    }

    /// Cell indices per label, ordered by label.
    pub fn segments(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    pub fn distinct_labels(&self) -> usize {
        self.segments().len()
    }

    fn same_grid(&self, other: &MaskSet) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "metric",
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }
}

/// Inclusive cell bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn of(cells: &[usize], width: usize) -> Option<BBox> {
        let mut it = cells.iter().map(|&i| (i / width, i % width));
        let (r0, c0) = it.next()?;
        let mut b = BBox {
            row_min: r0,
            col_min: c0,
            row_max: r0,
            col_max: c0,
        };
        for (r, c) in it {
            b.row_min = b.row_min.min(r);
            b.row_max = b.row_max.max(r);
            b.col_min = b.col_min.min(c);
            b.col_max = b.col_max.max(c);
        }
        Some(b)
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let r0 = self.row_min.max(o.row_min);
        let r1 = self.row_max.min(o.row_max);
        let c0 = self.col_min.max(o.col_min);
        let c1 = self.col_max.min(o.col_max);
        let inter = if r0 <= r1 && c0 <= c1 { (r1 - r0 + 1) * (c1 - c0 + 1) } else { 0 };
        inter as f64 / (self.area() + o.area() - inter) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Drop the predicted segment overlapping gt background the most.
    pub exclude_pred_background: bool,
    /// Greedy best-IoU matching instead of the optimal assignment.
    pub greedy: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            exclude_pred_background: true,
            greedy: false,
        }
    }
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n.saturating_sub(1) as f64) / 2.0
}

/// Adjusted Rand index over cells whose gt label is not background.
pub fn fg_ari(pred: &MaskSet, gt: &MaskSet) -> Result<f64> {
    pred.same_grid(gt)?;
    let mut table: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, u64> = BTreeMap::new();
    let mut n = 0u64;
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if g == 0 {
            continue;
        }
        *table.entry((g, p)).or_default() += 1;
        *rows.entry(g).or_default() += 1;
        *cols.entry(p).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        log::warn!("fg_ari: ground truth has no foreground; scoring 0");
        return Ok(0.0);
    }
    if n < 2 {
        return Ok(1.0);
    }
    let index: f64 = table.values().map(|&c| comb2(c)).sum();
    let a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let expected = a * b / comb2(n);
    let max = (a + b) / 2.0;
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// Gt instances and the candidate predicted segments with their IoU matrix.
pub struct Overlap {
    pub gt_labels: Vec<u32>,
    pub pred_labels: Vec<u32>,
    /// `iou[g][p]`
    pub iou: Vec<Vec<f64>>,
    gt_cells: Vec<Vec<usize>>,
    pred_cells: Vec<Vec<usize>>,
}

fn iou_cells(a: &[usize], b: &[usize]) -> f64 {
    // both sorted ascending
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn overlap(pred: &MaskSet, gt: &MaskSet, opts: MatchOptions) -> Result<Overlap> {
    pred.same_grid(gt)?;
    let mut gt_seg = gt.segments();
    let background = gt_seg.remove(&0);
    let mut pred_seg = pred.segments();
    if opts.exclude_pred_background {
        if let Some(bg) = &background {
            let mut best: Option<(u32, f64)> = None;
            for (&l, cells) in &pred_seg {
                let v = iou_cells(cells, bg);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((l, v));
                }
            }
            if let Some((l, _)) = best {
                pred_seg.remove(&l);
            }
        }
    }
    let (gt_labels, gt_cells): (Vec<_>, Vec<_>) = gt_seg.into_iter().unzip();
    let (pred_labels, pred_cells): (Vec<_>, Vec<_>) = pred_seg.into_iter().unzip();
    let iou = gt_cells
        .iter()
        .map(|g| pred_cells.iter().map(|p| iou_cells(g, p)).collect())
        .collect();
    Ok(Overlap {
        gt_labels,
        pred_labels,
        iou,
        gt_cells,
        pred_cells,
    })
}

impl Overlap {
    /// Predicted column matched to each gt row.
    pub fn matching(&self, greedy: bool) -> Vec<Option<usize>> {
        if self.pred_labels.is_empty() {
            return vec![None; self.gt_labels.len()];
        }
        if !greedy {
            return assign_max(&self.iou);
        }
        let mut taken = vec![false; self.pred_labels.len()];
        self.iou
            .iter()
            .map(|row| {
                let best = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !taken[*j])
                    .fold(None, |acc: Option<(usize, f64)>, (j, &v)| match acc {
                        Some((_, b)) if b >= v => acc,
                        _ => Some((j, v)),
                    });
                best.map(|(j, _)| {
                    taken[j] = true;
                    j
                })
            })
            .collect()
    }
}

/// Mean matched IoU over gt instances; `None` when gt has no instances.
pub fn mbo(pred: &MaskSet, gt: &MaskSet, opts: MatchOptions) -> Result<Option<f64>> {
    let ov = overlap(pred, gt, opts)?;
    if ov.gt_labels.is_empty() {
        return Ok(None);
    }
    let m = ov.matching(opts.greedy);
    let total: f64 = m
        .iter()
        .enumerate()
        .map(|(g, p)| p.map_or(0.0, |p| ov.iou[g][p]))
        .sum();
    Ok(Some(total / ov.gt_labels.len() as f64))
}

/// Percentage of gt instances whose bbox has IoU > 0.5 with some predicted
/// segment's bbox. All predicted segments are candidates.
pub fn corloc(pred: &MaskSet, gt: &MaskSet) -> Result<Option<f64>> {
    pred.same_grid(gt)?;
    let mut gt_seg = gt.segments();
    gt_seg.remove(&0);
    if gt_seg.is_empty() {
        return Ok(None);
    }
    let w = gt.width;
    let boxes: Vec<BBox> = pred.segments().values().filter_map(|c| BBox::of(c, w)).collect();
    let hit = gt_seg
        .values()
        .filter(|cells| {
            let g = BBox::of(cells, w).expect("nonempty segment");
            boxes.iter().any(|p| g.iou(p) > 0.5)
        })
        .count();
    Ok(Some(100.0 * hit as f64 / gt_seg.len() as f64))
}

/// Cells of a sorted region with a 4-neighbour outside it or off the grid.
pub fn boundary(cells: &[usize], height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut inside = vec![false; height * width];
    for &c in cells {
        inside[c] = true;
    }
    cells
        .iter()
        .map(|&c| (c / width, c % width))
        .filter(|&(r, c)| {
            r == 0
                || c == 0
                || r + 1 == height
                || c + 1 == width
                || !inside[(r - 1) * width + c]
                || !inside[(r + 1) * width + c]
                || !inside[r * width + c - 1]
                || !inside[r * width + c + 1]
        })
        .collect()
}

/// Symmetric Hausdorff distance between two nonempty point sets.
pub fn hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let d2 = |p: (usize, usize), q: (usize, usize)| {
        let dr = p.0 as f64 - q.0 as f64;
        let dc = p.1 as f64 - q.1 as f64;
        dr * dr + dc * dc
    };
    let directed = |x: &[(usize, usize)], y: &[(usize, usize)]| {
        x.iter()
            .map(|&p| y.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a)).sqrt()
}

pub fn grid_diagonal(height: usize, width: usize) -> f64 {
    let h = height.saturating_sub(1) as f64;
    let w = width.saturating_sub(1) as f64;
    (h * h + w * w).sqrt()
}

/// Mean boundary Hausdorff distance over gt instances using the mBO matching.
pub fn mbhd(pred: &MaskSet, gt: &MaskSet, opts: MatchOptions) -> Result<Option<f64>> {
    let ov = overlap(pred, gt, opts)?;
    if ov.gt_labels.is_empty() {
        return Ok(None);
    }
    let (h, w) = (gt.height, gt.width);
    let diag = grid_diagonal(h, w);
    let m = ov.matching(opts.greedy);
    let total: f64 = m
        .iter()
        .enumerate()
        .map(|(g, p)| match p {
            Some(p) => {
                let gb = boundary(&ov.gt_cells[g], h, w);
                let pb = boundary(&ov.pred_cells[*p], h, w);
                if pb.is_empty() || gb.is_empty() {
                    diag
                } else {
                    hausdorff(&gb, &pb)
                }
            }
            None => diag,
        })
        .sum();
    Ok(Some(total / ov.gt_labels.len() as f64))
}

/// All four metrics for one scene.
pub fn score(pred: &MaskSet, gt: &MaskSet, opts: MatchOptions) -> Result<SceneMetrics> {
    Ok(SceneMetrics {
        scene_id: 0,
        domain_id: 0,
        mbo: mbo(pred, gt, opts)?,
        fg_ari: fg_ari(pred, gt)?,
        corloc: corloc(pred, gt)?,
        mbhd: mbhd(pred, gt, opts)?,
    })
}
