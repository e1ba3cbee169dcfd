//! Brute-force reference implementations for the segmentation metrics.
//! Everything here works from raw label grids with sets and enumeration.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

pub type Cells = BTreeSet<(usize, usize)>;

pub fn regions(labels: &[u32], w: usize) -> BTreeMap<u32, Cells> {
    let mut out: BTreeMap<u32, Cells> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        out.entry(l).or_default().insert((i / w, i % w));
    }
    out
}

fn iou(a: &Cells, b: &Cells) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// ARI over foreground cells by enumerating every unordered cell pair.
pub fn ari(pred: &[u32], gt: &[u32]) -> f64 {
    let fg: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0).collect();
    let n = fg.len();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return 1.0;
    }
    let (mut both, mut same_gt, mut same_pred) = (0u64, 0u64, 0u64);
    for a in 0..n {
        for b in a + 1..n {
            let g = gt[fg[a]] == gt[fg[b]];
            let p = pred[fg[a]] == pred[fg[b]];
            same_gt += g as u64;
            same_pred += p as u64;
            both += (g && p) as u64;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = same_gt as f64 * same_pred as f64 / pairs;
    let max = (same_gt + same_pred) as f64 / 2.0;
    if max == expected {
        return 1.0;
    }
    (both as f64 - expected) / (max - expected)
}

/// Every injective partial map from `rows` gt instances into `cols`
/// predicted segments that leaves a row unmatched only when all columns are
/// taken.
fn assignments(rows: usize, cols: usize) -> Vec<Vec<Option<usize>>> {
    fn rec(r: usize, rows: usize, cols: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if r == rows {
            out.push(cur.clone());
            return;
        }
        let free = used.iter().filter(|u| !**u).count();
        let remaining = rows - r;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push(Some(c));
                rec(r + 1, rows, cols, used, cur, out);
                cur.pop();
                used[c] = false;
            }
        }
        if free < remaining {
            cur.push(None);
            rec(r + 1, rows, cols, used, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, rows, cols, &mut vec![false; cols], &mut Vec::new(), &mut out);
    out
}

/// Largest total weight over all assignments, by enumeration.
pub fn best_total(weights: &[Vec<f64>]) -> f64 {
    let cols = weights.first().map_or(0, |r| r.len());
    assignments(weights.len(), cols)
        .iter()
        .map(|a| total(weights, a))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn total(weights: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
    a.iter()
        .enumerate()
        .map(|(r, c)| c.map_or(0.0, |c| weights[r][c]))
        .sum()
}

/// Gt instances and candidate predicted regions after removing the
/// predicted region overlapping gt background most (lowest label on ties).
struct Matchable {
    gt: Vec<Cells>,
    pred: Vec<Cells>,
    iou: Vec<Vec<f64>>,
}

fn matchable(pred: &[u32], gt: &[u32], w: usize, exclude_background: bool) -> Matchable {
    let mut g = regions(gt, w);
    let background = g.remove(&0);
    let mut p = regions(pred, w);
    if exclude_background {
        if let Some(bg) = background {
            let mut best: Option<(u32, f64)> = None;
            for (&l, cells) in &p {
                let v = iou(cells, &bg);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((l, v));
                }
            }
            if let Some((l, _)) = best {
                p.remove(&l);
            }
        }
    }
    let gt: Vec<Cells> = g.into_values().collect();
    let pred: Vec<Cells> = p.into_values().collect();
    let iou = gt.iter().map(|a| pred.iter().map(|b| iou(a, b)).collect()).collect();
    Matchable { gt, pred, iou }
}

/// Optimal assignments (all of them, up to 1e-12 in total IoU).
fn optimal(m: &Matchable) -> Vec<Vec<Option<usize>>> {
    let all = assignments(m.gt.len(), m.pred.len());
    let best = all.iter().map(|a| total(&m.iou, a)).fold(f64::NEG_INFINITY, f64::max);
    all.into_iter().filter(|a| total(&m.iou, a) >= best - 1e-12).collect()
}

pub fn mbo(pred: &[u32], gt: &[u32], w: usize, exclude_background: bool) -> Option<f64> {
    let m = matchable(pred, gt, w, exclude_background);
    if m.gt.is_empty() {
        return None;
    }
    let a = &optimal(&m)[0];
    Some(total(&m.iou, a) / m.gt.len() as f64)
}

fn bbox(c: &Cells) -> (usize, usize, usize, usize) {
    let r0 = c.iter().map(|p| p.0).min().unwrap();
    let r1 = c.iter().map(|p| p.0).max().unwrap();
    let c0 = c.iter().map(|p| p.1).min().unwrap();
    let c1 = c.iter().map(|p| p.1).max().unwrap();
    (r0, r1, c0, c1)
}

fn box_cells(b: (usize, usize, usize, usize)) -> Cells {
    let mut s = Cells::new();
    for r in b.0..=b.1 {
        for c in b.2..=b.3 {
            s.insert((r, c));
        }
    }
    s
}

/// Percentage of gt instances whose box has IoU > 0.5 with some predicted
/// region's box, using every predicted region.
pub fn corloc(pred: &[u32], gt: &[u32], w: usize) -> Option<f64> {
    let mut g = regions(gt, w);
    g.remove(&0);
    if g.is_empty() {
        return None;
    }
    let boxes: Vec<Cells> = regions(pred, w).values().map(|c| box_cells(bbox(c))).collect();
    let hit = g
        .values()
        .filter(|c| {
            let gb = box_cells(bbox(c));
            boxes.iter().any(|pb| iou(&gb, pb) > 0.5)
        })
        .count();
    Some(100.0 * hit as f64 / g.len() as f64)
}

fn boundary(c: &Cells, h: usize, w: usize) -> Vec<(usize, usize)> {
    c.iter()
        .copied()
        .filter(|&(r, col)| {
            let nbrs = [
                (r as i64 - 1, col as i64),
                (r as i64 + 1, col as i64),
                (r as i64, col as i64 - 1),
                (r as i64, col as i64 + 1),
            ];
            nbrs.iter().any(|&(nr, nc)| {
                nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 || !c.contains(&(nr as usize, nc as usize))
            })
        })
        .collect()
}

fn hausdorff(a: &[(usize, usize)], b: &[(usize, usize)]) -> f64 {
    let d = |p: (usize, usize), q: (usize, usize)| ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt();
    let mut worst = 0.0f64;
    for &p in a {
        worst = worst.max(b.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min));
    }
    for &q in b {
        worst = worst.max(a.iter().map(|&p| d(p, q)).fold(f64::INFINITY, f64::min));
    }
    worst
}

/// mBHD for every optimal matching. Ties in IoU can make several matchings
/// optimal, so the implementation must agree with one of these.
pub fn mbhd_candidates(pred: &[u32], gt: &[u32], h: usize, w: usize, exclude_background: bool) -> Option<Vec<f64>> {
    let m = matchable(pred, gt, w, exclude_background);
    if m.gt.is_empty() {
        return None;
    }
    let diag = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
    Some(
        optimal(&m)
            .iter()
            .map(|a| {
                let sum: f64 = a
                    .iter()
                    .enumerate()
                    .map(|(g, p)| match p {
                        Some(p) => hausdorff(&boundary(&m.gt[g], h, w), &boundary(&m.pred[*p], h, w)),
                        None => diag,
                    })
                    .sum();
                sum / m.gt.len() as f64
            })
            .collect(),
    )
}

/// A gt grid of up to `max_objects` random rectangles over background 0.
pub fn random_gt(rng: &mut impl Rng, h: usize, w: usize, max_objects: u32) -> Vec<u32> {
    let mut g = vec![0u32; h * w];
    let k = rng.gen_range(0..=max_objects);
    for l in 1..=k {
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = (rng.gen_range(r0..h), rng.gen_range(c0..w));
        for r in r0..=r1 {
            for c in c0..=c1 {
                g[r * w + c] = l;
            }
        }
    }
    g
}

/// A prediction that is either a noisy copy of `gt` under a random
/// relabelling, random rectangles, or per-cell noise.
pub fn random_pred(rng: &mut impl Rng, gt: &[u32], h: usize, w: usize, max_labels: u32) -> Vec<u32> {
    match rng.gen_range(0..3) {
        0 => {
            let perm: Vec<u32> = {
                let mut p: Vec<u32> = (0..=max_labels).map(|x| x * 7 + 3).collect();
                rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
                p
            };
            gt.iter()
                .map(|&l| {
                    if rng.gen_bool(0.15) {
                        perm[rng.gen_range(0..=max_labels as usize)]
                    } else {
                        perm[(l % (max_labels + 1)) as usize]
                    }
                })
                .collect()
        }
        1 => random_gt(rng, h, w, max_labels),
        _ => (0..h * w).map(|_| rng.gen_range(0..=max_labels)).collect(),
    }
}
