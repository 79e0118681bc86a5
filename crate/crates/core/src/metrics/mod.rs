//! Segmentation metrics: pixel overlap, topology and clustering agreement.
//!
//! Foreground is 4-connected and background 8-connected throughout.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        BinaryMask {
            height,
            width,
            data,
        }
    }

    /// Pixels with probability `>= threshold` become foreground.
    pub fn threshold(prob: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = plane_dims(prob)?;
        Ok(BinaryMask {
            height: h,
            width: w,
            data: prob.data().iter().map(|p| (*p >= threshold) as u8).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    /// Out-of-range coordinates read as background.
    fn at(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.data[y as usize * self.width + x as usize] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a == 1 && **b == 1)
            .count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| *a <= *b)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width],
            self.data.iter().map(|v| *v as f64).collect(),
        )
        .expect("sized")
    }

    fn same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "mask shapes differ: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `(H, W)` of a tensor holding a single plane.
fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() < 2 || s[..s.len() - 2].iter().any(|d| *d != 1) {
        return Err(Error::shape(format!(
            "expected a single H×W plane, got {s:?}"
        )));
    }
    Ok((s[s.len() - 2], s[s.len() - 1]))
}

/// 0 for background, `1..=count` for components in raster order of their
/// first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

fn flood(
    h: usize,
    w: usize,
    inside: impl Fn(usize) -> bool,
    offsets: &[(isize, isize)],
) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !inside(start) || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count as u32;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if inside(q) && labels[q] == 0 {
                    labels[q] = count as u32;
                    queue.push_back(q);
                }
            }
        }
    }
    (labels, count)
}

/// 4-connected foreground components.
pub fn label_components(mask: &BinaryMask) -> ComponentLabeling {
    let (labels, count) = flood(mask.height, mask.width, |p| mask.data[p] == 1, &N4);
    ComponentLabeling {
        height: mask.height,
        width: mask.width,
        labels,
        count,
    }
}

/// `(β0, β1)`: foreground components, and background components that do
/// not reach the image border.
pub fn betti_numbers(mask: &BinaryMask) -> (usize, usize) {
    let b0 = label_components(mask).count;
    let (h, w) = (mask.height, mask.width);
    let (bg, n) = flood(h, w, |p| mask.data[p] == 0, &N8);
    let mut outer = vec![false; n + 1];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                outer[bg[y * w + x] as usize] = true;
            }
        }
    }
    let b1 = (1..=n).filter(|l| !outer[*l]).count();
    (b0, b1)
}

/// `V − E + F` of the foreground cubical complex.
pub fn euler_characteristic(mask: &BinaryMask) -> i64 {
    let (h, w) = (mask.height, mask.width);
    let (mut v, mut e, mut f) = (0i64, 0i64, 0i64);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            v += 1;
            let right = x + 1 < w && mask.get(y, x + 1);
            let down = y + 1 < h && mask.get(y + 1, x);
            e += right as i64 + down as i64;
            if right && down && mask.get(y + 1, x + 1) {
                f += 1;
            }
        }
    }
    v - e + f
}

/// Neighbours of `(y, x)` counter-clockwise from east:
/// E, NE, N, NW, W, SW, S, SE.
fn ring(mask: &BinaryMask, y: usize, x: usize) -> [bool; 8] {
    let (y, x) = (y as isize, x as isize);
    [
        mask.at(y, x + 1),
        mask.at(y - 1, x + 1),
        mask.at(y - 1, x),
        mask.at(y - 1, x - 1),
        mask.at(y, x - 1),
        mask.at(y + 1, x - 1),
        mask.at(y + 1, x),
        mask.at(y + 1, x + 1),
    ]
}

/// Yokoi connectivity number for 4-connected foreground. A foreground
/// pixel can be removed without changing topology iff this equals 1.
fn connectivity_number(n: &[bool; 8]) -> u32 {
    let v = |k: usize| n[k % 8] as u32;
    [0, 2, 4, 6]
        .iter()
        .map(|&k| v(k) - v(k) * v(k + 1) * v(k + 2))
        .sum()
}

/// Two-subiteration thinning to a one-pixel-wide, 4-connected skeleton.
///
/// Each pass marks border pixels facing south/east (then north/west) on a
/// snapshot and deletes them one by one in raster order, re-testing
/// simplicity against the current state. Pixels that had at most one
/// 4-neighbour in the snapshot are line ends and are kept.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let mut m = mask.clone();
    let (h, w) = (m.height, m.width);
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let snapshot = m.clone();
            let candidates: Vec<(usize, usize)> = (0..h * w)
                .map(|p| (p / w, p % w))
                .filter(|&(y, x)| {
                    if !snapshot.get(y, x) {
                        return false;
                    }
                    let n = ring(&snapshot, y, x);
                    if pass == 0 {
                        !n[6] || !n[0]
                    } else {
                        !n[2] || !n[4]
                    }
                })
                .collect();
            for (y, x) in candidates {
                let before = ring(&snapshot, y, x);
                let four = [before[0], before[2], before[4], before[6]]
                    .iter()
                    .filter(|b| **b)
                    .count();
                if four >= 2 && connectivity_number(&ring(&m, y, x)) == 1 {
                    m.set(y, x, false);
                    changed = true;
                }
            }
        }
        if !changed {
            return m;
        }
    }
}

/// Centre-line Dice. Both skeletons empty gives 1, exactly one empty 0.
pub fn cl_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt)?;
    let sp = skeletonize(pred);
    let sg = skeletonize(gt);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let tprec = sp.intersection_count(gt) as f64 / sp.count() as f64;
    let tsens = sg.intersection_count(pred) as f64 / sg.count() as f64;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Joint counts of two labelings of the same pixels.
struct Contingency {
    n: f64,
    joint: Vec<f64>,
    rows: Vec<f64>,
    cols: Vec<f64>,
    /// Row and column index of each joint cell.
    cells: Vec<(usize, usize)>,
}

impl Contingency {
    fn new(a: &[u32], b: &[u32]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape(format!(
                "labelings cover {} and {} pixels",
                a.len(),
                b.len()
            )));
        }
        let mut row_of = HashMap::new();
        let mut col_of = HashMap::new();
        let mut cell_of = HashMap::new();
        let (mut rows, mut cols, mut joint, mut cells) = (vec![], vec![], vec![], vec![]);
        for (la, lb) in a.iter().zip(b) {
            let r = *row_of.entry(*la).or_insert_with(|| {
                rows.push(0.0);
                rows.len() - 1
            });
            let c = *col_of.entry(*lb).or_insert_with(|| {
                cols.push(0.0);
                cols.len() - 1
            });
            let k = *cell_of.entry((r, c)).or_insert_with(|| {
                joint.push(0.0);
                cells.push((r, c));
                joint.len() - 1
            });
            rows[r] += 1.0;
            cols[c] += 1.0;
            joint[k] += 1.0;
        }
        Ok(Contingency {
            n: a.len() as f64,
            joint,
            rows,
            cols,
            cells,
        })
    }
}

fn pairs(c: f64) -> f64 {
    c * (c - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings. When both partitions are
/// trivial the index is undefined and taken as 1.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    let t = Contingency::new(a, b)?;
    let index: f64 = t.joint.iter().map(|c| pairs(*c)).sum();
    let sa: f64 = t.rows.iter().map(|c| pairs(*c)).sum();
    let sb: f64 = t.cols.iter().map(|c| pairs(*c)).sum();
    let expected = if t.n < 2.0 { 0.0 } else { sa * sb / pairs(t.n) };
    let denom = (sa + sb) / 2.0 - expected;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

/// `H(A|B) + H(B|A)` in nats.
pub fn variation_of_information_labels(a: &[u32], b: &[u32]) -> Result<f64> {
    let t = Contingency::new(a, b)?;
    let mut vi = 0.0;
    for (&nij, &(i, j)) in t.joint.iter().zip(&t.cells) {
        let p = nij / t.n;
        vi -= p * ((nij / t.rows[i]).ln() + (nij / t.cols[j]).ln());
    }
    Ok(vi.max(0.0))
}

/// `1 − ARI` between the component partitions of two masks, background
/// forming one cluster.
pub fn ari_error(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt)?;
    let ari = adjusted_rand_index(&label_components(pred).labels, &label_components(gt).labels)?;
    Ok(1.0 - ari)
}

/// Variation of information between the component partitions of two masks.
pub fn variation_of_information(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt)?;
    variation_of_information_labels(&label_components(pred).labels, &label_components(gt).labels)
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt)?;
    let denom = pred.count() + gt.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / denom as f64)
}

/// Area under the ROC curve via the Mann–Whitney statistic.
pub fn auc(prob: &Tensor, gt: &BinaryMask) -> Result<f64> {
    let (h, w) = plane_dims(prob)?;
    if (h, w) != (gt.height, gt.width) {
        return Err(Error::shape(format!(
            "probability map {h}×{w} vs mask {}×{}",
            gt.height, gt.width
        )));
    }
    if prob.data().iter().any(|p| p.is_nan()) {
        return Err(Error::NonFinite("probability map".into()));
    }
    let pos = gt.count();
    let neg = gt.data.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both positive and negative pixels"));
    }
    let mut order: Vec<usize> = (0..prob.numel()).collect();
    order.sort_by(|a, b| prob.data()[*a].total_cmp(&prob.data()[*b]));
    // Midranks (1-based) summed over positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && prob.data()[order[j + 1]] == prob.data()[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &p in &order[i..=j] {
            if gt.data[p] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// β0, β1 and χ of both masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyCounts {
    pub pred_betti0: f64,
    pub pred_betti1: f64,
    pub pred_euler: f64,
    pub gt_betti0: f64,
    pub gt_betti1: f64,
    pub gt_euler: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub auc: f64,
    pub cl_dice: f64,
    pub betti0_error: f64,
    pub betti1_error: f64,
    pub euler_error: f64,
    pub ari_error: f64,
    pub vi: f64,
    pub counts: TopologyCounts,
}

impl MetricsReport {
    /// Field-wise mean; `None` for an empty slice.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let k = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        Some(MetricsReport {
            dice: avg(|r| r.dice),
            auc: avg(|r| r.auc),
            cl_dice: avg(|r| r.cl_dice),
            betti0_error: avg(|r| r.betti0_error),
            betti1_error: avg(|r| r.betti1_error),
            euler_error: avg(|r| r.euler_error),
            ari_error: avg(|r| r.ari_error),
            vi: avg(|r| r.vi),
            counts: TopologyCounts {
                pred_betti0: avg(|r| r.counts.pred_betti0),
                pred_betti1: avg(|r| r.counts.pred_betti1),
                pred_euler: avg(|r| r.counts.pred_euler),
                gt_betti0: avg(|r| r.counts.gt_betti0),
                gt_betti1: avg(|r| r.counts.gt_betti1),
                gt_euler: avg(|r| r.counts.gt_euler),
            },
        })
    }
}

/// Binarize `prob` at `threshold` and compute every metric against `gt`.
pub fn evaluate_pair(prob: &Tensor, gt: &BinaryMask, threshold: f64) -> Result<MetricsReport> {
    let pred = BinaryMask::threshold(prob, threshold)?;
    pred.same_shape(gt)?;
    let (pb0, pb1) = betti_numbers(&pred);
    let (gb0, gb1) = betti_numbers(gt);
    let (pe, ge) = (euler_characteristic(&pred), euler_characteristic(gt));
    Ok(MetricsReport {
        dice: dice(&pred, gt)?,
        auc: auc(prob, gt)?,
        cl_dice: cl_dice(&pred, gt)?,
        betti0_error: pb0.abs_diff(gb0) as f64,
        betti1_error: pb1.abs_diff(gb1) as f64,
        euler_error: pe.abs_diff(ge) as f64,
        ari_error: ari_error(&pred, gt)?,
        vi: variation_of_information(&pred, gt)?,
        counts: TopologyCounts {
            pred_betti0: pb0 as f64,
            pred_betti1: pb1 as f64,
            pred_euler: pe as f64,
            gt_betti0: gb0 as f64,
            gt_betti1: gb1 as f64,
            gt_euler: ge as f64,
        },
    })
}

#[cfg(test)]
mod tests;
