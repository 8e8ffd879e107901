//! Overlap ratios and the 95th-percentile Hausdorff distance over
//! binarized predictions.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{extract_boundary, BinaryMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn same_shape(pred: &BinaryMap, gt: &BinaryMap) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "metrics",
            "map extents",
            format!("{}x{}", gt.height, gt.width),
            format!("{}x{}", pred.height, pred.width),
        ));
    }
    Ok(())
}

pub fn confusion(pred: &BinaryMap, gt: &BinaryMap) -> Result<ConfusionCounts> {
    same_shape(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub accuracy: f64,
}

/// Dice, IoU, recall and accuracy. When prediction and ground truth are both
/// empty every ratio is 1; an empty ground truth with false positives gives
/// recall 0.
pub fn ratios(c: &ConfusionCounts) -> Ratios {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    let ratio = |num: f64, den: f64| {
        if both_empty {
            1.0
        } else if den == 0.0 {
            0.0
        } else {
            num / den
        }
    };
    let total = c.total();
    Ratios {
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        recall: ratio(tp, tp + fn_),
        accuracy: if total == 0 { 1.0 } else { (tp + tn) / total as f64 },
    }
}

/// Nearest-rank 95th percentile: element `ceil(0.95·n) − 1` of the sorted
/// values. `values` must be non-empty.
pub fn percentile95(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (0.95 * values.len() as f64).ceil() as usize;
    values[rank.max(1) - 1]
}

const FAR: f64 = f64::INFINITY;

/// Exact 1-D squared distance transform of `f` (lower envelope of
/// parabolas). Only finite entries contribute parabolas.
fn dt1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest foreground
/// pixel of `set` (infinite when `set` is empty).
pub fn squared_distance_transform(set: &BinaryMap) -> Vec<f64> {
    let (h, w) = (set.height, set.width);
    let mut grid: Vec<f64> = set.bits.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let mut col = vec![0.0; h];
    let mut out = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        dt1d(&col, &mut out[..h]);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        let row = grid[r * w..(r + 1) * w].to_vec();
        dt1d(&row, &mut out[..w]);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn directed_p95(from: &BinaryMap, to_dt: &[f64]) -> f64 {
    let mut d: Vec<f64> = from
        .bits
        .iter()
        .zip(to_dt)
        .filter(|(&b, _)| b)
        .map(|(_, &sq)| sq.sqrt())
        .collect();
    percentile95(&mut d)
}

fn hd95_guard(x: &BinaryMap, y: &BinaryMap) -> Option<f64> {
    match (x.count() == 0, y.count() == 0) {
        (true, true) => Some(0.0),
        (true, false) | (false, true) => Some(f64::INFINITY),
        _ => None,
    }
}

/// HD95 between the boundary rims of two binary masks, in pixels.
/// Returns `+∞` when exactly one rim is empty and 0 when both are.
pub fn hd95(pred: &BinaryMap, gt: &BinaryMap) -> Result<f64> {
    same_shape(pred, gt)?;
    let (x, y) = (extract_boundary(pred), extract_boundary(gt));
    if let Some(v) = hd95_guard(&x, &y) {
        return Ok(v);
    }
    let dx = squared_distance_transform(&x);
    let dy = squared_distance_transform(&y);
    Ok(directed_p95(&x, &dy).max(directed_p95(&y, &dx)))
}

/// HD95 between two point sets by exhaustive pairwise distances.
pub fn hd95_points(x: &[(usize, usize)], y: &[(usize, usize)]) -> f64 {
    match (x.is_empty(), y.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return f64::INFINITY,
        _ => {}
    }
    let directed = |a: &[(usize, usize)], b: &[(usize, usize)]| {
        let mut d: Vec<f64> = a
            .iter()
            .map(|&(r, c)| {
                b.iter()
                    .map(|&(r2, c2)| {
                        let (dr, dc) = (r as f64 - r2 as f64, c as f64 - c2 as f64);
                        (dr * dr + dc * dc).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        percentile95(&mut d)
    };
    directed(x, y).max(directed(y, x))
}

/// Brute-force HD95 over boundary rims, used as the oracle for [`hd95`].
pub fn hd95_bruteforce(pred: &BinaryMap, gt: &BinaryMap) -> Result<f64> {
    same_shape(pred, gt)?;
    let x = extract_boundary(pred).points();
    let y = extract_boundary(gt).points();
    Ok(hd95_points(&x, &y))
}

fn ser_hd95<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_hd95<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// Metrics for one prediction/ground-truth pair. An infinite HD95 is
/// serialized as `null` with `hd95_infinite: true`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub dice: f64,
    pub iou: f64,
    #[serde(serialize_with = "ser_hd95", deserialize_with = "de_hd95")]
    pub hd95: f64,
    pub hd95_infinite: bool,
    pub recall: f64,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
}

pub fn evaluate(pred: &BinaryMap, gt: &BinaryMap) -> Result<MetricReport> {
    let counts = confusion(pred, gt)?;
    let r = ratios(&counts);
    let hd = hd95(pred, gt)?;
    Ok(MetricReport {
        id: None,
        dice: r.dice,
        iou: r.iou,
        hd95: hd,
        hd95_infinite: hd.is_infinite(),
        recall: r.recall,
        accuracy: r.accuracy,
        counts,
    })
}

/// Per-image means. HD95 is averaged over the finite values only; the
/// number of infinite ones is reported separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub dice: f64,
    pub iou: f64,
    #[serde(serialize_with = "ser_hd95", deserialize_with = "de_hd95")]
    pub hd95: f64,
    pub hd95_infinite_count: usize,
    pub recall: f64,
    pub accuracy: f64,
}

pub fn aggregate(reports: &[MetricReport]) -> AggregateReport {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let finite: Vec<f64> = reports.iter().map(|r| r.hd95).filter(|v| v.is_finite()).collect();
    AggregateReport {
        count: reports.len(),
        dice: mean(|r| r.dice),
        iou: mean(|r| r.iou),
        hd95: if finite.is_empty() {
            if reports.is_empty() {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        hd95_infinite_count: reports.len() - finite.len(),
        recall: mean(|r| r.recall),
        accuracy: mean(|r| r.accuracy),
    }
}
