//! NOCS maps as binned classification problems.
//!
//! Each point carries three independent B-way categorical distributions, one
//! per axis. [`discretize`] turns coordinates into targets, [`decode`] turns
//! logits back into coordinates by expectation over bin centers, and the
//! cross-entropy loss/gradient pair drives every training step downstream.
//! Loss reductions run through deterministic pairwise summation so results
//! do not depend on point partitioning.

use nalgebra::Vector3;

use crate::exec;
use crate::geom::{self, NocsMap, PointSet, RansacConfig, SimilarityPose};
use crate::{Error, Result};

pub const DEFAULT_BIN_COUNT: usize = 32;

/// Per-point, per-axis logits over `bins` bins; layout `[point][axis][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinLogitMap {
    data: Vec<f64>,
    bins: usize,
    len: usize,
}

impl BinLogitMap {
    pub fn zeros(len: usize, bins: usize) -> Self {
        Self {
            data: vec![0.0; len * 3 * bins],
            bins,
            len,
        }
    }

    pub fn from_raw(data: Vec<f64>, len: usize, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidInput("bin count must be >= 2".into()));
        }
        if data.len() != len * 3 * bins {
            return Err(Error::ShapeMismatch(format!(
                "logit buffer has {} values, expected {}",
                data.len(),
                len * 3 * bins
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        Ok(Self { data, bins, len })
    }

    pub fn from_fn(len: usize, bins: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(len * 3 * bins);
        for p in 0..len {
            for axis in 0..3 {
                for k in 0..bins {
                    data.push(f(p, axis, k));
                }
            }
        }
        Self { data, bins, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn logits(&self, point: usize, axis: usize) -> &[f64] {
        let base = (point * 3 + axis) * self.bins;
        &self.data[base..base + self.bins]
    }

    pub fn logits_mut(&mut self, point: usize, axis: usize) -> &mut [f64] {
        let base = (point * 3 + axis) * self.bins;
        &mut self.data[base..base + self.bins]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Softmax distribution for one point/axis.
    pub fn softmax(&self, point: usize, axis: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        softmax_into(self.logits(point, axis), &mut out);
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.len == other.len && self.bins == other.bins
    }
}

/// Per-point, per-axis probability targets; layout `[point][axis][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTargetMap {
    data: Vec<f64>,
    bins: usize,
    len: usize,
}

impl BinTargetMap {
    pub fn from_raw(data: Vec<f64>, len: usize, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidInput("bin count must be >= 2".into()));
        }
        if data.len() != len * 3 * bins {
            return Err(Error::ShapeMismatch(format!(
                "target buffer has {} values, expected {}",
                data.len(),
                len * 3 * bins
            )));
        }
        for p in 0..len {
            for axis in 0..3 {
                let base = (p * 3 + axis) * bins;
                let dist = &data[base..base + bins];
                if dist.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                    return Err(Error::InvalidInput("negative or non-finite target mass".into()));
                }
                let sum: f64 = dist.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "target distribution sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(Self { data, bins, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn dist(&self, point: usize, axis: usize) -> &[f64] {
        let base = (point * 3 + axis) * self.bins;
        &self.data[base..base + self.bins]
    }
}

/// Object extents in meters, all positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeVector {
    extents: Vector3<f64>,
}

impl SizeVector {
    pub fn new(extents: Vector3<f64>) -> Result<Self> {
        if !extents.iter().all(|&v| v.is_finite() && v > 0.0) {
            return Err(Error::InvalidInput(format!(
                "size extents must be positive, got {extents:?}"
            )));
        }
        Ok(Self { extents })
    }

    pub fn extents(&self) -> &Vector3<f64> {
        &self.extents
    }

    /// Box diagonal length.
    pub fn diagonal(&self) -> f64 {
        self.extents.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscretizeMode {
    /// One-hot at the containing bin.
    Hard,
    /// Linear interpolation between the two nearest bin centers.
    Soft,
}

fn bin_center(k: usize, bins: usize) -> f64 {
    (k as f64 + 0.5) / bins as f64
}

/// Encodes coordinates as per-axis bin targets.
pub fn discretize(map: &NocsMap, bins: usize, mode: DiscretizeMode) -> Result<BinTargetMap> {
    if bins < 2 {
        return Err(Error::InvalidInput("bin count must be >= 2".into()));
    }
    let len = map.len();
    let mut data = vec![0.0; len * 3 * bins];
    for (p, c) in map.coords().iter().enumerate() {
        for axis in 0..3 {
            let v = c[axis];
            let base = (p * 3 + axis) * bins;
            match mode {
                DiscretizeMode::Hard => {
                    let k = ((v * bins as f64).floor() as usize).min(bins - 1);
                    data[base + k] = 1.0;
                }
                DiscretizeMode::Soft => {
                    if v <= bin_center(0, bins) {
                        data[base] = 1.0;
                    } else if v >= bin_center(bins - 1, bins) {
                        data[base + bins - 1] = 1.0;
                    } else {
                        let k = (v * bins as f64 - 0.5).floor() as usize;
                        let w = (v - bin_center(k, bins)) * bins as f64;
                        data[base + k] = 1.0 - w;
                        data[base + k + 1] = w;
                    }
                }
            }
        }
    }
    BinTargetMap::from_raw(data, len, bins)
}

/// Stable softmax into a caller-provided buffer.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    max + sum.ln()
}

/// Shannon entropy of a distribution, in nats.
pub fn shannon_entropy(dist: &[f64]) -> f64 {
    dist.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Expectation decoding: coordinate = Σ softmax·center per axis.
pub fn decode(logits: &BinLogitMap) -> NocsMap {
    let bins = logits.bins();
    let coords = exec::map_indices(logits.len(), |p| {
        let mut c = Vector3::zeros();
        let mut buf = vec![0.0; bins];
        for axis in 0..3 {
            softmax_into(logits.logits(p, axis), &mut buf);
            c[axis] = buf
                .iter()
                .enumerate()
                .map(|(k, &q)| q * bin_center(k, bins))
                .sum();
        }
        c
    });
    NocsMap::new(coords).expect("expectation decode stays in [0,1]")
}

fn check_mask(len: usize, mask: Option<&[bool]>) -> Result<usize> {
    match mask {
        None => Ok(len),
        Some(m) => {
            if m.len() != len {
                return Err(Error::ShapeMismatch(format!(
                    "mask has {} entries for {} points",
                    m.len(),
                    len
                )));
            }
            let count = m.iter().filter(|&&b| b).count();
            if count == 0 {
                return Err(Error::EmptySelection("mask excludes every point".into()));
            }
            Ok(count)
        }
    }
}

/// Mean over unmasked points of the per-point cross-entropy summed over the
/// three axes, in nats.
pub fn cross_entropy(
    pred: &BinLogitMap,
    target: &BinTargetMap,
    mask: Option<&[bool]>,
) -> Result<f64> {
    if pred.len() != target.len() || pred.bins() != target.bins() {
        return Err(Error::ShapeMismatch(format!(
            "pred ({} pts, {} bins) vs target ({} pts, {} bins)",
            pred.len(),
            pred.bins(),
            target.len(),
            target.bins()
        )));
    }
    let count = check_mask(pred.len(), mask)?;
    let terms = exec::map_indices(pred.len(), |p| {
        if let Some(m) = mask {
            if !m[p] {
                return 0.0;
            }
        }
        let mut term = 0.0;
        for axis in 0..3 {
            let logits = pred.logits(p, axis);
            let t = target.dist(p, axis);
            let lse = log_sum_exp(logits);
            let dot: f64 = t.iter().zip(logits).map(|(&ti, &li)| ti * li).sum();
            term += lse - dot;
        }
        term
    });
    Ok(exec::pairwise_sum(&terms) / count as f64)
}

/// Gradient of [`cross_entropy`] w.r.t. the prediction logits:
/// `(softmax(pred) − target) / |unmasked|` per axis, zero at masked points.
pub fn cross_entropy_grad(
    pred: &BinLogitMap,
    target: &BinTargetMap,
    mask: Option<&[bool]>,
) -> Result<BinLogitMap> {
    if pred.len() != target.len() || pred.bins() != target.bins() {
        return Err(Error::ShapeMismatch(
            "cross_entropy_grad: shape mismatch".into(),
        ));
    }
    let count = check_mask(pred.len(), mask)? as f64;
    let bins = pred.bins();
    let mut grad = BinLogitMap::zeros(pred.len(), bins);
    let rows = exec::map_indices(pred.len(), |p| {
        let mut row = vec![0.0; 3 * bins];
        let active = mask.map_or(true, |m| m[p]);
        if active {
            let mut buf = vec![0.0; bins];
            for axis in 0..3 {
                softmax_into(pred.logits(p, axis), &mut buf);
                let t = target.dist(p, axis);
                for k in 0..bins {
                    row[axis * bins + k] = (buf[k] - t[k]) / count;
                }
            }
        }
        row
    });
    for (p, row) in rows.iter().enumerate() {
        for axis in 0..3 {
            grad.logits_mut(p, axis)
                .copy_from_slice(&row[axis * bins..(axis + 1) * bins]);
        }
    }
    Ok(grad)
}

/// Softmax of `pred` frozen into a target map (no gradient flows through it).
pub fn softmax_targets(pred: &BinLogitMap) -> BinTargetMap {
    let bins = pred.bins();
    let mut data = vec![0.0; pred.len() * 3 * bins];
    for p in 0..pred.len() {
        for axis in 0..3 {
            let base = (p * 3 + axis) * bins;
            softmax_into(pred.logits(p, axis), &mut data[base..base + bins]);
        }
    }
    BinTargetMap {
        data,
        bins,
        len: pred.len(),
    }
}

/// Consistency loss `H(softmax(pred), softmax(pred_aug))` over all points.
pub fn consistency_loss(pred: &BinLogitMap, pred_aug: &BinLogitMap) -> Result<f64> {
    if !pred.same_shape(pred_aug) {
        return Err(Error::ShapeMismatch("consistency_loss: shape mismatch".into()));
    }
    cross_entropy(pred_aug, &softmax_targets(pred), None)
}

/// Pose from RANSAC plus metric size from the inlier NOCS extents.
pub fn pose_and_size(
    nocs: &NocsMap,
    depth: &PointSet,
    cfg: &RansacConfig,
) -> Result<(SimilarityPose, SizeVector)> {
    let (pose, mask) = geom::ransac_pose(nocs, depth, cfg)?;
    let mut min = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut max = Vector3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (c, &keep) in nocs.coords().iter().zip(&mask) {
        if keep {
            min = min.inf(c);
            max = max.sup(c);
        }
    }
    // A zero extent along some axis would violate the size invariant; floor
    // it far below sensor resolution instead of failing the whole solve.
    let extents = (max - min).map(|e| e.max(1e-12)) * pose.scale();
    let size = SizeVector::new(extents)?;
    Ok((pose, size))
}
