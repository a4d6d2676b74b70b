//! Detection and pose evaluation: 3D IoU AP and rotation/translation AP.
//!
//! Oriented boxes are anchored at the pose image of the NOCS center
//! (0.5, 0.5, 0.5) with axes from the pose rotation and metric extents from
//! the size vector. IoU uses deterministic grid sampling over the shared
//! bounding volume of the two boxes, which makes it symmetric in its
//! arguments by construction and convergent in the resolution.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::geom::{geodesic_rotation_error, SimilarityPose};
use crate::nocs::SizeVector;
use crate::synth::ObjectClass;
use crate::{Error, Result};

/// NOCS-frame anchor every box is centered on.
pub const NOCS_CENTER: Vector3<f64> = Vector3::new(0.5, 0.5, 0.5);

/// One predicted detection.
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub instance_id: u64,
    pub class_id: ObjectClass,
    pub pose: SimilarityPose,
    pub size: SizeVector,
    pub confidence: f64,
}

/// One ground-truth object.
#[derive(Debug, Clone)]
pub struct GroundTruthRecord {
    pub instance_id: u64,
    pub class_id: ObjectClass,
    pub pose: SimilarityPose,
    pub size: SizeVector,
    pub symmetry: crate::geom::SymmetrySpec,
}

struct OrientedBox {
    center: Vector3<f64>,
    rot_t: nalgebra::Matrix3<f64>,
    half: Vector3<f64>,
}

impl OrientedBox {
    fn new(pose: &SimilarityPose, size: &SizeVector) -> Self {
        Self {
            center: pose.apply(&NOCS_CENTER),
            rot_t: pose.rotation().transpose(),
            half: size.extents() / 2.0,
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rot_t * (p - self.center);
        local.x.abs() <= self.half.x && local.y.abs() <= self.half.y && local.z.abs() <= self.half.z
    }

    fn corners(&self) -> [Vector3<f64>; 8] {
        let r = self.rot_t.transpose();
        let mut out = [Vector3::zeros(); 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *corner =
                self.center + r * Vector3::new(sx * self.half.x, sy * self.half.y, sz * self.half.z);
        }
        out
    }
}

/// Hash-based per-cell jitter in [0,1): stratifies the grid samples so
/// box faces aligned with the grid do not bias whole sample planes.
fn cell_jitter(ix: usize, iy: usize, iz: usize) -> (f64, f64, f64) {
    let mut z = (ix as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add((iz as u64).wrapping_mul(0x1656_67B1_9E37_79F9));
    let mut next = || {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut x = z;
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
        (x >> 11) as f64 / (1u64 << 53) as f64
    };
    (next(), next(), next())
}

/// Grid-sampled IoU of two oriented boxes.
///
/// `resolution` grid cells per axis span the union's axis-aligned bound;
/// one deterministically jittered sample per cell is membership-tested
/// against both boxes. The stratified jitter keeps the estimate unbiased
/// even when a box face coincides with a grid plane.
pub fn box_iou_3d(
    pose_a: &SimilarityPose,
    size_a: &SizeVector,
    pose_b: &SimilarityPose,
    size_b: &SizeVector,
    resolution: usize,
) -> Result<f64> {
    if resolution < 10 {
        return Err(Error::InvalidInput(format!(
            "iou resolution {resolution} must be >= 10"
        )));
    }
    let a = OrientedBox::new(pose_a, size_a);
    let b = OrientedBox::new(pose_b, size_b);

    let mut lo = Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for c in a.corners().iter().chain(b.corners().iter()) {
        lo = lo.inf(c);
        hi = hi.sup(c);
    }
    // Quick reject: disjoint axis-aligned bounds mean disjoint boxes.
    let (ca, cb) = (a.corners(), b.corners());
    let (mut lo_a, mut hi_a) = (ca[0], ca[0]);
    for c in &ca {
        lo_a = lo_a.inf(c);
        hi_a = hi_a.sup(c);
    }
    let (mut lo_b, mut hi_b) = (cb[0], cb[0]);
    for c in &cb {
        lo_b = lo_b.inf(c);
        hi_b = hi_b.sup(c);
    }
    for axis in 0..3 {
        if hi_a[axis] < lo_b[axis] || hi_b[axis] < lo_a[axis] {
            return Ok(0.0);
        }
    }

    let step = (hi - lo) / resolution as f64;
    let counts = exec::map_indices(resolution, |ix| {
        let mut inter = 0u64;
        let mut union = 0u64;
        for iy in 0..resolution {
            for iz in 0..resolution {
                let (jx, jy, jz) = cell_jitter(ix, iy, iz);
                let x = lo.x + (ix as f64 + jx) * step.x;
                let y = lo.y + (iy as f64 + jy) * step.y;
                let z = lo.z + (iz as f64 + jz) * step.z;
                let p = Vector3::new(x, y, z);
                let ina = a.contains(&p);
                let inb = b.contains(&p);
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    union += 1;
                }
            }
        }
        (inter, union)
    });
    let inter: u64 = counts.iter().map(|c| c.0).sum();
    let union: u64 = counts.iter().map(|c| c.1).sum();
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Symmetry-aware rotation error (degrees) and translation error (meters).
pub fn pose_error(pred: &DetectionRecord, gt: &GroundTruthRecord) -> (f64, f64) {
    let rot = geodesic_rotation_error(pred.pose.rotation(), gt.pose.rotation(), &gt.symmetry);
    let trans = (pred.pose.translation() - gt.pose.translation()).norm();
    (rot, trans)
}

/// Matching rule for average precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchCriterion {
    /// Predicted box IoU with the ground truth at least `threshold`.
    Iou { threshold: f64, resolution: usize },
    /// Rotation and translation errors both under their thresholds.
    Pose { max_rot_deg: f64, max_trans_m: f64 },
}

/// Per-class AP plus the mean over classes that have ground truth.
#[derive(Debug, Clone)]
pub struct ApResult {
    pub per_class: BTreeMap<ObjectClass, f64>,
    pub mean: f64,
}

/// Greedy confidence-ordered AP with all-point PR interpolation.
///
/// Predictions sort by descending confidence (ties by instance id); each
/// matches the best still-unmatched ground truth of its class and instance
/// that satisfies the criterion. Classes without ground truth are excluded
/// from the mean.
pub fn average_precision(
    preds: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    criterion: MatchCriterion,
) -> Result<ApResult> {
    if preds.iter().any(|p| !p.confidence.is_finite()) {
        return Err(Error::InvalidInput("non-finite confidence".into()));
    }
    let mut per_class = BTreeMap::new();
    let classes: std::collections::BTreeSet<ObjectClass> =
        gts.iter().map(|g| g.class_id).collect();
    for &class in &classes {
        let class_gts: Vec<&GroundTruthRecord> =
            gts.iter().filter(|g| g.class_id == class).collect();
        let mut class_preds: Vec<&DetectionRecord> =
            preds.iter().filter(|p| p.class_id == class).collect();
        class_preds.sort_by(|x, y| {
            y.confidence
                .partial_cmp(&x.confidence)
                .unwrap()
                .then(x.instance_id.cmp(&y.instance_id))
        });

        let mut matched = vec![false; class_gts.len()];
        let mut tp_flags = Vec::with_capacity(class_preds.len());
        for pred in &class_preds {
            // Candidate ground truths: same instance, unmatched, criterion
            // satisfied; best metric first.
            let mut best: Option<(usize, (f64, f64))> = None;
            for (gi, gt) in class_gts.iter().enumerate() {
                if matched[gi] || gt.instance_id != pred.instance_id {
                    continue;
                }
                let key = match criterion {
                    MatchCriterion::Iou { threshold, resolution } => {
                        let iou =
                            box_iou_3d(&pred.pose, &pred.size, &gt.pose, &gt.size, resolution)?;
                        if iou < threshold {
                            continue;
                        }
                        // Negate so that "lower key is better" holds for both
                        // criteria.
                        (-iou, 0.0)
                    }
                    MatchCriterion::Pose { max_rot_deg, max_trans_m } => {
                        let (rot, trans) = pose_error(pred, gt);
                        if rot > max_rot_deg || trans > max_trans_m {
                            continue;
                        }
                        (rot, trans)
                    }
                };
                let better = match &best {
                    None => true,
                    Some((_, bk)) => key < *bk,
                };
                if better {
                    best = Some((gi, key));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[gi] = true;
                    tp_flags.push(true);
                }
                None => tp_flags.push(false),
            }
        }
        per_class.insert(class, ap_from_flags(&tp_flags, class_gts.len()));
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ApResult { per_class, mean })
}

/// Area under the PR curve with the all-point precision envelope:
/// `AP = Σ_i (r_i − r_{i−1}) · max_{j: r_j ≥ r_i} p_j`.
fn ap_from_flags(tp_flags: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    for &is_tp in tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut envelopes = vec![0.0; points.len()];
    let mut env = 0.0f64;
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        env = env.max(p);
        envelopes[i] = env;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &e) in points.iter().zip(&envelopes) {
        ap += (r - prev_recall) * e;
        prev_recall = r;
    }
    ap
}

/// Thresholds and sampling resolution for a full evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// (max rotation degrees, max translation meters) pairs.
    pub pose_thresholds: Vec<(f64, f64)>,
    pub iou_resolution: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.25, 0.50, 0.75],
            pose_thresholds: vec![(5.0, 0.05), (10.0, 0.05), (10.0, 0.10)],
            iou_resolution: 50,
        }
    }
}

/// Full AP table: one column per threshold, one row per class plus a mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub columns: Vec<String>,
    pub per_class: BTreeMap<String, Vec<f64>>,
    pub mean: Vec<f64>,
    pub n_predictions: usize,
    pub n_ground_truths: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (class, row) in &self.per_class {
            out.push_str(class);
            for v in row {
                out.push_str(&format!(",{v:.4}"));
            }
            out.push('\n');
        }
        out.push_str("mean");
        for v in &self.mean {
            out.push_str(&format!(",{v:.4}"));
        }
        out.push('\n');
        out
    }
}

fn column_labels(cfg: &EvalConfig) -> Vec<String> {
    let mut cols: Vec<String> = cfg
        .iou_thresholds
        .iter()
        .map(|t| format!("IoU{:.0}", t * 100.0))
        .collect();
    cols.extend(
        cfg.pose_thresholds
            .iter()
            .map(|(deg, m)| format!("{deg:.0}deg{:.0}cm", m * 100.0)),
    );
    cols
}

/// Evaluates predictions against ground truth at every configured threshold.
pub fn evaluate(
    preds: &[DetectionRecord],
    gts: &[GroundTruthRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut results: Vec<ApResult> = Vec::new();
    for &t in &cfg.iou_thresholds {
        results.push(average_precision(
            preds,
            gts,
            MatchCriterion::Iou {
                threshold: t,
                resolution: cfg.iou_resolution,
            },
        )?);
    }
    for &(deg, m) in &cfg.pose_thresholds {
        results.push(average_precision(
            preds,
            gts,
            MatchCriterion::Pose {
                max_rot_deg: deg,
                max_trans_m: m,
            },
        )?);
    }
    let classes: std::collections::BTreeSet<ObjectClass> =
        gts.iter().map(|g| g.class_id).collect();
    let mut per_class = BTreeMap::new();
    for class in classes {
        let row: Vec<f64> = results
            .iter()
            .map(|r| *r.per_class.get(&class).unwrap_or(&0.0))
            .collect();
        per_class.insert(class.name().to_string(), row);
    }
    let mean: Vec<f64> = results.iter().map(|r| r.mean).collect();
    Ok(EvalReport {
        config: cfg.clone(),
        columns: column_labels(cfg),
        per_class,
        mean,
        n_predictions: preds.len(),
        n_ground_truths: gts.len(),
    })
}
