//! Similarity transforms and robust pose estimation.
//!
//! A [`SimilarityPose`] maps normalized object coordinates into the camera
//! frame as `p_cam = s · R · p_nocs + t`. [`umeyama`] solves the closed-form
//! least-squares alignment between two corresponded point sets, and
//! [`ransac_pose`] wraps it in a deterministic RANSAC loop. Rotation errors
//! are measured geodesically on SO(3), optionally quotienting out a
//! per-category symmetry.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::seq::index::sample as index_sample;

use crate::exec;
use crate::seeding;
use crate::{Error, Result};

/// Relative eigenvalue cutoff below which a point configuration counts as
/// collinear or coincident.
const RANK_EPS: f64 = 1e-12;

/// Rotation, translation, and uniform scale mapping NOCS into camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    scale: f64,
}

impl SimilarityPose {
    /// Validates orthonormality (1e-9), `det = +1` (1e-9), and `scale > 0`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, scale: f64) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).norm();
        if !ortho_err.is_finite() || ortho_err > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "rotation not orthonormal (|R^T R - I| = {ortho_err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidInput(format!("scale {scale} must be positive")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
            scale,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Forward map: `s · R · p + t`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Inverse map: `(1/s) · R^T · (p − t)`.
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.rotation.transpose() * (p - self.translation)) / self.scale
    }
}

/// Ordered 3D points in the camera frame (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Vec<Vector3<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point set must be non-empty".into()));
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("point set has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-point normalized object coordinates in `[0,1]³`.
///
/// Paired index-for-index with a [`PointSet`]; coordinates are clamped into
/// range on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct NocsMap {
    coords: Vec<Vector3<f64>>,
}

impl NocsMap {
    pub fn new(coords: Vec<Vector3<f64>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("NOCS map must be non-empty".into()));
        }
        if !coords.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("NOCS map has non-finite coordinates".into()));
        }
        let coords = coords
            .into_iter()
            .map(|c| c.map(|v| v.clamp(0.0, 1.0)))
            .collect();
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[Vector3<f64>] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Per-category rotational symmetry.
#[derive(Debug, Clone, PartialEq)]
pub enum SymmetrySpec {
    None,
    /// Continuous rotational symmetry about an object-frame axis.
    ContinuousAxis(Vector3<f64>),
    /// k-fold discrete symmetry about an object-frame axis.
    DiscreteAxis { axis: Vector3<f64>, order: u32 },
}

/// RANSAC loop parameters.
///
/// `inlier_threshold` is expressed in NOCS units; residuals are measured in
/// the camera frame (meters) and compared against `threshold × scale` of the
/// hypothesis under test, so the gate adapts to object size.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub min_sample: usize,
    pub confidence: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 256,
            inlier_threshold: 0.02,
            min_sample: 4,
            confidence: 0.999,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_sample < 3 {
            return Err(Error::InvalidInput("min_sample must be >= 3".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::InvalidInput("inlier_threshold must be > 0".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidInput("confidence must be in (0,1)".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Least-squares similarity alignment `dst ≈ s·R·src + t` (closed form).
///
/// The rotation is reflection-corrected: when the unconstrained SVD solution
/// has negative determinant, the direction of the smallest singular value is
/// flipped, so the result is always a proper rotation.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<SimilarityPose> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "umeyama: src has {} points, dst has {}",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!(
            "umeyama needs at least 3 correspondences, got {n}"
        )));
    }
    let nf = n as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() / nf;

    let mut cov = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst.iter()) {
        let cs = s - mu_src;
        let cd = d - mu_dst;
        cov += cd * cs.transpose();
        scatter += cs * cs.transpose();
        var_src += cs.norm_squared();
    }
    cov /= nf;
    scatter /= nf;
    var_src /= nf;

    // Rank of the centered source configuration: collinear or coincident
    // points leave the rotation underdetermined.
    let eig = scatter.symmetric_eigenvalues();
    let mut evals: Vec<f64> = eig.iter().copied().collect();
    evals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if evals[0] <= 0.0 || evals[1] <= evals[0] * RANK_EPS {
        return Err(Error::DegenerateInput(
            "centered source points are collinear or coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        // Singular values come back sorted descending; flip the smallest.
        s_diag[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let sv = svd.singular_values;
    let scale = (sv[0] * s_diag[0] + sv[1] * s_diag[1] + sv[2] * s_diag[2]) / var_src;
    if !(scale > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "recovered non-positive scale {scale}"
        )));
    }
    let translation = mu_dst - scale * (rotation * mu_src);

    // Re-orthonormalize against accumulated rounding before validating.
    SimilarityPose::new(orthonormalize(rotation), translation, scale)
}

/// Projects a near-rotation matrix back onto SO(3).
fn orthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = u * flip * v_t;
    }
    r
}

#[derive(Clone)]
struct Hypothesis {
    pose: SimilarityPose,
    inlier_count: usize,
    inlier_residual: f64,
}

fn score_pose(
    pose: &SimilarityPose,
    nocs: &[Vector3<f64>],
    depth: &[Vector3<f64>],
    threshold_nocs: f64,
) -> (usize, f64, Vec<bool>) {
    let gate = threshold_nocs * pose.scale();
    let mut count = 0;
    let mut residual = 0.0;
    let mut mask = vec![false; nocs.len()];
    for i in 0..nocs.len() {
        let r = (depth[i] - pose.apply(&nocs[i])).norm();
        if r < gate {
            count += 1;
            residual += r;
            mask[i] = true;
        }
    }
    (count, residual, mask)
}

fn hypotheses_needed(best_inliers: usize, n: usize, m: usize, confidence: f64, cap: usize) -> usize {
    if best_inliers == 0 {
        return cap;
    }
    let w = best_inliers as f64 / n as f64;
    let p_good = w.powi(m as i32);
    if p_good >= 1.0 {
        return 1;
    }
    let denom = (1.0 - p_good).ln();
    if denom >= -f64::EPSILON {
        return cap;
    }
    let need = ((1.0 - confidence).ln() / denom).ceil();
    if !need.is_finite() || need >= cap as f64 {
        cap
    } else {
        (need as usize).max(1)
    }
}

/// Robust similarity pose between a NOCS map and observed depth.
///
/// Hypothesis sample sets are pre-generated from `cfg.rng_seed`, scored in
/// deterministic batches, and folded in schedule order, so the result is
/// bit-identical for a fixed seed whether or not hypothesis scoring runs in
/// parallel. Ties break by inlier count, then total inlier residual, then
/// hypothesis index. The returned pose is re-fit on the winning consensus
/// set and the mask is recomputed from that final pose.
pub fn ransac_pose(
    nocs: &NocsMap,
    depth: &PointSet,
    cfg: &RansacConfig,
) -> Result<(SimilarityPose, Vec<bool>)> {
    cfg.validate()?;
    if nocs.len() != depth.len() {
        return Err(Error::ShapeMismatch(format!(
            "ransac_pose: nocs has {} points, depth has {}",
            nocs.len(),
            depth.len()
        )));
    }
    let n = nocs.len();
    if n < cfg.min_sample {
        return Err(Error::DegenerateInput(format!(
            "ransac_pose needs at least {} points, got {n}",
            cfg.min_sample
        )));
    }

    let src = nocs.coords();
    let dst = depth.points();

    // The full hypothesis schedule is fixed up front; early exit only
    // truncates how much of it is consumed.
    let samples: Vec<Vec<usize>> = (0..cfg.max_iterations)
        .map(|i| {
            let mut rng = seeding::stream3(cfg.rng_seed, 0x5261_6e53, i as u64);
            index_sample(&mut rng, n, cfg.min_sample).into_vec()
        })
        .collect();

    const BATCH: usize = 32;
    let mut best: Option<Hypothesis> = None;
    let mut evaluated = 0usize;
    let mut needed = cfg.max_iterations;

    'outer: for batch in samples.chunks(BATCH) {
        let scored: Vec<Option<(SimilarityPose, usize, f64)>> = exec::map_slice(batch, |idx| {
            let s: Vec<Vector3<f64>> = idx.iter().map(|&i| src[i]).collect();
            let d: Vec<Vector3<f64>> = idx.iter().map(|&i| dst[i]).collect();
            match umeyama(&s, &d) {
                Ok(pose) => {
                    let (count, residual, _) = score_pose(&pose, src, dst, cfg.inlier_threshold);
                    Some((pose, count, residual))
                }
                Err(_) => None,
            }
        });
        for entry in scored {
            evaluated += 1;
            if let Some((pose, count, residual)) = entry {
                if count >= cfg.min_sample {
                    // Strict improvement only: on full ties the earlier
                    // hypothesis in the schedule wins.
                    let better = match &best {
                        None => true,
                        Some(b) => {
                            count > b.inlier_count
                                || (count == b.inlier_count && residual < b.inlier_residual)
                        }
                    };
                    if better {
                        best = Some(Hypothesis {
                            pose,
                            inlier_count: count,
                            inlier_residual: residual,
                        });
                        needed = hypotheses_needed(
                            count,
                            n,
                            cfg.min_sample,
                            cfg.confidence,
                            cfg.max_iterations,
                        );
                    }
                }
            }
            if evaluated >= needed {
                break 'outer;
            }
        }
    }

    let best = best.ok_or(Error::NoConsensus {
        min_inliers: cfg.min_sample,
        hypotheses: evaluated,
    })?;

    // Refit on the consensus set; fall back to the raw hypothesis if the
    // consensus happens to be rank-deficient.
    let (_, _, consensus) = score_pose(&best.pose, src, dst, cfg.inlier_threshold);
    let cs: Vec<Vector3<f64>> = consensus
        .iter()
        .zip(src)
        .filter_map(|(&k, p)| k.then_some(*p))
        .collect();
    let cd: Vec<Vector3<f64>> = consensus
        .iter()
        .zip(dst)
        .filter_map(|(&k, p)| k.then_some(*p))
        .collect();
    let refined = umeyama(&cs, &cd).unwrap_or(best.pose);
    let (_, _, mask) = score_pose(&refined, src, dst, cfg.inlier_threshold);
    Ok((refined, mask))
}

/// Maps observed depth into NOCS coordinates: `P'_i = (1/s)·R^T·(p_i − t)`.
pub fn align_depth(depth: &PointSet, pose: &SimilarityPose) -> PointSet {
    PointSet {
        points: depth.points().iter().map(|p| pose.apply_inverse(p)).collect(),
    }
}

fn rotation_angle_deg(m: &Matrix3<f64>) -> f64 {
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Rotation about a (normalized) axis by `angle_rad`.
pub fn rotation_about_axis(axis: &Vector3<f64>, angle_rad: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle_rad).into_inner()
}

/// Geodesic rotation distance in degrees, quotienting out `symmetry`.
///
/// For an axis symmetry the minimum over all rotations of `b` about its axis
/// has the closed form `arccos((kᵀMk + √(A² + B²) − 1)/2)` with `M = bᵀa`,
/// `A = tr(M) − kᵀMk`, `B = tr(M·[k]ₓ)`.
pub fn geodesic_rotation_error(a: &Matrix3<f64>, b: &Matrix3<f64>, symmetry: &SymmetrySpec) -> f64 {
    match symmetry {
        SymmetrySpec::None => rotation_angle_deg(&(a * b.transpose())),
        SymmetrySpec::ContinuousAxis(axis) => {
            let k = axis.normalize();
            let m = b.transpose() * a;
            let kk = (k.transpose() * m * k)[0];
            let a_coef = m.trace() - kk;
            let skew = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
            let b_coef = (m * skew).trace();
            let best = kk + (a_coef * a_coef + b_coef * b_coef).sqrt();
            (((best - 1.0) / 2.0).clamp(-1.0, 1.0)).acos().to_degrees()
        }
        SymmetrySpec::DiscreteAxis { axis, order } => {
            let order = (*order).max(1);
            (0..order)
                .map(|j| {
                    let angle = 2.0 * std::f64::consts::PI * j as f64 / order as f64;
                    let bj = b * rotation_about_axis(axis, angle);
                    rotation_angle_deg(&(a * bj.transpose()))
                })
                .fold(f64::INFINITY, f64::min)
        }
    }
}
