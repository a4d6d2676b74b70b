//! Procedural scene generation with exact ground truth.
//!
//! Shapes are analytic primitives (cylinder, open hemisphere, box, mug body
//! with handle) sampled on their surface. NOCS coordinates come from the
//! sampled tight bounding box, normalized so the box diagonal is 1 and
//! centered at (0.5, 0.5, 0.5); the forward similarity pose therefore has
//! scale equal to the metric box diagonal and the depth cloud is the exact
//! forward transform of the NOCS map before any noise is applied.
//!
//! The noise model injects Gaussian depth noise, uniform outliers, label
//! corruption, and a geometric + feature-space domain shift (bias and
//! per-axis warp) so that a source/target split pair mimics a sim-to-real
//! gap at desk scale. Per-instance RNG streams derive from the seed by
//! counter, so parallel generation is byte-identical to sequential.

use std::path::Path;

use nalgebra::{Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{self, Manifest};
use crate::exec;
use crate::geom::{NocsMap, PointSet, SimilarityPose, SymmetrySpec};
use crate::nocs::SizeVector;
use crate::seeding;
use crate::{Error, Result};

const SALT_SHAPE: u64 = 0x01;
const SALT_SURFACE: u64 = 0x02;
const SALT_POSE: u64 = 0x03;
const SALT_DEPTH_NOISE: u64 = 0x04;
const SALT_OUTLIER: u64 = 0x05;
const SALT_LABEL: u64 = 0x06;
const SALT_FEATURE: u64 = 0x07;
const SALT_INSTANCE: u64 = 0x10;

/// The six object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ObjectClass {
    Bottle,
    Bowl,
    Camera,
    Can,
    Laptop,
    Mug,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 6] = [
        ObjectClass::Bottle,
        ObjectClass::Bowl,
        ObjectClass::Camera,
        ObjectClass::Can,
        ObjectClass::Laptop,
        ObjectClass::Mug,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectClass::Bottle => "bottle",
            ObjectClass::Bowl => "bowl",
            ObjectClass::Camera => "camera",
            ObjectClass::Can => "can",
            ObjectClass::Laptop => "laptop",
            ObjectClass::Mug => "mug",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    pub fn index(&self) -> u32 {
        Self::ALL.iter().position(|c| c == self).unwrap() as u32
    }

    /// Rotational symmetry of the category: bottles, bowls, and cans are
    /// surfaces of revolution about the canonical z axis.
    pub fn default_symmetry(&self) -> SymmetrySpec {
        match self {
            ObjectClass::Bottle | ObjectClass::Bowl | ObjectClass::Can => {
                SymmetrySpec::ContinuousAxis(Vector3::z())
            }
            _ => SymmetrySpec::None,
        }
    }
}

/// Inclusive sampling range in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeRange {
    pub min: f64,
    pub max: f64,
}

impl ShapeRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.min > 0.0 && self.max >= self.min && self.max.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "{what} range [{}, {}] is empty or non-positive",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max == self.min {
            self.min
        } else {
            rng.gen_range(self.min..self.max)
        }
    }
}

/// Analytic surface primitive with its per-category parameter ranges.
#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    Cylinder { radius: ShapeRange, height: ShapeRange },
    OpenHemisphere { radius: ShapeRange },
    Box3 { width: ShapeRange, height: ShapeRange, depth: ShapeRange },
    MugBody { radius: ShapeRange, height: ShapeRange, handle: ShapeRange },
}

impl ShapeKind {
    fn validate(&self) -> Result<()> {
        match self {
            ShapeKind::Cylinder { radius, height } => {
                radius.validate("radius")?;
                height.validate("height")
            }
            ShapeKind::OpenHemisphere { radius } => radius.validate("radius"),
            ShapeKind::Box3 { width, height, depth } => {
                width.validate("width")?;
                height.validate("height")?;
                depth.validate("depth")
            }
            ShapeKind::MugBody { radius, height, handle } => {
                radius.validate("radius")?;
                height.validate("height")?;
                handle.validate("handle")
            }
        }
    }
}

/// Category description: shape family, symmetry, and placement ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpec {
    pub class_id: ObjectClass,
    pub symmetry: SymmetrySpec,
    pub shape_params: ShapeKind,
    pub translation_min: Vector3<f64>,
    pub translation_max: Vector3<f64>,
    /// When true and the category is symmetric, the sampled orientation
    /// carries no spin about the symmetry axis.
    pub canonical_symmetric_rotation: bool,
}

impl CategorySpec {
    pub fn default_for(class: ObjectClass) -> Self {
        let shape_params = match class {
            ObjectClass::Bottle => ShapeKind::Cylinder {
                radius: ShapeRange::new(0.025, 0.045),
                height: ShapeRange::new(0.15, 0.26),
            },
            ObjectClass::Bowl => ShapeKind::OpenHemisphere {
                radius: ShapeRange::new(0.06, 0.09),
            },
            ObjectClass::Camera => ShapeKind::Box3 {
                width: ShapeRange::new(0.08, 0.13),
                height: ShapeRange::new(0.05, 0.08),
                depth: ShapeRange::new(0.04, 0.07),
            },
            ObjectClass::Can => ShapeKind::Cylinder {
                radius: ShapeRange::new(0.03, 0.04),
                height: ShapeRange::new(0.09, 0.13),
            },
            ObjectClass::Laptop => ShapeKind::Box3 {
                width: ShapeRange::new(0.28, 0.36),
                height: ShapeRange::new(0.015, 0.03),
                depth: ShapeRange::new(0.20, 0.26),
            },
            ObjectClass::Mug => ShapeKind::MugBody {
                radius: ShapeRange::new(0.035, 0.05),
                height: ShapeRange::new(0.08, 0.12),
                handle: ShapeRange::new(0.02, 0.035),
            },
        };
        Self {
            class_id: class,
            symmetry: class.default_symmetry(),
            shape_params,
            translation_min: Vector3::new(-0.25, -0.25, 0.5),
            translation_max: Vector3::new(0.25, 0.25, 1.1),
            canonical_symmetric_rotation: false,
        }
    }

    pub fn default_all() -> Vec<Self> {
        ObjectClass::ALL.iter().map(|&c| Self::default_for(c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_params.validate()?;
        for axis in 0..3 {
            if self.translation_min[axis] > self.translation_max[axis] {
                return Err(Error::InvalidSpec("translation range is inverted".into()));
            }
        }
        Ok(())
    }
}

/// Noise, outlier, and domain-shift parameters.
///
/// `domain_bias`/`domain_warp` distort the observed depth (warp is applied
/// about the object center); `feature_bias`/`feature_warp`/`feature_sigma`
/// distort the per-point feature the toy predictor consumes. A target split
/// uses nonzero shift so a source-trained predictor sees a genuine gap.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub depth_sigma: f64,
    pub outlier_fraction: f64,
    pub label_outlier_fraction: f64,
    pub domain_bias: Vector3<f64>,
    pub domain_warp: Vector3<f64>,
    pub feature_sigma: f64,
    pub feature_bias: Vector3<f64>,
    pub feature_warp: Vector3<f64>,
    pub rng_seed: u64,
}

impl NoiseModel {
    /// Exact geometry, exact labels, noiseless features.
    pub fn noiseless() -> Self {
        Self {
            depth_sigma: 0.0,
            outlier_fraction: 0.0,
            label_outlier_fraction: 0.0,
            domain_bias: Vector3::zeros(),
            domain_warp: Vector3::new(1.0, 1.0, 1.0),
            feature_sigma: 0.0,
            feature_bias: Vector3::zeros(),
            feature_warp: Vector3::new(1.0, 1.0, 1.0),
            rng_seed: 0,
        }
    }

    /// Source-domain profile: mild sensor noise, no domain shift.
    pub fn source_default() -> Self {
        Self {
            depth_sigma: 0.001,
            feature_sigma: 0.03,
            ..Self::noiseless()
        }
    }

    /// Target-domain profile: raised noise, sparse outliers, and a bias +
    /// warp shift on both depth and features.
    pub fn target_default() -> Self {
        Self {
            depth_sigma: 0.003,
            outlier_fraction: 0.05,
            domain_bias: Vector3::new(0.012, -0.008, 0.015),
            domain_warp: Vector3::new(1.02, 0.98, 1.01),
            feature_sigma: 0.06,
            feature_bias: Vector3::new(0.06, -0.04, 0.05),
            feature_warp: Vector3::new(1.12, 0.90, 1.08),
            rng_seed: 1,
            ..Self::noiseless()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("outlier_fraction", self.outlier_fraction),
            ("label_outlier_fraction", self.label_outlier_fraction),
        ] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::InvalidSpec(format!("{name} {f} must be in [0,1)")));
            }
        }
        if self.depth_sigma < 0.0 || self.feature_sigma < 0.0 {
            return Err(Error::InvalidSpec("sigma must be >= 0".into()));
        }
        if !self.domain_warp.iter().chain(self.feature_warp.iter()).all(|&w| w > 0.0 && w.is_finite())
        {
            return Err(Error::InvalidSpec("warp factors must be positive".into()));
        }
        Ok(())
    }
}

/// One generated scene: an object with exact ground truth, observed depth,
/// per-point features, and the record of injected corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub id: u64,
    pub class_id: ObjectClass,
    pub gt_pose: SimilarityPose,
    pub gt_size: SizeVector,
    pub gt_nocs: NocsMap,
    pub depth: PointSet,
    pub feature: Vec<Vector3<f64>>,
    pub corruption_mask: Vec<bool>,
}

impl SceneInstance {
    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }
}

fn uniform_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Minimal rotation carrying the symmetry axis to a random direction (no
/// spin about the axis itself).
fn canonical_axis_rotation(axis: &Vector3<f64>, rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    let dir = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    let dir = if dir.norm() < 1e-9 { Vector3::z() } else { dir.normalize() };
    Rotation3::rotation_between(&Unit::new_normalize(*axis).into_inner(), &dir)
        .unwrap_or_else(Rotation3::identity)
        .into_inner()
}

fn sample_cylinder(r: f64, h: f64, rng: &mut impl Rng) -> Vector3<f64> {
    use std::f64::consts::PI;
    let lateral = 2.0 * PI * r * h;
    let cap = PI * r * r;
    let u: f64 = rng.gen_range(0.0..lateral + 2.0 * cap);
    let theta = rng.gen_range(0.0..2.0 * PI);
    if u < lateral {
        let z = rng.gen_range(-h / 2.0..h / 2.0);
        Vector3::new(r * theta.cos(), r * theta.sin(), z)
    } else {
        let z = if u < lateral + cap { h / 2.0 } else { -h / 2.0 };
        let rho = r * rng.gen_range(0.0..1.0f64).sqrt();
        Vector3::new(rho * theta.cos(), rho * theta.sin(), z)
    }
}

fn sample_hemisphere(r: f64, rng: &mut impl Rng) -> Vector3<f64> {
    use std::f64::consts::PI;
    // Uniform area on the lower half sphere: z uniform in [-r, 0].
    let z = -rng.gen_range(0.0..r);
    let ring = (r * r - z * z).max(0.0).sqrt();
    let theta = rng.gen_range(0.0..2.0 * PI);
    Vector3::new(ring * theta.cos(), ring * theta.sin(), z)
}

fn sample_box(half: Vector3<f64>, rng: &mut impl Rng) -> Vector3<f64> {
    let (w, h, d) = (2.0 * half.x, 2.0 * half.y, 2.0 * half.z);
    let areas = [h * d, h * d, w * d, w * d, w * h, w * h];
    let total: f64 = areas.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, &a) in areas.iter().enumerate() {
        if u < a {
            face = i;
            break;
        }
        u -= a;
    }
    let a = rng.gen_range(-1.0..1.0f64);
    let b = rng.gen_range(-1.0..1.0f64);
    match face {
        0 => Vector3::new(half.x, a * half.y, b * half.z),
        1 => Vector3::new(-half.x, a * half.y, b * half.z),
        2 => Vector3::new(a * half.x, half.y, b * half.z),
        3 => Vector3::new(a * half.x, -half.y, b * half.z),
        4 => Vector3::new(a * half.x, b * half.y, half.z),
        _ => Vector3::new(a * half.x, b * half.y, -half.z),
    }
}

struct SampledShape {
    dims: Vec<f64>,
}

fn sample_shape_dims(shape: &ShapeKind, rng: &mut impl Rng) -> SampledShape {
    let dims = match shape {
        ShapeKind::Cylinder { radius, height } => vec![radius.sample(rng), height.sample(rng)],
        ShapeKind::OpenHemisphere { radius } => vec![radius.sample(rng)],
        ShapeKind::Box3 { width, height, depth } => {
            vec![width.sample(rng), height.sample(rng), depth.sample(rng)]
        }
        ShapeKind::MugBody { radius, height, handle } => {
            vec![radius.sample(rng), height.sample(rng), handle.sample(rng)]
        }
    };
    SampledShape { dims }
}

fn sample_surface_point(shape: &ShapeKind, dims: &[f64], rng: &mut impl Rng) -> Vector3<f64> {
    use std::f64::consts::PI;
    match shape {
        ShapeKind::Cylinder { .. } => sample_cylinder(dims[0], dims[1], rng),
        ShapeKind::OpenHemisphere { .. } => sample_hemisphere(dims[0], rng),
        ShapeKind::Box3 { .. } => {
            sample_box(Vector3::new(dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0), rng)
        }
        ShapeKind::MugBody { .. } => {
            let (r, h, hd) = (dims[0], dims[1], dims[2]);
            let body_area = 2.0 * PI * r * h + 2.0 * PI * r * r;
            let handle_half = Vector3::new(hd / 2.0, 0.15 * r, 0.3 * h);
            let hb = 2.0 * handle_half;
            let handle_area = 2.0 * (hb.x * hb.y + hb.x * hb.z + hb.y * hb.z);
            if rng.gen_range(0.0..body_area + handle_area) < body_area {
                sample_cylinder(r, h, rng)
            } else {
                // Handle box attached to the +x side of the body.
                sample_box(handle_half, rng) + Vector3::new(0.9 * r + handle_half.x, 0.0, 0.0)
            }
        }
    }
}

/// Generates one scene instance; `seed` and `noise.rng_seed` jointly key
/// every random stream, so identical arguments give identical bits.
pub fn generate_instance(
    spec: &CategorySpec,
    n_points: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<SceneInstance> {
    spec.validate()?;
    noise.validate()?;
    if n_points < 16 {
        return Err(Error::InvalidInput(format!(
            "n_points {n_points} must be >= 16"
        )));
    }
    let base = seeding::mix(seed, noise.rng_seed);

    // Canonical-frame surface samples.
    let mut shape_rng = seeding::stream3(base, SALT_SHAPE, 0);
    let sampled = sample_shape_dims(&spec.shape_params, &mut shape_rng);
    let mut surf_rng = seeding::stream3(base, SALT_SURFACE, 0);
    let canonical: Vec<Vector3<f64>> = (0..n_points)
        .map(|_| sample_surface_point(&spec.shape_params, &sampled.dims, &mut surf_rng))
        .collect();

    // Tight bbox normalization: diagonal 1, centered at (0.5, 0.5, 0.5).
    let mut lo = canonical[0];
    let mut hi = canonical[0];
    for p in &canonical {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extents = hi - lo;
    let center = (hi + lo) / 2.0;
    let diag = extents.norm();
    if !(diag > 0.0) {
        return Err(Error::InvalidSpec("shape collapsed to a point".into()));
    }
    let half = Vector3::new(0.5, 0.5, 0.5);
    let nocs_clean: Vec<Vector3<f64>> =
        canonical.iter().map(|p| (p - center) / diag + half).collect();

    // Pose: p_cam = diag·R·nocs + t with t chosen so the canonical shape
    // lands at the sampled workspace position.
    let mut pose_rng = seeding::stream3(base, SALT_POSE, 0);
    let symmetric_axis = match &spec.symmetry {
        SymmetrySpec::ContinuousAxis(a) => Some(*a),
        SymmetrySpec::DiscreteAxis { axis, .. } => Some(*axis),
        SymmetrySpec::None => None,
    };
    let rotation = match (spec.canonical_symmetric_rotation, symmetric_axis) {
        (true, Some(axis)) => canonical_axis_rotation(&axis, &mut pose_rng),
        _ => uniform_rotation(&mut pose_rng),
    };
    let t0 = Vector3::new(
        pose_rng.gen_range(spec.translation_min.x..=spec.translation_max.x),
        pose_rng.gen_range(spec.translation_min.y..=spec.translation_max.y),
        pose_rng.gen_range(spec.translation_min.z..=spec.translation_max.z),
    );
    let translation = rotation * (center - diag * half) + t0;
    let gt_pose = SimilarityPose::new(rotation, translation, diag)?;
    let gt_size = SizeVector::new(extents.map(|e| e.max(1e-9)))?;

    // Depth is the exact forward transform of the NOCS map, then corrupted.
    let mut depth: Vec<Vector3<f64>> = nocs_clean.iter().map(|c| gt_pose.apply(c)).collect();

    let warped = spec_warp_active(noise);
    if warped {
        let obj_center = gt_pose.apply(&half);
        for p in depth.iter_mut() {
            let local = *p - obj_center;
            *p = obj_center + local.component_mul(&noise.domain_warp) + noise.domain_bias;
        }
    }
    if noise.depth_sigma > 0.0 {
        let mut noise_rng = seeding::stream3(base, SALT_DEPTH_NOISE, 0);
        for p in depth.iter_mut() {
            for axis in 0..3 {
                p[axis] += noise.depth_sigma * noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let mut corruption = vec![false; n_points];
    if noise.outlier_fraction > 0.0 {
        let count = (noise.outlier_fraction * n_points as f64).round() as usize;
        let mut out_rng = seeding::stream3(base, SALT_OUTLIER, 0);
        let chosen = index_sample(&mut out_rng, n_points, count);
        // Uniform draws inside the cloud's inflated bounding volume.
        let mut lo = depth[0];
        let mut hi = depth[0];
        for p in &depth {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let c = (lo + hi) / 2.0;
        let h2 = (hi - lo) / 2.0 * 1.5;
        for idx in chosen {
            depth[idx] = Vector3::new(
                c.x + out_rng.gen_range(-1.0..1.0) * h2.x.max(1e-6),
                c.y + out_rng.gen_range(-1.0..1.0) * h2.y.max(1e-6),
                c.z + out_rng.gen_range(-1.0..1.0) * h2.z.max(1e-6),
            );
            corruption[idx] = true;
        }
    }

    // Features derive from the clean NOCS before label corruption.
    let mut feat_rng = seeding::stream3(base, SALT_FEATURE, 0);
    let feature: Vec<Vector3<f64>> = nocs_clean
        .iter()
        .map(|c| {
            let mut f = c.component_mul(&noise.feature_warp) + noise.feature_bias;
            if noise.feature_sigma > 0.0 {
                for axis in 0..3 {
                    f[axis] += noise.feature_sigma * feat_rng.sample::<f64, _>(StandardNormal);
                }
            }
            f
        })
        .collect();

    let mut nocs = nocs_clean;
    if noise.label_outlier_fraction > 0.0 {
        let count = (noise.label_outlier_fraction * n_points as f64).round() as usize;
        let mut lab_rng = seeding::stream3(base, SALT_LABEL, 0);
        let chosen = index_sample(&mut lab_rng, n_points, count);
        for idx in chosen {
            nocs[idx] = Vector3::new(
                lab_rng.gen_range(0.0..1.0),
                lab_rng.gen_range(0.0..1.0),
                lab_rng.gen_range(0.0..1.0),
            );
            corruption[idx] = true;
        }
    }

    Ok(SceneInstance {
        id: 0,
        class_id: spec.class_id,
        gt_pose,
        gt_size,
        gt_nocs: NocsMap::new(nocs)?,
        depth: PointSet::new(depth)?,
        feature,
        corruption_mask: corruption,
    })
}

fn spec_warp_active(noise: &NoiseModel) -> bool {
    noise.domain_bias != Vector3::zeros() || noise.domain_warp != Vector3::new(1.0, 1.0, 1.0)
}

/// Generates `n_instances` in memory, classes assigned round-robin from
/// `specs`, instance `i` seeded by counter from `seed`.
pub fn generate_instances(
    specs: &[CategorySpec],
    n_instances: usize,
    n_points: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<SceneInstance>> {
    if specs.is_empty() {
        return Err(Error::InvalidSpec("no category specs given".into()));
    }
    for s in specs {
        s.validate()?;
    }
    noise.validate()?;
    let out: Vec<Result<SceneInstance>> = exec::map_indices(n_instances, |i| {
        let spec = &specs[i % specs.len()];
        let mut inst = generate_instance(spec, n_points, noise, seeding::mix3(seed, SALT_INSTANCE, i as u64))?;
        inst.id = i as u64;
        Ok(inst)
    });
    out.into_iter().collect()
}

/// Generates a split and writes it in the on-disk dataset format: one JSON
/// file per instance plus a manifest.
pub fn generate_split(
    specs: &[CategorySpec],
    n_instances: usize,
    n_points: usize,
    noise: &NoiseModel,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    let instances = generate_instances(specs, n_instances, n_points, noise, seed)?;
    dataset::write_split(out_dir, &instances, noise, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{self, RansacConfig};
    use crate::nocs::pose_and_size;

    #[test]
    fn noiseless_instance_is_exactly_consistent() {
        let spec = CategorySpec::default_for(ObjectClass::Camera);
        let inst = generate_instance(&spec, 128, &NoiseModel::noiseless(), 7).unwrap();
        for (d, c) in inst.depth.points().iter().zip(inst.gt_nocs.coords()) {
            assert_eq!(*d, inst.gt_pose.apply(c));
        }
        let (pose, size) = pose_and_size(&inst.gt_nocs, &inst.depth, &RansacConfig::default()).unwrap();
        assert!(
            geom::geodesic_rotation_error(pose.rotation(), inst.gt_pose.rotation(), &SymmetrySpec::None)
                < 1e-9
        );
        assert!((pose.translation() - inst.gt_pose.translation()).norm() < 1e-9);
        assert!((pose.scale() - inst.gt_pose.scale()).abs() < 1e-9);
        assert!((size.extents() - inst.gt_size.extents()).norm() < 1e-6);
    }

    #[test]
    fn nocs_diagonal_is_normalized() {
        for class in ObjectClass::ALL {
            let spec = CategorySpec::default_for(class);
            let inst = generate_instance(&spec, 256, &NoiseModel::noiseless(), 11).unwrap();
            let mut lo = inst.gt_nocs.coords()[0];
            let mut hi = lo;
            for c in inst.gt_nocs.coords() {
                lo = lo.inf(c);
                hi = hi.sup(c);
            }
            assert!(((hi - lo).norm() - 1.0).abs() < 1e-9, "class {class:?}");
            // Scale of the pose equals the metric diagonal.
            assert!((inst.gt_pose.scale() - inst.gt_size.diagonal()).abs() < 1e-9);
        }
    }

    #[test]
    fn outlier_count_matches_fraction() {
        let spec = CategorySpec::default_for(ObjectClass::Bottle);
        let noise = NoiseModel {
            outlier_fraction: 0.3,
            ..NoiseModel::noiseless()
        };
        let inst = generate_instance(&spec, 200, &noise, 3).unwrap();
        assert_eq!(
            inst.corruption_mask.iter().filter(|&&c| c).count(),
            (0.3f64 * 200.0).round() as usize
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CategorySpec::default_for(ObjectClass::Mug);
        let noise = NoiseModel::target_default();
        let a = generate_instance(&spec, 64, &noise, 99).unwrap();
        let b = generate_instance(&spec, 64, &noise, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(&spec, 64, &noise, 100).unwrap();
        assert_ne!(a.depth.points()[0], c.depth.points()[0]);
    }

    #[test]
    fn symmetric_category_rotation_is_metric_invisible() {
        let spec = CategorySpec::default_for(ObjectClass::Can);
        let inst = generate_instance(&spec, 64, &NoiseModel::noiseless(), 5).unwrap();
        let spun = inst.gt_pose.rotation()
            * geom::rotation_about_axis(&Vector3::z(), 1.23);
        let err = geom::geodesic_rotation_error(
            inst.gt_pose.rotation(),
            &spun,
            &spec.symmetry,
        );
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn label_corruption_marks_mask_and_keeps_features_clean() {
        let spec = CategorySpec::default_for(ObjectClass::Laptop);
        let noise = NoiseModel {
            label_outlier_fraction: 0.2,
            ..NoiseModel::noiseless()
        };
        let inst = generate_instance(&spec, 100, &noise, 13).unwrap();
        assert_eq!(inst.corruption_mask.iter().filter(|&&c| c).count(), 20);
        // Features come from clean NOCS: on uncorrupted points they equal
        // gt_nocs under a noiseless feature model, and on corrupted points
        // they must differ from the corrupted label.
        for (i, f) in inst.feature.iter().enumerate() {
            if !inst.corruption_mask[i] {
                assert!((f - inst.gt_nocs.coords()[i]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let mut spec = CategorySpec::default_for(ObjectClass::Can);
        spec.shape_params = ShapeKind::Cylinder {
            radius: ShapeRange::new(0.05, 0.02),
            height: ShapeRange::new(0.1, 0.2),
        };
        assert!(matches!(
            generate_instance(&spec, 64, &NoiseModel::noiseless(), 1),
            Err(Error::InvalidSpec(_))
        ));
        let spec = CategorySpec::default_for(ObjectClass::Can);
        assert!(matches!(
            generate_instance(&spec, 4, &NoiseModel::noiseless(), 1),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn round_robin_balances_classes() {
        let specs = CategorySpec::default_all();
        let instances =
            generate_instances(&specs, 60, 32, &NoiseModel::noiseless(), 21).unwrap();
        for class in ObjectClass::ALL {
            assert_eq!(
                instances.iter().filter(|i| i.class_id == class).count(),
                10
            );
        }
        // Ids are assigned by counter.
        assert!(instances.iter().enumerate().all(|(i, inst)| inst.id == i as u64));
    }
}
