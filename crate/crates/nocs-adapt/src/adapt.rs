//! Teacher–student self-training over a toy per-point predictor.
//!
//! The predictor replaces the deep 2D/3D/fused backbones with three linear
//! softmax heads over a fixed random nonlinear lifting of the per-point
//! feature. That keeps the multi-branch structure, all loss terms, and every
//! filter interaction intact while gradients stay analytic and a full
//! training run takes seconds.
//!
//! Training stages:
//! - [`pretrain_teacher`] fits the teacher on a labeled source split with a
//!   supervised cross-entropy on all branches plus a consistency term
//!   between a clean and an augmented forward pass.
//! - [`run_adaptation`] iterates [`adapt_step`] over an unlabeled target
//!   split: the teacher emits pseudo labels, a configurable filter prunes
//!   them, the student takes a cross-entropy step on the kept labels, the
//!   teacher takes a small self-supervised step toward the aligned depth,
//!   and a momentum update periodically drags the teacher toward the
//!   student.

use nalgebra::{DMatrix, Vector3};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::filter::{self, EnsembleMode};
use crate::geom::{self, NocsMap, PointSet, RansacConfig, SimilarityPose};
use crate::nocs::{
    cross_entropy, cross_entropy_grad, decode, discretize, softmax_targets, BinLogitMap,
    BinTargetMap, DiscretizeMode,
};
use crate::seeding;
use crate::synth::SceneInstance;
use crate::{Error, Result};

const SALT_LIFT_A: u64 = 0x21;
const SALT_LIFT_B: u64 = 0x22;
const SALT_SHUFFLE: u64 = 0x23;
const SALT_SUBSET: u64 = 0x24;
const SALT_AUG: u64 = 0x25;
const SALT_RANSAC: u64 = 0x26;

/// Spread of the random lifting frequencies; sized so the cosine features
/// resolve structure at the default bin width of 1/32.
const LIFT_FREQ_SCALE: f64 = 24.0;

/// Prediction branch; A and B stand in for the 2D and 3D feature paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    A,
    B,
    Fused,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::A, Branch::B, Branch::Fused];
}

/// Logits from all three branches for one point batch.
#[derive(Debug, Clone)]
pub struct BranchLogits {
    pub a: BinLogitMap,
    pub b: BinLogitMap,
    pub fused: BinLogitMap,
}

impl BranchLogits {
    pub fn get(&self, branch: Branch) -> &BinLogitMap {
        match branch {
            Branch::A => &self.a,
            Branch::B => &self.b,
            Branch::Fused => &self.fused,
        }
    }
}

/// Fixed random feature lifting: `[cos(Wx + b); x; 1]`.
#[derive(Debug, Clone, PartialEq)]
struct Lifting {
    w: DMatrix<f64>,
    b: Vec<f64>,
}

impl Lifting {
    fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed_u64(seed);
        let w = DMatrix::from_fn(dim, 3, |_, _| {
            LIFT_FREQ_SCALE * rng.sample::<f64, _>(StandardNormal)
        });
        let b = (0..dim)
            .map(|_| rng.gen_range(0.0..2.0 * std::f64::consts::PI))
            .collect();
        Self { w, b }
    }

    fn out_dim(&self) -> usize {
        self.w.nrows() + 4
    }

    fn fill_column(&self, x: &Vector3<f64>, mut col: nalgebra::DVectorViewMut<f64>) {
        let d = self.w.nrows();
        for i in 0..d {
            let arg = self.w[(i, 0)] * x.x + self.w[(i, 1)] * x.y + self.w[(i, 2)] * x.z + self.b[i];
            col[i] = arg.cos();
        }
        col[d] = x.x;
        col[d + 1] = x.y;
        col[d + 2] = x.z;
        col[d + 3] = 1.0;
    }
}

trait SeedExt {
    fn from_seed_u64(seed: u64) -> Self;
}

impl SeedExt for ChaCha8Rng {
    fn from_seed_u64(seed: u64) -> Self {
        use rand_chacha::rand_core::SeedableRng;
        ChaCha8Rng::seed_from_u64(seed)
    }
}

/// Three lifted-linear softmax branches over per-point features.
///
/// Weights start at zero, so an untrained predictor emits uniform
/// distributions and decodes every coordinate to 0.5. The fused branch
/// consumes the concatenation of the A and B liftings.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPredictor {
    lift_a: Lifting,
    lift_b: Lifting,
    w_a: DMatrix<f64>,
    w_b: DMatrix<f64>,
    w_fused: DMatrix<f64>,
    bins: usize,
    lift_dim: usize,
    pub learning_rate: f64,
    rng_seed: u64,
}

impl ToyPredictor {
    pub fn new(bins: usize, lift_dim: usize, learning_rate: f64, rng_seed: u64) -> Self {
        let lift_a = Lifting::new(lift_dim, seeding::mix(rng_seed, SALT_LIFT_A));
        let lift_b = Lifting::new(lift_dim, seeding::mix(rng_seed, SALT_LIFT_B));
        let rows = 3 * bins;
        let d = lift_a.out_dim();
        Self {
            w_a: DMatrix::zeros(rows, d),
            w_b: DMatrix::zeros(rows, d),
            w_fused: DMatrix::zeros(rows, 2 * d),
            lift_a,
            lift_b,
            bins,
            lift_dim,
            learning_rate,
            rng_seed,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn lift_dim(&self) -> usize {
        self.lift_dim
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn weight(&self, branch: Branch) -> &DMatrix<f64> {
        match branch {
            Branch::A => &self.w_a,
            Branch::B => &self.w_b,
            Branch::Fused => &self.w_fused,
        }
    }

    pub fn weight_mut(&mut self, branch: Branch) -> &mut DMatrix<f64> {
        match branch {
            Branch::A => &mut self.w_a,
            Branch::B => &mut self.w_b,
            Branch::Fused => &mut self.w_fused,
        }
    }

    /// Replaces a weight matrix wholesale (used by checkpoint loading).
    pub fn set_weight(&mut self, branch: Branch, w: DMatrix<f64>) -> Result<()> {
        let target = self.weight(branch);
        if w.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weight for {branch:?} has shape {:?}, expected {:?}",
                w.shape(),
                target.shape()
            )));
        }
        *self.weight_mut(branch) = w;
        Ok(())
    }

    fn lift_matrix(&self, branch: Branch, features: &[Vector3<f64>]) -> DMatrix<f64> {
        let n = features.len();
        match branch {
            Branch::A | Branch::B => {
                let lift = if branch == Branch::A { &self.lift_a } else { &self.lift_b };
                let mut phi = DMatrix::zeros(lift.out_dim(), n);
                for (j, x) in features.iter().enumerate() {
                    lift.fill_column(x, phi.column_mut(j));
                }
                phi
            }
            Branch::Fused => {
                let d = self.lift_a.out_dim();
                let mut phi = DMatrix::zeros(2 * d, n);
                for (j, x) in features.iter().enumerate() {
                    self.lift_a.fill_column(x, phi.view_mut((0, j), (d, 1)).column_mut(0));
                    self.lift_b.fill_column(x, phi.view_mut((d, j), (d, 1)).column_mut(0));
                }
                phi
            }
        }
    }

    fn logits_from_matrix(&self, m: &DMatrix<f64>) -> BinLogitMap {
        let n = m.ncols();
        let bins = self.bins;
        BinLogitMap::from_fn(n, bins, |p, axis, k| m[(axis * bins + k, p)])
    }

    fn grad_to_matrix(&self, grad: &BinLogitMap) -> DMatrix<f64> {
        let n = grad.len();
        let bins = self.bins;
        DMatrix::from_fn(3 * bins, n, |row, p| grad.logits(p, row / bins)[row % bins])
    }

    /// Forward pass of one branch.
    pub fn forward(&self, branch: Branch, features: &[Vector3<f64>]) -> BinLogitMap {
        let phi = self.lift_matrix(branch, features);
        self.logits_from_matrix(&(self.weight(branch) * &phi))
    }

    /// Forward pass of all branches.
    pub fn forward_all(&self, features: &[Vector3<f64>]) -> BranchLogits {
        let (logits, _) = self.forward_cached(features);
        logits
    }

    fn forward_cached(&self, features: &[Vector3<f64>]) -> (BranchLogits, BranchCaches) {
        let n = features.len();
        let d = self.lift_a.out_dim();
        let mut phi_f = DMatrix::zeros(2 * d, n);
        for (j, x) in features.iter().enumerate() {
            self.lift_a.fill_column(x, phi_f.view_mut((0, j), (d, 1)).column_mut(0));
            self.lift_b.fill_column(x, phi_f.view_mut((d, j), (d, 1)).column_mut(0));
        }
        let phi_a = phi_f.rows(0, d).into_owned();
        let phi_b = phi_f.rows(d, d).into_owned();
        let logits = BranchLogits {
            a: self.logits_from_matrix(&(&self.w_a * &phi_a)),
            b: self.logits_from_matrix(&(&self.w_b * &phi_b)),
            fused: self.logits_from_matrix(&(&self.w_fused * &phi_f)),
        };
        (logits, BranchCaches { phi_a, phi_b, phi_f })
    }

    /// Convex blend `self ← γ·self + (1−γ)·other` over all branch weights.
    pub fn momentum_blend(&mut self, other: &ToyPredictor, gamma: f64) -> Result<()> {
        if self.bins != other.bins
            || self.lift_dim != other.lift_dim
            || self.rng_seed != other.rng_seed
        {
            return Err(Error::ShapeMismatch(
                "momentum blend requires architecturally identical predictors".into(),
            ));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidInput(format!("gamma {gamma} must be in [0,1]")));
        }
        if gamma == 1.0 {
            return Ok(());
        }
        for branch in Branch::ALL {
            let theirs = other.weight(branch).clone();
            let mine = self.weight_mut(branch);
            *mine = &*mine * gamma + theirs * (1.0 - gamma);
        }
        Ok(())
    }
}

struct BranchCaches {
    phi_a: DMatrix<f64>,
    phi_b: DMatrix<f64>,
    phi_f: DMatrix<f64>,
}

impl BranchCaches {
    fn get(&self, branch: Branch) -> &DMatrix<f64> {
        match branch {
            Branch::A => &self.phi_a,
            Branch::B => &self.phi_b,
            Branch::Fused => &self.phi_f,
        }
    }
}

/// Masked cross-entropy of one branch and its analytic weight gradient.
///
/// Returns the loss along with `dLoss/dW` for that branch; building block
/// for every training step and for finite-difference verification.
pub fn masked_ce_loss_and_grad(
    model: &ToyPredictor,
    branch: Branch,
    features: &[Vector3<f64>],
    targets: &BinTargetMap,
    mask: Option<&[bool]>,
) -> Result<(f64, DMatrix<f64>)> {
    let phi = model.lift_matrix(branch, features);
    let logits = model.logits_from_matrix(&(model.weight(branch) * &phi));
    let loss = cross_entropy(&logits, targets, mask)?;
    let g = cross_entropy_grad(&logits, targets, mask)?;
    Ok((loss, model.grad_to_matrix(&g) * phi.transpose()))
}

/// Which pseudo-label filter the adaptation loop applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    Bidirectional,
    TopK,
    TopKClasswise,
    Entropy,
    SoftmaxMax,
    SoftmaxAvg,
    ArgmaxMatch,
    None,
}

impl FilterMode {
    pub const ALL: [FilterMode; 8] = [
        FilterMode::Bidirectional,
        FilterMode::TopK,
        FilterMode::TopKClasswise,
        FilterMode::Entropy,
        FilterMode::SoftmaxMax,
        FilterMode::SoftmaxAvg,
        FilterMode::ArgmaxMatch,
        FilterMode::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FilterMode::Bidirectional => "bidirectional",
            FilterMode::TopK => "topk",
            FilterMode::TopKClasswise => "topk_classwise",
            FilterMode::Entropy => "entropy",
            FilterMode::SoftmaxMax => "softmax_max",
            FilterMode::SoftmaxAvg => "softmax_avg",
            FilterMode::ArgmaxMatch => "argmax_match",
            FilterMode::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown filter mode '{name}'")))
    }
}

/// Training hyperparameters for pre-training and adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Bidirectional filter threshold in NOCS units.
    pub rho: f64,
    /// Weight of the supervised NOCS term in the teacher loss.
    pub lambda_n: f64,
    /// Weight of the consistency term in the teacher loss.
    pub lambda_c: f64,
    pub student_lr: f64,
    /// Teacher learning rate for the self-supervised step on target data.
    pub teacher_lr_target: f64,
    pub momentum_gamma: f64,
    pub momentum_every: usize,
    pub momentum_update: bool,
    /// Enables the teacher self-supervision step (requires the pose-aware
    /// bidirectional filter to produce aligned depth).
    pub teacher_self_training: bool,
    pub epochs: usize,
    pub filter_mode: FilterMode,
    /// Apply training losses to all three branches instead of fused only.
    pub am_loss: bool,
    /// k% kept by the top-k and entropy baseline filters.
    pub k_percent: f64,
    pub bins: usize,
    pub lift_dim: usize,
    /// Per-step seeded point subsample size (capped at the instance size).
    pub points_per_step: usize,
    /// Std-dev of the additive feature jitter used as augmentation.
    pub aug_sigma: f64,
    /// Fraction of points dropped from the consistency term per step.
    pub aug_dropout: f64,
    /// Encoding of continuous coordinates into training targets.
    pub target_encoding: DiscretizeMode,
    pub ransac: RansacConfig,
    pub rng_seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        let student_lr = 0.5;
        Self {
            rho: 0.05,
            lambda_n: 1.0,
            lambda_c: 1e-6,
            student_lr,
            teacher_lr_target: 1e-4 * student_lr,
            momentum_gamma: 0.999,
            momentum_every: 100,
            momentum_update: true,
            teacher_self_training: true,
            epochs: 5,
            filter_mode: FilterMode::Bidirectional,
            am_loss: true,
            k_percent: 50.0,
            bins: crate::nocs::DEFAULT_BIN_COUNT,
            lift_dim: 64,
            points_per_step: 128,
            aug_sigma: 0.03,
            aug_dropout: 0.0,
            target_encoding: DiscretizeMode::Soft,
            ransac: RansacConfig::default(),
            rng_seed: 0,
        }
    }
}

/// Outcome of one adaptation step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub instance_id: u64,
    pub student_loss: f64,
    pub teacher_loss: Option<f64>,
    pub kept_count: usize,
    pub total_points: usize,
    pub pseudo_err_all: Option<f64>,
    pub pseudo_err_kept: Option<f64>,
    /// Pose solved by the bidirectional filter, when that mode ran.
    #[serde(skip)]
    pub pose: Option<SimilarityPose>,
    pub skipped: Option<String>,
}

/// Aggregates over one adaptation epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub skipped: usize,
    pub mean_student_loss: f64,
    pub mean_teacher_loss: Option<f64>,
    pub mean_kept_fraction: f64,
    pub pseudo_err_all: Option<f64>,
    pub pseudo_err_kept: Option<f64>,
}

fn subsample(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut idx = index_sample(rng, n, m).into_vec();
    idx.sort_unstable();
    idx
}

fn gather_vec3(src: &[Vector3<f64>], idx: &[usize]) -> Vec<Vector3<f64>> {
    idx.iter().map(|&i| src[i]).collect()
}

fn check_finite(loss: f64, context: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss {
            context: context.to_string(),
            value: loss,
        })
    }
}

/// One supervised + consistency gradient step; returns the total loss.
fn teacher_pretrain_step(
    model: &mut ToyPredictor,
    features: &[Vector3<f64>],
    targets: &BinTargetMap,
    cfg: &AdaptConfig,
    aug_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (logits, caches) = model.forward_cached(features);

    // Augmented view: fresh feature-noise redraw plus optional point dropout.
    let aug_features: Vec<Vector3<f64>> = features
        .iter()
        .map(|f| {
            let mut g = *f;
            for axis in 0..3 {
                g[axis] += cfg.aug_sigma * aug_rng.sample::<f64, _>(StandardNormal);
            }
            g
        })
        .collect();
    let cons_mask: Option<Vec<bool>> = if cfg.aug_dropout > 0.0 {
        let mask: Vec<bool> = (0..features.len())
            .map(|_| aug_rng.gen_range(0.0..1.0) >= cfg.aug_dropout)
            .collect();
        if mask.iter().any(|&m| m) {
            Some(mask)
        } else {
            None
        }
    } else {
        None
    };
    let (aug_logits, aug_caches) = model.forward_cached(&aug_features);

    let mut total = 0.0;
    let mut updates: Vec<(Branch, DMatrix<f64>)> = Vec::with_capacity(3);
    for branch in Branch::ALL {
        let pred = logits.get(branch);
        let sup_loss = cross_entropy(pred, targets, None)?;
        let sup_grad = model.grad_to_matrix(&cross_entropy_grad(pred, targets, None)?)
            * caches.get(branch).transpose();

        let cons_target = softmax_targets(pred);
        let aug_pred = aug_logits.get(branch);
        let cons_loss = cross_entropy(aug_pred, &cons_target, cons_mask.as_deref())?;
        let cons_grad = model
            .grad_to_matrix(&cross_entropy_grad(aug_pred, &cons_target, cons_mask.as_deref())?)
            * aug_caches.get(branch).transpose();

        total += cfg.lambda_n * sup_loss + cfg.lambda_c * cons_loss;
        updates.push((branch, sup_grad * cfg.lambda_n + cons_grad * cfg.lambda_c));
    }
    let lr = model.learning_rate;
    for (branch, g) in updates {
        *model.weight_mut(branch) -= g * lr;
    }
    check_finite(total, "teacher pre-training")
}

/// Supervised teacher pre-training on a labeled split.
///
/// Returns the trained predictor and the per-epoch mean loss curve.
pub fn pretrain_teacher(
    dataset: &[SceneInstance],
    cfg: &AdaptConfig,
) -> Result<(ToyPredictor, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::EmptySelection("pre-training split is empty".into()));
    }
    let mut model = ToyPredictor::new(cfg.bins, cfg.lift_dim, cfg.student_lr, cfg.rng_seed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = seeding::stream3(cfg.rng_seed, SALT_SHUFFLE, epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut losses = Vec::with_capacity(order.len());
        for &inst_idx in &order {
            let inst = &dataset[inst_idx];
            let mut sub_rng = seeding::stream3(cfg.rng_seed, SALT_SUBSET, global_step);
            let idx = subsample(inst.len(), cfg.points_per_step, &mut sub_rng);
            let feats = gather_vec3(&inst.feature, &idx);
            let coords = gather_vec3(inst.gt_nocs.coords(), &idx);
            let targets = discretize(&NocsMap::new(coords)?, cfg.bins, cfg.target_encoding)?;
            let mut aug_rng = seeding::stream3(cfg.rng_seed, SALT_AUG, global_step);
            losses.push(teacher_pretrain_step(
                &mut model, &feats, &targets, cfg, &mut aug_rng,
            )?);
            global_step += 1;
        }
        curve.push(exec::pairwise_sum(&losses) / losses.len() as f64);
    }
    Ok((model, curve))
}

/// Teacher inference on one instance: decoded pseudo labels plus the raw
/// branch logits for the ensemble filters.
pub fn make_pseudo_labels(teacher: &ToyPredictor, instance: &SceneInstance) -> (NocsMap, BranchLogits) {
    let logits = teacher.forward_all(&instance.feature);
    (decode(&logits.fused), logits)
}

struct FilterOutcome {
    pseudo: NocsMap,
    kept: Vec<bool>,
    aligned: Option<PointSet>,
    pose: Option<SimilarityPose>,
}

fn apply_filter(
    pseudo: NocsMap,
    logits: &BranchLogits,
    depth: &PointSet,
    class_index: u32,
    global_step: u64,
    cfg: &AdaptConfig,
) -> Result<FilterOutcome> {
    match cfg.filter_mode {
        FilterMode::Bidirectional => {
            let ransac = RansacConfig {
                rng_seed: seeding::mix3(cfg.rng_seed, SALT_RANSAC, global_step),
                ..cfg.ransac.clone()
            };
            let res = filter::bidirectional_filter(&pseudo, depth, cfg.rho, &ransac)?;
            let aligned = geom::align_depth(depth, &res.pose_used);
            Ok(FilterOutcome {
                pseudo,
                kept: res.kept_mask,
                aligned: Some(aligned),
                pose: Some(res.pose_used),
            })
        }
        FilterMode::TopK => Ok(FilterOutcome {
            kept: filter::topk_conf(&logits.fused, cfg.k_percent)?,
            pseudo,
            aligned: None,
            pose: None,
        }),
        FilterMode::TopKClasswise => {
            let all: Vec<u32> = crate::synth::ObjectClass::ALL.iter().map(|c| c.index()).collect();
            let masks = filter::topk_conf_classwise(
                std::slice::from_ref(&logits.fused),
                &[class_index],
                &all,
                cfg.k_percent,
            )?;
            Ok(FilterOutcome {
                kept: masks.into_iter().next().unwrap(),
                pseudo,
                aligned: None,
                pose: None,
            })
        }
        FilterMode::Entropy => Ok(FilterOutcome {
            kept: filter::entropy_filter(&logits.fused, cfg.k_percent)?,
            pseudo,
            aligned: None,
            pose: None,
        }),
        FilterMode::SoftmaxMax | FilterMode::SoftmaxAvg | FilterMode::ArgmaxMatch => {
            let mode = match cfg.filter_mode {
                FilterMode::SoftmaxMax => EnsembleMode::SoftmaxMax,
                FilterMode::SoftmaxAvg => EnsembleMode::SoftmaxAvg,
                _ => EnsembleMode::ArgmaxMatch,
            };
            let (composed, kept) = filter::ensemble_filter(&logits.a, &logits.b, &logits.fused, mode)?;
            Ok(FilterOutcome {
                pseudo: composed,
                kept,
                aligned: None,
                pose: None,
            })
        }
        FilterMode::None => Ok(FilterOutcome {
            kept: vec![true; pseudo.len()],
            pseudo,
            aligned: None,
            pose: None,
        }),
    }
}

fn mean_masked_distance(
    pseudo: &NocsMap,
    reference: &[Vector3<f64>],
    mask: Option<&[bool]>,
) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (p, r)) in pseudo.coords().iter().zip(reference).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            total += (p - r).norm();
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// One teacher–student update on a target instance.
///
/// Skips (with a reason in the report) when the pose solve finds no
/// consensus or the filter keeps nothing; any other error aborts.
pub fn adapt_step(
    teacher: &mut ToyPredictor,
    student: &mut ToyPredictor,
    instance: &SceneInstance,
    global_step: u64,
    cfg: &AdaptConfig,
) -> Result<StepReport> {
    let mut sub_rng = seeding::stream3(cfg.rng_seed, SALT_SUBSET, global_step);
    let idx = subsample(instance.len(), cfg.points_per_step, &mut sub_rng);
    let feats = gather_vec3(&instance.feature, &idx);
    let depth = PointSet::new(gather_vec3(instance.depth.points(), &idx))?;
    let gt_sub = gather_vec3(instance.gt_nocs.coords(), &idx);

    let (t_logits, t_caches) = teacher.forward_cached(&feats);
    let pseudo = decode(&t_logits.fused);
    let raw_err_all = mean_masked_distance(&pseudo, &gt_sub, None);

    let total_points = idx.len();
    let skip_report = move |reason: String| StepReport {
        instance_id: instance.id,
        student_loss: 0.0,
        teacher_loss: None,
        kept_count: 0,
        total_points,
        pseudo_err_all: raw_err_all,
        pseudo_err_kept: None,
        pose: None,
        skipped: Some(reason),
    };

    let outcome = match apply_filter(pseudo, &t_logits, &depth, instance.class_id.index(), global_step, cfg)
    {
        Ok(o) => o,
        Err(Error::NoConsensus { .. }) => {
            return Ok(skip_report("no consensus in pose solve".into()));
        }
        Err(e) => return Err(e),
    };
    if outcome.kept.iter().all(|&k| !k) {
        return Ok(skip_report("filter kept no points".into()));
    }

    let pseudo_err_all = mean_masked_distance(&outcome.pseudo, &gt_sub, None);
    let pseudo_err_kept = mean_masked_distance(&outcome.pseudo, &gt_sub, Some(&outcome.kept));

    // Student step: cross-entropy toward the kept pseudo labels.
    let student_targets = discretize(&outcome.pseudo, cfg.bins, cfg.target_encoding)?;
    let (s_logits, s_caches) = student.forward_cached(&feats);
    let student_branches: &[Branch] = if cfg.am_loss {
        &Branch::ALL
    } else {
        std::slice::from_ref(&Branch::Fused)
    };
    let mut student_loss = 0.0;
    let mut s_updates = Vec::new();
    for &branch in student_branches {
        let pred = s_logits.get(branch);
        let loss = cross_entropy(pred, &student_targets, Some(&outcome.kept))?;
        if branch == Branch::Fused {
            student_loss = loss;
        }
        let g = student.grad_to_matrix(&cross_entropy_grad(pred, &student_targets, Some(&outcome.kept))?)
            * s_caches.get(branch).transpose();
        s_updates.push((branch, g));
    }
    check_finite(student_loss, "student adaptation")?;
    let s_lr = student.learning_rate;
    for (branch, g) in s_updates {
        *student.weight_mut(branch) -= g * s_lr;
    }

    // Teacher self-supervision toward the filtered aligned depth.
    let mut teacher_loss = None;
    if cfg.teacher_self_training {
        if let Some(aligned) = &outcome.aligned {
            let aligned_targets = discretize(
                &NocsMap::new(aligned.points().to_vec())?,
                cfg.bins,
                DiscretizeMode::Soft,
            )?;
            let teacher_branches: &[Branch] = if cfg.am_loss {
                &Branch::ALL
            } else {
                std::slice::from_ref(&Branch::Fused)
            };
            let mut t_updates = Vec::new();
            for &branch in teacher_branches {
                let pred = t_logits.get(branch);
                let loss = cross_entropy(pred, &aligned_targets, Some(&outcome.kept))?;
                if branch == Branch::Fused {
                    teacher_loss = Some(check_finite(loss, "teacher self-supervision")?);
                }
                let g = teacher
                    .grad_to_matrix(&cross_entropy_grad(pred, &aligned_targets, Some(&outcome.kept))?)
                    * t_caches.get(branch).transpose();
                t_updates.push((branch, g));
            }
            for (branch, g) in t_updates {
                *teacher.weight_mut(branch) -= g * cfg.teacher_lr_target;
            }
        }
    }

    // Periodic momentum update: teacher ← γ·teacher + (1−γ)·student.
    if cfg.momentum_update && cfg.momentum_every > 0 && (global_step + 1) % cfg.momentum_every as u64 == 0
    {
        teacher.momentum_blend(student, cfg.momentum_gamma)?;
    }

    Ok(StepReport {
        instance_id: instance.id,
        student_loss,
        teacher_loss,
        kept_count: outcome.kept.iter().filter(|&&k| k).count(),
        total_points: idx.len(),
        pseudo_err_all,
        pseudo_err_kept,
        pose: outcome.pose,
        skipped: None,
    })
}

/// Runs the adaptation loop; the student starts as a copy of the teacher.
pub fn run_adaptation(
    teacher: ToyPredictor,
    dataset: &[SceneInstance],
    cfg: &AdaptConfig,
) -> Result<(ToyPredictor, ToyPredictor, Vec<EpochReport>)> {
    let mut teacher = teacher;
    let mut student = teacher.clone();
    let mut reports = Vec::with_capacity(cfg.epochs);
    if dataset.is_empty() && cfg.epochs > 0 {
        return Err(Error::EmptySelection("adaptation split is empty".into()));
    }
    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = seeding::stream3(cfg.rng_seed, SALT_SHUFFLE, 0x1000 + epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut step_reports = Vec::with_capacity(order.len());
        for &inst_idx in &order {
            let report = adapt_step(&mut teacher, &mut student, &dataset[inst_idx], global_step, cfg)?;
            global_step += 1;
            step_reports.push(report);
        }
        reports.push(summarize_epoch(epoch, &step_reports));
    }
    Ok((student, teacher, reports))
}

fn summarize_epoch(epoch: usize, steps: &[StepReport]) -> EpochReport {
    let active: Vec<&StepReport> = steps.iter().filter(|r| r.skipped.is_none()).collect();
    let skipped = steps.len() - active.len();
    let mean = |xs: Vec<f64>| -> Option<f64> {
        (!xs.is_empty()).then(|| exec::pairwise_sum(&xs) / xs.len() as f64)
    };
    let mean_student = mean(active.iter().map(|r| r.student_loss).collect()).unwrap_or(0.0);
    let mean_teacher = mean(active.iter().filter_map(|r| r.teacher_loss).collect());
    let mean_kept = mean(
        active
            .iter()
            .map(|r| r.kept_count as f64 / r.total_points.max(1) as f64)
            .collect(),
    )
    .unwrap_or(0.0);
    let err_all = mean(active.iter().filter_map(|r| r.pseudo_err_all).collect());
    let err_kept = mean(active.iter().filter_map(|r| r.pseudo_err_kept).collect());
    EpochReport {
        epoch,
        steps: steps.len(),
        skipped,
        mean_student_loss: mean_student,
        mean_teacher_loss: mean_teacher,
        mean_kept_fraction: mean_kept,
        pseudo_err_all: err_all,
        pseudo_err_kept: err_kept,
    }
}

/// Fraction of instances whose predicted pose lands within the rotation and
/// translation thresholds, using each category's default symmetry.
pub fn pose_accuracy(
    model: &ToyPredictor,
    instances: &[SceneInstance],
    max_rot_deg: f64,
    max_trans_m: f64,
    ransac: &RansacConfig,
) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let hits = exec::map_slice(instances, |inst| {
        let logits = model.forward(Branch::Fused, &inst.feature);
        let pseudo = decode(&logits);
        match crate::nocs::pose_and_size(&pseudo, &inst.depth, ransac) {
            Ok((pose, _)) => {
                let rot = geom::geodesic_rotation_error(
                    pose.rotation(),
                    inst.gt_pose.rotation(),
                    &inst.class_id.default_symmetry(),
                );
                let trans = (pose.translation() - inst.gt_pose.translation()).norm();
                (rot <= max_rot_deg && trans <= max_trans_m) as u32 as f64
            }
            Err(_) => 0.0,
        }
    });
    exec::pairwise_sum(&hits) / instances.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_instances, CategorySpec, NoiseModel, ObjectClass};
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> AdaptConfig {
        AdaptConfig {
            epochs: 3,
            points_per_step: 64,
            rng_seed: 5,
            ..AdaptConfig::default()
        }
    }

    fn tiny_split(n: usize, noise: &NoiseModel, seed: u64) -> Vec<SceneInstance> {
        generate_instances(&CategorySpec::default_all(), n, 96, noise, seed).unwrap()
    }

    #[test]
    fn untrained_predictor_decodes_to_half() {
        let model = ToyPredictor::new(8, 16, 0.1, 3);
        let feats = vec![Vector3::new(0.2, 0.8, 0.5); 4];
        let logits = model.forward(Branch::Fused, &feats);
        assert!(logits.raw().iter().all(|&l| l == 0.0));
        let decoded = decode(&logits);
        for c in decoded.coords() {
            for axis in 0..3 {
                assert_abs_diff_eq!(c[axis], 0.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn make_pseudo_labels_matches_direct_forward() {
        let split = tiny_split(2, &NoiseModel::source_default(), 8);
        let model = ToyPredictor::new(16, 24, 0.2, 4);
        let (pl, logits) = make_pseudo_labels(&model, &split[0]);
        let direct_fused = model.forward(Branch::Fused, &split[0].feature);
        assert_eq!(logits.fused, direct_fused);
        assert_eq!(logits.a, model.forward(Branch::A, &split[0].feature));
        assert_eq!(logits.b, model.forward(Branch::B, &split[0].feature));
        let direct_pl = decode(&direct_fused);
        assert_eq!(pl, direct_pl);
    }

    #[test]
    fn pretrain_loss_decreases_and_is_deterministic() {
        let split = tiny_split(24, &NoiseModel::source_default(), 9);
        let cfg = AdaptConfig {
            epochs: 5,
            ..tiny_cfg()
        };
        let (_, curve_a) = pretrain_teacher(&split, &cfg).unwrap();
        let (_, curve_b) = pretrain_teacher(&split, &cfg).unwrap();
        assert_eq!(curve_a, curve_b);
        for w in curve_a.windows(2) {
            assert!(w[1] < w[0], "loss curve not strictly decreasing: {curve_a:?}");
        }
    }

    #[test]
    fn pretrain_lambda_decomposition() {
        // With λ_C = 0 the step loss must equal the plain supervised CE
        // computed through the public oracle path.
        let split = tiny_split(4, &NoiseModel::source_default(), 10);
        let cfg = AdaptConfig {
            lambda_c: 0.0,
            epochs: 1,
            ..tiny_cfg()
        };
        let inst = &split[0];
        let mut model = ToyPredictor::new(cfg.bins, cfg.lift_dim, cfg.student_lr, cfg.rng_seed);
        let mut sub_rng = seeding::stream3(cfg.rng_seed, SALT_SUBSET, 0);
        let idx = subsample(inst.len(), cfg.points_per_step, &mut sub_rng);
        let feats = gather_vec3(&inst.feature, &idx);
        let coords = NocsMap::new(gather_vec3(inst.gt_nocs.coords(), &idx)).unwrap();
        let targets = discretize(&coords, cfg.bins, cfg.target_encoding).unwrap();
        let expected: f64 = Branch::ALL
            .iter()
            .map(|&b| {
                cross_entropy(&model.forward(b, &feats), &targets, None).unwrap()
            })
            .sum();
        let mut aug_rng = seeding::stream3(cfg.rng_seed, SALT_AUG, 0);
        let loss = teacher_pretrain_step(&mut model, &feats, &targets, &cfg, &mut aug_rng).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-9);
    }

    #[test]
    fn pretrain_fits_noiseless_features() {
        // Zero-noise features make the mapping feature -> bin exactly
        // learnable; argmax-bin accuracy on the training set must reach 0.99.
        let noise = NoiseModel::noiseless();
        let split = tiny_split(12, &noise, 11);
        let cfg = AdaptConfig {
            epochs: 200,
            points_per_step: 96,
            ..tiny_cfg()
        };
        let (model, curve) = pretrain_teacher(&split, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let mut hits = 0usize;
        let mut total = 0usize;
        for inst in &split {
            let logits = model.forward(Branch::Fused, &inst.feature);
            for (p, c) in inst.gt_nocs.coords().iter().enumerate() {
                for axis in 0..3 {
                    let probs = logits.softmax(p, axis);
                    let pred_bin = probs
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    let true_bin = ((c[axis] * cfg.bins as f64).floor() as usize).min(cfg.bins - 1);
                    hits += (pred_bin == true_bin) as usize;
                    total += 1;
                }
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc >= 0.99, "argmax bin accuracy {acc}");
    }

    #[test]
    fn masked_ce_weight_grad_matches_finite_differences() {
        let split = tiny_split(2, &NoiseModel::source_default(), 12);
        let inst = &split[0];
        let mut model = ToyPredictor::new(8, 12, 0.1, 6);
        // Give the weights some structure first.
        let cfg = AdaptConfig {
            bins: 8,
            lift_dim: 12,
            epochs: 1,
            ..tiny_cfg()
        };
        let (trained, _) = pretrain_teacher(&split, &cfg).unwrap();
        model.clone_from(&trained);
        let feats = inst.feature[..32].to_vec();
        let coords = NocsMap::new(inst.gt_nocs.coords()[..32].to_vec()).unwrap();
        let targets = discretize(&coords, 8, DiscretizeMode::Soft).unwrap();
        let mask: Vec<bool> = (0..32).map(|i| i % 3 != 0).collect();
        let eps = 1e-5;
        let mut rng = seeding::stream(13, 14);
        for branch in Branch::ALL {
            let (_, grad) =
                masked_ce_loss_and_grad(&model, branch, &feats, &targets, Some(&mask)).unwrap();
            for _ in 0..8 {
                let r = rng.gen_range(0..grad.nrows());
                let c = rng.gen_range(0..grad.ncols());
                let mut plus = model.clone();
                plus.weight_mut(branch)[(r, c)] += eps;
                let mut minus = model.clone();
                minus.weight_mut(branch)[(r, c)] -= eps;
                let (lp, _) =
                    masked_ce_loss_and_grad(&plus, branch, &feats, &targets, Some(&mask)).unwrap();
                let (lm, _) =
                    masked_ce_loss_and_grad(&minus, branch, &feats, &targets, Some(&mask)).unwrap();
                let fd = (lp - lm) / (2.0 * eps);
                let g = grad[(r, c)];
                let denom = g.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (g - fd).abs() / denom < 1e-6,
                    "{branch:?} ({r},{c}): analytic {g} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn momentum_blend_gamma_one_is_identity() {
        let a = ToyPredictor::new(8, 12, 0.1, 6);
        let mut b = a.clone();
        let mut other = a.clone();
        other.weight_mut(Branch::Fused)[(0, 0)] = 5.0;
        b.momentum_blend(&other, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_blend_is_convex() {
        let mut teacher = ToyPredictor::new(4, 8, 0.1, 7);
        let mut student = teacher.clone();
        teacher.weight_mut(Branch::A)[(1, 1)] = 2.0;
        student.weight_mut(Branch::A)[(1, 1)] = -4.0;
        teacher.momentum_blend(&student, 0.25).unwrap();
        let blended = teacher.weight(Branch::A)[(1, 1)];
        assert_abs_diff_eq!(blended, 0.25 * 2.0 + 0.75 * (-4.0), epsilon = 1e-12);
        assert!(blended >= -4.0 && blended <= 2.0);
    }

    #[test]
    fn adapt_step_none_mode_matches_naive_oracle() {
        let split = tiny_split(3, &NoiseModel::target_default(), 15);
        let cfg = AdaptConfig {
            filter_mode: FilterMode::None,
            am_loss: false,
            epochs: 1,
            ..tiny_cfg()
        };
        let pre = AdaptConfig {
            epochs: 2,
            ..cfg.clone()
        };
        let source = tiny_split(8, &NoiseModel::source_default(), 16);
        let (teacher0, _) = pretrain_teacher(&source, &pre).unwrap();
        let mut teacher = teacher0.clone();
        let mut student = teacher0.clone();
        let inst = &split[0];
        let report = adapt_step(&mut teacher, &mut student, inst, 0, &cfg).unwrap();
        assert!(report.skipped.is_none());
        assert_eq!(report.kept_count, report.total_points);

        // Hand-rolled oracle: same subset, CE of the initial student fused
        // logits against the discretized pseudo labels.
        let mut sub_rng = seeding::stream3(cfg.rng_seed, SALT_SUBSET, 0);
        let idx = subsample(inst.len(), cfg.points_per_step, &mut sub_rng);
        let feats = gather_vec3(&inst.feature, &idx);
        let pseudo = decode(&teacher0.forward(Branch::Fused, &feats));
        let targets = discretize(&pseudo, cfg.bins, cfg.target_encoding).unwrap();
        let expected =
            cross_entropy(&teacher0.forward(Branch::Fused, &feats), &targets, None).unwrap();
        assert_abs_diff_eq!(report.student_loss, expected, epsilon = 1e-9);
    }

    #[test]
    fn adapt_step_infinite_rho_equals_none_mode() {
        let split = tiny_split(3, &NoiseModel::target_default(), 17);
        let source = tiny_split(8, &NoiseModel::source_default(), 18);
        let pre = AdaptConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let (teacher0, _) = pretrain_teacher(&source, &pre).unwrap();

        let bidir_cfg = AdaptConfig {
            filter_mode: FilterMode::Bidirectional,
            rho: f64::INFINITY,
            ..tiny_cfg()
        };
        let none_cfg = AdaptConfig {
            filter_mode: FilterMode::None,
            ..tiny_cfg()
        };
        let mut t1 = teacher0.clone();
        let mut s1 = teacher0.clone();
        let r1 = adapt_step(&mut t1, &mut s1, &split[0], 0, &bidir_cfg).unwrap();
        let mut t2 = teacher0.clone();
        let mut s2 = teacher0.clone();
        let r2 = adapt_step(&mut t2, &mut s2, &split[0], 0, &none_cfg).unwrap();
        assert_eq!(r1.kept_count, r2.kept_count);
        assert!((r1.student_loss - r2.student_loss).abs() < 1e-12);
    }

    #[test]
    fn run_adaptation_zero_epochs_returns_models_unchanged() {
        let source = tiny_split(4, &NoiseModel::source_default(), 19);
        let cfg = AdaptConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let (teacher, _) = pretrain_teacher(&source, &AdaptConfig { epochs: 1, ..tiny_cfg() }).unwrap();
        let (student, teacher_out, reports) = run_adaptation(teacher.clone(), &source, &cfg).unwrap();
        assert_eq!(student, teacher);
        assert_eq!(teacher_out, teacher);
        assert!(reports.is_empty());
    }

    #[test]
    fn run_adaptation_is_deterministic() {
        let source = tiny_split(8, &NoiseModel::source_default(), 20);
        let target = tiny_split(6, &NoiseModel::target_default(), 21);
        let cfg = AdaptConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let (teacher, _) = pretrain_teacher(&source, &cfg).unwrap();
        let (_, _, reports_a) = run_adaptation(teacher.clone(), &target, &cfg).unwrap();
        let (_, _, reports_b) = run_adaptation(teacher, &target, &cfg).unwrap();
        let json_a = serde_json::to_string(&reports_a).unwrap();
        let json_b = serde_json::to_string(&reports_b).unwrap();
        assert_eq!(json_a, json_b);
    }
}
