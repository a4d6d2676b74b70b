//! Pseudo-label point filtering.
//!
//! [`bidirectional_filter`] is the pose-aware route: solve a similarity pose
//! between the pseudo NOCS labels and observed depth, align depth back into
//! NOCS space, and drop every point whose label–depth distance reaches the
//! threshold ρ. The same mask prunes both the labels and the aligned depth.
//!
//! The remaining filters are the logit-only baselines used for comparison:
//! top-k confidence (pooled and class-wise), entropy, and the three
//! multi-branch ensemble composition rules.

use crate::exec;
use crate::geom::{self, NocsMap, PointSet, RansacConfig, SimilarityPose};
use crate::nocs::{shannon_entropy, BinLogitMap};
use crate::{Error, Result};
use nalgebra::Vector3;

/// Outcome of a bidirectional filtering pass.
///
/// `kept_mask[i]` is true exactly when `distances[i] < rho`. An all-false
/// mask is a flagged condition, not an error; callers decide whether to skip.
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub kept_mask: Vec<bool>,
    pub distances: Vec<f64>,
    pub pose_used: SimilarityPose,
    pub rho: f64,
}

impl FilterResult {
    pub fn kept_count(&self) -> usize {
        self.kept_mask.iter().filter(|&&k| k).count()
    }

    /// True when no point survived the threshold.
    pub fn is_empty_selection(&self) -> bool {
        self.kept_mask.iter().all(|&k| !k)
    }
}

/// Pose-aware bidirectional filtering.
///
/// Distances are measured in NOCS units between the aligned depth `P'` and
/// the pseudo labels; the keep test is the strict inequality `d < rho`, so
/// `rho = 0` keeps nothing.
pub fn bidirectional_filter(
    pseudo: &NocsMap,
    depth: &PointSet,
    rho: f64,
    cfg: &RansacConfig,
) -> Result<FilterResult> {
    if pseudo.len() != depth.len() {
        return Err(Error::ShapeMismatch(format!(
            "bidirectional_filter: pseudo has {} points, depth has {}",
            pseudo.len(),
            depth.len()
        )));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidInput(format!("rho {rho} must be >= 0")));
    }
    let (pose, _) = geom::ransac_pose(pseudo, depth, cfg)?;
    let aligned = geom::align_depth(depth, &pose);
    let distances: Vec<f64> = aligned
        .points()
        .iter()
        .zip(pseudo.coords())
        .map(|(p, n)| (p - n).norm())
        .collect();
    let kept_mask = distances.iter().map(|&d| d < rho).collect();
    Ok(FilterResult {
        kept_mask,
        distances,
        pose_used: pose,
        rho,
    })
}

fn selection_count(n: usize, k_percent: f64) -> usize {
    ((n as f64) * k_percent / 100.0).ceil() as usize
}

fn validate_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::InvalidInput(format!(
            "k_percent {k_percent} must be in (0, 100]"
        )));
    }
    Ok(())
}

/// Marks the top `count` entries of `scores`; ties break toward the lower
/// index, and `higher_better` flips the ordering.
fn select_extreme(scores: &[f64], count: usize, higher_better: bool) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = if higher_better {
            scores[b].partial_cmp(&scores[a])
        } else {
            scores[a].partial_cmp(&scores[b])
        };
        cmp.expect("scores are finite").then(a.cmp(&b))
    });
    let mut mask = vec![false; scores.len()];
    for &i in order.iter().take(count) {
        mask[i] = true;
    }
    mask
}

/// Per-point confidence: product over the three axes of the max softmax
/// probability.
pub fn point_confidences(logits: &BinLogitMap) -> Vec<f64> {
    exec::map_indices(logits.len(), |p| {
        let mut conf = 1.0;
        for axis in 0..3 {
            let probs = logits.softmax(p, axis);
            conf *= probs.iter().fold(0.0f64, |a, &b| a.max(b));
        }
        conf
    })
}

/// Per-point entropy: sum over the three axes of the softmax entropy.
pub fn point_entropies(logits: &BinLogitMap) -> Vec<f64> {
    exec::map_indices(logits.len(), |p| {
        (0..3).map(|axis| shannon_entropy(&logits.softmax(p, axis))).sum()
    })
}

/// Keeps the top ⌈n·k/100⌉ points by confidence.
pub fn topk_conf(logits: &BinLogitMap, k_percent: f64) -> Result<Vec<bool>> {
    validate_k(k_percent)?;
    let conf = point_confidences(logits);
    Ok(select_extreme(
        &conf,
        selection_count(conf.len(), k_percent),
        true,
    ))
}

/// Class-wise top-k: points pool across all instances of the same class and
/// each class keeps its own top ⌈n_class·k/100⌉.
pub fn topk_conf_classwise(
    logits_per_instance: &[BinLogitMap],
    class_ids: &[u32],
    declared_classes: &[u32],
    k_percent: f64,
) -> Result<Vec<Vec<bool>>> {
    validate_k(k_percent)?;
    if logits_per_instance.len() != class_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} instances vs {} class ids",
            logits_per_instance.len(),
            class_ids.len()
        )));
    }
    for &c in class_ids {
        if !declared_classes.contains(&c) {
            return Err(Error::UnknownClass(format!("class id {c}")));
        }
    }
    let mut masks: Vec<Vec<bool>> = logits_per_instance
        .iter()
        .map(|l| vec![false; l.len()])
        .collect();
    for &class in declared_classes {
        // Pool (instance, point) pairs for this class in instance order so
        // the index tie-break stays deterministic.
        let mut scores = Vec::new();
        let mut owners = Vec::new();
        for (inst, (l, &c)) in logits_per_instance.iter().zip(class_ids).enumerate() {
            if c != class {
                continue;
            }
            for (p, conf) in point_confidences(l).into_iter().enumerate() {
                scores.push(conf);
                owners.push((inst, p));
            }
        }
        if scores.is_empty() {
            continue;
        }
        let mask = select_extreme(&scores, selection_count(scores.len(), k_percent), true);
        for (keep, &(inst, p)) in mask.iter().zip(&owners) {
            if *keep {
                masks[inst][p] = true;
            }
        }
    }
    Ok(masks)
}

/// Keeps the ⌈n·k/100⌉ lowest-entropy points.
pub fn entropy_filter(logits: &BinLogitMap, k_percent: f64) -> Result<Vec<bool>> {
    validate_k(k_percent)?;
    let ent = point_entropies(logits);
    Ok(select_extreme(
        &ent,
        selection_count(ent.len(), k_percent),
        false,
    ))
}

/// Composition rule for the three-branch ensemble filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Per point/axis, take the branch whose max softmax is largest.
    SoftmaxMax,
    /// Average the three softmax distributions.
    SoftmaxAvg,
    /// Keep a point only when all three branches agree on every axis argmax.
    ArgmaxMatch,
}

fn expectation(probs: &[f64], bins: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, &q)| q * (k as f64 + 0.5) / bins as f64)
        .sum()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Composes a pseudo label from the three branch predictions.
///
/// `SoftmaxMax` and `SoftmaxAvg` keep every point; `ArgmaxMatch` keeps only
/// points where the branches agree, decoding the fused branch.
pub fn ensemble_filter(
    l2d: &BinLogitMap,
    l3d: &BinLogitMap,
    lfused: &BinLogitMap,
    mode: EnsembleMode,
) -> Result<(NocsMap, Vec<bool>)> {
    if !l2d.same_shape(l3d) || !l2d.same_shape(lfused) {
        return Err(Error::ShapeMismatch(
            "ensemble_filter: branch logit maps disagree in shape".into(),
        ));
    }
    let n = l2d.len();
    let bins = l2d.bins();
    let branches = [l2d, l3d, lfused];

    let rows: Vec<(Vector3<f64>, bool)> = exec::map_indices(n, |p| match mode {
        EnsembleMode::SoftmaxMax => {
            let mut c = Vector3::zeros();
            for axis in 0..3 {
                let dists: Vec<Vec<f64>> = branches.iter().map(|b| b.softmax(p, axis)).collect();
                let mut best = 0;
                let mut best_peak = f64::NEG_INFINITY;
                for (bi, d) in dists.iter().enumerate() {
                    let peak = d.iter().fold(0.0f64, |a, &b| a.max(b));
                    if peak > best_peak {
                        best_peak = peak;
                        best = bi;
                    }
                }
                c[axis] = expectation(&dists[best], bins);
            }
            (c, true)
        }
        EnsembleMode::SoftmaxAvg => {
            let mut c = Vector3::zeros();
            for axis in 0..3 {
                let mut avg = vec![0.0; bins];
                for b in branches {
                    for (a, q) in avg.iter_mut().zip(b.softmax(p, axis)) {
                        *a += q / 3.0;
                    }
                }
                c[axis] = expectation(&avg, bins);
            }
            (c, true)
        }
        EnsembleMode::ArgmaxMatch => {
            let mut agree = true;
            for axis in 0..3 {
                let k0 = argmax(branches[0].logits(p, axis));
                let k1 = argmax(branches[1].logits(p, axis));
                let k2 = argmax(branches[2].logits(p, axis));
                if k0 != k1 || k1 != k2 {
                    agree = false;
                    break;
                }
            }
            let mut c = Vector3::zeros();
            for axis in 0..3 {
                c[axis] = expectation(&lfused.softmax(p, axis), bins);
            }
            (c, agree)
        }
    });

    let coords = rows.iter().map(|(c, _)| *c).collect();
    let mask = rows.iter().map(|(_, k)| *k).collect();
    Ok((NocsMap::new(coords)?, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nocs::decode;
    use crate::seeding;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_logits(rng: &mut impl Rng, len: usize, bins: usize) -> BinLogitMap {
        let data: Vec<f64> = (0..len * 3 * bins).map(|_| rng.gen_range(-4.0..4.0)).collect();
        BinLogitMap::from_raw(data, len, bins).unwrap()
    }

    fn consistent_pair(n: usize, seed: u64) -> (NocsMap, PointSet, SimilarityPose) {
        let mut rng = seeding::stream(seed, 77);
        let coords: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let rot = geom::rotation_about_axis(&Vector3::new(0.3, 1.0, -0.2), 0.9);
        let pose = SimilarityPose::new(rot, Vector3::new(0.1, 0.2, 0.8), 0.35).unwrap();
        let depth: Vec<_> = coords.iter().map(|c| pose.apply(c)).collect();
        (
            NocsMap::new(coords).unwrap(),
            PointSet::new(depth).unwrap(),
            pose,
        )
    }

    #[test]
    fn bidirectional_keeps_everything_on_consistent_pair() {
        let (pseudo, depth, _) = consistent_pair(100, 1);
        let res = bidirectional_filter(&pseudo, &depth, 0.05, &RansacConfig::default()).unwrap();
        assert_eq!(res.kept_count(), 100);
        assert!(res.distances.iter().all(|&d| d < 1e-9));
    }

    #[test]
    fn bidirectional_rho_zero_keeps_nothing() {
        let (pseudo, depth, _) = consistent_pair(50, 2);
        let res = bidirectional_filter(&pseudo, &depth, 0.0, &RansacConfig::default()).unwrap();
        assert!(res.is_empty_selection());
    }

    #[test]
    fn bidirectional_separates_corrupted_labels() {
        let (pseudo, depth, _) = consistent_pair(200, 3);
        let mut rng = seeding::stream(3, 78);
        let mut coords = pseudo.coords().to_vec();
        let mut corrupted = vec![false; 200];
        for i in 0..40 {
            let idx = i * 5;
            coords[idx] = Vector3::new(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            );
            corrupted[idx] = true;
        }
        let pseudo = NocsMap::new(coords).unwrap();
        let res = bidirectional_filter(&pseudo, &depth, 0.05, &RansacConfig::default()).unwrap();
        let mut kept_clean = 0;
        let mut kept_total = 0;
        let clean_total = corrupted.iter().filter(|&&c| !c).count();
        for (i, &kept) in res.kept_mask.iter().enumerate() {
            if kept {
                kept_total += 1;
                if !corrupted[i] {
                    kept_clean += 1;
                }
            }
        }
        let recall = kept_clean as f64 / clean_total as f64;
        let precision = kept_clean as f64 / kept_total as f64;
        assert!(recall >= 0.99, "recall {recall}");
        assert!(precision >= 0.95, "precision {precision}");
    }

    #[test]
    fn bidirectional_distances_are_reproducible_from_pose() {
        let (pseudo, depth, _) = consistent_pair(80, 4);
        let res = bidirectional_filter(&pseudo, &depth, 0.01, &RansacConfig::default()).unwrap();
        let aligned = geom::align_depth(&depth, &res.pose_used);
        for i in 0..80 {
            let d = (aligned.points()[i] - pseudo.coords()[i]).norm();
            assert!((d - res.distances[i]).abs() < 1e-12);
            assert_eq!(res.kept_mask[i], d < res.rho);
        }
    }

    #[test]
    fn bidirectional_keep_count_monotone_in_rho() {
        let (pseudo, depth, _) = consistent_pair(120, 5);
        let mut rng = seeding::stream(5, 79);
        let mut coords = pseudo.coords().to_vec();
        for c in coords.iter_mut().step_by(4) {
            *c += Vector3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
            *c = c.map(|v| v.clamp(0.0, 1.0));
        }
        let pseudo = NocsMap::new(coords).unwrap();
        let mut prev = 0;
        for rho in [0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.5] {
            let res = bidirectional_filter(&pseudo, &depth, rho, &RansacConfig::default()).unwrap();
            assert!(res.kept_count() >= prev, "rho {rho}");
            prev = res.kept_count();
        }
    }

    #[test]
    fn topk_tie_break_takes_lower_indices() {
        let logits = BinLogitMap::zeros(10, 8);
        let mask = topk_conf(&logits, 50.0).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5);
        assert!(mask[..5].iter().all(|&m| m));
        assert!(mask[5..].iter().all(|&m| !m));
    }

    #[test]
    fn topk_full_percentage_keeps_all() {
        let mut rng = seeding::stream(6, 80);
        let logits = random_logits(&mut rng, 33, 8);
        let mask = topk_conf(&logits, 100.0).unwrap();
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn topk_matches_sort_oracle() {
        let mut rng = seeding::stream(7, 81);
        let logits = random_logits(&mut rng, 64, 16);
        let mask = topk_conf(&logits, 50.0).unwrap();
        let conf = point_confidences(&logits);
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap().then(a.cmp(&b)));
        let mut expected = vec![false; 64];
        for &i in order.iter().take(32) {
            expected[i] = true;
        }
        assert_eq!(mask, expected);
    }

    #[test]
    fn classwise_single_class_equals_pooled() {
        let mut rng = seeding::stream(8, 82);
        let a = random_logits(&mut rng, 20, 8);
        let b = random_logits(&mut rng, 30, 8);
        let masks =
            topk_conf_classwise(&[a.clone(), b.clone()], &[3, 3], &[3], 40.0).unwrap();
        // Pool manually and select the same way.
        let mut scores = point_confidences(&a);
        scores.extend(point_confidences(&b));
        let pooled = select_extreme(&scores, selection_count(50, 40.0), true);
        assert_eq!(&pooled[..20], &masks[0][..]);
        assert_eq!(&pooled[20..], &masks[1][..]);
    }

    #[test]
    fn classwise_splits_within_each_class() {
        // Two classes with disjoint confidence ranges: a global top-50 would
        // keep only the confident class; class-wise halves each of them.
        let sharp = BinLogitMap::from_fn(10, 8, |_, _, k| if k == 0 { 30.0 } else { 0.0 });
        let flat = BinLogitMap::zeros(10, 8);
        let masks = topk_conf_classwise(&[sharp, flat], &[1, 2], &[1, 2], 50.0).unwrap();
        assert_eq!(masks[0].iter().filter(|&&m| m).count(), 5);
        assert_eq!(masks[1].iter().filter(|&&m| m).count(), 5);
    }

    #[test]
    fn classwise_unknown_class_errors() {
        let logits = BinLogitMap::zeros(4, 8);
        let err = topk_conf_classwise(&[logits], &[9], &[1, 2], 50.0).unwrap_err();
        assert!(matches!(err, Error::UnknownClass(_)));
    }

    #[test]
    fn entropy_filter_prefers_sharp_points() {
        let mut logits = BinLogitMap::zeros(10, 16);
        for axis in 0..3 {
            logits.logits_mut(7, axis)[3] = 40.0;
        }
        let mask = entropy_filter(&logits, 10.0).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        assert!(mask[7]);

        let uniform = BinLogitMap::zeros(10, 16);
        let mask = entropy_filter(&uniform, 30.0).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 3);
        assert!(mask[0] && mask[1] && mask[2]);
    }

    #[test]
    fn entropy_filter_matches_sort_oracle() {
        let mut rng = seeding::stream(9, 83);
        let logits = random_logits(&mut rng, 40, 12);
        let mask = entropy_filter(&logits, 25.0).unwrap();
        let ent = point_entropies(&logits);
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by(|&a, &b| ent[a].partial_cmp(&ent[b]).unwrap().then(a.cmp(&b)));
        let mut expected = vec![false; 40];
        for &i in order.iter().take(10) {
            expected[i] = true;
        }
        assert_eq!(mask, expected);
    }

    #[test]
    fn ensemble_identical_branches_reduce_to_fused_decode() {
        let mut rng = seeding::stream(10, 84);
        let l = random_logits(&mut rng, 12, 8);
        for mode in [
            EnsembleMode::SoftmaxMax,
            EnsembleMode::SoftmaxAvg,
            EnsembleMode::ArgmaxMatch,
        ] {
            let (pseudo, mask) = ensemble_filter(&l, &l, &l, mode).unwrap();
            assert!(mask.iter().all(|&m| m));
            let reference = decode(&l);
            for (a, b) in pseudo.coords().iter().zip(reference.coords()) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_match_drops_disagreeing_point() {
        let l = BinLogitMap::from_fn(5, 8, |_, _, k| if k == 2 { 10.0 } else { 0.0 });
        let mut shifted = l.clone();
        // Shift the argmax by one bin on one axis of point 3.
        shifted.logits_mut(3, 1)[2] = 0.0;
        shifted.logits_mut(3, 1)[3] = 10.0;
        let (_, mask) = ensemble_filter(&l, &shifted, &l, EnsembleMode::ArgmaxMatch).unwrap();
        assert!(!mask[3]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 4);
    }

    #[test]
    fn softmax_avg_matches_naive_average() {
        let mut rng = seeding::stream(11, 85);
        let a = random_logits(&mut rng, 9, 10);
        let b = random_logits(&mut rng, 9, 10);
        let c = random_logits(&mut rng, 9, 10);
        let (pseudo, _) = ensemble_filter(&a, &b, &c, EnsembleMode::SoftmaxAvg).unwrap();
        for p in 0..9 {
            for axis in 0..3 {
                let mut avg = vec![0.0; 10];
                for branch in [&a, &b, &c] {
                    for (o, q) in avg.iter_mut().zip(branch.softmax(p, axis)) {
                        *o += q / 3.0;
                    }
                }
                let expected: f64 = avg
                    .iter()
                    .enumerate()
                    .map(|(k, &q)| q * (k as f64 + 0.5) / 10.0)
                    .sum();
                assert_abs_diff_eq!(pseudo.coords()[p][axis], expected, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn filters_are_deterministic() {
        let mut rng = seeding::stream(12, 86);
        let logits = random_logits(&mut rng, 50, 8);
        assert_eq!(
            topk_conf(&logits, 37.0).unwrap(),
            topk_conf(&logits, 37.0).unwrap()
        );
        assert_eq!(
            entropy_filter(&logits, 37.0).unwrap(),
            entropy_filter(&logits, 37.0).unwrap()
        );
    }
}
