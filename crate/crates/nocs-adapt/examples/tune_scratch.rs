//! Scratch harness for hyperparameter probing. Not part of the deliverable.

use nocs_adapt::adapt::{pretrain_teacher, AdaptConfig, Branch};
use nocs_adapt::nocs::DiscretizeMode;
use nocs_adapt::synth::{generate_instances, CategorySpec, NoiseModel};

fn argmax_acc(
    model: &nocs_adapt::adapt::ToyPredictor,
    split: &[nocs_adapt::synth::SceneInstance],
    bins: usize,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for inst in split {
        let logits = model.forward(Branch::Fused, &inst.feature);
        for (p, c) in inst.gt_nocs.coords().iter().enumerate() {
            for axis in 0..3 {
                let probs = logits.softmax(p, axis);
                let pred = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                let tb = ((c[axis] * bins as f64).floor() as usize).min(bins - 1);
                hits += (pred == tb) as usize;
                total += 1;
            }
        }
    }
    hits as f64 / total as f64
}

fn main() {
    let noise = NoiseModel::noiseless();
    let split = generate_instances(&CategorySpec::default_all(), 12, 96, &noise, 11).unwrap();
    for lr in [0.5, 1.0, 2.0, 4.0] {
        for enc in [DiscretizeMode::Soft, DiscretizeMode::Hard] {
            let start = std::time::Instant::now();
            let cfg = AdaptConfig {
                epochs: 200,
                points_per_step: 96,
                student_lr: lr,
                target_encoding: enc,
                rng_seed: 5,
                ..AdaptConfig::default()
            };
            let (model, curve) = pretrain_teacher(&split, &cfg).unwrap();
            let acc = argmax_acc(&model, &split, cfg.bins);
            println!(
                "lr {lr:<4} enc {enc:?}: acc {acc:.4} last-loss {:.4} ({:?})",
                curve.last().unwrap(),
                start.elapsed()
            );
        }
    }
}
