//! Properties of the standard trained run (cached under the target dir).

mod common;

use std::collections::HashSet;

use obfnet::nn::Tensor;
use obfnet::training::TrainLog;

fn assert_first_epochs_non_increasing(name: &str, log: &TrainLog) {
    let first: Vec<f64> = log.epoch_losses.iter().take(3).copied().collect();
    assert_eq!(first.len(), 3, "{name}: fewer than 3 epochs logged");
    assert!(first.windows(2).all(|w| w[1] <= w[0]), "{name}: {first:?}");
}

#[test]
fn epoch_losses_fall_over_the_first_three_epochs() {
    let run = common::standard();
    assert_first_epochs_non_increasing("backbone", &run.backbone.value.log);
    for family in [&run.obfnet2.value, &run.obfnet1.value] {
        for (e, log) in family.bundle.entries().iter().zip(&family.logs) {
            assert_first_epochs_non_increasing(&format!("{}-{}", e.variant, e.instance), log);
        }
    }
}

#[test]
fn instances_are_distinct_and_each_within_the_drop_bound() {
    let run = common::standard();
    let family = &run.obfnet2.value;
    let prints: HashSet<u64> = family.bundle.entries().iter().map(|e| e.net.fingerprint()).collect();
    assert_eq!(prints.len(), family.bundle.len());
    for row in &family.report.rows {
        let drop_pp = (family.report.raw_accuracy - row.accuracy) * 100.0;
        assert!(drop_pp <= 1.5, "{}: drop {drop_pp:.3} pp", row.name);
    }
    assert_eq!(run.obfnet2.value.bundle.backbone_fingerprint(), run.backbone.value.backbone.fingerprint());
    assert_eq!(run.obfnet1.value.bundle.backbone_fingerprint(), run.backbone.value.backbone.fingerprint());
}

#[test]
fn trained_obfuscator_outputs_are_nonnegative_and_sized() {
    let run = common::standard();
    let images = common::mnist().test.take(256).flat_images();
    for bundle in [&run.obfnet2.value.bundle, &run.obfnet1.value.bundle] {
        for e in bundle.entries() {
            let out: Tensor = e.net.predict(&images).unwrap();
            assert_eq!(out.shape(), &[256, 784]);
            assert!(out.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
        }
    }
}
