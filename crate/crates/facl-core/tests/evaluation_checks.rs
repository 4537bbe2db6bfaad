//! Evaluation-side checks: image-quality arithmetic, accuracy recounting,
//! difference maps, and attack-record plumbing.

mod common;

use common::{tiny_classifier, tiny_config, tiny_dataset, TINY_RES};
use facl_core::data::synth::SynthDomain;
use facl_core::evaluation::{
    craft_adversarial, difference_map, evaluate_attack, image_quality, psnr, read_records,
    append_record, ssim, AttackRunRecord, EvalTarget, PSNR_SENTINEL_DB,
};
use facl_core::generator::{init_generator, GeneratorConfig, PerturbationBudget};
use facl_core::surrogate::{classify, Arch};
use ndarray::{s, Array3, Array4, Axis};

#[test]
fn identical_images_hit_the_sentinel_and_unit_ssim() {
    let (images, _) = tiny_dataset(1, SynthDomain::ShapesA, 3);
    let batch = images.slice(s![0..2, .., .., ..]).to_owned();
    let (s_mean, p_mean) = image_quality(&batch.view(), &batch.view()).unwrap();
    assert!((s_mean - 1.0).abs() < 1e-12);
    assert_eq!(p_mean, PSNR_SENTINEL_DB);
}

#[test]
fn uniform_offset_of_ten_gives_the_analytic_psnr() {
    // interior values so +10 stays in range: MSE = 100 exactly
    let clean = Array3::from_elem((3, 16, 16), 100.0);
    let adv = Array3::from_elem((3, 16, 16), 110.0);
    let expected = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
    let got = psnr(&clean.view(), &adv.view());
    assert!((got - expected).abs() < 1e-12);
    assert!((got - 28.13).abs() < 0.01, "PSNR {got} should be ~28.13 dB");
}

#[test]
fn single_pixel_difference_psnr_matches_hand_arithmetic() {
    let clean = Array3::from_elem((3, 32, 32), 55.0);
    let mut adv = clean.clone();
    adv[(1, 7, 9)] += 1.0;
    let got = psnr(&clean.view(), &adv.view());
    let expected = 10.0 * (255.0f64 * 255.0 * 3072.0).log10();
    assert!((got - expected).abs() < 1e-9, "got {got}, expected {expected}");
}

#[test]
fn ssim_lies_in_range_for_random_pairs() {
    let (a, _) = tiny_dataset(2, SynthDomain::ShapesA, 7);
    let (b, _) = tiny_dataset(2, SynthDomain::GlyphsB, 11);
    for i in 0..4 {
        let s = ssim(
            &a.index_axis(Axis(0), i),
            &b.index_axis(Axis(0), i),
        );
        assert!((-1.0..=1.0).contains(&s), "ssim out of range: {s}");
        assert!(s < 0.999, "dissimilar images should not score ~1: {s}");
    }
}

#[test]
fn crafted_adversarials_obey_the_budget_bit_exactly() {
    let (images, _) = tiny_dataset(2, SynthDomain::ShapesA, 13);
    let cfg = tiny_config(17);
    let params = init_generator(&cfg.generator, 19).unwrap();
    let clean = images.slice(s![0..6, .., .., ..]).to_owned();
    let adv = craft_adversarial(
        &params,
        &cfg.generator,
        &clean.view(),
        PerturbationBudget::default(),
    )
    .unwrap();
    for (a, r) in adv.iter().zip(clean.iter()) {
        assert!((a - r).abs() <= 10.0);
        assert!((0.0..=255.0).contains(a));
    }
}

#[test]
fn resolution_mismatch_resizes_and_reprojects() {
    let cfg = tiny_config(23);
    let params = init_generator(&cfg.generator, 29).unwrap();
    // victim dataset at 2x the generator resolution
    let clean = Array4::from_shape_fn((2, 3, 32, 32), |(i, c, y, x)| {
        ((i * 37 + c * 11 + y * 3 + x) % 200) as f64
    });
    let adv = craft_adversarial(
        &params,
        &cfg.generator,
        &clean.view(),
        PerturbationBudget::default(),
    )
    .unwrap();
    assert_eq!(adv.dim(), clean.dim());
    for (a, r) in adv.iter().zip(clean.iter()) {
        assert!((a - r).abs() <= 10.0);
        assert!((0.0..=255.0).contains(a));
    }
}

#[test]
fn accuracy_matches_a_brute_force_recount() {
    let (images, labels) = tiny_dataset(10, SynthDomain::ShapesA, 31);
    let model = tiny_classifier(Arch::VggTiny, 37);
    let subset = images.slice(s![0..100, .., .., ..]).to_owned();
    let acc = facl_core::surrogate::accuracy(&model, &subset.view(), &labels[..100], 17).unwrap();
    // recount one sample at a time
    let mut correct = 0usize;
    for i in 0..100 {
        let one = subset.slice(s![i..i + 1, .., .., ..]).to_owned();
        let (preds, _) = classify(&model, &one.view()).unwrap();
        if preds[0] == labels[i] {
            correct += 1;
        }
    }
    assert_eq!(acc, 100.0 * correct as f64 / 100.0);
}

#[test]
fn untrained_generator_leaves_accuracy_roughly_unchanged() {
    let (images, labels) = tiny_dataset(8, SynthDomain::ShapesA, 41);
    let victim = tiny_classifier(Arch::VggTiny, 43);
    let cfg = tiny_config(47);
    let params = init_generator(&cfg.generator, 53).unwrap();
    let target = EvalTarget {
        victim: &victim,
        images: &images,
        labels: &labels,
        dataset_id: "mem".into(),
    };
    let rec = evaluate_attack(
        &params,
        &cfg.generator,
        "init",
        "nohash",
        &target,
        PerturbationBudget::default(),
    )
    .unwrap();
    assert!(
        (rec.adv_top1 - rec.clean_top1).abs() <= 5.0,
        "untrained generator moved accuracy too much: clean {} vs adv {}",
        rec.clean_top1,
        rec.adv_top1
    );
    assert!(rec.psnr_db >= 28.13);
    assert!(rec.lpips.is_none(), "no perceptual metric is registered");
}

#[test]
fn difference_map_of_identical_checkpoints_is_all_zero() {
    let cfg = tiny_config(59);
    let params = init_generator(&cfg.generator, 61).unwrap();
    let (images, _) = tiny_dataset(1, SynthDomain::ShapesA, 67);
    let img = images.index_axis(Axis(0), 0);
    let map = difference_map(
        (&params, &cfg.generator),
        (&params, &cfg.generator),
        &img,
    )
    .unwrap();
    assert!(map.iter().all(|&v| v == 0.0));
    // spatial shape equals the down-sampling feature map (res / 4)
    assert_eq!(map.dim(), (TINY_RES / 4, TINY_RES / 4));
}

#[test]
fn difference_map_is_binary_and_shape_checked() {
    let cfg = tiny_config(71);
    let a = init_generator(&cfg.generator, 73).unwrap();
    let b = init_generator(&cfg.generator, 79).unwrap();
    let (images, _) = tiny_dataset(1, SynthDomain::ShapesA, 83);
    let img = images.index_axis(Axis(0), 0);
    let map = difference_map((&a, &cfg.generator), (&b, &cfg.generator), &img).unwrap();
    assert!(map.iter().all(|&v| v == 0.0 || v == 1.0));
    let other = GeneratorConfig {
        base_width: 6,
        ..cfg.generator
    };
    let c = init_generator(&other, 89).unwrap();
    assert!(difference_map((&a, &cfg.generator), (&c, &other), &img).is_err());
}

#[test]
fn records_append_and_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let rec = AttackRunRecord {
        generator_checkpoint: "g.ckpt".into(),
        victim_id: "v".into(),
        dataset_id: "d".into(),
        clean_top1: 90.0,
        adv_top1: 40.0,
        ssim: 0.8,
        psnr_db: 30.0,
        lpips: None,
        config_hash: "h".into(),
        timestamp: "t".into(),
    };
    let path = append_record(dir.path(), &rec).unwrap();
    append_record(dir.path(), &rec).unwrap();
    let back = read_records(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].victim_id, "v");
}
