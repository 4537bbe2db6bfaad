//! The acceptance suite: every shipped claim checked end to end, one
//! pass/fail line per criterion.
//!
//! Everything runs sequentially inside a single test so the spectral call
//! counters, the shared desk-scale fixtures, and the printed report stay
//! coherent. Expect roughly half an hour on a two-core machine; run with
//! `cargo test --test acceptance -- --nocapture` to watch progress.

use std::path::PathBuf;
use std::time::Instant;

use facl_core::config::{create_run_dir, derive_seed, TrainConfig};
use facl_core::data::synth::{generate_dataset, SynthDomain, SynthSpec};
use facl_core::data::{ingest_dataset, load_split, DatasetManifest, LoadedSplit};
use facl_core::evaluation::{
    craft_adversarial, difference_map, evaluate_attack, image_quality, run_ablation_suite,
    EvalTarget, PSNR_SENTINEL_DB,
};
use facl_core::generator::{
    init_generator, load_generator, GeneratorConfig, PerturbationBudget,
};
use facl_core::losses::{loss_facl, loss_orig, FeaturePairSet, LossWeights};
use facl_core::spectral::{
    band_decompose, build_band_mask, dct2, fadr_transform, idct2, BandMaskKind, BandThresholds,
    RandomizationParams,
};
use facl_core::surrogate::{
    extract_features, train_surrogate, Arch, Classifier, SurrogateTrainConfig,
};
use facl_core::training::{
    make_ablation_config, train_in_dir, Trainer, Variant,
};
use facl_tensor::gradcheck::check_gradients_sampled;
use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const RES: usize = 32;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    /// Soft criteria report but do not fail the suite.
    soft: bool,
    detail: String,
}

fn line(o: &Outcome) -> String {
    let status = if o.passed {
        "PASS"
    } else if o.soft {
        "SOFT-FAIL"
    } else {
        "FAIL"
    };
    format!("criterion {:>2} [{}] {} - {}", o.id, status, o.name, o.detail)
}

/// Desk-scale fixtures shared by the heavyweight criteria.
struct Fixtures {
    _tmp: tempfile::TempDir,
    out_dir: PathBuf,
    stripes: DatasetManifest,
    stripes_train: LoadedSplit,
    stripes_val: LoadedSplit,
    glyphs_val: LoadedSplit,
    surrogate: Classifier,
    victims: Vec<Classifier>,
}

/// The calibrated desk-scale training configuration. Taps and learning
/// rate are desk calibrations; spectral and budget values are the shipped
/// defaults.
fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        resolution: RES,
        learning_rate: 2e-3,
        orig_tap: "conv4".into(),
        facl_tap: "conv4".into(),
        seed,
        generator: GeneratorConfig {
            input_channels: 3,
            base_width: 16,
            num_residual_blocks: 2,
            input_resolution: RES,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn prepare_fixtures() -> Fixtures {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let t0 = Instant::now();

    let stripes_root = root.join("stripes");
    generate_dataset(
        &stripes_root,
        &SynthSpec {
            domain: SynthDomain::StripesA,
            per_class_train: 1200,
            per_class_val: 30,
            resolution: RES,
            seed: 7,
        },
    )
    .expect("generate stripes");
    let stripes = ingest_dataset(&stripes_root, "stripes_a", RES).expect("ingest stripes");
    let stripes_train = load_split(&stripes, "train").expect("train split");
    let stripes_val = load_split(&stripes, "val").expect("val split");

    let glyphs_root = root.join("glyphs");
    generate_dataset(
        &glyphs_root,
        &SynthSpec {
            domain: SynthDomain::GlyphsB,
            per_class_train: 250,
            per_class_val: 30,
            resolution: RES,
            seed: 8,
        },
    )
    .expect("generate glyphs");
    let glyphs = ingest_dataset(&glyphs_root, "glyphs_b", RES).expect("ingest glyphs");
    let glyphs_train = load_split(&glyphs, "train").expect("glyphs train");
    let glyphs_val = load_split(&glyphs, "val").expect("glyphs val");

    let surrogate = train_surrogate(
        Arch::VggSmall,
        "vgg_small-stripes",
        "stripes_a",
        10,
        RES,
        &stripes_train.images.view(),
        &stripes_train.labels,
        &stripes_val.images.view(),
        &stripes_val.labels,
        &SurrogateTrainConfig {
            epochs: 2,
            augment_noise: 0.0,
            seed: 11,
            ..SurrogateTrainConfig::default()
        },
    )
    .expect("train surrogate");

    let mut victims = Vec::new();
    for (arch, id, imgs, labels, vimgs, vlabels, dataset, epochs) in [
        (
            Arch::ResnetSmall,
            "resnet_small-stripes",
            &stripes_train.images,
            &stripes_train.labels,
            &stripes_val.images,
            &stripes_val.labels,
            "stripes_a",
            3usize,
        ),
        (
            Arch::DensenetSmall,
            "densenet_small-stripes",
            &stripes_train.images,
            &stripes_train.labels,
            &stripes_val.images,
            &stripes_val.labels,
            "stripes_a",
            4,
        ),
        (
            Arch::ResnetSmall,
            "resnet_small-glyphs",
            &glyphs_train.images,
            &glyphs_train.labels,
            &glyphs_val.images,
            &glyphs_val.labels,
            "glyphs_b",
            6,
        ),
    ] {
        // victims train on a subset so fixture preparation stays bounded
        let cap = imgs.dim().0.min(6000);
        let victim = train_surrogate(
            arch,
            id,
            dataset,
            10,
            RES,
            &imgs.slice(s![0..cap, .., .., ..]),
            &labels[..cap],
            &vimgs.view(),
            vlabels,
            &SurrogateTrainConfig {
                epochs,
                seed: 13,
                ..SurrogateTrainConfig::default()
            },
        )
        .expect("train victim");
        eprintln!(
            "fixture victim {}: test accuracy {:.1}%",
            victim.info.model_id, victim.info.test_accuracy
        );
        victims.push(victim);
    }

    eprintln!(
        "fixtures ready in {:.1}s (surrogate accuracy {:.1}%)",
        t0.elapsed().as_secs_f64(),
        surrogate.info.test_accuracy
    );
    Fixtures {
        out_dir: root.join("out"),
        _tmp: tmp,
        stripes,
        stripes_train,
        stripes_val,
        glyphs_val,
        surrogate,
        victims,
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((c, h, w), |_| rng.random_range(0.0..255.0))
}

/// Naive definitional type-II DCT (quartic double sum), the oracle.
fn naive_dct2(x: &ndarray::ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for k in 0..h {
        for l in 0..w {
            let sk = if k == 0 { (1.0 / h as f64).sqrt() } else { (2.0 / h as f64).sqrt() };
            let sl = if l == 0 { (1.0 / w as f64).sqrt() } else { (2.0 / w as f64).sqrt() };
            let mut acc = 0.0;
            for i in 0..h {
                for j in 0..w {
                    acc += x[(i, j)]
                        * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64
                            / (2.0 * h as f64))
                            .cos()
                        * (std::f64::consts::PI * (2.0 * j as f64 + 1.0) * l as f64
                            / (2.0 * w as f64))
                            .cos();
                }
            }
            out[(k, l)] = sk * sl * acc;
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_oracle = 0.0f64;
    for h in 2..=16usize {
        for w in 2..=16usize {
            let img = random_image(&mut rng, 1, h, w);
            let fast = dct2(&img.view()).unwrap();
            let naive = naive_dct2(&img.index_axis(Axis(0), 0));
            for ((u, v), &nv) in naive.indexed_iter() {
                worst_oracle = worst_oracle.max((fast.coefficients[(0, u, v)] - nv).abs());
            }
        }
    }
    let mut worst_rt = 0.0f64;
    for i in 0..1000 {
        let h = 2 + (i * 7) % 31;
        let w = 2 + (i * 11) % 31;
        let img = random_image(&mut rng, 1 + i % 3, h, w);
        let back = idct2(&dct2(&img.view()).unwrap()).unwrap();
        worst_rt = (&back - &img)
            .iter()
            .fold(worst_rt, |m, v| m.max(v.abs()));
    }
    Outcome {
        id: 1,
        name: "spectral oracle equivalence",
        passed: worst_oracle < 1e-6 && worst_rt < 1e-5,
        soft: false,
        detail: format!(
            "naive-oracle max err {worst_oracle:.2e} (tol 1e-6); round-trip max err {worst_rt:.2e} over 1000 images (tol 1e-5)"
        ),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_sum = 0.0f64;
    let mut masks_exact = true;
    for _ in 0..500 {
        let h = rng.random_range(4..28);
        let w = rng.random_range(4..28);
        let base = 24u32;
        let lo = rng.random_range(1..8);
        let hi = rng.random_range(9..=base);
        let t = BandThresholds::new(lo, hi, base).unwrap();
        let bp = build_band_mask(&t, (h, w), BandMaskKind::BandPass, None).unwrap();
        let br = build_band_mask(&t, (h, w), BandMaskKind::BandReject, None).unwrap();
        for (a, b) in bp.values.iter().zip(br.values.iter()) {
            if a + b != 1.0 {
                masks_exact = false;
            }
        }
        let img = random_image(&mut rng, 3, h, w);
        let (mid, lowhigh) = band_decompose(&img.view(), &t).unwrap();
        let sum = &mid + &lowhigh;
        worst_sum = (&sum - &img).iter().fold(worst_sum, |m, v| m.max(v.abs()));
    }
    Outcome {
        id: 2,
        name: "decomposition identity",
        passed: masks_exact && worst_sum < 1e-5,
        soft: false,
        detail: format!(
            "mask complementarity exact: {masks_exact}; worst |mid+lowhigh-x| {worst_sum:.2e} over 500 cases (tol 1e-5)"
        ),
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_mid = 0.0f64;
    let mut worst_id = 0.0f64;
    for case in 0..200 {
        let h = rng.random_range(8..28);
        let w = rng.random_range(8..28);
        let lo = rng.random_range(1..6);
        let hi = rng.random_range(8..=24);
        let t = BandThresholds::new(lo, hi, 24).unwrap();
        let img = random_image(&mut rng, 2, h, w);
        let rho = rng.random_range(0.0..0.9);
        let p = RandomizationParams::new(rho, 0.0, 1000 + case).unwrap();
        let out = fadr_transform(&img.view(), &t, &p).unwrap();
        let (slo, shi) = t.scaled_for_shape(h, w).unwrap();
        let before = dct2(&img.view()).unwrap();
        let after = dct2(&out.view()).unwrap();
        for ((c, u, v), &b) in before.coefficients.indexed_iter() {
            let f = u.max(v) as u32;
            if f >= slo && f < shi {
                worst_mid = worst_mid.max((after.coefficients[(c, u, v)] - b).abs());
            }
        }
        let ident = fadr_transform(
            &img.view(),
            &t,
            &RandomizationParams::new(0.0, 0.0, case).unwrap(),
        )
        .unwrap();
        worst_id = (&ident - &img).iter().fold(worst_id, |m, v| m.max(v.abs()));
    }
    Outcome {
        id: 3,
        name: "randomization preserves the mid band",
        passed: worst_mid < 1e-5 && worst_id < 1e-5,
        soft: false,
        detail: format!(
            "mid-band max drift {worst_mid:.2e}; identity-config max err {worst_id:.2e} over 200 cases (tol 1e-5)"
        ),
    }
}

fn criterion_4(fx: &Fixtures, full_ckpt: &std::path::Path) -> Outcome {
    let (payload, params) = load_generator(full_ckpt).unwrap();
    let budget = PerturbationBudget::default();
    let clean = &fx.stripes_val.images;
    let adv = craft_adversarial(&params, &payload.config, &clean.view(), budget).unwrap();
    let mut ok = true;
    let mut worst = 0.0f64;
    for (a, r) in adv.iter().zip(clean.iter()) {
        let d = (a - r).abs();
        worst = worst.max(d);
        if d > budget.epsilon || !(0.0..=255.0).contains(a) {
            ok = false;
        }
    }
    let mut min_psnr = f64::INFINITY;
    for i in 0..clean.dim().0 {
        let p = facl_core::evaluation::psnr(
            &clean.index_axis(Axis(0), i),
            &adv.index_axis(Axis(0), i),
        );
        min_psnr = min_psnr.min(p);
    }
    let floor = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
    Outcome {
        id: 4,
        name: "budget exactness and the PSNR floor",
        passed: ok && min_psnr >= floor && worst <= budget.epsilon,
        soft: false,
        detail: format!(
            "{} images: max |delta| {worst:.6} <= 10, all in [0,255]: {ok}; min PSNR {min_psnr:.2} dB >= floor {floor:.2}",
            clean.dim().0
        ),
    }
}

fn criterion_5(fx: &Fixtures) -> Outcome {
    // identity: band-loss of an image against itself is exactly zero
    let batch = fx.stripes_val.images.slice(s![0..8, .., .., ..]).to_owned();
    let t = desk_config(0).thresholds();
    let mut mids = Vec::new();
    let mut lhs = Vec::new();
    for i in 0..8 {
        let img = batch.index_axis(Axis(0), i).to_owned();
        let (mid, lh) = band_decompose(&img.view(), &t).unwrap();
        mids.push(mid);
        lhs.push(lh);
    }
    let stack = |v: &[Array3<f64>]| {
        let mut out = ndarray::Array4::<f64>::zeros((v.len(), 3, RES, RES));
        for (i, img) in v.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(img);
        }
        out
    };
    let tap = fx.surrogate.tap("conv4").unwrap();
    let z_mid = extract_features(&fx.surrogate, &tap, &stack(&mids).view()).unwrap();
    let z_lh = extract_features(&fx.surrogate, &tap, &stack(&lhs).view()).unwrap();
    let pairs = FeaturePairSet {
        z_mid_clean: z_mid.view(),
        z_mid_adv: z_mid.view(),
        z_lh_clean: z_lh.view(),
        z_lh_adv: z_lh.view(),
    };
    let identity = loss_facl(&pairs).unwrap().abs();

    // bounds over 1000 random feature batches
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut bounds_ok = true;
    for _ in 0..1000 {
        let mk = |rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((4, 16), |_| rng.random_range(-5.0..5.0))
        };
        let (a, b, c, d) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let lo = loss_orig(&a.view(), &b.view()).unwrap();
        let lf = loss_facl(&FeaturePairSet {
            z_mid_clean: a.view(),
            z_mid_adv: b.view(),
            z_lh_clean: c.view(),
            z_lh_adv: d.view(),
        })
        .unwrap();
        if !(-1.0..=1.0).contains(&lo) || !(-2.0..=2.0).contains(&lf) {
            bounds_ok = false;
        }
    }

    // finite-difference check of the full objective on a tiny generator
    let mut tiny = desk_config(0);
    tiny.epsilon = 1e6; // keep the projection clamp inactive
    tiny.generator = GeneratorConfig {
        input_channels: 3,
        base_width: 4,
        num_residual_blocks: 1,
        input_resolution: RES,
        ..GeneratorConfig::default()
    };
    let gen_params = init_generator(&tiny.generator, 55).unwrap();
    let small = fx.stripes_val.images.slice(s![0..2, .., .., ..]).to_owned();
    let (_, analytic) = facl_core::training::pipeline_loss_for_gradcheck(
        &tiny,
        &fx.surrogate,
        &gen_params,
        &small.view(),
    )
    .unwrap();
    let (worst_rel, bad) = check_gradients_sampled(
        &gen_params,
        &analytic,
        |p| {
            facl_core::training::pipeline_loss_for_gradcheck(&tiny, &fx.surrogate, p, &small.view())
                .unwrap()
                .0
        },
        1e-7,
        1e-3,
        1e-4,
        12,
    );
    Outcome {
        id: 5,
        name: "loss identities, bounds, and gradients",
        passed: identity < 1e-5 && bounds_ok && bad.is_empty(),
        soft: false,
        detail: format!(
            "band loss at identity {identity:.2e} (tol 1e-5); bounds over 1000 batches: {bounds_ok}; gradcheck worst rel err {worst_rel:.2e} (tol 1e-3, {} mismatches)",
            bad.len()
        ),
    }
}

fn criterion_6(fx: &Fixtures) -> Outcome {
    let cfg = make_ablation_config(&desk_config(42), Variant::Baseline);
    let mut configured = Trainer::new(&cfg, &fx.surrogate).unwrap();
    let mut plain = Trainer::new(&cfg, &fx.surrogate).unwrap();
    let mut equal = true;
    for step in 0..20u64 {
        let lo = (step as usize * 16) % 1024;
        let batch = fx
            .stripes_train
            .images
            .slice(s![lo..lo + 16, .., .., ..])
            .to_owned();
        let a = configured.step(&batch.view(), 0, step).unwrap();
        let b = plain.baseline_step(&batch.view(), 0, step).unwrap();
        if a.loss_orig.to_bits() != b.loss_orig.to_bits()
            || a.loss_total.to_bits() != b.loss_total.to_bits()
        {
            equal = false;
        }
    }
    Outcome {
        id: 6,
        name: "baseline-path equivalence",
        passed: equal,
        soft: false,
        detail: if equal {
            "per-step losses bit-equal to the plain feature-separation path for 20 steps".into()
        } else {
            "losses diverged from the plain path".into()
        },
    }
}

/// Trains one desk-scale run and returns (checkpoint path, victim-mean
/// post-attack accuracy over the black-box victims).
fn train_and_eval(
    fx: &Fixtures,
    cfg: &TrainConfig,
    train_count: usize,
    label: &str,
) -> (PathBuf, f64) {
    let subset = LoadedSplit {
        images: fx
            .stripes_train
            .images
            .slice(s![0..train_count, .., .., ..])
            .to_owned(),
        labels: fx.stripes_train.labels[..train_count].to_vec(),
    };
    let run_dir = create_run_dir(&fx.out_dir, label, &cfg.hash()).unwrap();
    let outcome = train_in_dir(cfg, &fx.stripes, &subset, &fx.surrogate, run_dir).unwrap();
    let (payload, params) = load_generator(&outcome.checkpoint).unwrap();
    let mut acc = 0.0;
    let mut n = 0;
    for victim in &fx.victims {
        let (images, labels, dataset_id) = if victim.info.dataset_id == "glyphs_b" {
            (&fx.glyphs_val.images, &fx.glyphs_val.labels, "glyphs_b")
        } else {
            (&fx.stripes_val.images, &fx.stripes_val.labels, "stripes_a")
        };
        let record = evaluate_attack(
            &params,
            &payload.config,
            &outcome.checkpoint.display().to_string(),
            &outcome.config_hash,
            &EvalTarget {
                victim,
                images,
                labels,
                dataset_id: dataset_id.into(),
            },
            PerturbationBudget::default(),
        )
        .unwrap();
        eprintln!(
            "  {label}: {} clean {:.1}% -> adv {:.1}%",
            victim.info.model_id, record.clean_top1, record.adv_top1
        );
        acc += record.adv_top1;
        n += 1;
    }
    (outcome.checkpoint, acc / n as f64)
}

fn criterion_7(fx: &Fixtures) -> (Outcome, PathBuf) {
    let cfg = desk_config(derive_seed(0, "acceptance-full", &[0]));
    let (ckpt, _) = train_and_eval(fx, &cfg, 12000, "full-c7");
    let (payload, params) = load_generator(&ckpt).unwrap();
    let record = evaluate_attack(
        &params,
        &payload.config,
        &ckpt.display().to_string(),
        "c7",
        &EvalTarget {
            victim: &fx.surrogate,
            images: &fx.stripes_val.images,
            labels: &fx.stripes_val.labels,
            dataset_id: "stripes_a".into(),
        },
        PerturbationBudget::default(),
    )
    .unwrap();
    let ok = record.adv_top1 <= 0.5 * record.clean_top1;
    (
        Outcome {
            id: 7,
            name: "white-box collapse",
            passed: ok,
            soft: false,
            detail: format!(
                "surrogate clean {:.2}% -> attacked {:.2}% after 1 epoch (needs <= {:.2}%)",
                record.clean_top1,
                record.adv_top1,
                0.5 * record.clean_top1
            ),
        },
        ckpt,
    )
}

fn criterion_8(fx: &Fixtures) -> (Outcome, PathBuf) {
    let seeds = [0u64, 1, 2];
    let mut full_means = Vec::new();
    let mut base_means = Vec::new();
    let mut baseline_seed0 = PathBuf::new();
    for &seed in &seeds {
        let full_cfg = desk_config(derive_seed(1, "acceptance-c8-full", &[seed]));
        let (_, full_mean) = train_and_eval(fx, &full_cfg, 6000, "full-c8");
        full_means.push(full_mean);
        let base_cfg = make_ablation_config(
            &desk_config(derive_seed(1, "acceptance-c8-base", &[seed])),
            Variant::Baseline,
        );
        let (ckpt, base_mean) = train_and_eval(fx, &base_cfg, 6000, "base-c8");
        base_means.push(base_mean);
        if seed == 0 {
            baseline_seed0 = ckpt;
        }
    }
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (fm, fs) = stats(&full_means);
    let (bm, bs) = stats(&base_means);
    let passed = fm <= bm && bm - fm >= 1.0;
    (
        Outcome {
            id: 8,
            name: "transfer directionality (soft)",
            passed,
            soft: true,
            detail: format!(
                "black-box post-attack accuracy over 3 seeds: full {fm:.2} +/- {fs:.2} vs baseline {bm:.2} +/- {bs:.2} (needs full <= baseline - 1.0)"
            ),
        },
        baseline_seed0,
    )
}

fn criterion_9(fx: &Fixtures) -> Outcome {
    // reduced-scale suite: the criterion checks completeness and persisted
    // configs, not attack quality
    let mut cfg = desk_config(91);
    cfg.epochs = 1;
    let subset = LoadedSplit {
        images: fx.stripes_train.images.slice(s![0..320, .., .., ..]).to_owned(),
        labels: fx.stripes_train.labels[..320].to_vec(),
    };
    let targets: Vec<EvalTarget> = fx
        .victims
        .iter()
        .take(2)
        .map(|victim| EvalTarget {
            victim,
            images: &fx.stripes_val.images,
            labels: &fx.stripes_val.labels,
            dataset_id: "stripes_a".into(),
        })
        .collect();
    let out_dir = fx.out_dir.join("ablation-suite");
    let rows = run_ablation_suite(
        &cfg,
        &fx.stripes,
        &subset,
        &fx.surrogate,
        &targets,
        &Variant::ALL,
        &out_dir,
    )
    .unwrap();
    let expected = Variant::ALL.len() * targets.len();
    let all_ok = rows.iter().all(|r| r.record.is_some());
    // resolved config persisted per variant run
    let mut configs_persisted = 0;
    if let Ok(runs) = std::fs::read_dir(out_dir.join("runs")) {
        for run in runs.flatten() {
            if run.path().join("config.resolved.toml").exists() {
                configs_persisted += 1;
            }
        }
    }
    Outcome {
        id: 9,
        name: "ablation suite completeness",
        passed: rows.len() == expected && all_ok && configs_persisted == Variant::ALL.len(),
        soft: false,
        detail: format!(
            "{} records for {} (variant, victim) pairs, all ok: {all_ok}; {configs_persisted}/8 resolved configs persisted",
            rows.len(),
            expected
        ),
    }
}

fn criterion_10(fx: &Fixtures, full_ckpt: &std::path::Path, base_ckpt: &std::path::Path) -> Outcome {
    let (fp, fparams) = load_generator(full_ckpt).unwrap();
    let (bp, bparams) = load_generator(base_ckpt).unwrap();
    let img = fx.stripes_val.images.index_axis(Axis(0), 0);
    let self_map = difference_map((&fparams, &fp.config), (&fparams, &fp.config), &img).unwrap();
    let zero = self_map.iter().all(|&v| v == 0.0);
    let cross = difference_map((&bparams, &bp.config), (&fparams, &fp.config), &img).unwrap();
    let binary = cross.iter().all(|&v| v == 0.0 || v == 1.0);
    let expected_shape = (RES / 4, RES / 4);
    let shape_ok = cross.dim() == expected_shape && self_map.dim() == expected_shape;
    Outcome {
        id: 10,
        name: "difference map",
        passed: zero && binary && shape_ok,
        soft: false,
        detail: format!(
            "identical checkpoints all-zero: {zero}; binary output: {binary}; shape {:?} matches down-sampling features {:?}",
            cross.dim(),
            expected_shape
        ),
    }
}

#[test]
fn acceptance() {
    let t0 = Instant::now();
    let mut results = Vec::new();

    results.push(criterion_1());
    eprintln!("{}", line(results.last().unwrap()));
    results.push(criterion_2());
    eprintln!("{}", line(results.last().unwrap()));
    results.push(criterion_3());
    eprintln!("{}", line(results.last().unwrap()));

    let fx = prepare_fixtures();

    results.push(criterion_5(&fx));
    eprintln!("{}", line(results.last().unwrap()));
    results.push(criterion_6(&fx));
    eprintln!("{}", line(results.last().unwrap()));

    let (c7, full_ckpt) = criterion_7(&fx);
    eprintln!("{}", line(&c7));
    results.push(c7);

    results.push(criterion_4(&fx, &full_ckpt));
    eprintln!("{}", line(results.last().unwrap()));

    let (c8, baseline_ckpt) = criterion_8(&fx);
    eprintln!("{}", line(&c8));
    results.push(c8);

    results.push(criterion_9(&fx));
    eprintln!("{}", line(results.last().unwrap()));

    results.push(criterion_10(&fx, &full_ckpt, &baseline_ckpt));
    eprintln!("{}", line(results.last().unwrap()));

    results.sort_by_key(|o| o.id);
    eprintln!("\n==== acceptance summary ({:.1} min) ====", t0.elapsed().as_secs_f64() / 60.0);
    for o in &results {
        eprintln!("{}", line(o));
    }
    let hard_failures: Vec<&Outcome> = results.iter().filter(|o| !o.passed && !o.soft).collect();
    let soft_failures: Vec<&Outcome> = results.iter().filter(|o| !o.passed && o.soft).collect();
    for o in &soft_failures {
        eprintln!(
            "note: criterion {} is a soft check; its failure calls for investigation, not rejection",
            o.id
        );
    }
    assert!(
        hard_failures.is_empty(),
        "acceptance criteria failed: {:?}",
        hard_failures.iter().map(|o| o.id).collect::<Vec<_>>()
    );
}
