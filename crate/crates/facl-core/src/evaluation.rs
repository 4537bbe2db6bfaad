//! Attack-transferability evaluation, image-quality metrics, difference
//! maps, and the ablation suite.
//!
//! At inference the pipeline is strictly: clean image -> generator ->
//! projection -> victim. The training-only transforms are never invoked
//! here, which the spectral call counters can prove.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use facl_tensor::{Graph, TensorMap};
use ndarray::{Array2, Array4, ArrayView3, ArrayView4, Axis, Ix4};
use serde::{Deserialize, Serialize};

use crate::config::{create_run_dir, TrainConfig};
use crate::data::{resize_bilinear, DatasetManifest, LoadedSplit};
use crate::error::{Error, Result};
use crate::generator::{
    forward_generator, load_generator, project, GeneratorConfig, PerturbationBudget,
};
use crate::surrogate::Classifier;
use crate::training::{make_ablation_config, train_in_dir, Variant};

/// PSNR value reported for identical images (MSE = 0).
pub const PSNR_SENTINEL_DB: f64 = 200.0;

/// Persisted result of one attack evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRunRecord {
    pub generator_checkpoint: String,
    pub victim_id: String,
    pub dataset_id: String,
    pub clean_top1: f64,
    pub adv_top1: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    /// Perceptual-metric slot; `None` until a plugin is registered.
    pub lpips: Option<f64>,
    pub config_hash: String,
    pub timestamp: String,
}

/// A victim model paired with the dataset split it is evaluated on.
pub struct EvalTarget<'a> {
    pub victim: &'a Classifier,
    pub images: &'a Array4<f64>,
    pub labels: &'a [usize],
    pub dataset_id: String,
}

/// Pluggable perceptual metric (e.g. an LPIPS implementation). None is
/// shipped; registering one fills the `lpips` field of future records.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &'static str;
    fn distance(&self, a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> Result<f64>;
}

static PERCEPTUAL: RwLock<Option<Arc<dyn PerceptualMetric>>> = RwLock::new(None);

pub fn register_perceptual_metric(metric: Arc<dyn PerceptualMetric>) {
    *PERCEPTUAL.write().expect("metric registry") = Some(metric);
}

fn perceptual_metric() -> Option<Arc<dyn PerceptualMetric>> {
    PERCEPTUAL.read().expect("metric registry").clone()
}

/// Mean squared error over a pair of images.
fn mse(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// PSNR in dB with peak 255; identical images return the sentinel max.
pub fn psnr(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        return PSNR_SENTINEL_DB;
    }
    10.0 * (255.0 * 255.0 / m).log10()
}

/// SSIM with an 8x8 uniform window (stride 1), standard stabilizers
/// C1 = (0.01 * 255)^2 and C2 = (0.03 * 255)^2, averaged over windows and
/// channels.
pub fn ssim(a: &ArrayView3<f64>, b: &ArrayView3<f64>) -> f64 {
    const WIN: usize = 8;
    const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
    const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
    let (c, h, w) = a.dim();
    let inv = 1.0 / (WIN * WIN) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = a.index_axis(Axis(0), ch);
        let pb = b.index_axis(Axis(0), ch);
        for y0 in 0..=h.saturating_sub(WIN) {
            for x0 in 0..=w.saturating_sub(WIN) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..WIN {
                    for dx in 0..WIN {
                        let va = pa[(y0 + dy, x0 + dx)];
                        let vb = pb[(y0 + dy, x0 + dx)];
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa * inv, sb * inv);
                let va = (saa * inv - ma * ma).max(0.0);
                let vb = (sbb * inv - mb * mb).max(0.0);
                let cov = sab * inv - ma * mb;
                let s = ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                acc += s;
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Mean SSIM and PSNR over paired same-shape batches (0-255 scale).
pub fn image_quality(clean: &ArrayView4<f64>, adv: &ArrayView4<f64>) -> Result<(f64, f64)> {
    if clean.dim() != adv.dim() {
        return Err(Error::InvalidInput(format!(
            "image_quality: shape mismatch {:?} vs {:?}",
            clean.dim(),
            adv.dim()
        )));
    }
    let n = clean.dim().0;
    let (mut s_acc, mut p_acc) = (0.0, 0.0);
    for i in 0..n {
        let a = clean.index_axis(Axis(0), i);
        let b = adv.index_axis(Axis(0), i);
        s_acc += ssim(&a, &b);
        p_acc += psnr(&a, &b);
    }
    Ok((s_acc / n as f64, p_acc / n as f64))
}

/// Produces adversarial images for a clean batch with the trained
/// generator, handling resolution mismatch by the resize-reproject rule.
pub fn craft_adversarial(
    gen_params: &TensorMap,
    gen_cfg: &GeneratorConfig,
    clean: &ArrayView4<f64>,
    budget: PerturbationBudget,
) -> Result<Array4<f64>> {
    let (n, c, h, w) = clean.dim();
    let r = gen_cfg.input_resolution;
    if h == r && w == r {
        let mut g = Graph::new();
        let input = g.leaf(clean.to_owned().into_dyn(), false);
        let fwd = forward_generator(&mut g, gen_params, gen_cfg, input, false)?;
        let unbounded = g
            .value(fwd.unbounded)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("4-d");
        return project(&unbounded.view(), clean, budget);
    }
    log::info!(
        "resolution mismatch ({h}x{w} vs generator {r}): resizing input, upsampling perturbation, re-projecting"
    );
    let mut resized = Array4::<f64>::zeros((n, c, r, r));
    for i in 0..n {
        let img = clean.index_axis(Axis(0), i).to_owned();
        resized
            .index_axis_mut(Axis(0), i)
            .assign(&resize_bilinear(&img, r, r));
    }
    let mut g = Graph::new();
    let input = g.leaf(resized.clone().into_dyn(), false);
    let fwd = forward_generator(&mut g, gen_params, gen_cfg, input, false)?;
    let unbounded = g
        .value(fwd.unbounded)
        .clone()
        .into_dimensionality::<Ix4>()
        .expect("4-d");
    let mut shifted = clean.to_owned();
    for i in 0..n {
        let delta = &unbounded.index_axis(Axis(0), i) - &resized.index_axis(Axis(0), i);
        let delta_up = resize_bilinear(&delta.to_owned(), h, w);
        let mut row = shifted.index_axis_mut(Axis(0), i);
        row += &delta_up;
    }
    project(&shifted.view(), clean, budget)
}

/// Top-1 accuracy (percent) of `victim` over a batch iterator.
fn top1(victim: &Classifier, images: &ArrayView4<f64>, labels: &[usize]) -> Result<f64> {
    crate::surrogate::accuracy(victim, images, labels, 64)
}

/// Evaluates one generator checkpoint against one victim on one dataset:
/// clean and post-attack top-1 accuracy plus image-quality metrics.
pub fn evaluate_attack(
    gen_params: &TensorMap,
    gen_cfg: &GeneratorConfig,
    generator_checkpoint: &str,
    config_hash: &str,
    target: &EvalTarget,
    budget: PerturbationBudget,
) -> Result<AttackRunRecord> {
    let clean = target.images.view();
    let clean_top1 = top1(target.victim, &clean, target.labels)?;
    let adv = craft_adversarial(gen_params, gen_cfg, &clean, budget)?;
    // projection contract is part of the record's meaning; verify it
    for (a, r) in adv.iter().zip(clean.iter()) {
        let d = (a - r).abs();
        if d > budget.epsilon || !(0.0..=255.0).contains(a) {
            return Err(Error::Training(format!(
                "adversarial image violates the budget: |delta|={d}"
            )));
        }
    }
    let adv_top1 = top1(target.victim, &adv.view(), target.labels)?;
    let (ssim_mean, psnr_mean) = image_quality(&clean, &adv.view())?;
    let lpips = match perceptual_metric() {
        Some(metric) => {
            let n = clean.dim().0;
            let mut acc = 0.0;
            for i in 0..n {
                acc += metric.distance(
                    &clean.index_axis(Axis(0), i),
                    &adv.index_axis(Axis(0), i),
                )?;
            }
            Some(acc / n as f64)
        }
        None => None,
    };
    Ok(AttackRunRecord {
        generator_checkpoint: generator_checkpoint.to_string(),
        victim_id: target.victim.info.model_id.clone(),
        dataset_id: target.dataset_id.clone(),
        clean_top1,
        adv_top1,
        ssim: ssim_mean,
        psnr_db: psnr_mean,
        lpips,
        config_hash: config_hash.to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
    })
}

/// Evaluates a generator checkpoint file against a victim checkpoint file.
pub fn evaluate_attack_files(
    generator_path: &Path,
    victim: &Classifier,
    images: &Array4<f64>,
    labels: &[usize],
    dataset_id: &str,
    budget: PerturbationBudget,
) -> Result<AttackRunRecord> {
    let (payload, params) = load_generator(generator_path)?;
    let target = EvalTarget {
        victim,
        images,
        labels,
        dataset_id: dataset_id.to_string(),
    };
    evaluate_attack(
        &params,
        &payload.config,
        &generator_path.display().to_string(),
        &payload.train_config_hash,
        &target,
        budget,
    )
}

/// Appends a record to the append-only results file.
pub fn append_record(out_dir: &Path, record: &AttackRunRecord) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let path = out_dir.join("records.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io_at(&path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(path)
}

pub fn read_records(path: &Path) -> Result<Vec<AttackRunRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Cross-channel average of absolute feature sums from the generator's
/// down-sampling stack; the per-generator map behind [`difference_map`].
pub fn downsample_feature_map(
    gen_params: &TensorMap,
    gen_cfg: &GeneratorConfig,
    image: &ArrayView3<f64>,
) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    let mut batch = Array4::<f64>::zeros((1, c, h, w));
    batch.index_axis_mut(Axis(0), 0).assign(image);
    let mut g = Graph::new();
    let input = g.leaf(batch.into_dyn(), false);
    let fwd = forward_generator(&mut g, gen_params, gen_cfg, input, false)?;
    let feats = g
        .value(fwd.down_features)
        .clone()
        .into_dimensionality::<Ix4>()
        .expect("4-d features");
    let (_, fc, fh, fw) = feats.dim();
    let mut map = Array2::<f64>::zeros((fh, fw));
    for y in 0..fh {
        for x in 0..fw {
            let mut s = 0.0;
            for ch in 0..fc {
                s += feats[(0, ch, y, x)];
            }
            map[(y, x)] = s.abs() / fc as f64;
        }
    }
    Ok(map)
}

/// Binary map marking where generator `b`'s down-sampling activation
/// exceeds generator `a`'s on the same image (1 where F_b - F_a > 0).
pub fn difference_map(
    gen_a: (&TensorMap, &GeneratorConfig),
    gen_b: (&TensorMap, &GeneratorConfig),
    image: &ArrayView3<f64>,
) -> Result<Array2<f64>> {
    if gen_a.1 != gen_b.1 {
        return Err(Error::Config(
            "difference_map requires generators with identical architecture".into(),
        ));
    }
    let fa = downsample_feature_map(gen_a.0, gen_a.1, image)?;
    let fb = downsample_feature_map(gen_b.0, gen_b.1, image)?;
    Ok(Array2::from_shape_fn(fa.dim(), |(y, x)| {
        if fb[(y, x)] - fa[(y, x)] > 0.0 {
            1.0
        } else {
            0.0
        }
    }))
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub variant: String,
    pub victim_id: String,
    pub dataset_id: String,
    pub record: Option<AttackRunRecord>,
    pub error: Option<String>,
}

/// Trains one generator per variant and evaluates each against every
/// victim. A failed training run marks its rows failed without aborting
/// the rest of the suite.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_suite(
    base: &TrainConfig,
    manifest: &DatasetManifest,
    train_split: &LoadedSplit,
    surrogate: &Classifier,
    victims: &[EvalTarget],
    variants: &[Variant],
    out_dir: &Path,
) -> Result<Vec<AblationOutcome>> {
    let mut rows = Vec::new();
    for variant in variants {
        let cfg = make_ablation_config(base, *variant);
        let run_dir = create_run_dir(out_dir, &format!("ablate-{}", variant.id()), &cfg.hash())?;
        let trained = train_in_dir(&cfg, manifest, train_split, surrogate, run_dir);
        match trained {
            Ok(outcome) => {
                let (payload, params) = load_generator(&outcome.checkpoint)?;
                for target in victims {
                    let rec = evaluate_attack(
                        &params,
                        &payload.config,
                        &outcome.checkpoint.display().to_string(),
                        &outcome.config_hash,
                        target,
                        PerturbationBudget::new(cfg.epsilon)?,
                    );
                    match rec {
                        Ok(r) => {
                            append_record(out_dir, &r)?;
                            rows.push(AblationOutcome {
                                variant: variant.id().into(),
                                victim_id: target.victim.info.model_id.clone(),
                                dataset_id: target.dataset_id.clone(),
                                record: Some(r),
                                error: None,
                            });
                        }
                        Err(e) => rows.push(AblationOutcome {
                            variant: variant.id().into(),
                            victim_id: target.victim.info.model_id.clone(),
                            dataset_id: target.dataset_id.clone(),
                            record: None,
                            error: Some(e.to_string()),
                        }),
                    }
                }
            }
            Err(e) => {
                log::warn!("variant {} failed to train: {e}", variant.id());
                for target in victims {
                    rows.push(AblationOutcome {
                        variant: variant.id().into(),
                        victim_id: target.victim.info.model_id.clone(),
                        dataset_id: target.dataset_id.clone(),
                        record: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }
    let table = serde_json::to_string_pretty(&rows)?;
    let path = out_dir.join("ablation.json");
    std::fs::write(&path, table).map_err(|e| Error::io_at(&path, e))?;
    write_ablation_csv(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

fn write_ablation_csv(rows: &[AblationOutcome], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Training(format!("csv: {e}")))?;
    w.write_record([
        "variant",
        "victim",
        "dataset",
        "clean_top1",
        "adv_top1",
        "ssim",
        "psnr_db",
        "status",
    ])
    .map_err(|e| Error::Training(format!("csv: {e}")))?;
    for r in rows {
        let (clean, adv, ssim, psnr, status) = match &r.record {
            Some(rec) => (
                format!("{:.2}", rec.clean_top1),
                format!("{:.2}", rec.adv_top1),
                format!("{:.4}", rec.ssim),
                format!("{:.2}", rec.psnr_db),
                "ok".to_string(),
            ),
            None => (
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                r.error.clone().unwrap_or_else(|| "failed".into()),
            ),
        };
        w.write_record([
            r.variant.as_str(),
            r.victim_id.as_str(),
            r.dataset_id.as_str(),
            &clean,
            &adv,
            &ssim,
            &psnr,
            &status,
        ])
        .map_err(|e| Error::Training(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Training(format!("csv: {e}")))?;
    Ok(())
}

pub mod report {
    //! Run-directory reporting: summary CSV plus simple plot images.

    use super::*;

    /// Emits `summary.csv`, `accuracy_bars.png`, and `quality_scatter.png`
    /// from the records of a results directory.
    pub fn emit(records_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
        let records = read_records(records_path)?;
        if records.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no records in {}",
                records_path.display()
            )));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
        let mut outputs = Vec::new();

        let csv_path = out_dir.join("summary.csv");
        let mut w =
            csv::Writer::from_path(&csv_path).map_err(|e| Error::Training(format!("csv: {e}")))?;
        w.write_record([
            "victim",
            "dataset",
            "clean_top1",
            "adv_top1",
            "ssim",
            "psnr_db",
            "generator",
        ])
        .map_err(|e| Error::Training(format!("csv: {e}")))?;
        for r in &records {
            w.write_record([
                r.victim_id.as_str(),
                r.dataset_id.as_str(),
                &format!("{:.2}", r.clean_top1),
                &format!("{:.2}", r.adv_top1),
                &format!("{:.4}", r.ssim),
                &format!("{:.2}", r.psnr_db),
                r.generator_checkpoint.as_str(),
            ])
            .map_err(|e| Error::Training(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| Error::Training(format!("csv: {e}")))?;
        outputs.push(csv_path);

        outputs.push(accuracy_bars(&records, &out_dir.join("accuracy_bars.png"))?);
        outputs.push(quality_scatter(&records, &out_dir.join("quality_scatter.png"))?);
        Ok(outputs)
    }

    fn blank(w: u32, h: u32) -> image::RgbImage {
        image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]))
    }

    fn fill_rect(img: &mut image::RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: [u8; 3]) {
        for y in y0..y1.min(img.height()) {
            for x in x0..x1.min(img.width()) {
                img.put_pixel(x, y, image::Rgb(c));
            }
        }
    }

    /// Paired clean/adversarial accuracy bars, one pair per record, in
    /// record order (the summary CSV is the legend).
    fn accuracy_bars(records: &[AttackRunRecord], path: &Path) -> Result<PathBuf> {
        let (w, h) = (80 + records.len() as u32 * 46, 360u32);
        let mut img = blank(w.max(240), h);
        let base = 320u32;
        // axis
        fill_rect(&mut img, 40, 20, 41, base + 1, [0, 0, 0]);
        fill_rect(&mut img, 40, base, w.max(240) - 20, base + 1, [0, 0, 0]);
        for (i, r) in records.iter().enumerate() {
            let x = 50 + i as u32 * 46;
            let clean_h = (r.clean_top1 / 100.0 * 280.0) as u32;
            let adv_h = (r.adv_top1 / 100.0 * 280.0) as u32;
            fill_rect(&mut img, x, base - clean_h, x + 16, base, [70, 110, 220]);
            fill_rect(&mut img, x + 20, base - adv_h, x + 36, base, [220, 80, 70]);
        }
        img.save(path)?;
        Ok(path.to_path_buf())
    }

    /// SSIM (x, 0..1) against PSNR (y, 20..90 dB) per record.
    fn quality_scatter(records: &[AttackRunRecord], path: &Path) -> Result<PathBuf> {
        let (w, h) = (420u32, 360u32);
        let mut img = blank(w, h);
        fill_rect(&mut img, 40, 20, 41, 321, [0, 0, 0]);
        fill_rect(&mut img, 40, 320, 400, 321, [0, 0, 0]);
        for r in records {
            let x = 40.0 + r.ssim.clamp(0.0, 1.0) * 360.0;
            let y = 320.0 - ((r.psnr_db.clamp(20.0, 90.0) - 20.0) / 70.0) * 300.0;
            fill_rect(
                &mut img,
                x as u32,
                y as u32,
                x as u32 + 4,
                y as u32 + 4,
                [180, 60, 160],
            );
        }
        img.save(path)?;
        Ok(path.to_path_buf())
    }
}
