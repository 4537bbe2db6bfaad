//! The generator training loop: half-batch spectral augmentation,
//! generation, budget projection, band decomposition, feature-contrast
//! losses, and the optimizer step.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use facl_tensor::{Adam, AdamConfig, Graph, TensorMap};
use ndarray::{ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{create_run_dir, derive_seed, RunDir, TrainConfig};
use crate::data::{load_manifest, load_split, DatasetManifest, LoadedSplit};
use crate::error::{Error, Result};
use crate::generator::{
    forward_generator, init_generator, project_in_graph, save_generator, GeneratorCheckpoint,
    PerturbationBudget, PIXEL_MAX, PIXEL_MIN,
};
use crate::losses::{loss_facl_node, loss_orig_node, LossWeights};
use crate::ops::SpectralFilterOp;
use crate::spectral::{
    build_band_mask, fadr_transform, BandMask, BandMaskKind, BandThresholds, RandomizationParams,
};
use crate::surrogate::{forward_classifier, load_classifier, BnMode, Classifier, FeatureTap};

/// Per-step loss components and invariant measurements.
#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub epoch: u64,
    pub step: u64,
    pub loss_orig: f64,
    /// Absent when the band loss is disabled (lambda_facl = 0).
    pub loss_facl: Option<f64>,
    pub loss_total: f64,
    /// Largest |adv - reference| over the batch; must never exceed epsilon.
    pub budget_max: f64,
    pub augmented: usize,
    pub wall_ms: f64,
}

/// Holds everything needed to run training steps against one surrogate.
pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub surrogate: &'a Classifier,
    pub gen_params: TensorMap,
    thresholds: BandThresholds,
    bp_mask: BandMask,
    br_mask: BandMask,
    orig_tap: FeatureTap,
    facl_tap: FeatureTap,
    adam: Adam,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, surrogate: &'a Classifier) -> Result<Self> {
        cfg.validate()?;
        if surrogate.info.input_resolution != cfg.resolution {
            return Err(Error::Config(format!(
                "surrogate resolution ({}) does not match config ({})",
                surrogate.info.input_resolution, cfg.resolution
            )));
        }
        let thresholds = cfg.thresholds();
        let shape = (cfg.resolution, cfg.resolution);
        let bp_mask = build_band_mask(&thresholds, shape, BandMaskKind::BandPass, None)?;
        let br_mask = build_band_mask(&thresholds, shape, BandMaskKind::BandReject, None)?;
        let orig_tap = surrogate.tap(&cfg.orig_tap)?;
        let facl_tap = surrogate.tap(&cfg.facl_tap)?;
        let gen_params = init_generator(&cfg.generator, derive_seed(cfg.seed, "gen_init", &[]))?;
        let adam = Adam::new(AdamConfig {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
        });
        Ok(Trainer {
            cfg,
            surrogate,
            gen_params,
            thresholds,
            bp_mask,
            br_mask,
            orig_tap,
            facl_tap,
            adam,
        })
    }

    fn fadr_enabled(&self) -> bool {
        self.cfg.augment_fraction > 0.0 && (self.cfg.rho > 0.0 || self.cfg.sigma > 0.0)
    }

    /// Applies the spectral augmentation to the first floor(N * fraction)
    /// samples of the batch, clamping back to the valid pixel range so the
    /// projection reference stays a valid image.
    fn augment_batch(
        &self,
        batch: &ArrayView4<f64>,
        epoch: u64,
        step: u64,
    ) -> Result<(ndarray::Array4<f64>, usize)> {
        let n = batch.dim().0;
        let k = (n as f64 * self.cfg.augment_fraction).floor() as usize;
        let mut out = batch.to_owned();
        if !self.fadr_enabled() {
            return Ok((out, 0));
        }
        let bands = self.cfg.random_bands.to_bands();
        for i in 0..k {
            let seed = derive_seed(self.cfg.seed, "fadr", &[epoch, step, i as u64]);
            let params = RandomizationParams::new(self.cfg.rho, self.cfg.sigma, seed)?
                .with_bands(bands);
            let img = batch.index_axis(Axis(0), i);
            let aug = fadr_transform(&img, &self.thresholds, &params)?;
            out.index_axis_mut(Axis(0), i)
                .assign(&aug.mapv(|v| v.clamp(PIXEL_MIN, PIXEL_MAX)));
        }
        Ok((out, k))
    }

    /// One full training step: augment, generate, project, contrast, update.
    pub fn step(
        &mut self,
        batch: &ArrayView4<f64>,
        epoch: u64,
        step: u64,
    ) -> Result<StepMetrics> {
        let t0 = Instant::now();
        let (augmented, aug_count) = self.augment_batch(batch, epoch, step)?;
        let budget = PerturbationBudget::new(self.cfg.epsilon)?;
        let weights = self.cfg.loss_weights();
        let use_facl = weights.lambda_facl != 0.0;

        let mut g = Graph::new();
        let clean_dyn = augmented.clone().into_dyn();
        let clean_in = g.leaf(clean_dyn.clone(), false);
        let fwd = forward_generator(&mut g, &self.gen_params, &self.cfg.generator, clean_in, true)?;
        let adv = project_in_graph(&mut g, fwd.unbounded, &clean_dyn, budget)?;

        let sur = |g: &mut Graph, input| {
            forward_classifier(
                g,
                self.surrogate.info.arch,
                &self.surrogate.params,
                &self.surrogate.info.norm_mean,
                &self.surrogate.info.norm_std,
                input,
                BnMode::Eval,
                false,
            )
        };

        let clean_feats = sur(&mut g, clean_in)?;
        let adv_feats = sur(&mut g, adv)?;
        let clean_orig = clean_feats.taps[&self.orig_tap.layer_name];
        let adv_orig = adv_feats.taps[&self.orig_tap.layer_name];
        let l_orig = loss_orig_node(&mut g, clean_orig, adv_orig);

        let (l_facl, loss) = if use_facl {
            let bp = Arc::new(SpectralFilterOp {
                mask: self.bp_mask.values.clone(),
            });
            let br = Arc::new(SpectralFilterOp {
                mask: self.br_mask.values.clone(),
            });
            let mid_clean = g.custom(bp.clone(), &[clean_in]).map_err(Error::Tensor)?;
            let lh_clean = g.custom(br.clone(), &[clean_in]).map_err(Error::Tensor)?;
            let mid_adv = g.custom(bp, &[adv]).map_err(Error::Tensor)?;
            let lh_adv = g.custom(br, &[adv]).map_err(Error::Tensor)?;
            let z_mid_clean = sur(&mut g, mid_clean)?.taps[&self.facl_tap.layer_name];
            let z_lh_clean = sur(&mut g, lh_clean)?.taps[&self.facl_tap.layer_name];
            let z_mid_adv = sur(&mut g, mid_adv)?.taps[&self.facl_tap.layer_name];
            let z_lh_adv = sur(&mut g, lh_adv)?.taps[&self.facl_tap.layer_name];
            let l_facl = loss_facl_node(&mut g, z_mid_clean, z_mid_adv, z_lh_clean, z_lh_adv);
            let a = g.scale(l_orig, weights.lambda_orig);
            let b = g.scale(l_facl, weights.lambda_facl);
            (Some(l_facl), g.add(a, b))
        } else {
            (None, g.scale(l_orig, weights.lambda_orig))
        };

        let loss_v = g.scalar(loss);
        if !loss_v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at epoch {epoch} step {step}"
            )));
        }

        // projection contract, checked on every step for every sample
        let adv_v = g.value(adv);
        let mut budget_max = 0.0f64;
        for (a, r) in adv_v.iter().zip(clean_dyn.iter()) {
            let d = (a - r).abs();
            if d > budget_max {
                budget_max = d;
            }
            if !(PIXEL_MIN..=PIXEL_MAX).contains(a) {
                return Err(Error::Training(format!(
                    "projected pixel {a} outside valid range at step {step}"
                )));
            }
        }
        if budget_max > self.cfg.epsilon {
            return Err(Error::Training(format!(
                "budget violated at step {step}: {budget_max} > {}",
                self.cfg.epsilon
            )));
        }

        let metrics = StepMetrics {
            epoch,
            step,
            loss_orig: g.scalar(l_orig),
            loss_facl: l_facl.map(|id| g.scalar(id)),
            loss_total: loss_v,
            budget_max,
            augmented: aug_count,
            wall_ms: 0.0,
        };
        g.backward(loss).map_err(Error::Tensor)?;
        self.adam.step(&mut self.gen_params, &g);
        Ok(StepMetrics {
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            ..metrics
        })
    }

    /// The plain feature-separation step (no augmentation, no band loss):
    /// generate, project, push features apart, update. Kept as its own
    /// code path so the configured pipeline can be checked against it.
    pub fn baseline_step(
        &mut self,
        batch: &ArrayView4<f64>,
        epoch: u64,
        step: u64,
    ) -> Result<StepMetrics> {
        let t0 = Instant::now();
        let budget = PerturbationBudget::new(self.cfg.epsilon)?;
        let mut g = Graph::new();
        let clean_dyn = batch.to_owned().into_dyn();
        let clean_in = g.leaf(clean_dyn.clone(), false);
        let fwd = forward_generator(&mut g, &self.gen_params, &self.cfg.generator, clean_in, true)?;
        let adv = project_in_graph(&mut g, fwd.unbounded, &clean_dyn, budget)?;
        let clean_feats = forward_classifier(
            &mut g,
            self.surrogate.info.arch,
            &self.surrogate.params,
            &self.surrogate.info.norm_mean,
            &self.surrogate.info.norm_std,
            clean_in,
            BnMode::Eval,
            false,
        )?;
        let adv_feats = forward_classifier(
            &mut g,
            self.surrogate.info.arch,
            &self.surrogate.params,
            &self.surrogate.info.norm_mean,
            &self.surrogate.info.norm_std,
            adv,
            BnMode::Eval,
            false,
        )?;
        let l_orig = loss_orig_node(
            &mut g,
            clean_feats.taps[&self.orig_tap.layer_name],
            adv_feats.taps[&self.orig_tap.layer_name],
        );
        let loss = g.scale(l_orig, self.cfg.lambda_orig);
        let loss_v = g.scalar(loss);
        if !loss_v.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at epoch {epoch} step {step}"
            )));
        }
        let mut budget_max = 0.0f64;
        for (a, r) in g.value(adv).iter().zip(clean_dyn.iter()) {
            budget_max = budget_max.max((a - r).abs());
        }
        let metrics = StepMetrics {
            epoch,
            step,
            loss_orig: g.scalar(l_orig),
            loss_facl: None,
            loss_total: loss_v,
            budget_max,
            augmented: 0,
            wall_ms: 0.0,
        };
        g.backward(loss).map_err(Error::Tensor)?;
        self.adam.step(&mut self.gen_params, &g);
        Ok(StepMetrics {
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            ..metrics
        })
    }
}

/// Ablation variants of the training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    FadrOnly,
    FaclOnly,
    Full,
    LowRand,
    MidRand,
    HighRand,
    AllRand,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::FadrOnly,
        Variant::FaclOnly,
        Variant::Full,
        Variant::LowRand,
        Variant::MidRand,
        Variant::HighRand,
        Variant::AllRand,
    ];

    pub fn from_id(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "fadr_only" | "fadr" => Ok(Variant::FadrOnly),
            "facl_only" | "facl" => Ok(Variant::FaclOnly),
            "full" | "ours" => Ok(Variant::Full),
            "low_rand" => Ok(Variant::LowRand),
            "mid_rand" => Ok(Variant::MidRand),
            "high_rand" => Ok(Variant::HighRand),
            "all_rand" => Ok(Variant::AllRand),
            other => Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::FadrOnly => "fadr_only",
            Variant::FaclOnly => "facl_only",
            Variant::Full => "full",
            Variant::LowRand => "low_rand",
            Variant::MidRand => "mid_rand",
            Variant::HighRand => "high_rand",
            Variant::AllRand => "all_rand",
        }
    }
}

/// Applies an ablation variant to a base configuration.
///
/// `baseline` removes both modules; `fadr_only` / `facl_only` keep one;
/// the band variants restrict (or widen) which bands the random mask
/// jitters. Disabling the transform also zeroes the augment fraction so
/// the identity transform is skipped outright.
pub fn make_ablation_config(base: &TrainConfig, variant: Variant) -> TrainConfig {
    use crate::config::RandomBandsChoice;
    let mut cfg = base.clone();
    match variant {
        Variant::Baseline => {
            cfg.lambda_facl = 0.0;
            cfg.rho = 0.0;
            cfg.sigma = 0.0;
            cfg.augment_fraction = 0.0;
        }
        Variant::FadrOnly => {
            cfg.lambda_facl = 0.0;
        }
        Variant::FaclOnly => {
            cfg.rho = 0.0;
            cfg.sigma = 0.0;
            cfg.augment_fraction = 0.0;
        }
        Variant::Full => {}
        Variant::LowRand => cfg.random_bands = RandomBandsChoice::Low,
        Variant::MidRand => cfg.random_bands = RandomBandsChoice::Mid,
        Variant::HighRand => cfg.random_bands = RandomBandsChoice::High,
        Variant::AllRand => cfg.random_bands = RandomBandsChoice::All,
    }
    cfg
}

/// Result of a completed training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub config_hash: String,
    pub steps: u64,
    pub final_loss_orig: f64,
    pub final_loss_total: f64,
    pub duration_secs: f64,
}

/// Loads inputs, validates, runs the configured number of epochs, and
/// persists metrics, checkpoint, and the run record.
pub fn train(cfg: &TrainConfig, out_dir: &std::path::Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    // fail on missing inputs before any compute
    let manifest = load_manifest(std::path::Path::new(&cfg.dataset))
        .map_err(|e| Error::Config(format!("dataset manifest `{}`: {e}", cfg.dataset)))?;
    let surrogate = load_classifier(std::path::Path::new(&cfg.surrogate))
        .map_err(|e| Error::Config(format!("surrogate checkpoint `{}`: {e}", cfg.surrogate)))?;
    if manifest.resolution != cfg.resolution {
        return Err(Error::Config(format!(
            "dataset resolution ({}) does not match config ({})",
            manifest.resolution, cfg.resolution
        )));
    }
    let split = load_split(&manifest, "train")?;
    let run_dir = create_run_dir(out_dir, "train", &cfg.hash())?;
    train_in_dir(cfg, &manifest, &split, &surrogate, run_dir)
}

/// Training loop against already-loaded inputs (used by `train` and the
/// ablation suite).
pub fn train_in_dir(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    split: &LoadedSplit,
    surrogate: &Classifier,
    run_dir: RunDir,
) -> Result<TrainOutcome> {
    let t0 = Instant::now();
    let config_hash = cfg.hash();
    std::fs::write(run_dir.config_path(), crate::config::config_to_toml(cfg)?)
        .map_err(|e| Error::io_at(run_dir.config_path(), e))?;

    let mut trainer = Trainer::new(cfg, surrogate)?;
    let n = split.images.dim().0;
    let mut writer = csv::Writer::from_path(run_dir.metrics_path())
        .map_err(|e| Error::Training(format!("metrics csv: {e}")))?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut global_step: u64 = 0;
    let mut last = StepMetrics {
        epoch: 0,
        step: 0,
        loss_orig: f64::NAN,
        loss_facl: None,
        loss_total: f64::NAN,
        budget_max: 0.0,
        augmented: 0,
        wall_ms: 0.0,
    };

    for epoch in 0..cfg.epochs as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", &[epoch]));
        order.shuffle(&mut rng);
        let mut start = 0usize;
        let mut step_in_epoch: u64 = 0;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let idx = &order[start..end];
            let batch = gather_batch(&split.images, idx);
            let result = trainer.step(&batch.view(), epoch, step_in_epoch);
            let m = match result {
                Ok(m) => m,
                Err(e) => {
                    // persist the offending batch for reproduction
                    let diag = serde_json::json!({
                        "epoch": epoch,
                        "step": step_in_epoch,
                        "batch_indices": idx,
                        "error": e.to_string(),
                    });
                    let p = run_dir.path.join("failure.json");
                    let _ = std::fs::write(&p, serde_json::to_string_pretty(&diag)?);
                    return Err(e);
                }
            };
            writer
                .serialize(&m)
                .map_err(|e| Error::Training(format!("metrics csv: {e}")))?;
            if let Some(every) = cfg.checkpoint_every {
                if every > 0 && (global_step + 1) % every as u64 == 0 {
                    let p = run_dir.path.join(format!("generator-step{:06}.ckpt", global_step + 1));
                    save_generator(
                        &p,
                        &trainer.gen_params,
                        &GeneratorCheckpoint {
                            config: cfg.generator,
                            train_config_hash: config_hash.clone(),
                            seed: cfg.seed,
                        },
                    )?;
                }
            }
            last = m;
            global_step += 1;
            step_in_epoch += 1;
            start = end;
        }
        writer
            .flush()
            .map_err(|e| Error::Training(format!("metrics csv: {e}")))?;
        log::info!(
            "epoch {epoch}: loss_orig {:.4}, total {:.4}",
            last.loss_orig,
            last.loss_total
        );
    }
    drop(writer);

    save_generator(
        &run_dir.checkpoint_path(),
        &trainer.gen_params,
        &GeneratorCheckpoint {
            config: cfg.generator,
            train_config_hash: config_hash.clone(),
            seed: cfg.seed,
        },
    )?;

    let outcome = TrainOutcome {
        run_dir: run_dir.path.clone(),
        checkpoint: run_dir.checkpoint_path(),
        config_hash,
        steps: global_step,
        final_loss_orig: last.loss_orig,
        final_loss_total: last.loss_total,
        duration_secs: t0.elapsed().as_secs_f64(),
    };
    let record = serde_json::json!({
        "kind": "train",
        "dataset": manifest.id,
        "dataset_checksum": manifest.checksum,
        "surrogate": surrogate.info.model_id,
        "outcome": &outcome,
        "seed": cfg.seed,
    });
    std::fs::write(run_dir.record_path(), serde_json::to_string_pretty(&record)?)
        .map_err(|e| Error::io_at(run_dir.record_path(), e))?;
    Ok(outcome)
}

/// Stacks the rows of `images` selected by `idx` into a new batch.
pub fn gather_batch(images: &ndarray::Array4<f64>, idx: &[usize]) -> ndarray::Array4<f64> {
    let (_, c, h, w) = images.dim();
    let mut batch = ndarray::Array4::<f64>::zeros((idx.len(), c, h, w));
    for (bi, &si) in idx.iter().enumerate() {
        batch
            .index_axis_mut(Axis(0), bi)
            .assign(&images.index_axis(Axis(0), si));
    }
    batch
}

/// Convenience: total loss of the configured pipeline as a pure function
/// of generator parameters, for gradient checking. The augmented batch is
/// fixed by the caller so the function is deterministic.
pub fn pipeline_loss_for_gradcheck(
    cfg: &TrainConfig,
    surrogate: &Classifier,
    gen_params: &TensorMap,
    augmented: &ArrayView4<f64>,
) -> Result<(f64, Vec<(String, ndarray::ArrayD<f64>)>)> {
    let thresholds = cfg.thresholds();
    let shape = (cfg.resolution, cfg.resolution);
    let bp_mask = build_band_mask(&thresholds, shape, BandMaskKind::BandPass, None)?;
    let br_mask = build_band_mask(&thresholds, shape, BandMaskKind::BandReject, None)?;
    let orig_tap = surrogate.tap(&cfg.orig_tap)?;
    let facl_tap = surrogate.tap(&cfg.facl_tap)?;
    let weights: LossWeights = cfg.loss_weights();
    let budget = PerturbationBudget::new(cfg.epsilon)?;

    let mut g = Graph::new();
    let clean_dyn = augmented.to_owned().into_dyn();
    let clean_in = g.leaf(clean_dyn.clone(), false);
    let fwd = forward_generator(&mut g, gen_params, &cfg.generator, clean_in, true)?;
    let adv = project_in_graph(&mut g, fwd.unbounded, &clean_dyn, budget)?;
    let sur = |g: &mut Graph, input| {
        forward_classifier(
            g,
            surrogate.info.arch,
            &surrogate.params,
            &surrogate.info.norm_mean,
            &surrogate.info.norm_std,
            input,
            BnMode::Eval,
            false,
        )
    };
    let clean_feats = sur(&mut g, clean_in)?;
    let adv_feats = sur(&mut g, adv)?;
    let l_orig = loss_orig_node(
        &mut g,
        clean_feats.taps[&orig_tap.layer_name],
        adv_feats.taps[&orig_tap.layer_name],
    );
    let bp = Arc::new(SpectralFilterOp {
        mask: bp_mask.values,
    });
    let br = Arc::new(SpectralFilterOp {
        mask: br_mask.values,
    });
    let mid_clean = g.custom(bp.clone(), &[clean_in]).map_err(Error::Tensor)?;
    let lh_clean = g.custom(br.clone(), &[clean_in]).map_err(Error::Tensor)?;
    let mid_adv = g.custom(bp, &[adv]).map_err(Error::Tensor)?;
    let lh_adv = g.custom(br, &[adv]).map_err(Error::Tensor)?;
    let z_mid_clean = sur(&mut g, mid_clean)?.taps[&facl_tap.layer_name];
    let z_lh_clean = sur(&mut g, lh_clean)?.taps[&facl_tap.layer_name];
    let z_mid_adv = sur(&mut g, mid_adv)?.taps[&facl_tap.layer_name];
    let z_lh_adv = sur(&mut g, lh_adv)?.taps[&facl_tap.layer_name];
    let l_facl = loss_facl_node(&mut g, z_mid_clean, z_mid_adv, z_lh_clean, z_lh_adv);
    let a = g.scale(l_orig, weights.lambda_orig);
    let b = g.scale(l_facl, weights.lambda_facl);
    let loss = g.add(a, b);
    let loss_v = g.scalar(loss);
    g.backward(loss).map_err(Error::Tensor)?;
    let grads = g
        .bindings()
        .iter()
        .map(|(name, id)| (name.clone(), g.grad(*id).expect("bound grad").clone()))
        .collect();
    Ok((loss_v, grads))
}

/// Element count of the batch that passes through the augmentation,
/// exposed for tests.
pub fn augment_count(batch_len: usize, fraction: f64) -> usize {
    (batch_len as f64 * fraction).floor() as usize
}
