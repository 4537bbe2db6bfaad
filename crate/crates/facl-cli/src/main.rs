//! `facl` — train, evaluate, and inspect frequency-aware generative
//! adversarial attacks at desk scale.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use facl_core::config::load_config;
use facl_core::data::synth::{generate_dataset, SynthDomain, SynthSpec};
use facl_core::data::{
    ingest_dataset, load_manifest, load_split, save_image_png, save_manifest, save_map_png,
};
use facl_core::evaluation::{self, append_record, EvalTarget};
use facl_core::generator::PerturbationBudget;
use facl_core::spectral::{
    band_decompose, build_band_mask, fadr_transform, BandMaskKind, BandThresholds,
    RandomizationParams,
};
use facl_core::surrogate::{
    load_classifier, save_classifier, train_surrogate, Arch, SurrogateTrainConfig,
};
use facl_core::training::{self, Variant};

/// Data root fallback used when a dataset argument is a bare name.
const DATA_ROOT_ENV: &str = "FACL_DATA_ROOT";

#[derive(Parser)]
#[command(name = "facl", version, about = "frequency-aware generative attack pipeline")]
struct Cli {
    /// Output directory for runs, records, and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset tree.
    Synth {
        /// Visual family: shapes_a or glyphs_b.
        #[arg(long)]
        domain: String,
        /// Dataset root to create.
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 150)]
        per_class_train: usize,
        #[arg(long, default_value_t = 30)]
        per_class_val: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// Validate and index an image-folder dataset into a manifest.
    Ingest {
        /// Dataset root (containing train/ and val/ class folders).
        root: PathBuf,
        /// Dataset id recorded in the manifest.
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
    /// Train a classifier from scratch and register it.
    TrainSurrogate {
        /// Dataset manifest path (or name under $FACL_DATA_ROOT).
        #[arg(long)]
        dataset: String,
        /// Architecture id (vgg_small, resnet_small, densenet_small).
        #[arg(long)]
        arch: String,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 4.0)]
        augment_noise: f64,
    },
    /// Train the perturbation generator per a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Optional ablation variant to apply to the config.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a trained generator against a victim model.
    Eval {
        #[arg(long)]
        generator: PathBuf,
        /// Victim checkpoint path.
        #[arg(long)]
        victim: PathBuf,
        /// Dataset manifest path.
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, default_value_t = 10.0)]
        epsilon: f64,
    },
    /// Train and evaluate every ablation variant from one config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a results directory into CSV and plots.
    Report {
        /// Directory containing records.jsonl (usually the out dir).
        #[arg(long)]
        run: PathBuf,
    },
    /// Dump band masks, a decomposition, and a randomized sample as images.
    Spectra {
        /// Optional input image; a synthetic sample is used otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 7)]
        f_low: u32,
        #[arg(long, default_value_t = 112)]
        f_high: u32,
        #[arg(long, default_value_t = 224)]
        base_resolution: u32,
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 8.0)]
        sigma: f64,
    },
}

fn resolve_dataset_path(spec: &str) -> PathBuf {
    let p = Path::new(spec);
    if p.exists() {
        return p.to_path_buf();
    }
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        let candidate = Path::new(&root).join(spec).join("manifest.json");
        if candidate.exists() {
            return candidate;
        }
    }
    p.to_path_buf()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            domain,
            root,
            per_class_train,
            per_class_val,
            resolution,
        } => {
            let domain = SynthDomain::from_id(&domain)
                .with_context(|| format!("unknown domain `{domain}` (shapes_a | glyphs_b)"))?;
            let spec = SynthSpec {
                domain,
                per_class_train,
                per_class_val,
                resolution,
                seed: cli.seed.unwrap_or(0),
            };
            generate_dataset(&root, &spec)?;
            println!(
                "wrote {} train + {} val images per class under {}",
                per_class_train,
                per_class_val,
                root.display()
            );
        }
        Command::Ingest {
            root,
            id,
            resolution,
        } => {
            let manifest = ingest_dataset(&root, &id, resolution)?;
            let path = root.join("manifest.json");
            save_manifest(&manifest, &path)?;
            println!(
                "{}: {} classes, {} train / {} val items, checksum {}",
                manifest.id,
                manifest.num_classes,
                manifest.items("train").map(|v| v.len()).unwrap_or(0),
                manifest.items("val").map(|v| v.len()).unwrap_or(0),
                &manifest.checksum[..12]
            );
            if !manifest.quarantined.is_empty() {
                println!("quarantined {} unreadable files:", manifest.quarantined.len());
                for q in &manifest.quarantined {
                    println!("  {}: {}", q.path, q.reason);
                }
            }
            println!("manifest: {}", path.display());
        }
        Command::TrainSurrogate {
            dataset,
            arch,
            out,
            epochs,
            lr,
            augment_noise,
        } => {
            let arch = Arch::from_id(&arch)?;
            let manifest = load_manifest(&resolve_dataset_path(&dataset))?;
            let train = load_split(&manifest, "train")?;
            let val = load_split(&manifest, "val")?;
            let cfg = SurrogateTrainConfig {
                epochs,
                learning_rate: lr,
                seed: cli.seed.unwrap_or(0),
                augment_noise,
                ..Default::default()
            };
            let model_id = format!("{}-{}", arch.id(), manifest.id);
            let model = train_surrogate(
                arch,
                &model_id,
                &manifest.id,
                manifest.num_classes,
                manifest.resolution,
                &train.images.view(),
                &train.labels,
                &val.images.view(),
                &val.labels,
                &cfg,
            )?;
            save_classifier(&out, &model)?;
            update_registry(&cli.out_dir, &model, &out)?;
            println!(
                "{model_id}: test accuracy {:.2}% -> {}",
                model.info.test_accuracy,
                out.display()
            );
        }
        Command::Train { config, variant } => {
            let mut cfg = load_config(&config)?;
            if let Some(v) = variant {
                cfg = training::make_ablation_config(&cfg, Variant::from_id(&v)?);
            }
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let outcome = training::train(&cfg, &cli.out_dir)?;
            println!(
                "trained {} steps in {:.1}s; final loss {:.4}; checkpoint {}",
                outcome.steps,
                outcome.duration_secs,
                outcome.final_loss_total,
                outcome.checkpoint.display()
            );
        }
        Command::Eval {
            generator,
            victim,
            dataset,
            split,
            epsilon,
        } => {
            let victim = load_classifier(&victim)?;
            let manifest = load_manifest(&resolve_dataset_path(&dataset))?;
            let data = load_split(&manifest, &split)?;
            let record = evaluation::evaluate_attack_files(
                &generator,
                &victim,
                &data.images,
                &data.labels,
                &manifest.id,
                PerturbationBudget::new(epsilon)?,
            )?;
            let path = append_record(&cli.out_dir, &record)?;
            println!(
                "{} on {}: clean {:.2}% -> attacked {:.2}% (ssim {:.3}, psnr {:.2} dB)",
                record.victim_id,
                record.dataset_id,
                record.clean_top1,
                record.adv_top1,
                record.ssim,
                record.psnr_db
            );
            println!("appended to {}", path.display());
        }
        Command::Ablate { config } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let section = cfg
                .ablate
                .clone()
                .context("config has no [ablate] section (victims are required)")?;
            if section.victims.is_empty() {
                bail!("[ablate] section lists no victims");
            }
            let variants: Vec<Variant> = if section.variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                section
                    .variants
                    .iter()
                    .map(|s| Variant::from_id(s))
                    .collect::<facl_core::Result<_>>()?
            };
            let manifest = load_manifest(&resolve_dataset_path(&cfg.dataset))?;
            let train_split = load_split(&manifest, "train")?;
            let surrogate = load_classifier(Path::new(&cfg.surrogate))?;

            let victims: Vec<_> = section
                .victims
                .iter()
                .map(|p| load_classifier(Path::new(p)))
                .collect::<facl_core::Result<_>>()?;
            let eval_manifests: Vec<_> = if section.eval_datasets.is_empty() {
                vec![manifest.clone()]
            } else {
                section
                    .eval_datasets
                    .iter()
                    .map(|p| load_manifest(&resolve_dataset_path(p)))
                    .collect::<facl_core::Result<_>>()?
            };
            // pair each victim with the split of the dataset it was
            // trained on, falling back to the first dataset
            let eval_splits: Vec<_> = eval_manifests
                .iter()
                .map(|m| load_split(m, "val").map(|s| (m.id.clone(), s)))
                .collect::<facl_core::Result<_>>()?;
            let mut targets = Vec::new();
            for v in &victims {
                let (dataset_id, split) = eval_splits
                    .iter()
                    .find(|(id, _)| *id == v.info.dataset_id)
                    .map(|(id, s)| (id.clone(), s))
                    .unwrap_or_else(|| {
                        let (id, s) = &eval_splits[0];
                        (id.clone(), s)
                    });
                targets.push(EvalTarget {
                    victim: v,
                    images: &split.images,
                    labels: &split.labels,
                    dataset_id,
                });
            }
            let rows = evaluation::run_ablation_suite(
                &cfg,
                &manifest,
                &train_split,
                &surrogate,
                &targets,
                &variants,
                &cli.out_dir,
            )?;
            println!("variant            victim                      clean%    adv%   status");
            for r in &rows {
                match &r.record {
                    Some(rec) => println!(
                        "{:<18} {:<26} {:>6.2} {:>7.2}   ok",
                        r.variant, r.victim_id, rec.clean_top1, rec.adv_top1
                    ),
                    None => println!(
                        "{:<18} {:<26}      -       -   FAILED: {}",
                        r.variant,
                        r.victim_id,
                        r.error.as_deref().unwrap_or("?")
                    ),
                }
            }
            println!(
                "tables: {}/ablation.csv, {}/ablation.json",
                cli.out_dir.display(),
                cli.out_dir.display()
            );
        }
        Command::Report { run } => {
            let records = run.join("records.jsonl");
            let out = run.join("report");
            let files = evaluation::report::emit(&records, &out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Spectra {
            image,
            resolution,
            f_low,
            f_high,
            base_resolution,
            rho,
            sigma,
        } => {
            let out = cli.out_dir.join("spectra");
            let img = match image {
                Some(p) => facl_core::data::load_image(&p, resolution)?,
                None => {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
                    facl_core::data::synth::render_sample(
                        SynthDomain::ShapesA,
                        0,
                        resolution,
                        &mut rng,
                    )
                }
            };
            let thresholds = BandThresholds::new(f_low, f_high, base_resolution)?;
            let shape = (resolution, resolution);
            let bp = build_band_mask(&thresholds, shape, BandMaskKind::BandPass, None)?;
            let br = build_band_mask(&thresholds, shape, BandMaskKind::BandReject, None)?;
            let params = RandomizationParams::new(rho, sigma, cli.seed.unwrap_or(0))?;
            let random =
                build_band_mask(&thresholds, shape, BandMaskKind::FadrRandom, Some(&params))?;
            save_map_png(&bp.values, &out.join("mask_band_pass.png"))?;
            save_map_png(&br.values, &out.join("mask_band_reject.png"))?;
            save_map_png(&random.values, &out.join("mask_fadr_random.png"))?;
            let (mid, lowhigh) = band_decompose(&img.view(), &thresholds)?;
            save_image_png(&img, &out.join("input.png"))?;
            save_image_png(&mid, &out.join("decomposed_mid.png"))?;
            save_image_png(&lowhigh, &out.join("decomposed_lowhigh.png"))?;
            let randomized = fadr_transform(&img.view(), &thresholds, &params)?;
            save_image_png(&randomized, &out.join("fadr_output.png"))?;
            println!("wrote spectra dumps under {}", out.display());
        }
    }
    Ok(())
}

/// Appends or replaces this model's row in the registry manifest.
fn update_registry(
    out_dir: &Path,
    model: &facl_core::surrogate::Classifier,
    ckpt: &Path,
) -> Result<()> {
    #[derive(serde::Serialize, serde::Deserialize)]
    struct Row {
        model_id: String,
        arch: String,
        taps: Vec<(String, usize)>,
        input_resolution: usize,
        norm_mean: Vec<f64>,
        norm_std: Vec<f64>,
        test_accuracy: f64,
        dataset_id: String,
        checkpoint: PathBuf,
    }
    let dir = out_dir.join("models");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("registry.json");
    let mut rows: Vec<Row> = if path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&path)?)?
    } else {
        Vec::new()
    };
    rows.retain(|r| r.model_id != model.info.model_id);
    rows.push(Row {
        model_id: model.info.model_id.clone(),
        arch: model.info.arch.id().to_string(),
        taps: model
            .info
            .arch
            .taps(model.info.input_resolution, model.info.num_classes),
        input_resolution: model.info.input_resolution,
        norm_mean: model.info.norm_mean.clone(),
        norm_std: model.info.norm_std.clone(),
        test_accuracy: model.info.test_accuracy,
        dataset_id: model.info.dataset_id.clone(),
        checkpoint: ckpt.to_path_buf(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}
