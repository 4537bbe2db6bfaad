// Can the generator overfit ONE batch? Prints loss + grad norm trajectory.
use facl_core::config::TrainConfig;
use facl_core::surrogate::load_classifier;
use facl_core::training::Trainer;
use facl_core::data::{load_manifest, load_split};
use facl_core::generator::GeneratorConfig;
use ndarray::s;

fn main() {
    let m = load_manifest(std::path::Path::new("/tmp/facl-e2e/data/synthA/manifest.json")).unwrap();
    let val = load_split(&m, "val").unwrap();
    let sur = load_classifier(std::path::Path::new("/tmp/facl-e2e/models/vgg_small_a0.ckpt")).unwrap();
    let batch = val.images.slice(s![0..16, .., .., ..]).to_owned();
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|v| v.parse().unwrap()).unwrap_or(2e-3);
    let beta1: f64 = args.get(2).map(|v| v.parse().unwrap()).unwrap_or(0.5);
    let mut cfg = TrainConfig::default();
    cfg.resolution = 32;
    cfg.learning_rate = lr;
    cfg.adam_beta1 = beta1;
    println!("lr={lr} beta1={beta1}");
    cfg.lambda_facl = 0.0; // pure separation objective for clarity
    cfg.augment_fraction = 0.0;
    cfg.generator = GeneratorConfig { input_channels: 3, base_width: 16, num_residual_blocks: 2, input_resolution: 32, ..Default::default() };
    let mut tr = Trainer::new(&cfg, &sur).unwrap();
    for step in 0..120u64 {
        let m = tr.step(&batch.view(), 0, step).unwrap();
        if step % 15 == 0 || step == 119 {
            println!("step {step}: l_orig {:.4} budget_max {:.3}", m.loss_orig, m.budget_max);
        }
    }
}
