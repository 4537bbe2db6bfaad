//! Shared fixtures for the integration tests: tiny in-memory datasets and
//! classifiers sized for fast runs.

#![allow(dead_code)]

use facl_core::config::TrainConfig;
use facl_core::data::synth::{render_sample, SynthDomain};
use facl_core::generator::GeneratorConfig;
use facl_core::surrogate::{init_classifier, Arch, Classifier, ClassifierCheckpoint};
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TINY_RES: usize = 16;

/// In-memory labelled image stack rendered from the synthetic domain.
pub fn tiny_dataset(per_class: usize, domain: SynthDomain, seed: u64) -> (Array4<f64>, Vec<usize>) {
    let n = per_class * 10;
    let mut images = Array4::<f64>::zeros((n, 3, TINY_RES, TINY_RES));
    let mut labels = Vec::with_capacity(n);
    let mut i = 0;
    for class in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64) << 8);
        for _ in 0..per_class {
            let img = render_sample(domain, class, TINY_RES, &mut rng);
            images.index_axis_mut(Axis(0), i).assign(&img);
            labels.push(class);
            i += 1;
        }
    }
    (images, labels)
}

/// An untrained (randomly initialized) classifier; enough for contract
/// tests that do not need accuracy.
pub fn tiny_classifier(arch: Arch, seed: u64) -> Classifier {
    let params = init_classifier(arch, 10, TINY_RES, seed).unwrap();
    Classifier {
        info: ClassifierCheckpoint {
            arch,
            model_id: format!("{}-tiny", arch.id()),
            num_classes: 10,
            input_resolution: TINY_RES,
            norm_mean: vec![0.5, 0.5, 0.5],
            norm_std: vec![0.25, 0.25, 0.25],
            test_accuracy: 0.0,
            dataset_id: "mem".into(),
            seed,
        },
        params,
    }
}

/// Config sized for fast steps: tiny generator, tiny surrogate taps.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        resolution: TINY_RES,
        batch_size: 4,
        epochs: 1,
        f_low: 7,
        f_high: 112,
        base_resolution: 224,
        orig_tap: "pool3".into(),
        facl_tap: "pool4".into(),
        seed,
        generator: GeneratorConfig {
            input_channels: 3,
            base_width: 4,
            num_residual_blocks: 1,
            input_resolution: TINY_RES,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    }
}
