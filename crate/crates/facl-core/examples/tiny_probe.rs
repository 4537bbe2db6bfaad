use facl_core::data::synth::{render_sample, SynthDomain};
use facl_core::surrogate::{train_surrogate, Arch, SurrogateTrainConfig};
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ds(per_class: usize, seed: u64, res: usize) -> (Array4<f64>, Vec<usize>) {
    let n = per_class * 10;
    let mut images = Array4::<f64>::zeros((n, 3, res, res));
    let mut labels = Vec::new();
    let mut i = 0;
    for class in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64) << 8);
        for _ in 0..per_class {
            images.index_axis_mut(Axis(0), i).assign(&render_sample(SynthDomain::ShapesA, class, res, &mut rng));
            labels.push(class);
            i += 1;
        }
    }
    (images, labels)
}

fn main() {
    let (ti, tl) = ds(40, 31, 16);
    let (vi, vl) = ds(8, 32, 16);
    for (epochs, lr) in [(6usize, 1e-3), (10, 2e-3), (16, 2e-3)] {
        let t = std::time::Instant::now();
        let cfg = SurrogateTrainConfig { epochs, batch_size: 16, learning_rate: lr, seed: 5, augment_noise: 4.0 };
        let m = train_surrogate(Arch::VggTiny, "t", "mem", 10, 16, &ti.view(), &tl, &vi.view(), &vl, &cfg).unwrap();
        println!("epochs={epochs} lr={lr}: acc {:.1}% ({:.1}s)", m.info.test_accuracy, t.elapsed().as_secs_f64());
    }
}
