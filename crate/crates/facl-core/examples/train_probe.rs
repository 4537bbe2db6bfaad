use facl_core::data::synth::{generate_dataset, SynthDomain, SynthSpec};
use facl_core::data::{ingest_dataset, load_split};
use facl_core::surrogate::{train_surrogate, Arch, SurrogateTrainConfig};
use std::time::Instant;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        domain: SynthDomain::ShapesA,
        per_class_train: 100,
        per_class_val: 30,
        resolution: 32,
        seed: 0,
    };
    let t = Instant::now();
    generate_dataset(dir.path(), &spec).unwrap();
    println!("generate: {:.1}s", t.elapsed().as_secs_f64());
    let t = Instant::now();
    let m = ingest_dataset(dir.path(), "synth_a", 32).unwrap();
    let train = load_split(&m, "train").unwrap();
    let val = load_split(&m, "val").unwrap();
    println!("ingest+load: {:.1}s", t.elapsed().as_secs_f64());

    for arch in [Arch::VggSmall, Arch::ResnetSmall, Arch::DensenetSmall] {
        let t = Instant::now();
        let cfg = SurrogateTrainConfig { epochs: 4, ..Default::default() };
        let model = train_surrogate(
            arch, "probe", "synth_a", 10, 32,
            &train.images.view(), &train.labels,
            &val.images.view(), &val.labels,
            &cfg,
        ).unwrap();
        println!("{}: test acc {:.1}% in {:.1}s", arch.id(), model.info.test_accuracy, t.elapsed().as_secs_f64());
    }
}
