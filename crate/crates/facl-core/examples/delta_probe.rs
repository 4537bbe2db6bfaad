// Learnable per-sample delta through the same graph machinery: isolates
// optimization machinery from generator architecture.
use facl_core::surrogate::{load_classifier, forward_classifier, BnMode};
use facl_core::data::{load_manifest, load_split};
use facl_core::generator::{project_in_graph, PerturbationBudget};
use facl_tensor::{Graph, TensorMap, Adam, AdamConfig};
use ndarray::s;

fn main() {
    let m = load_manifest(std::path::Path::new("/tmp/facl-e2e/data/synthA6k/manifest.json")).unwrap();
    let val = load_split(&m, "val").unwrap();
    let sur = load_classifier(std::path::Path::new("/tmp/facl-e2e/models/vgg_small_a0.ckpt")).unwrap();
    let clean = val.images.slice(s![0..16, .., .., ..]).to_owned();
    let mut params = TensorMap::new();
    params.insert("delta", ndarray::ArrayD::zeros(ndarray::IxDyn(&[16,3,32,32])));
    let mut adam = Adam::new(AdamConfig { lr: 0.5, beta1: 0.5, beta2: 0.999, eps: 1e-8 });
    let clean_dyn = clean.clone().into_dyn();
    for step in 0..60 {
        let mut g = Graph::new();
        let x = g.leaf(clean_dyn.clone(), false);
        let d = g.param(&params, "delta", true);
        let u = g.add(x, d);
        let adv = project_in_graph(&mut g, u, &clean_dyn, PerturbationBudget::default()).unwrap();
        let fa = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, adv, BnMode::Eval, false).unwrap();
        let fc = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, x, BnMode::Eval, false).unwrap();
        let cos = g.cosine_sim_mean(fc.taps["conv4"], fa.taps["conv4"], 1e-8);
        if step % 10 == 0 { println!("step {step}: cosine {:.4}", g.scalar(cos)); }
        g.backward(cos).unwrap();
        adam.step(&mut params, &g);
    }
}
