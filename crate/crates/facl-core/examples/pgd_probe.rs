// Direct feature-separation PGD against the trained surrogate: is the
// cosine objective minimizable within the eps=10 ball at all?
use facl_core::surrogate::{load_classifier, forward_classifier, BnMode, classify};
use facl_core::data::{load_manifest, load_split};
use facl_tensor::Graph;
use ndarray::{s, Ix2};

fn main() {
    let m = load_manifest(std::path::Path::new("/tmp/facl-e2e/data/stripesA/manifest.json")).unwrap();
    let val = load_split(&m, "val").unwrap();
    let sur = load_classifier(std::path::Path::new("/tmp/facl-e2e/models/vgg_stripes.ckpt")).unwrap();
    let clean = val.images.slice(s![0..16, .., .., ..]).to_owned();
    let labels = &val.labels[0..16];

    let tap = std::env::args().nth(1).unwrap_or("pool3".into());
    let iters: usize = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(40);
    let mut adv = clean.clone();
    for it in 0..iters {
        let mut g = Graph::new();
        let x = g.leaf(adv.clone().into_dyn(), true);
        let fwd = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, x, BnMode::Eval, false).unwrap();
        let clean_g = g.leaf(clean.clone().into_dyn(), false);
        let fwd_c = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, clean_g, BnMode::Eval, false).unwrap();
        let cos = g.cosine_sim_mean(fwd_c.taps[&tap], fwd.taps[&tap], 1e-8);
        let v = g.scalar(cos);
        g.backward(cos).unwrap();
        let grad = g.grad(x).unwrap().clone();
        // descend on cosine with sign steps of 1.0, project to ball
        ndarray::Zip::from(&mut adv).and(&grad.into_dimensionality::<ndarray::Ix4>().unwrap()).and(&clean).for_each(|a, &gr, &c| {
            *a = (*a - gr.signum()).clamp(c - 10.0, c + 10.0).clamp(0.0, 255.0);
        });
        if it % 10 == 0 { println!("iter {it}: cosine {v:.4}"); }
    }
    let (preds, _) = classify(&sur, &adv.view()).unwrap();
    let acc = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    println!("batch accuracy after PGD: {}/16", acc);
    // logits check via graph value
    let mut g = Graph::new();
    let x = g.leaf(adv.into_dyn(), false);
    let fwd = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, x, BnMode::Eval, false).unwrap();
    let cg = g.leaf(clean.into_dyn(), false);
    let fc = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, cg, BnMode::Eval, false).unwrap();
    let cos = g.cosine_sim_mean(fc.taps[&tap], fwd.taps[&tap], 1e-8);
    println!("final cosine: {:.4}", g.scalar(cos));
    let _ = g.value(fwd.logits).clone().into_dimensionality::<Ix2>().unwrap();
}
