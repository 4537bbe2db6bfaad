// Can a single universal perturbation (shared across all images) attack
// the surrogate? Upper-bounds what a conv generator can learn quickly.
use facl_core::surrogate::{load_classifier, forward_classifier, BnMode, classify};
use facl_core::data::{load_manifest, load_split};
use facl_core::generator::{project, PerturbationBudget};
use facl_tensor::{Graph, TensorMap, Adam, AdamConfig, CustomOp};
use ndarray::{s, ArrayD, IxDyn};
use std::sync::Arc;

struct BroadcastAdd;
impl CustomOp for BroadcastAdd {
    fn name(&self) -> &'static str { "broadcast_add" }
    fn forward(&self, inputs: &[&ArrayD<f64>]) -> facl_tensor::Result<ArrayD<f64>> {
        let (x, d) = (inputs[0], inputs[1]);
        let mut out = x.clone();
        let n = x.shape()[0];
        let d3 = d.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut o4 = out.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
        for i in 0..n { let mut r = o4.index_axis_mut(ndarray::Axis(0), i); r += &d3; }
        Ok(out)
    }
    fn backward(&self, g: &ArrayD<f64>, _i: &[&ArrayD<f64>], _o: &ArrayD<f64>) -> facl_tensor::Result<Vec<Option<ArrayD<f64>>>> {
        let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (n, c, h, w) = g4.dim();
        let mut dd = ndarray::Array3::<f64>::zeros((c, h, w));
        for i in 0..n { dd += &g4.index_axis(ndarray::Axis(0), i); }
        Ok(vec![Some(g.clone()), Some(dd.into_dyn())])
    }
}

fn main() {
    let m = load_manifest(std::path::Path::new("/tmp/facl-e2e/data/stripesA/manifest.json")).unwrap();
    let tr = load_split(&m, "train").unwrap();
    let val = load_split(&m, "val").unwrap();
    let sur = load_classifier(std::path::Path::new("/tmp/facl-e2e/models/vgg_stripes.ckpt")).unwrap();
    let mut params = TensorMap::new();
    params.insert("delta", ArrayD::zeros(IxDyn(&[3,32,32])));
    let mut adam = Adam::new(AdamConfig { lr: 0.5, beta1: 0.5, beta2: 0.999, eps: 1e-8 });
    for step in 0..150 {
        let lo = (step * 16) % 2000;
        let clean = tr.images.slice(s![lo..lo+16, .., .., ..]).to_owned().into_dyn();
        let mut g = Graph::new();
        let x = g.leaf(clean.clone(), false);
        let d = g.param(&params, "delta", true);
        let u = g.custom(Arc::new(BroadcastAdd), &[x, d]).unwrap();
        let adv = facl_core::generator::project_in_graph(&mut g, u, &clean, PerturbationBudget::default()).unwrap();
        let fa = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, adv, BnMode::Eval, false).unwrap();
        let fc = forward_classifier(&mut g, sur.info.arch, &sur.params, &sur.info.norm_mean, &sur.info.norm_std, x, BnMode::Eval, false).unwrap();
        let cos = g.cosine_sim_mean(fc.taps["conv4"], fa.taps["conv4"], 1e-8);
        if step % 30 == 0 { println!("step {step}: cosine {:.4}", g.scalar(cos)); }
        g.backward(cos).unwrap();
        adam.step(&mut params, &g);
    }
    // evaluate on val
    let d = params.get("delta").unwrap().view().into_dimensionality::<ndarray::Ix3>().unwrap().to_owned();
    let mut adv = val.images.clone();
    for i in 0..adv.dim().0 { let mut r = adv.index_axis_mut(ndarray::Axis(0), i); r += &d; }
    let adv = project(&adv.view(), &val.images.view(), PerturbationBudget::default()).unwrap();
    let (preds, _) = classify(&sur, &adv.view()).unwrap();
    let acc = 100.0 * preds.iter().zip(&val.labels).filter(|(p,l)| p==l).count() as f64 / preds.len() as f64;
    println!("universal-delta val accuracy: {acc:.2}% (clean was ~98.3%)");
}
