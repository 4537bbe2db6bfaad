use facl_tensor::kernels::*;
use ndarray::Array4;
use std::time::Instant;

fn main() {
    // simulate one conv layer of a desk-scale step: batch 16, 64ch 8x8 3x3
    let x = Array4::<f64>::from_elem((16, 64, 8, 8), 0.5);
    let w = Array4::<f64>::from_elem((64, 64, 3, 3), 0.01);
    let t = Instant::now();
    let mut out = None;
    for _ in 0..20 {
        out = Some(conv2d_forward(&x.view(), &w.view(), None, 1, 1));
    }
    let fw = t.elapsed().as_secs_f64() / 20.0;
    let o = out.unwrap();
    let t = Instant::now();
    for _ in 0..20 {
        let _ = conv2d_backward(&x.view(), &w.view(), &o.view(), 1, 1, false);
    }
    let bw = t.elapsed().as_secs_f64() / 20.0;
    // and a 32x32 layer: batch 16, 16ch in 32 out
    let x2 = Array4::<f64>::from_elem((16, 16, 32, 32), 0.5);
    let w2 = Array4::<f64>::from_elem((32, 16, 3, 3), 0.01);
    let t = Instant::now();
    for _ in 0..20 { let _ = conv2d_forward(&x2.view(), &w2.view(), None, 1, 1); }
    let fw2 = t.elapsed().as_secs_f64() / 20.0;
    println!("conv 64x8x8x3x3 batch16: fwd {:.1} ms, bwd {:.1} ms", fw*1e3, bw*1e3);
    println!("conv 16->32 @32x32 batch16: fwd {:.1} ms", fw2*1e3);
}
