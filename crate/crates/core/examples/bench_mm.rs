use elvc::mat::Mat;
use std::time::Instant;
fn main() {
    let a = Mat::from_vec(128, 512, (0..128*512).map(|i| (i as f64 * 0.37).sin()).collect());
    let b = Mat::from_vec(512, 128, (0..512*128).map(|i| (i as f64 * 0.21).cos()).collect());
    let t0 = Instant::now();
    let mut acc = 0.0;
    let iters = 200;
    for _ in 0..iters {
        let c = a.matmul(&b);
        acc += c.data[0];
    }
    let el = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 128.0 * 512.0 * 128.0 * iters as f64;
    println!("matmul 128x512x128: {:.2} GFLOP/s (acc {acc:.3})", flops / el / 1e9);
}
