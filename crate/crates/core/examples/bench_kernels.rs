//! Rough single-core throughput of the hot kernels; run with
//! `cargo run --release --example bench_kernels`.

use std::time::Instant;

use morphdiff_core::rng::{randn, rng_from};
use morphdiff_core::Tensor;

fn main() {
    let mut rng = rng_from(1);
    for (c, h) in [(16usize, 64usize), (16, 32), (32, 64), (32, 32), (64, 16), (128, 16)] {
        let x = Tensor::from_vec(randn(&mut rng, c * h * h), &[c, h, h])
            .unwrap()
            .requires_grad();
        let k = Tensor::from_vec(randn(&mut rng, c * c * 9), &[c, c, 3, 3])
            .unwrap()
            .requires_grad();
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            let y = x.conv2d(&k, 1, 1).unwrap();
            y.mean().backward().unwrap();
        }
        let per = t0.elapsed().as_secs_f64() / reps as f64;
        let macs = (c * c * 9 * h * h) as f64;
        println!(
            "conv [{c},{h},{h}] k3 pad1: {:6.2} ms fwd+bwd  ({:.0} MMAC fwd)",
            per * 1e3,
            macs / 1e6
        );
    }

    let a = Tensor::from_vec(randn(&mut rng, 256 * 256), &[256, 256])
        .unwrap()
        .requires_grad();
    let b = Tensor::from_vec(randn(&mut rng, 256 * 256), &[256, 256]).unwrap();
    let reps = 50;
    let t0 = Instant::now();
    for _ in 0..reps {
        let y = a.matmul(&b).unwrap();
        y.mean().backward().unwrap();
    }
    println!(
        "matmul 256x256x256: {:6.2} ms fwd+bwd",
        t0.elapsed().as_secs_f64() / reps as f64 * 1e3
    );
}
