use morphdiff_core::backbone::{DiffKanUnet, GuidanceContext, UnetConfig};
use morphdiff_core::rng::{rng_from, uniform};
use morphdiff_core::Tensor;
use std::time::Instant;

fn bench(cfg: UnetConfig, label: &str) {
    let mut rng = rng_from(1);
    let net = DiffKanUnet::new(cfg, &mut rng).unwrap();
    let params = net.named_params();
    let phi = Tensor::from_vec(uniform(&mut rng, 2 * 64 * 64, -1.0, 1.0), &[2, 64, 64]).unwrap();
    let ctx = GuidanceContext::new(
        Tensor::from_vec(uniform(&mut rng, 64 * 64, 0.0, 1.0), &[1, 64, 64]).unwrap(),
        5,
        0.5,
        Tensor::from_vec(uniform(&mut rng, 64, -1.0, 1.0), &[64]).unwrap(),
    )
    .unwrap();
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        let out = net.denoise(&phi, &ctx).unwrap();
        std::hint::black_box(out.to_vec());
    }
    let fwd = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
    let t0 = Instant::now();
    for _ in 0..reps {
        let out = net.denoise(&phi, &ctx).unwrap();
        out.square().sum().backward().unwrap();
        for (_, p) in &params {
            p.zero_grad();
        }
    }
    let both = t0.elapsed().as_secs_f64() * 1000.0 / reps as f64;
    println!("{label}: fwd {fwd:.1} ms, fwd+bwd {both:.1} ms");
}

fn main() {
    bench(UnetConfig::default(), "kan+ftie");
    bench(
        UnetConfig {
            use_kan: false,
            ..UnetConfig::default()
        },
        "conv-only",
    );
}
