use super::conv::Resample;
use super::*;
use crate::rng::{randn, rng_from, uniform};

fn t(data: &[f32], shape: &[usize]) -> Tensor {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

// Random linear functional with weights bounded away from zero. Probing a
// linear op through a weighted mean keeps the scalar small (f32 rounding in
// the objective stays below the fd signal) while still exercising the full
// Jacobian.
fn probe(rng: &mut crate::rng::Prng, n: usize) -> Tensor {
    let w: Vec<f32> = uniform(rng, n, 0.5, 1.5)
        .into_iter()
        .zip(uniform(rng, n, -1.0, 1.0))
        .map(|(m, s)| if s < 0.0 { -m } else { m })
        .collect();
    Tensor::from_vec(w, &[n]).unwrap()
}

fn probed_mean(y: &Tensor, w: &Tensor) -> crate::error::Result<Tensor> {
    Ok(y.reshape(&[y.numel()])?.mul(w)?.mean())
}

#[test]
fn add_matches_definition() {
    let out = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
    assert_eq!(out.to_vec(), vec![4.0, 6.0]);
}

#[test]
fn scalar_operand_broadcasts_both_ways() {
    let x = t(&[1.0, 2.0, 3.0], &[3]);
    let s = Tensor::scalar(10.0);
    assert_eq!(x.add(&s).unwrap().to_vec(), vec![11.0, 12.0, 13.0]);
    assert_eq!(s.sub(&x).unwrap().to_vec(), vec![9.0, 8.0, 7.0]);
    assert_eq!(s.mul(&x).unwrap().to_vec(), vec![10.0, 20.0, 30.0]);
}

#[test]
fn mismatched_shapes_error_names_both() {
    let err = t(&[1.0, 2.0], &[2]).add(&t(&[1.0, 2.0, 3.0], &[3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
}

#[test]
fn mul_by_zero_zeroes_gradient() {
    let x = t(&[1.5, -2.0], &[2]).requires_grad();
    let z = Tensor::zeros(&[2]);
    let out = x.mul(&z).unwrap();
    assert_eq!(out.to_vec(), vec![0.0, 0.0]);
    out.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn silu_fixed_points() {
    let out = t(&[0.0, 10.0], &[2]).silu();
    let v = out.to_vec();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 9.99955).abs() < 1e-4, "silu(10) = {}", v[1]);
}

#[test]
fn softmax_rows_normalizes_and_orders() {
    let x = t(&[0.0, (2.0f32).ln(), 0.0, 0.0], &[2, 2]);
    let p = x.softmax_rows().unwrap().to_vec();
    assert!((p[0] - 1.0 / 3.0).abs() < 1e-6);
    assert!((p[1] - 2.0 / 3.0).abs() < 1e-6);
    assert!((p[2] - 0.5).abs() < 1e-6 && (p[3] - 0.5).abs() < 1e-6);
    // single-column rows are exactly 1 regardless of the logit
    let one = t(&[-40.0, 3.0, 17.5], &[3, 1]).softmax_rows().unwrap();
    assert_eq!(one.to_vec(), vec![1.0, 1.0, 1.0]);
    assert!(t(&[1.0], &[1]).softmax_rows().is_err());
}

#[test]
fn softmax_rows_gradcheck() {
    let mut rng = rng_from(41);
    let x = Tensor::from_vec(uniform(&mut rng, 12, -1.0, 1.0), &[3, 4]).unwrap();
    let w = probe(&mut rng, 12);
    let err =
        finite_difference_check(|x| probed_mean(&x.softmax_rows()?, &w), &x, 1e-3).unwrap();
    assert!(err < 1e-3, "softmax grad err {err}");
}

#[test]
fn sqrt_and_log_reject_bad_domains() {
    assert!(t(&[-1.0], &[1]).sqrt().is_err());
    assert!(t(&[0.0], &[1]).log().is_err());
    assert!(t(&[-0.5], &[1]).log().is_err());
    assert!(t(&[4.0], &[1]).sqrt().unwrap().to_vec() == vec![2.0]);
}

#[test]
fn matmul_hand_case() {
    let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    let b = t(&[1.0, 1.0], &[2, 1]);
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.to_vec(), vec![3.0, 7.0]);
}

#[test]
fn matmul_identity() {
    let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let x = t(&[5.0, -3.0, 2.0, 8.0], &[2, 2]);
    assert_eq!(eye.matmul(&x).unwrap().to_vec(), x.to_vec());
}

#[test]
fn matmul_rejects_bad_inner_dim() {
    let a = t(&[1.0; 6], &[2, 3]);
    let b = t(&[1.0; 8], &[2, 4]);
    assert!(a.matmul(&b).is_err());
}

#[test]
fn matmul_gradcheck() {
    // matmul is linear in each argument, so central differences are exact
    // at any step; a large h keeps f32 rounding negligible.
    let mut rng = rng_from(11);
    let a0 = Tensor::from_vec(randn(&mut rng, 12), &[3, 4]).unwrap();
    let b0 = Tensor::from_vec(randn(&mut rng, 8), &[4, 2]).unwrap();
    let w = probe(&mut rng, 6);
    let b_fixed = b0.clone();
    let wa = w.clone();
    let err = finite_difference_check(
        move |a| probed_mean(&a.matmul(&b_fixed)?, &wa),
        &a0,
        0.5,
    )
    .unwrap();
    assert!(err < 1e-3, "input grad err {err}");
    let a_fixed = a0.clone();
    let err = finite_difference_check(
        move |b| probed_mean(&a_fixed.matmul(b)?, &w),
        &b0,
        0.5,
    )
    .unwrap();
    assert!(err < 1e-3, "weight grad err {err}");
}

#[test]
fn conv_identity_kernel() {
    let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 3, 3]);
    let k = t(&[1.0], &[1, 1, 1, 1]);
    let out = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(out.shape(), &[1, 3, 3]);
    assert_eq!(out.to_vec(), x.to_vec());
}

#[test]
fn conv_ones_pooling_case() {
    let x = Tensor::ones(&[1, 4, 4]);
    let k = Tensor::ones(&[1, 1, 2, 2]);
    let out = x.conv2d(&k, 2, 0).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.to_vec(), vec![4.0; 4]);
}

#[test]
fn conv_rejects_non_integral_output() {
    let x = Tensor::ones(&[1, 5, 5]);
    let k = Tensor::ones(&[1, 1, 2, 2]);
    assert!(x.conv2d(&k, 2, 0).is_err());
}

#[test]
fn conv_padding_matches_manual() {
    // 1x2x2 input, 3x3 ones kernel, pad 1: each output = sum of the
    // in-bounds neighbors.
    let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
    let k = Tensor::ones(&[1, 1, 3, 3]);
    let out = x.conv2d(&k, 1, 1).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.to_vec(), vec![10.0, 10.0, 10.0, 10.0]);
}

#[test]
fn conv_gradcheck() {
    let mut rng = rng_from(21);
    let x0 = Tensor::from_vec(randn(&mut rng, 2 * 5 * 5), &[2, 5, 5]).unwrap();
    let k0 = Tensor::from_vec(randn(&mut rng, 3 * 2 * 3 * 3), &[3, 2, 3, 3]).unwrap();
    let w = probe(&mut rng, 3 * 5 * 5);
    let kf = k0.clone();
    let wx = w.clone();
    let err = finite_difference_check(
        move |x| probed_mean(&x.conv2d(&kf, 1, 1)?, &wx),
        &x0,
        0.5,
    )
    .unwrap();
    assert!(err < 1e-3, "conv input grad err {err}");
    let xf = x0.clone();
    let err = finite_difference_check(
        move |k| probed_mean(&xf.conv2d(k, 1, 1)?, &w),
        &k0,
        0.5,
    )
    .unwrap();
    assert!(err < 1e-3, "conv kernel grad err {err}");
}

#[test]
fn conv_stride2_gradcheck() {
    let mut rng = rng_from(22);
    let x0 = Tensor::from_vec(randn(&mut rng, 25), &[1, 5, 5]).unwrap();
    let k0 = Tensor::from_vec(randn(&mut rng, 9), &[1, 1, 3, 3]).unwrap();
    let w = probe(&mut rng, 4);
    let kf = k0.clone();
    let err = finite_difference_check(
        move |x| probed_mean(&x.conv2d(&kf, 2, 0)?, &w),
        &x0,
        0.5,
    )
    .unwrap();
    assert!(err < 1e-3, "strided conv grad err {err}");
}

#[test]
fn downsample_hand_case() {
    let x = t(&[1.0, 3.0, 5.0, 7.0], &[1, 2, 2]);
    let out = x.resample2x(Resample::Down).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    assert_eq!(out.to_vec(), vec![4.0]);
}

#[test]
fn upsample_replicates() {
    let x = t(&[2.0], &[1, 1, 1]);
    let out = x.resample2x(Resample::Up).unwrap();
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out.to_vec(), vec![2.0; 4]);
}

#[test]
fn resample_round_trip_on_constant() {
    let x = Tensor::full(&[3, 8, 8], 0.7);
    let down = x.resample2x(Resample::Down).unwrap();
    let up = down.resample2x(Resample::Up).unwrap();
    assert_eq!(up.shape(), x.shape());
    assert_eq!(up.to_vec(), x.to_vec());
}

#[test]
fn downsample_rejects_odd_dims() {
    assert!(Tensor::ones(&[1, 3, 4]).resample2x(Resample::Down).is_err());
    assert!(Tensor::ones(&[1, 4, 3]).resample2x(Resample::Down).is_err());
}

#[test]
fn resample_gradcheck() {
    let mut rng = rng_from(31);
    let x0 = Tensor::from_vec(randn(&mut rng, 2 * 4 * 4), &[2, 4, 4]).unwrap();
    let wd = probe(&mut rng, 2 * 2 * 2);
    let err = finite_difference_check(
        move |x| probed_mean(&x.resample2x(Resample::Down)?, &wd),
        &x0,
        0.5,
    )
    .unwrap();
    assert!(err < 1e-3, "down grad err {err}");
    let wu = probe(&mut rng, 2 * 8 * 8);
    let err = finite_difference_check(
        move |x| probed_mean(&x.resample2x(Resample::Up)?, &wu),
        &x0,
        0.5,
    )
    .unwrap();
    assert!(err < 1e-3, "up grad err {err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let x = t(&[1.0, 2.0, 3.0], &[3]).requires_grad();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let x = t(&[1.0, 2.0], &[2]).requires_grad();
    x.square().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = t(&[1.0, 2.0], &[2]).requires_grad();
    let y = x.square();
    assert!(y.backward().is_err());
}

#[test]
fn backward_twice_errors() {
    let x = t(&[1.0, 2.0], &[2]).requires_grad();
    let loss = x.square().sum();
    loss.backward().unwrap();
    let err = loss.backward().unwrap_err();
    assert!(err.to_string().contains("already ran"), "{err}");
}

#[test]
fn grad_accumulates_through_shared_subexpression() {
    // y = x + x means dy/dx = 2 at every element.
    let x = t(&[1.0, -4.0], &[2]).requires_grad();
    x.add(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
}

#[test]
fn sin_composite_gradcheck() {
    let mut rng = rng_from(41);
    let x0 = Tensor::from_vec(uniform(&mut rng, 10, -1.5, 1.5), &[10]).unwrap();
    let err = finite_difference_check(|x| Ok(x.sin().sum()), &x0, 1e-3).unwrap();
    assert!(err < 1e-3, "sin grad err {err}");
}

#[test]
fn composed_graph_gradcheck_ten_seeds() {
    // matmul, silu, square, scale, add, mul, mean stacked together, checked
    // at the f32-friendly step h=1e-3. Positive inputs and weights keep
    // every chain-rule factor bounded away from zero so the relative error
    // is dominated by truncation, not cancellation.
    for seed in 0..10u64 {
        let mut rng = rng_from(100 + seed);
        let x0 = Tensor::from_vec(uniform(&mut rng, 12, 0.1, 1.5), &[3, 4]).unwrap();
        let w = Tensor::from_vec(uniform(&mut rng, 8, 0.3, 1.0), &[4, 2]).unwrap();
        let probe_w = Tensor::from_vec(uniform(&mut rng, 6, 0.5, 1.5), &[6]).unwrap();
        let err = finite_difference_check(
            |x| {
                let h = x.matmul(&w)?;
                let d = h.silu().add(&h.square().scale(0.2))?;
                probed_mean(&d, &probe_w)
            },
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: composed grad err {err}");
    }
}

#[test]
fn reshape_slice_concat_round_trip() {
    let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).requires_grad();
    let top = x.slice_axis0(0, 1).unwrap();
    let rest = x.slice_axis0(1, 2).unwrap();
    let back = Tensor::concat_axis0(&[top, rest]).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());
    back.square().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
}

#[test]
fn broadcast_channel_bias_gradient_sums() {
    let b = t(&[1.0, -2.0], &[2]).requires_grad();
    let big = b.broadcast_to(&[2, 3, 3]).unwrap();
    assert_eq!(big.to_vec()[..9], [1.0; 9]);
    big.sum().backward().unwrap();
    assert_eq!(b.grad().unwrap(), vec![9.0, 9.0]);
}

#[test]
fn transpose_gradcheck() {
    let mut rng = rng_from(51);
    let x0 = Tensor::from_vec(randn(&mut rng, 6), &[2, 3]).unwrap();
    let err = finite_difference_check(
        |x| Ok(x.transpose2d()?.silu().sum()),
        &x0,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "transpose grad err {err}");
}

#[test]
fn finite_difference_check_on_linear_is_exact() {
    // Dyadic values and a power-of-two step make x ± h exact in f32, so the
    // quotient for a linear objective carries no rounding at all.
    let x0 = t(&[0.25, -0.75, 1.0], &[3]);
    let err = finite_difference_check(|x| Ok(x.sum()), &x0, 0.0009765625).unwrap();
    assert!(err < 1e-9, "linear fd err {err}");
}

#[test]
fn inference_builds_no_tape() {
    let x = t(&[1.0, 2.0], &[2]);
    let y = x.square().sum();
    assert!(!y.tracks_grad());
    assert!(y.backward().is_err());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn scale_by_pow2_associates(
            values in proptest::collection::vec(-100.0f32..100.0, 1..32),
            s_exp in -3i32..4,
            t_exp in -3i32..4,
        ) {
            let n = values.len();
            let x = Tensor::from_vec(values, &[n]).unwrap();
            let s = 2.0f32.powi(s_exp);
            let tt = 2.0f32.powi(t_exp);
            let left = x.scale(s).scale(tt);
            let right = x.scale(s * tt);
            prop_assert_eq!(left.to_vec(), right.to_vec());
        }

        #[test]
        fn forward_is_deterministic(
            values in proptest::collection::vec(-10.0f32..10.0, 4..64),
        ) {
            let n = values.len();
            let x1 = Tensor::from_vec(values.clone(), &[n]).unwrap();
            let x2 = Tensor::from_vec(values, &[n]).unwrap();
            let y1 = x1.silu().square().mean();
            let y2 = x2.silu().square().mean();
            prop_assert_eq!(y1.item().unwrap().to_bits(), y2.item().unwrap().to_bits());
        }

        #[test]
        fn add_commutes(
            a in proptest::collection::vec(-50.0f32..50.0, 8),
            b in proptest::collection::vec(-50.0f32..50.0, 8),
        ) {
            let ta = Tensor::from_vec(a, &[8]).unwrap();
            let tb = Tensor::from_vec(b, &[8]).unwrap();
            prop_assert_eq!(
                ta.add(&tb).unwrap().to_vec(),
                tb.add(&ta).unwrap().to_vec()
            );
        }
    }
}
