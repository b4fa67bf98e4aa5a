//! Training losses on deformation fields plus evaluation metrics and the
//! per-pair report they are collected into.

use crate::error::{MorphError, Result};
use crate::kv::KvFile;
use crate::tensor::{accumulate, Tensor};
use crate::warp::DeformationField;

/// Keeps correlation denominators finite on constant inputs.
pub const NCC_EPS: f32 = 1e-5;

fn ncc_flat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let am = a.sub(&a.mean())?;
    let bm = b.sub(&b.mean())?;
    let num = am.mul(&bm)?.sum();
    let da = am.square().sum().shift(NCC_EPS).sqrt()?;
    let db = bm.square().sum().shift(NCC_EPS).sqrt()?;
    num.div(&da.mul(&db)?)
}

/// Zero-mean normalized cross-correlation in [-1,1]. Rank-3 inputs are
/// treated as [C,H,W]: correlation per channel, averaged. Differentiable.
pub fn ncc(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(MorphError::shape(format!(
            "ncc: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rank() == 3 {
        let c = a.shape()[0];
        let per_channel = a.numel() / c;
        if per_channel < 2 {
            return Err(MorphError::shape(format!(
                "ncc: need at least 2 elements per channel, got {per_channel}"
            )));
        }
        let mut acc: Option<Tensor> = None;
        for ch in 0..c {
            let n = ncc_flat(&a.slice_axis0(ch, 1)?, &b.slice_axis0(ch, 1)?)?;
            acc = Some(match acc {
                Some(t) => t.add(&n)?,
                None => n,
            });
        }
        Ok(acc.unwrap().scale(1.0 / c as f32))
    } else {
        if a.numel() < 2 {
            return Err(MorphError::shape(format!(
                "ncc: need at least 2 elements, got {}",
                a.numel()
            )));
        }
        ncc_flat(a, b)
    }
}

/// Mean squared forward difference of a [C,H,W] tensor over both spatial
/// directions: sum of dx and dy diffs squared, divided by
/// C * (H*(W-1) + (H-1)*W). Differentiable.
pub fn gradient_energy(u: &Tensor) -> Result<Tensor> {
    if u.rank() != 3 {
        return Err(MorphError::shape(format!(
            "gradient_energy: expected [C,H,W], got {:?}",
            u.shape()
        )));
    }
    let (c, h, w) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    if h < 2 || w < 2 {
        return Err(MorphError::shape(format!(
            "gradient_energy: need H,W >= 2, got {h}x{w}"
        )));
    }
    let denom = (c * (h * (w - 1) + (h - 1) * w)) as f64;
    let us = u.to_vec();
    let hw = h * w;
    let mut total = 0.0f64;
    for ch in 0..c {
        let plane = &us[ch * hw..(ch + 1) * hw];
        for y in 0..h {
            for x in 0..w - 1 {
                let d = plane[y * w + x + 1] as f64 - plane[y * w + x] as f64;
                total += d * d;
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                let d = plane[(y + 1) * w + x] as f64 - plane[y * w + x] as f64;
                total += d * d;
            }
        }
    }
    let u_t = u.clone();
    Ok(Tensor::from_op(
        vec![(total / denom) as f32],
        vec![],
        vec![u.clone()],
        Box::new(move |g| {
            let go = g[0] as f64;
            let us = u_t.to_vec();
            let mut gu = vec![0.0f32; c * hw];
            for ch in 0..c {
                let base = ch * hw;
                for y in 0..h {
                    for x in 0..w - 1 {
                        let i = base + y * w + x;
                        let d = us[i + 1] as f64 - us[i] as f64;
                        let k = (2.0 * d * go / denom) as f32;
                        gu[i + 1] += k;
                        gu[i] -= k;
                    }
                }
                for y in 0..h - 1 {
                    for x in 0..w {
                        let i = base + y * w + x;
                        let d = us[i + w] as f64 - us[i] as f64;
                        let k = (2.0 * d * go / denom) as f32;
                        gu[i + w] += k;
                        gu[i] -= k;
                    }
                }
            }
            accumulate(&u_t, &gu);
        }),
    ))
}

/// Smoothness penalty of a deformation field; see [`gradient_energy`].
pub fn smoothness(field: &DeformationField) -> Result<Tensor> {
    gradient_energy(&field.u)
}

/// Field reconstruction loss: 1 - ncc(pred, gt) + gamma * gradient_energy(pred).
/// Differentiable with respect to `phi_pred`.
pub fn df_loss(phi_pred: &Tensor, phi_gt: &Tensor, gamma: f32) -> Result<Tensor> {
    let corr = ncc(phi_pred, phi_gt)?;
    let mut loss = corr.neg().shift(1.0);
    if gamma != 0.0 {
        loss = loss.add(&gradient_energy(phi_pred)?.scale(gamma))?;
    }
    Ok(loss)
}

/// Anything that maps an image to a scalar age prediction. The trait lets
/// the loss be tested against stubs and reused by the real critic.
pub trait AgeCritic {
    fn predict_age(&self, img: &Tensor) -> Result<Tensor>;
}

/// Absolute error between the critic's age estimate and the target age, in
/// years. Gradients flow into `generated_img` through the (frozen) critic.
pub fn bae_loss<C: AgeCritic + ?Sized>(
    critic: &C,
    generated_img: &Tensor,
    t_age: f32,
) -> Result<Tensor> {
    let pred = critic.predict_age(generated_img)?;
    if pred.numel() != 1 {
        return Err(MorphError::shape(format!(
            "age critic must return a scalar, got {:?}",
            pred.shape()
        )));
    }
    Ok(pred.shift(-t_age).mean_abs())
}

/// Peak signal-to-noise ratio in dB; identical inputs give +inf.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MorphError::shape(format!(
            "psnr: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.to_vec();
    let bv = b.to_vec();
    let mut acc = 0.0f64;
    for (x, y) in av.iter().zip(&bv) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    let mse = acc / av.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (mse / (max_val * max_val)).log10())
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0f64; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

// symmetric (edge-inclusive) reflection: -1 -> 0, -2 -> 1, n -> n-1, ...
#[inline]
fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let win = ssim_window();
    let half = (SSIM_WIN / 2) as i64;
    let mut acc = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WIN {
                let wy = win[ky];
                let sy = reflect(y as i64 + ky as i64 - half, h);
                for kx in 0..SSIM_WIN {
                    let wt = wy * win[kx];
                    let sx = reflect(x as i64 + kx as i64 - half, w);
                    let va = a[sy * w + sx] as f64;
                    let vb = b[sy * w + sx] as f64;
                    ma += wt * va;
                    mb += wt * vb;
                    maa += wt * va * va;
                    mbb += wt * vb * vb;
                    mab += wt * va * vb;
                }
            }
            let va = maa - ma * ma;
            let vb = mbb - mb * mb;
            let vab = mab - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
        }
    }
    acc / (h * w) as f64
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5) and
/// symmetric padding; inputs are expected in [0,1]. Rank-3 inputs are
/// averaged over channels. Evaluation only, no gradients.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(MorphError::shape(format!(
            "ssim: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = match a.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(MorphError::shape(format!(
                "ssim: expected [H,W] or [C,H,W], got {s:?}"
            )))
        }
    };
    let av = a.to_vec();
    let bv = b.to_vec();
    let hw = h * w;
    let mut acc = 0.0f64;
    for ch in 0..c {
        acc += ssim_plane(&av[ch * hw..(ch + 1) * hw], &bv[ch * hw..(ch + 1) * hw], h, w);
    }
    Ok(acc / c as f64)
}

/// Mean Jacobian determinant and the fraction of pixels with det <= 0.
pub fn jacobian_stats(det: &Tensor) -> (f64, f64) {
    let v = det.to_vec();
    let mut sum = 0.0f64;
    let mut folded = 0usize;
    for x in &v {
        sum += *x as f64;
        if *x <= 0.0 {
            folded += 1;
        }
    }
    (sum / v.len() as f64, folded as f64 / v.len() as f64)
}

/// Metrics for one evaluation pair. Loss terms are present only when a
/// model was involved (oracle-mode evaluations leave them unset).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub mean_jacobian: f64,
    pub folding_fraction: f64,
    pub loss_simple: Option<f64>,
    pub loss_df: Option<f64>,
    pub loss_bae: Option<f64>,
}

impl MetricReport {
    /// Column order of [`MetricReport::csv_line`].
    pub const CSV_HEADER: &'static str =
        "psnr_db,ssim,ncc,mean_jacobian,folding_fraction,loss_simple,loss_df,loss_bae";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.psnr_db,
            self.ssim,
            self.ncc,
            self.mean_jacobian,
            self.folding_fraction,
            opt(self.loss_simple),
            opt(self.loss_df),
            opt(self.loss_bae),
        )
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("psnr_db", &self.psnr_db.to_string());
        kv.set("ssim", &self.ssim.to_string());
        kv.set("ncc", &self.ncc.to_string());
        kv.set("mean_jacobian", &self.mean_jacobian.to_string());
        kv.set("folding_fraction", &self.folding_fraction.to_string());
        if let Some(v) = self.loss_simple {
            kv.set("loss_simple", &v.to_string());
        }
        if let Some(v) = self.loss_df {
            kv.set("loss_df", &v.to_string());
        }
        if let Some(v) = self.loss_bae {
            kv.set("loss_bae", &v.to_string());
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let need = |key: &str| -> Result<f64> {
            kv.get_f64(key)?
                .ok_or_else(|| MorphError::format(format!("missing key `{key}`")))
        };
        Ok(Self {
            psnr_db: need("psnr_db")?,
            ssim: need("ssim")?,
            ncc: need("ncc")?,
            mean_jacobian: need("mean_jacobian")?,
            folding_fraction: need("folding_fraction")?,
            loss_simple: kv.get_f64("loss_simple")?,
            loss_df: kv.get_f64("loss_df")?,
            loss_bae: kv.get_f64("loss_bae")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, rng_from, uniform};
    use crate::tensor::finite_difference_check;

    #[test]
    fn ncc_self_and_sign() {
        let mut rng = rng_from(11);
        let x = Tensor::from_vec(randn(&mut rng, 100), &[100]).unwrap();
        let v = ncc(&x, &x).unwrap().item().unwrap();
        assert!((v - 1.0).abs() < 1e-4, "self ncc {v}");
        let v = ncc(&x, &x.neg()).unwrap().item().unwrap();
        assert!((v + 1.0).abs() < 1e-4, "anti ncc {v}");
    }

    #[test]
    fn ncc_affine_invariance() {
        let mut rng = rng_from(12);
        let x = Tensor::from_vec(randn(&mut rng, 64), &[64]).unwrap();
        let y = x.scale(2.5).shift(3.0);
        let v = ncc(&x, &y).unwrap().item().unwrap();
        assert!((v - 1.0).abs() < 1e-4, "affine ncc {v}");
    }

    #[test]
    fn ncc_is_per_channel_for_fields() {
        // channels scaled differently: per-channel correlation is 1 even
        // though a single global correlation would be well below 1
        let mut rng = rng_from(13);
        let p = randn(&mut rng, 16);
        let q = randn(&mut rng, 16);
        let mut a = p.clone();
        a.extend(q.clone());
        let mut b: Vec<f32> = p.iter().map(|v| 2.0 * v).collect();
        b.extend(q.iter().map(|v| 0.5 * v));
        let a = Tensor::from_vec(a, &[2, 4, 4]).unwrap();
        let b = Tensor::from_vec(b, &[2, 4, 4]).unwrap();
        let v = ncc(&a, &b).unwrap().item().unwrap();
        assert!(v > 0.999, "per-channel ncc {v}");
    }

    #[test]
    fn ncc_rejects_mismatch_and_tiny() {
        let a = Tensor::zeros(&[4]);
        let b = Tensor::zeros(&[5]);
        assert!(ncc(&a, &b).is_err());
        let a = Tensor::zeros(&[1]);
        assert!(ncc(&a, &a).is_err());
        let a = Tensor::zeros(&[2, 1, 1]);
        assert!(ncc(&a, &a).is_err());
    }

    #[test]
    fn gradient_energy_constant_is_zero() {
        let u = Tensor::full(&[2, 5, 5], 3.7);
        assert_eq!(gradient_energy(&u).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn gradient_energy_unit_ramp_fixture() {
        // channel 0 = x coordinate, channel 1 = 0 on a 3x3 grid:
        // dx diffs are all 1 (6 of them), everything else 0, and the
        // denominator is 2 * (3*2 + 2*3) = 24, so the mean is 6/24
        let mut data = Vec::new();
        for _y in 0..3 {
            for x in 0..3 {
                data.push(x as f32);
            }
        }
        data.extend([0.0; 9]);
        let u = Tensor::from_vec(data, &[2, 3, 3]).unwrap();
        let v = gradient_energy(&u).unwrap().item().unwrap();
        assert!((v - 0.25).abs() < 1e-7, "{v}");
    }

    #[test]
    fn gradient_energy_is_quadratic_in_scale() {
        let mut rng = rng_from(14);
        let u = Tensor::from_vec(randn(&mut rng, 2 * 4 * 4), &[2, 4, 4]).unwrap();
        let base = gradient_energy(&u).unwrap().item().unwrap();
        let scaled = gradient_energy(&u.scale(3.0)).unwrap().item().unwrap();
        assert!((scaled - 9.0 * base).abs() < 1e-4 * base.abs().max(1.0));
    }

    #[test]
    fn gradient_energy_gradcheck() {
        let mut rng = rng_from(15);
        let u = Tensor::from_vec(uniform(&mut rng, 2 * 4 * 4, -1.0, 1.0), &[2, 4, 4]).unwrap();
        // quadratic objective: central differences are exact at any h
        let err = finite_difference_check(|u| gradient_energy(u), &u, 0.5).unwrap();
        assert!(err < 1e-3, "gradient energy grad err {err}");
    }

    #[test]
    fn df_loss_vanishing_ncc_term() {
        let mut rng = rng_from(16);
        let phi = Tensor::from_vec(randn(&mut rng, 2 * 4 * 4), &[2, 4, 4]).unwrap();
        let gamma = 0.5;
        let loss = df_loss(&phi, &phi, gamma).unwrap().item().unwrap();
        let smooth = gradient_energy(&phi).unwrap().item().unwrap();
        assert!((loss - gamma * smooth).abs() < 1e-4, "{loss} vs {}", gamma * smooth);
    }

    #[test]
    fn df_loss_anticorrelated_is_two() {
        let mut rng = rng_from(17);
        let phi = Tensor::from_vec(randn(&mut rng, 2 * 4 * 4), &[2, 4, 4]).unwrap();
        let loss = df_loss(&phi.neg(), &phi, 0.0).unwrap().item().unwrap();
        assert!((loss - 2.0).abs() < 1e-4, "{loss}");
    }

    #[test]
    fn df_loss_bounded_below_by_smoothness_term() {
        let mut rng = rng_from(18);
        for _ in 0..20 {
            let a = Tensor::from_vec(randn(&mut rng, 2 * 5 * 5), &[2, 5, 5]).unwrap();
            let b = Tensor::from_vec(randn(&mut rng, 2 * 5 * 5), &[2, 5, 5]).unwrap();
            let gamma = 0.3;
            let loss = df_loss(&a, &b, gamma).unwrap().item().unwrap();
            let floor = gamma * gradient_energy(&a).unwrap().item().unwrap();
            assert!(loss >= floor - 1e-4, "{loss} < {floor}");
        }
    }

    #[test]
    fn df_loss_gradcheck() {
        let mut rng = rng_from(19);
        let gt = Tensor::from_vec(randn(&mut rng, 2 * 4 * 4), &[2, 4, 4]).unwrap();
        let pred0 = Tensor::from_vec(randn(&mut rng, 2 * 4 * 4), &[2, 4, 4]).unwrap();
        let err = finite_difference_check(|p| df_loss(p, &gt, 0.5), &pred0, 1e-2).unwrap();
        assert!(err < 1e-3, "df_loss grad err {err}");
    }

    struct ConstantCritic(f32);
    impl AgeCritic for ConstantCritic {
        fn predict_age(&self, _img: &Tensor) -> Result<Tensor> {
            Ok(Tensor::scalar(self.0))
        }
    }

    struct LinearCritic {
        w: Tensor,
    }
    impl AgeCritic for LinearCritic {
        fn predict_age(&self, img: &Tensor) -> Result<Tensor> {
            let n = img.numel();
            img.reshape(&[1, n])?.matmul(&self.w)
        }
    }

    #[test]
    fn bae_loss_stub_fixtures() {
        let img = Tensor::zeros(&[1, 4, 4]);
        let v = bae_loss(&ConstantCritic(70.0), &img, 65.0).unwrap().item().unwrap();
        assert!((v - 5.0).abs() < 1e-6);
        let v = bae_loss(&ConstantCritic(65.0), &img, 65.0).unwrap().item().unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn bae_loss_gradcheck_through_frozen_critic() {
        let mut rng = rng_from(20);
        let critic = LinearCritic {
            w: Tensor::from_vec(uniform(&mut rng, 16, 0.2, 1.0), &[16, 1]).unwrap(),
        };
        let img0 = Tensor::from_vec(uniform(&mut rng, 16, 0.5, 1.5), &[1, 4, 4]).unwrap();
        // target far below the prediction keeps |.| on its positive branch,
        // where the whole path is linear and central differences are exact
        let err = finite_difference_check(
            |img| bae_loss(&critic, img, 0.5),
            &img0,
            0.5,
        )
        .unwrap();
        assert!(err < 1e-3, "bae grad err {err}");
    }

    #[test]
    fn psnr_fixtures() {
        let mut rng = rng_from(21);
        let a = Tensor::from_vec(uniform(&mut rng, 25, 0.0, 1.0), &[25]).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);

        // exactly one of 25 pixels differs by 0.5: MSE = 0.25/25 = 0.01
        let mut bv = a.to_vec();
        bv[7] += 0.5;
        let b = Tensor::from_vec(bv, &[25]).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "{v}");

        let zeros = Tensor::zeros(&[10]);
        let ones = Tensor::ones(&[10]);
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = rng_from(22);
        let base = uniform(&mut rng, 32 * 32, 0.2, 0.8);
        let a = Tensor::from_vec(base.clone(), &[32, 32]).unwrap();
        let mut last = f64::INFINITY;
        for sigma in [0.01, 0.03, 0.1, 0.2, 0.3] {
            let noisy: Vec<f32> = base
                .iter()
                .zip(randn(&mut rng, 32 * 32))
                .map(|(v, n)| v + sigma * n)
                .collect();
            let b = Tensor::from_vec(noisy, &[32, 32]).unwrap();
            let v = psnr(&a, &b, 1.0).unwrap();
            assert!(v < last, "psnr {v} did not drop below {last} at sigma {sigma}");
            last = v;
        }
    }

    #[test]
    fn ssim_self_is_one() {
        let mut rng = rng_from(23);
        let a = Tensor::from_vec(uniform(&mut rng, 24 * 24, 0.0, 1.0), &[24, 24]).unwrap();
        let v = ssim(&a, &a).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn ssim_constant_images_fixture() {
        // zero variances: value reduces to C1/(1+C1)
        let zeros = Tensor::zeros(&[16, 16]);
        let ones = Tensor::ones(&[16, 16]);
        let v = ssim(&zeros, &ones).unwrap();
        let expect = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        assert!((v - 9.999e-5).abs() < 1e-8);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let mut rng = rng_from(24);
        for _ in 0..5 {
            let a = Tensor::from_vec(uniform(&mut rng, 20 * 20, 0.0, 1.0), &[20, 20]).unwrap();
            let noise = randn(&mut rng, 20 * 20);
            let bv: Vec<f32> = a
                .to_vec()
                .iter()
                .zip(&noise)
                .map(|(v, n)| (v + 0.15 * n).clamp(0.0, 1.0))
                .collect();
            let b = Tensor::from_vec(bv, &[20, 20]).unwrap();
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab), "{ab}");
            assert!(ab < 1.0 - 1e-6, "distinct images scored {ab}");
        }
    }

    #[test]
    fn jacobian_stats_counts_folds() {
        let det = Tensor::from_vec(vec![1.0, -0.5, 0.2, 0.0], &[2, 2]).unwrap();
        let (mean, fold) = jacobian_stats(&det);
        assert!((mean - 0.175).abs() < 1e-7);
        assert!((fold - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_round_trips_through_kv_and_csv() {
        let r = MetricReport {
            psnr_db: f64::INFINITY,
            ssim: 0.91,
            ncc: 0.88,
            mean_jacobian: 1.02,
            folding_fraction: 0.0,
            loss_simple: Some(0.034),
            loss_df: None,
            loss_bae: Some(1.5),
        };
        let kv = r.to_kv();
        let back = MetricReport::from_kv(&kv).unwrap();
        assert_eq!(back, r);
        assert!(kv.get("loss_df").is_none());

        let line = r.csv_line();
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), MetricReport::CSV_HEADER.split(',').count());
        assert_eq!(cols[0], "inf");
        assert_eq!(cols[6], "", "unset loss serializes as empty cell");
    }
}
