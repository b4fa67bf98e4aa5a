//! Registry of finite-difference gradient checks covering every
//! differentiable operation, from primitive tensor ops up to the full
//! training objective probed through network weights. Each check builds
//! its own deterministic fixture and reports a worst-case relative error;
//! the runner formats a pass/fail table and an overall verdict.
//!
//! Stencil widths follow the smoothness of each path: linear paths get
//! wide stencils (exact central differences), smooth nonlinear paths get
//! moderate ones, and full-network probes restrict themselves to
//! coordinates whose analytic gradient sits above the f32 noise floor.

use crate::backbone::{DiffKanUnet, GuidanceContext, UnetConfig};
use crate::bae::BaeModel;
use crate::diffusion::{make_schedule, training_loss, LossWeights, TrainSample};
use crate::error::{MorphError, Result};
use crate::ftie::{FtieConfig, FtieModule};
use crate::kan::{KanBlock, KanLayer};
use crate::metrics::{bae_loss, df_loss, gradient_energy, ncc, AgeCritic};
use crate::rng::{rng_from, uniform};
use crate::spline::SplineGrid;
use crate::tensor::{finite_difference_check, finite_difference_check_at, Resample};
use crate::warp::{bilinear_sample, warp_image, DeformationField};
use crate::Tensor;
use std::fmt::Write as _;

pub struct GradCheck {
    pub name: String,
    pub tolerance: f64,
    pub run: Box<dyn Fn() -> Result<f64>>,
}

impl GradCheck {
    fn new(name: &str, tolerance: f64, run: impl Fn() -> Result<f64> + 'static) -> Self {
        GradCheck {
            name: name.to_string(),
            tolerance,
            run: Box::new(run),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Populated when the check itself failed to run.
    pub error: Option<String>,
}

pub fn run_checks(checks: &[GradCheck]) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| match (c.run)() {
            Ok(err) => CheckOutcome {
                name: c.name.clone(),
                rel_err: err,
                tolerance: c.tolerance,
                passed: err.is_finite() && err < c.tolerance,
                error: None,
            },
            Err(e) => CheckOutcome {
                name: c.name.clone(),
                rel_err: f64::NAN,
                tolerance: c.tolerance,
                passed: false,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>10}  {:>9}  result\n", "op", "rel_err", "tol");
    for o in outcomes {
        let verdict = if o.passed { "pass" } else { "FAIL" };
        match &o.error {
            Some(e) => {
                let _ = writeln!(out, "{:<width$}  {:>10}  {:>9.0e}  {verdict} ({e})", o.name, "-", o.tolerance);
            }
            None => {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>10.3e}  {:>9.0e}  {verdict}",
                    o.name, o.rel_err, o.tolerance
                );
            }
        }
    }
    let n_pass = outcomes.iter().filter(|o| o.passed).count();
    let _ = writeln!(out, "{n_pass}/{} checks passed", outcomes.len());
    out
}

fn probe_mean(t: &Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(t.reshape(&[t.numel()])?.mul(w)?.mean())
}

fn probe_weights(rng: &mut crate::rng::Prng, n: usize) -> Tensor {
    Tensor::from_vec(uniform(rng, n, 0.5, 1.5), &[n]).expect("static shape")
}

/// Signed probe weights, for outputs with a sum constraint (softmax rows
/// sum to one, so an all-positive probe is nearly constant and its true
/// gradient sits at the noise floor).
fn signed_probe(rng: &mut crate::rng::Prng, n: usize) -> Tensor {
    let w: Vec<f32> = uniform(rng, n, 0.5, 1.5)
        .into_iter()
        .zip(uniform(rng, n, -1.0, 1.0))
        .map(|(m, s)| if s < 0.0 { -m } else { m })
        .collect();
    Tensor::from_vec(w, &[n]).expect("static shape")
}

/// Coordinates whose analytic gradient is large enough for f32 central
/// differences to resolve; locally-dead weights (zero-blocked paths,
/// spline coefficients outside any active basis support) are excluded.
fn live_coords(
    objective: &dyn Fn(&Tensor) -> Result<Tensor>,
    param: &Tensor,
    cap: usize,
) -> Result<Vec<usize>> {
    let leaf = param.detach().requires_grad();
    objective(&leaf)?.backward()?;
    let g = leaf
        .grad()
        .ok_or_else(|| MorphError::numeric("no gradient reached the probed tensor".to_string()))?;
    let gmax = g.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if gmax == 0.0 {
        return Err(MorphError::numeric("gradient vanished at the probe".to_string()));
    }
    let mut coords: Vec<usize> = (0..g.len()).filter(|i| g[*i].abs() > 1e-2 * gmax).collect();
    coords.truncate(cap);
    if coords.len() < 3 {
        return Err(MorphError::numeric(
            "too few live coordinates to probe".to_string(),
        ));
    }
    Ok(coords)
}

fn tiny_unet(use_kan: bool) -> DiffKanUnet {
    let mut rng = rng_from(71);
    DiffKanUnet::new(
        UnetConfig {
            base_width: 4,
            emb_dim: 8,
            guidance_dim: 6,
            use_kan,
            use_ftie: true,
        },
        &mut rng,
    )
    .expect("static config")
}

/// The output head starts at zero so a fresh net predicts zero noise;
/// weight-space probes need it woken or no gradient flows anywhere.
fn wake_head(net: &DiffKanUnet, seed: u64) {
    let mut r = rng_from(seed);
    let (_, k) = net
        .named_params()
        .into_iter()
        .find(|(n, _)| n == "unet.final.kernel")
        .expect("head exists");
    k.set_data(&uniform(&mut r, k.numel(), -0.3, 0.3)).expect("same shape");
}

fn unet_param(net: &DiffKanUnet, name: &str) -> Tensor {
    net.named_params()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .expect("known name")
}

struct MeanCritic {
    scale: f32,
}

impl AgeCritic for MeanCritic {
    fn predict_age(&self, img: &Tensor) -> Result<Tensor> {
        Ok(img.mean().scale(self.scale))
    }
}

fn smooth_sample(rng: &mut crate::rng::Prng) -> Result<TrainSample> {
    let (h, w) = (8usize, 8usize);
    // ramps in normalized field units, well inside the unit band
    let mut u = vec![0.0f32; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            u[y * w + x] = 0.4 * (x as f32 / w as f32) - 0.2;
            u[h * w + y * w + x] = 0.3 * (y as f32 / h as f32) - 0.1;
        }
    }
    let (phi0, clamped) =
        DeformationField::from_normalized(Tensor::from_vec(u, &[2, h, w])?, 10.0)?;
    debug_assert_eq!(clamped, 0);
    let c1 = Tensor::from_vec(uniform(rng, h * w, 0.2, 0.8), &[1, h, w])?;
    let target = warp_image(&c1, &phi0.denormalize()?)?.detach();
    let aux = Tensor::from_vec(uniform(rng, h * w, 0.2, 0.8), &[1, h, w])?;
    Ok(TrainSample {
        c1,
        target: target.clone(),
        target_seg: target,
        phi0,
        target_age_years: 70.0,
        t_age_norm: 0.6,
        aux_images: vec![aux],
    })
}

/// Every built-in check, unit ops first, whole-network probes last.
pub fn registry() -> Vec<GradCheck> {
    let mut checks = Vec::new();
    let unit = 1e-3;
    let network = 1e-2;

    checks.push(GradCheck::new("matmul", unit, || {
        let mut rng = rng_from(101);
        let a = Tensor::from_vec(uniform(&mut rng, 12, -1.0, 1.0), &[3, 4])?;
        let b = Tensor::from_vec(uniform(&mut rng, 8, -1.0, 1.0), &[4, 2])?;
        let w = probe_weights(&mut rng, 6);
        // linear path: a wide stencil is exact
        finite_difference_check(|a| probe_mean(&a.matmul(&b)?, &w), &a, 0.5)
    }));

    checks.push(GradCheck::new("conv2d_kernel", unit, || {
        let mut rng = rng_from(102);
        let img = Tensor::from_vec(uniform(&mut rng, 2 * 36, -1.0, 1.0), &[2, 6, 6])?;
        let k = Tensor::from_vec(uniform(&mut rng, 3 * 2 * 9, -0.5, 0.5), &[3, 2, 3, 3])?;
        let w = probe_weights(&mut rng, 3 * 36);
        finite_difference_check(|k| probe_mean(&img.conv2d(k, 1, 1)?, &w), &k, 0.5)
    }));

    checks.push(GradCheck::new("conv2d_input", unit, || {
        let mut rng = rng_from(103);
        let img = Tensor::from_vec(uniform(&mut rng, 2 * 36, -1.0, 1.0), &[2, 6, 6])?;
        let k = Tensor::from_vec(uniform(&mut rng, 3 * 2 * 9, -0.5, 0.5), &[3, 2, 3, 3])?;
        let w = probe_weights(&mut rng, 3 * 36);
        finite_difference_check(|img| probe_mean(&img.conv2d(&k, 1, 1)?, &w), &img, 0.5)
    }));

    checks.push(GradCheck::new("silu", unit, || {
        let mut rng = rng_from(104);
        let x = Tensor::from_vec(uniform(&mut rng, 16, -2.0, 2.0), &[16])?;
        let w = probe_weights(&mut rng, 16);
        finite_difference_check(|x| probe_mean(&x.silu(), &w), &x, 1e-2)
    }));

    checks.push(GradCheck::new("softmax_rows", unit, || {
        let mut rng = rng_from(105);
        let x = Tensor::from_vec(uniform(&mut rng, 12, -1.0, 1.0), &[3, 4])?;
        let w = signed_probe(&mut rng, 12);
        finite_difference_check(|x| probe_mean(&x.softmax_rows()?, &w), &x, 1e-3)
    }));

    checks.push(GradCheck::new("avg_pool_2x", unit, || {
        let mut rng = rng_from(106);
        let x = Tensor::from_vec(uniform(&mut rng, 2 * 16, -1.0, 1.0), &[2, 4, 4])?;
        let w = probe_weights(&mut rng, 2 * 4);
        finite_difference_check(|x| probe_mean(&x.resample2x(Resample::Down)?, &w), &x, 0.5)
    }));

    checks.push(GradCheck::new("upsample_2x", unit, || {
        let mut rng = rng_from(107);
        let x = Tensor::from_vec(uniform(&mut rng, 2 * 16, -1.0, 1.0), &[2, 4, 4])?;
        let w = probe_weights(&mut rng, 2 * 64);
        finite_difference_check(|x| probe_mean(&x.resample2x(Resample::Up)?, &w), &x, 0.5)
    }));

    checks.push(GradCheck::new("bilinear_sample", unit, || {
        let mut rng = rng_from(108);
        let img = Tensor::from_vec(uniform(&mut rng, 25, -1.0, 1.0), &[1, 5, 5])?;
        // mid-cell coordinates: piecewise-linear surface is smooth within
        // the stencil
        let frac = uniform(&mut rng, 12, 0.3, 0.7);
        let cell = uniform(&mut rng, 12, 0.0, 3.0);
        let cv: Vec<f32> = frac.iter().zip(&cell).map(|(f, c)| c.floor() + f).collect();
        let coords = Tensor::from_vec(cv, &[6, 2])?;
        let w = probe_weights(&mut rng, 6);
        finite_difference_check(|c| probe_mean(&bilinear_sample(&img, c)?, &w), &coords, 0.25)
    }));

    checks.push(GradCheck::new("warp_field", unit, || {
        let mut rng = rng_from(109);
        let img = Tensor::from_vec(uniform(&mut rng, 25, -1.0, 1.0), &[1, 5, 5])?;
        let u = Tensor::from_vec(uniform(&mut rng, 50, 0.3, 0.7), &[2, 5, 5])?;
        let w = probe_weights(&mut rng, 25);
        finite_difference_check(
            |u| {
                let f = DeformationField::new(u.clone(), 10.0)?;
                probe_mean(&warp_image(&img, &f)?, &w)
            },
            &u,
            0.25,
        )
    }));

    checks.push(GradCheck::new("warp_intensity", unit, || {
        let mut rng = rng_from(110);
        let img = Tensor::from_vec(uniform(&mut rng, 25, -1.0, 1.0), &[1, 5, 5])?;
        let u = Tensor::from_vec(uniform(&mut rng, 50, 0.3, 0.7), &[2, 5, 5])?;
        let w = probe_weights(&mut rng, 25);
        finite_difference_check(
            |img| {
                let f = DeformationField::new(u.detach(), 10.0)?;
                probe_mean(&warp_image(img, &f)?, &w)
            },
            &img,
            0.5,
        )
    }));

    checks.push(GradCheck::new("kan_layer_input", unit, || {
        let mut rng = rng_from(111);
        let layer = KanLayer::new(3, 4, SplineGrid::default_kan(), &mut rng);
        let x = Tensor::from_vec(uniform(&mut rng, 12, -0.8, 0.8), &[4, 3])?;
        let w = probe_weights(&mut rng, 16);
        finite_difference_check(|x| probe_mean(&layer.forward(x)?, &w), &x, 1e-3)
    }));

    checks.push(GradCheck::new("kan_spline_coeffs", unit, || {
        let mut rng = rng_from(112);
        let layer = KanLayer::new(3, 4, SplineGrid::default_kan(), &mut rng);
        let p0 = layer.spline_coeffs.detach();
        let x = Tensor::from_vec(uniform(&mut rng, 12, -0.8, 0.8), &[4, 3])?;
        let w = probe_weights(&mut rng, 16);
        let objective = move |p: &Tensor| -> Result<Tensor> {
            let probed = KanLayer {
                in_dim: layer.in_dim,
                out_dim: layer.out_dim,
                grid: layer.grid.clone(),
                spline_coeffs: p.clone(),
                base_weight: layer.base_weight.detach(),
                spline_scale: layer.spline_scale.detach(),
            };
            probe_mean(&probed.forward(&x)?, &w)
        };
        // output is linear in the coefficients, and only coefficients whose
        // basis spans an evaluated point carry gradient
        let coords = live_coords(&objective, &p0, 12)?;
        finite_difference_check_at(&objective, &p0, 0.5, &coords)
    }));

    checks.push(GradCheck::new("kan_block", unit, || {
        // conditioned fixture: positive taps and inputs keep every spline
        // evaluation away from knot boundaries the stencil could cross
        let mut rng = rng_from(113);
        let block = KanBlock::new(2, 3, &mut rng);
        block
            .conv_kernel
            .set_data(&uniform(&mut rng, 2 * 3 * 9, 0.1, 0.3))?;
        block
            .kan
            .base_weight
            .set_data(&uniform(&mut rng, 9, 0.3, 1.0))?;
        let nb = block.kan.grid.basis_count();
        let coeffs: Vec<f32> = (0..3 * 3 * nb).map(|i| 0.02 * (i % nb) as f32).collect();
        block.kan.spline_coeffs.set_data(&coeffs)?;
        let x = Tensor::from_vec(uniform(&mut rng, 2 * 16, 0.05, 0.3), &[2, 4, 4])?;
        let w = probe_weights(&mut rng, 3 * 16);
        finite_difference_check(|x| probe_mean(&block.forward(x)?, &w), &x, 1e-3)
    }));

    checks.push(GradCheck::new("cross_attention_c2", unit, || {
        let mut rng = rng_from(114);
        let net = tiny_unet(false);
        // wake the zero-initialized output projection
        unet_param(&net, "unet.attn.wo").set_data(&uniform(&mut rng, 8 * 8, -0.5, 0.5))?;
        let feats = Tensor::from_vec(uniform(&mut rng, 8 * 16, -1.0, 1.0), &[8, 4, 4])?;
        let c2 = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        let w = probe_weights(&mut rng, 8 * 16);
        finite_difference_check(|c| probe_mean(&net.cross_attention(&feats, c)?, &w), &c2, 0.5)
    }));

    checks.push(GradCheck::new("ncc", unit, || {
        let mut rng = rng_from(115);
        let a = Tensor::from_vec(uniform(&mut rng, 2 * 16, 0.2, 0.8), &[2, 4, 4])?;
        let b = Tensor::from_vec(uniform(&mut rng, 2 * 16, 0.2, 0.8), &[2, 4, 4])?;
        finite_difference_check(|a| ncc(a, &b), &a, 1e-2)
    }));

    checks.push(GradCheck::new("gradient_energy", unit, || {
        let mut rng = rng_from(116);
        let u = Tensor::from_vec(uniform(&mut rng, 2 * 16, -1.0, 1.0), &[2, 4, 4])?;
        // quadratic objective: central differences are exact at any h
        finite_difference_check(|u| gradient_energy(u), &u, 0.5)
    }));

    checks.push(GradCheck::new("df_loss", unit, || {
        let mut rng = rng_from(117);
        let gt = Tensor::from_vec(uniform(&mut rng, 2 * 16, -0.5, 0.5), &[2, 4, 4])?;
        let pred = Tensor::from_vec(uniform(&mut rng, 2 * 16, -0.5, 0.5), &[2, 4, 4])?;
        finite_difference_check(|p| df_loss(p, &gt, 0.5), &pred, 1e-2)
    }));

    checks.push(GradCheck::new("bae_critic_input", unit, || {
        let mut rng = rng_from(118);
        let model = BaeModel::new(&mut rng);
        // all-positive conditioned weights keep every path live
        for (_, t) in model.named_params() {
            t.set_data(&uniform(&mut rng, t.numel(), 0.05, 0.3))?;
        }
        let img = Tensor::from_vec(uniform(&mut rng, 64, 0.2, 0.8), &[1, 8, 8])?;
        finite_difference_check(|img| bae_loss(&model, img, 70.0), &img, 0.02)
    }));

    checks.push(GradCheck::new("full_net_conv_weights", network, || {
        let net = tiny_unet(true);
        wake_head(&net, 72);
        let mut rng = rng_from(73);
        let phi = Tensor::from_vec(uniform(&mut rng, 2 * 64, 0.1, 0.9), &[2, 8, 8])?;
        let c1 = Tensor::from_vec(uniform(&mut rng, 64, 0.0, 1.0), &[1, 8, 8])?;
        let c2 = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        let ctx = GuidanceContext::new(c1, 1, 0.5, c2)?;
        let w = probe_weights(&mut rng, 2 * 64);
        let name = "unet.enc1.conv.kernel";
        let param = unet_param(&net, name);
        let objective = move |cand: &Tensor| -> Result<Tensor> {
            let probed = net.with_replaced(name, cand.clone())?;
            probe_mean(&probed.denoise(&phi, &ctx)?, &w)
        };
        let coords = live_coords(&objective, &param, 12)?;
        finite_difference_check_at(&objective, &param.detach(), 1e-2, &coords)
    }));

    checks.push(GradCheck::new("full_net_age_embedding", network, || {
        let net = tiny_unet(true);
        wake_head(&net, 74);
        let mut rng = rng_from(75);
        let phi = Tensor::from_vec(uniform(&mut rng, 2 * 64, 0.1, 0.9), &[2, 8, 8])?;
        let c1 = Tensor::from_vec(uniform(&mut rng, 64, 0.0, 1.0), &[1, 8, 8])?;
        let c2 = Tensor::from_vec(uniform(&mut rng, 6, -1.0, 1.0), &[6])?;
        let ctx = GuidanceContext::new(c1, 2, 0.7, c2)?;
        let w = probe_weights(&mut rng, 2 * 64);
        let name = "unet.emb.age.w1";
        let param = unet_param(&net, name);
        let objective = move |cand: &Tensor| -> Result<Tensor> {
            let probed = net.with_replaced(name, cand.clone())?;
            probe_mean(&probed.denoise(&phi, &ctx)?, &w)
        };
        let coords = live_coords(&objective, &param, 12)?;
        finite_difference_check_at(&objective, &param.detach(), 1e-2, &coords)
    }));

    checks.push(GradCheck::new("training_loss_weights", network, || {
        let mut rng = rng_from(408);
        let net = DiffKanUnet::new(
            UnetConfig {
                base_width: 4,
                emb_dim: 8,
                guidance_dim: 6,
                use_kan: true,
                use_ftie: true,
            },
            &mut rng,
        )?;
        let ftie = FtieModule::new(
            FtieConfig {
                num_slots: 2,
                feat_dim: 5,
                guidance_dim: 6,
            },
            &mut rng,
        )?;
        wake_head(&net, 414);
        let sample = smooth_sample(&mut rng)?;
        let schedule = make_schedule(4, 0.1, 0.4)?;
        let weights = LossWeights::default();
        let critic = MeanCritic { scale: 100.0 };
        let name = "unet.enc1.conv.kernel";
        let param = unet_param(&net, name);
        let objective = move |cand: &Tensor| -> Result<Tensor> {
            let probed = net.with_replaced(name, cand.clone())?;
            // same inner seed per call so t and the noise draw are fixed
            let mut r = rng_from(409);
            Ok(training_loss(&sample, &probed, Some(&ftie), &critic, &schedule, &weights, &mut r)?
                .total)
        };
        let coords = live_coords(&objective, &param, 10)?;
        finite_difference_check_at(&objective, &param.detach(), 1e-2, &coords)
    }));

    checks
}

/// Negative control: an elementwise square whose backward rule has the
/// wrong sign. The harness must flag it.
pub fn sign_flipped_fixture() -> GradCheck {
    GradCheck::new("negative_control_sign_flip", 1e-3, || {
        let mut rng = rng_from(1000);
        let x = Tensor::from_vec(uniform(&mut rng, 8, 0.5, 1.5), &[8])?;
        finite_difference_check(
            |x| {
                let data: Vec<f32> = x.to_vec().iter().map(|v| v * v).collect();
                let parent = x.clone();
                let out = Tensor::from_op(
                    data,
                    vec![8],
                    vec![x.clone()],
                    Box::new(move |up: &[f32]| {
                        let xv = parent.to_vec();
                        let delta: Vec<f32> =
                            up.iter().zip(&xv).map(|(u, v)| -2.0 * v * u).collect();
                        crate::tensor::accumulate(&parent, &delta);
                    }),
                );
                Ok(out.mean())
            },
            &x,
            1e-3,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn registry_meets_the_coverage_floor_and_passes() {
        let checks = registry();
        assert!(checks.len() >= 12, "only {} checks", checks.len());
        let start = Instant::now();
        let outcomes = run_checks(&checks);
        let elapsed = start.elapsed();
        let table = render_table(&outcomes);
        assert!(all_passed(&outcomes), "\n{table}");
        assert!(
            elapsed.as_secs() < 120,
            "checks took {:?}, budget is 2 minutes",
            elapsed
        );
        assert!(table.contains("pass"));
        assert!(table.lines().count() >= checks.len() + 2);
    }

    #[test]
    fn sign_flip_is_reported_as_failure() {
        let outcomes = run_checks(&[sign_flipped_fixture()]);
        assert_eq!(outcomes.len(), 1);
        assert!(!outcomes[0].passed);
        assert!(!all_passed(&outcomes));
        let table = render_table(&outcomes);
        assert!(table.contains("FAIL"), "{table}");
    }

    #[test]
    fn runner_reports_erroring_checks() {
        let broken = GradCheck::new("always_errors", 1e-3, || {
            Err(MorphError::numeric("synthetic failure".to_string()))
        });
        let outcomes = run_checks(&[broken]);
        assert!(!outcomes[0].passed);
        assert!(outcomes[0].error.as_ref().unwrap().contains("synthetic"));
        assert!(render_table(&outcomes).contains("synthetic"));
    }
}
