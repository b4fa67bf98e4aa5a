//! DDPM machinery over normalized deformation fields: linear corruption
//! schedule, closed-form forward noising, the weighted training objective,
//! and ancestral reverse sampling.

use crate::backbone::{DiffKanUnet, GuidanceContext};
use crate::error::{MorphError, Result};
use crate::ftie::FtieModule;
use crate::metrics::{bae_loss, df_loss, AgeCritic};
use crate::rng::{randn, Prng};
use crate::tensor::Tensor;
use crate::warp::{warp_image, DeformationField};
use rand::Rng;

/// Canonical linear-schedule endpoints for T = 1000.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Per-step corruption variances and their derived quantities. Step indices
/// are 1-based throughout: accessors take t in [1, T].
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(MorphError::invalid("schedule needs at least one step".to_string()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(MorphError::invalid(format!(
            "schedule endpoints must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0f64;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    // Posterior variance of the reverse kernel; the first step's predecessor
    // has alpha_bar = 1, so its variance is exactly zero.
    let mut posterior_var = Vec::with_capacity(steps);
    for i in 0..steps {
        let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
        posterior_var.push(beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i]));
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.check(t);
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.check(t);
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.check(t);
        self.alpha_bar[t - 1]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.check(t);
        self.posterior_var[t - 1]
    }

    fn check(&self, t: usize) {
        assert!(
            t >= 1 && t <= self.steps(),
            "step {t} outside [1, {}]",
            self.steps()
        );
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(MorphError::invalid(format!(
                "step {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Weights of the composite training objective and the smoothness factor
/// inside the field term.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.1,
            gamma: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(MorphError::invalid(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// One supervised completion example: a stored source/target pair with its
/// exact field plus whatever other timepoints exist for guidance.
#[derive(Debug, Clone)]
pub struct TrainSample {
    /// Source intensity image [1,H,W].
    pub c1: Tensor,
    /// Target intensity image [1,H,W].
    pub target: Tensor,
    /// Target label map [1,H,W] (evaluation only).
    pub target_seg: Tensor,
    /// Ground-truth field source -> target, in normalized units.
    pub phi0: DeformationField,
    pub target_age_years: f32,
    /// Target age mapped into [0,1].
    pub t_age_norm: f32,
    /// Guidance images in ascending-age order.
    pub aux_images: Vec<Tensor>,
}

/// Forward corruption: phi_t = sqrt(abar_t) * phi0 + sqrt(1 - abar_t) * eps.
pub fn q_sample(phi0: &DeformationField, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if !phi0.normalized {
        return Err(MorphError::invalid(
            "forward corruption expects a normalized field".to_string(),
        ));
    }
    if eps.shape() != phi0.u.shape() {
        return Err(MorphError::shape(format!(
            "noise shape {:?} does not match field shape {:?}",
            eps.shape(),
            phi0.u.shape()
        )));
    }
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    phi0.u
        .scale(ab.sqrt() as f32)
        .add(&eps.scale((1.0 - ab).sqrt() as f32))
}

/// Invert the corruption given a noise estimate:
/// phi0_hat = (phi_t - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t).
pub fn predict_phi0(phi_t: &Tensor, t: usize, eps_pred: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    if eps_pred.shape() != phi_t.shape() {
        return Err(MorphError::shape(format!(
            "noise estimate shape {:?} does not match {:?}",
            eps_pred.shape(),
            phi_t.shape()
        )));
    }
    s.check_step(t)?;
    let ab = s.alpha_bar(t);
    Ok(phi_t
        .sub(&eps_pred.scale((1.0 - ab).sqrt() as f32))?
        .scale((1.0 / ab.sqrt()) as f32))
}

/// Scalar loss with its per-term breakdown. `total` carries the tape; the
/// reported component values are unweighted.
#[derive(Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub t: usize,
    pub simple: f64,
    pub df: f64,
    pub bae: f64,
}

/// Assemble the objective at a fixed step with the noise and its estimate
/// already in hand: lambda1 * L_simple + abar_t * (lambda2 * L_DF +
/// lambda3 * L_BAE). The field and image terms attach to the phi0
/// reconstruction, down-weighted at the very noisy steps where it is
/// dominated by noise.
pub fn loss_at_step(
    sample: &TrainSample,
    t: usize,
    eps: &Tensor,
    eps_pred: &Tensor,
    critic: &dyn AgeCritic,
    s: &NoiseSchedule,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let l_simple = eps_pred.sub(eps)?.mean_square();
    let simple = l_simple.item()? as f64;
    if !simple.is_finite() {
        return Err(MorphError::numeric(format!(
            "noise-prediction loss is not finite at step {t}"
        )));
    }
    let mut total = l_simple.scale(w.lambda1);
    let ab = s.alpha_bar(t) as f32;
    let mut df = 0.0f64;
    let mut bae = 0.0f64;
    if w.lambda2 > 0.0 || w.lambda3 > 0.0 {
        let phi_t = q_sample(&sample.phi0, t, eps, s)?;
        let phi0_hat = predict_phi0(&phi_t, t, eps_pred, s)?;
        if w.lambda2 > 0.0 {
            let l_df = df_loss(&phi0_hat, &sample.phi0.u, w.gamma)?;
            df = l_df.item()? as f64;
            if !df.is_finite() {
                return Err(MorphError::numeric(format!(
                    "field loss is not finite at step {t}"
                )));
            }
            total = total.add(&l_df.scale(w.lambda2 * ab))?;
        }
        if w.lambda3 > 0.0 {
            let u_max = sample.phi0.u_max;
            let pixels = DeformationField::new(phi0_hat.scale(u_max), u_max)?;
            let warped = warp_image(&sample.c1, &pixels)?;
            let l_bae = bae_loss(critic, &warped, sample.target_age_years)?;
            bae = l_bae.item()? as f64;
            if !bae.is_finite() {
                return Err(MorphError::numeric(format!(
                    "age-consistency loss is not finite at step {t}"
                )));
            }
            total = total.add(&l_bae.scale(w.lambda3 * ab))?;
        }
    }
    Ok(LossBreakdown {
        total,
        t,
        simple,
        df,
        bae,
    })
}

/// One training step's objective: draw a step and a noise realization, run
/// the denoiser, and assemble the weighted loss.
pub fn training_loss(
    sample: &TrainSample,
    net: &DiffKanUnet,
    ftie: Option<&FtieModule>,
    critic: &dyn AgeCritic,
    s: &NoiseSchedule,
    w: &LossWeights,
    rng: &mut Prng,
) -> Result<LossBreakdown> {
    w.validate()?;
    let t = rng.random_range(1..=s.steps());
    let eps = Tensor::from_vec(randn(rng, sample.phi0.u.numel()), sample.phi0.u.shape())?;
    let phi_t = q_sample(&sample.phi0, t, &eps, s)?;
    let c2 = build_c2(net, ftie, &sample.aux_images)?;
    let ctx = GuidanceContext::new(sample.c1.clone(), t, sample.t_age_norm, c2)?;
    let eps_pred = net.denoise(&phi_t, &ctx)?;
    loss_at_step(sample, t, &eps, &eps_pred, critic, s, w)
}

/// Guidance vector for the denoiser: encoded auxiliary images when the net
/// uses them, an all-zero placeholder for the ablated variant.
pub fn build_c2(net: &DiffKanUnet, ftie: Option<&FtieModule>, aux: &[Tensor]) -> Result<Tensor> {
    if net.config.use_ftie {
        let module = ftie.ok_or_else(|| {
            MorphError::invalid("denoiser expects guidance but no encoder was supplied".to_string())
        })?;
        module.build_guidance(aux)
    } else {
        Ok(Tensor::zeros(&[net.config.guidance_dim]))
    }
}

/// Ancestral reverse chain shared by the real denoiser and test stand-ins.
/// `eps_model(phi_t, t)` predicts the noise at step t; the returned tensor
/// is in normalized field units, unclamped.
pub fn ancestral_sample<F>(
    mut eps_model: F,
    shape: &[usize],
    s: &NoiseSchedule,
    rng: &mut Prng,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let n: usize = shape.iter().product();
    let mut phi = Tensor::from_vec(randn(rng, n), shape)?;
    for t in (1..=s.steps()).rev() {
        let eps = eps_model(&phi, t)?;
        if eps.shape() != phi.shape() {
            return Err(MorphError::shape(format!(
                "noise model returned {:?} for state {:?}",
                eps.shape(),
                phi.shape()
            )));
        }
        let ab = s.alpha_bar(t);
        let coef = (s.beta(t) / (1.0 - ab).sqrt()) as f32;
        let mu = phi.sub(&eps.scale(coef))?.scale((1.0 / s.alpha(t).sqrt()) as f32);
        // Rebuild from raw data each step so no tape accumulates across the
        // chain.
        let mut next = mu.to_vec();
        if t > 1 {
            let sd = s.posterior_var(t).sqrt() as f32;
            for (v, z) in next.iter_mut().zip(randn(rng, n)) {
                *v += sd * z;
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(MorphError::numeric(format!(
                "sampling produced a non-finite value at step {t}"
            )));
        }
        phi = Tensor::from_vec(next, shape)?;
    }
    Ok(phi)
}

/// Full reverse chain through the denoiser; returns the raw normalized-unit
/// field tensor with no clamping, for diagnostics.
pub fn sample_field_raw(
    net: &DiffKanUnet,
    c1: &Tensor,
    t_age_norm: f32,
    c2: &Tensor,
    s: &NoiseSchedule,
    rng: &mut Prng,
) -> Result<Tensor> {
    if c1.rank() != 3 || c1.shape()[0] != 1 {
        return Err(MorphError::shape(format!(
            "source image must be [1,H,W], got {:?}",
            c1.shape()
        )));
    }
    let (h, w) = (c1.shape()[1], c1.shape()[2]);
    ancestral_sample(
        |phi_t, t| {
            let ctx = GuidanceContext::new(c1.clone(), t, t_age_norm, c2.clone())?;
            net.denoise(phi_t, &ctx)
        },
        &[2, h, w],
        s,
        rng,
    )
}

/// Sample a completed deformation field. Returns the clamped normalized
/// field together with the fraction of values the clamp touched.
pub fn sample_field(
    net: &DiffKanUnet,
    c1: &Tensor,
    t_age_norm: f32,
    c2: &Tensor,
    u_max: f32,
    s: &NoiseSchedule,
    rng: &mut Prng,
) -> Result<(DeformationField, f64)> {
    let raw = sample_field_raw(net, c1, t_age_norm, c2, s, rng)?;
    let n = raw.numel();
    let (field, clamped) = DeformationField::from_normalized(raw, u_max)?;
    Ok((field, clamped as f64 / n as f64))
}
