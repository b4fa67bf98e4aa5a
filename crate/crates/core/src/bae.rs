//! Brain-age critic: a small convolutional regressor predicting age in
//! years from a [1,H,W] image. Pre-trained with Gaussian-noise augmentation
//! so its guidance stays stable on imperfect reconstructions, then frozen.

use crate::error::{MorphError, Result};
use crate::metrics::{bae_loss, AgeCritic};
use crate::optim::AdamW;
use crate::rng::{randn, randn_scaled, rng_from, shuffle, Prng};
use crate::tensor::{Resample, Tensor};
use rand::Rng;

pub const BAE_C1: usize = 8;
pub const BAE_C2: usize = 16;
pub const BAE_C3: usize = 32;

/// Augmentation noise levels on [0,1]-scaled images; training always adds
/// the clean sigma = 0 case.
pub const DEFAULT_NOISE_LEVELS: [f32; 3] = [0.05, 0.1, 0.2];

pub const DEFAULT_BAE_LR: f32 = 1e-3;

/// Midpoint of the modeled age range; the head bias starts here so early
/// epochs fit deviations instead of the offset.
const AGE_PRIOR: f32 = 65.0;

#[derive(Debug, Clone)]
pub struct BaeModel {
    conv1_kernel: Tensor,
    conv1_bias: Tensor,
    conv2_kernel: Tensor,
    conv2_bias: Tensor,
    conv3_kernel: Tensor,
    conv3_bias: Tensor,
    head_weight: Tensor,
    head_bias: Tensor,
    frozen: bool,
}

impl BaeModel {
    pub fn new(rng: &mut Prng) -> Self {
        let he = |fan_in: usize| (2.0 / fan_in as f32).sqrt();
        BaeModel {
            conv1_kernel: Tensor::from_vec(
                randn_scaled(rng, BAE_C1 * 9, he(9)),
                &[BAE_C1, 1, 3, 3],
            )
            .expect("static shape")
            .requires_grad(),
            conv1_bias: Tensor::zeros(&[BAE_C1]).requires_grad(),
            conv2_kernel: Tensor::from_vec(
                randn_scaled(rng, BAE_C2 * BAE_C1 * 9, he(BAE_C1 * 9)),
                &[BAE_C2, BAE_C1, 3, 3],
            )
            .expect("static shape")
            .requires_grad(),
            conv2_bias: Tensor::zeros(&[BAE_C2]).requires_grad(),
            conv3_kernel: Tensor::from_vec(
                randn_scaled(rng, BAE_C3 * BAE_C2 * 9, he(BAE_C2 * 9)),
                &[BAE_C3, BAE_C2, 3, 3],
            )
            .expect("static shape")
            .requires_grad(),
            conv3_bias: Tensor::zeros(&[BAE_C3]).requires_grad(),
            head_weight: Tensor::from_vec(
                randn_scaled(rng, BAE_C3, 1.0 / (BAE_C3 as f32).sqrt()),
                &[1, BAE_C3],
            )
            .expect("static shape")
            .requires_grad(),
            head_bias: Tensor::from_vec(vec![AGE_PRIOR], &[1])
                .expect("static shape")
                .requires_grad(),
            frozen: false,
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("bae.conv1.kernel".to_string(), self.conv1_kernel.clone()),
            ("bae.conv1.bias".to_string(), self.conv1_bias.clone()),
            ("bae.conv2.kernel".to_string(), self.conv2_kernel.clone()),
            ("bae.conv2.bias".to_string(), self.conv2_bias.clone()),
            ("bae.conv3.kernel".to_string(), self.conv3_kernel.clone()),
            ("bae.conv3.bias".to_string(), self.conv3_bias.clone()),
            ("bae.head.weight".to_string(), self.head_weight.clone()),
            ("bae.head.bias".to_string(), self.head_bias.clone()),
        ]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Replace every parameter with a non-tracking copy. Gradients still
    /// flow through the critic to its inputs, but no parameter accumulates
    /// a gradient or can be stepped.
    pub fn freeze(&mut self) {
        self.conv1_kernel = self.conv1_kernel.detach();
        self.conv1_bias = self.conv1_bias.detach();
        self.conv2_kernel = self.conv2_kernel.detach();
        self.conv2_bias = self.conv2_bias.detach();
        self.conv3_kernel = self.conv3_kernel.detach();
        self.conv3_bias = self.conv3_bias.detach();
        self.head_weight = self.head_weight.detach();
        self.head_bias = self.head_bias.detach();
        self.frozen = true;
    }

    /// Age estimate in years for a [1,H,W] image with H, W divisible by 8
    /// (three pooling stages). Returns a single-element tensor on the tape.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        if img.rank() != 3 || img.shape()[0] != 1 {
            return Err(MorphError::shape(format!(
                "age critic expects [1,H,W], got {:?}",
                img.shape()
            )));
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(MorphError::shape(format!(
                "age critic needs H,W divisible by 8, got {h}x{w}"
            )));
        }
        let mut x = img.clone();
        for (kernel, bias, c) in [
            (&self.conv1_kernel, &self.conv1_bias, BAE_C1),
            (&self.conv2_kernel, &self.conv2_bias, BAE_C2),
            (&self.conv3_kernel, &self.conv3_bias, BAE_C3),
        ] {
            let (hh, ww) = (x.shape()[1], x.shape()[2]);
            x = x
                .conv2d(kernel, 1, 1)?
                .add(&bias.broadcast_to(&[c, hh, ww])?)?
                .silu()
                .resample2x(Resample::Down)?;
        }
        let spatial = (h / 8) * (w / 8);
        let pooled = x
            .reshape(&[BAE_C3, spatial])?
            .matmul(&Tensor::full(&[spatial, 1], 1.0 / spatial as f32))?;
        self.head_weight
            .matmul(&pooled)?
            .reshape(&[1])?
            .add(&self.head_bias)
    }
}

impl AgeCritic for BaeModel {
    fn predict_age(&self, img: &Tensor) -> Result<Tensor> {
        self.forward(img)
    }
}

/// Pre-train a critic on (image, age) pairs, corrupting each sample with a
/// noise level drawn uniformly from `noise_levels` plus the clean case.
/// Returns the frozen model and its mean absolute error in years on the
/// clean validation pairs.
pub fn train_bae(
    train: &[(Tensor, f32)],
    val: &[(Tensor, f32)],
    noise_levels: &[f32],
    epochs: usize,
    lr: f32,
    seed: u64,
) -> Result<(BaeModel, f64)> {
    if train.is_empty() {
        return Err(MorphError::invalid("age critic needs training pairs".to_string()));
    }
    if val.is_empty() {
        return Err(MorphError::invalid("age critic needs validation pairs".to_string()));
    }
    for (_, age) in train.iter().chain(val) {
        if !age.is_finite() {
            return Err(MorphError::invalid("non-finite age label".to_string()));
        }
    }
    let mut sigmas = vec![0.0f32];
    sigmas.extend_from_slice(noise_levels);
    let mut rng = rng_from(seed);
    let model = BaeModel::new(&mut rng);
    let mut opt = AdamW::new(model.named_params(), lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..epochs {
        shuffle(&mut rng, &mut order);
        for &i in &order {
            let (img, age) = &train[i];
            let sigma = sigmas[rng.random_range(0..sigmas.len())];
            let noisy = if sigma > 0.0 {
                let noise: Vec<f32> = randn(&mut rng, img.numel());
                let data: Vec<f32> = img
                    .to_vec()
                    .iter()
                    .zip(&noise)
                    .map(|(v, n)| v + sigma * n)
                    .collect();
                Tensor::from_vec(data, img.shape())?
            } else {
                img.clone()
            };
            let loss = bae_loss(&model, &noisy, *age)?;
            loss.backward()?;
            opt.step()?;
        }
    }
    let mae = validation_mae(&model, val)?;
    let mut model = model;
    model.freeze();
    Ok((model, mae))
}

/// Mean absolute error in years over clean pairs.
pub fn validation_mae(model: &BaeModel, pairs: &[(Tensor, f32)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MorphError::invalid("validation needs at least one pair".to_string()));
    }
    let mut total = 0.0f64;
    for (img, age) in pairs {
        let pred = model.forward(img)?.item()?;
        if !pred.is_finite() {
            return Err(MorphError::numeric("non-finite age prediction".to_string()));
        }
        total += (pred as f64 - *age as f64).abs();
    }
    Ok(total / pairs.len() as f64)
}
