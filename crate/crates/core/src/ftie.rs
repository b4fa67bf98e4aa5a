//! Variable-count auxiliary-image conditioning: each available follow-up
//! image is encoded by one shared CNN into a fixed-length feature vector,
//! the vectors fill ordered slots (unused slots stay zero), and a single
//! linear projection maps the concatenation to the guidance vector c2.

use crate::error::{MorphError, Result};
use crate::rng::{randn_scaled, Prng};
use crate::tensor::Tensor;

// encoder stage widths; the contract only fixes the two conv+pool stages,
// global average pool, and the final linear layer
const ENC_C1: usize = 8;
const ENC_C2: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FtieConfig {
    /// Maximum number of auxiliary slots (k may be 0..=num_slots).
    pub num_slots: usize,
    /// Per-image encoder output length.
    pub feat_dim: usize,
    /// Length of the guidance vector c2.
    pub guidance_dim: usize,
}

impl Default for FtieConfig {
    fn default() -> Self {
        Self {
            num_slots: 3,
            feat_dim: 32,
            guidance_dim: 64,
        }
    }
}

impl FtieConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 1 {
            return Err(MorphError::invalid("num_slots must be >= 1".to_string()));
        }
        if self.feat_dim < 1 || self.guidance_dim < 1 {
            return Err(MorphError::invalid(
                "feat_dim and guidance_dim must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    pub fn concat_len(&self) -> usize {
        self.num_slots * self.feat_dim
    }
}

/// Slot encoder + projection. The encoder weights are shared by all slots.
#[derive(Debug, Clone)]
pub struct FtieModule {
    pub config: FtieConfig,
    conv1_kernel: Tensor,
    conv1_bias: Tensor,
    conv2_kernel: Tensor,
    conv2_bias: Tensor,
    fc_weight: Tensor,
    fc_bias: Tensor,
    proj_weight: Tensor,
    proj_bias: Tensor,
}

impl FtieModule {
    pub fn new(config: FtieConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let he = |fan_in: usize| (2.0 / fan_in as f32).sqrt();
        let conv1_kernel = Tensor::from_vec(
            randn_scaled(rng, ENC_C1 * 1 * 9, he(9)),
            &[ENC_C1, 1, 3, 3],
        )?
        .requires_grad();
        let conv2_kernel = Tensor::from_vec(
            randn_scaled(rng, ENC_C2 * ENC_C1 * 9, he(ENC_C1 * 9)),
            &[ENC_C2, ENC_C1, 3, 3],
        )?
        .requires_grad();
        let fc_weight = Tensor::from_vec(
            randn_scaled(rng, config.feat_dim * ENC_C2, 1.0 / (ENC_C2 as f32).sqrt()),
            &[config.feat_dim, ENC_C2],
        )?
        .requires_grad();
        let proj_weight = Tensor::from_vec(
            randn_scaled(
                rng,
                config.guidance_dim * config.concat_len(),
                1.0 / (config.concat_len() as f32).sqrt(),
            ),
            &[config.guidance_dim, config.concat_len()],
        )?
        .requires_grad();
        Ok(Self {
            config,
            conv1_kernel,
            conv1_bias: Tensor::zeros(&[ENC_C1]).requires_grad(),
            conv2_kernel,
            conv2_bias: Tensor::zeros(&[ENC_C2]).requires_grad(),
            fc_weight,
            fc_bias: Tensor::zeros(&[config.feat_dim]).requires_grad(),
            proj_weight,
            proj_bias: Tensor::zeros(&[config.guidance_dim]).requires_grad(),
        })
    }

    /// Checkpoint tensor table (names are stable across runs).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("ftie.enc.conv1.kernel".to_string(), self.conv1_kernel.clone()),
            ("ftie.enc.conv1.bias".to_string(), self.conv1_bias.clone()),
            ("ftie.enc.conv2.kernel".to_string(), self.conv2_kernel.clone()),
            ("ftie.enc.conv2.bias".to_string(), self.conv2_bias.clone()),
            ("ftie.enc.fc.weight".to_string(), self.fc_weight.clone()),
            ("ftie.enc.fc.bias".to_string(), self.fc_bias.clone()),
            ("ftie.proj.weight".to_string(), self.proj_weight.clone()),
            ("ftie.proj.bias".to_string(), self.proj_bias.clone()),
        ]
    }

    pub fn proj_bias(&self) -> &Tensor {
        &self.proj_bias
    }

    /// Encode one [1,H,W] image (H, W divisible by 4) to a feat_dim vector.
    pub fn encode_image(&self, img: &Tensor) -> Result<Tensor> {
        if img.rank() != 3 || img.shape()[0] != 1 {
            return Err(MorphError::shape(format!(
                "encoder expects [1,H,W], got {:?}",
                img.shape()
            )));
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(MorphError::shape(format!(
                "encoder needs H,W divisible by 4, got {h}x{w}"
            )));
        }
        let x = img
            .conv2d(&self.conv1_kernel, 1, 1)?
            .add(&self.conv1_bias.broadcast_to(&[ENC_C1, h, w])?)?
            .silu()
            .resample2x(crate::tensor::Resample::Down)?;
        let (h2, w2) = (h / 2, w / 2);
        let x = x
            .conv2d(&self.conv2_kernel, 1, 1)?
            .add(&self.conv2_bias.broadcast_to(&[ENC_C2, h2, w2])?)?
            .silu()
            .resample2x(crate::tensor::Resample::Down)?;
        let spatial = (h / 4) * (w / 4);
        let pooled = x
            .reshape(&[ENC_C2, spatial])?
            .matmul(&Tensor::full(&[spatial, 1], 1.0 / spatial as f32))?;
        self.fc_weight
            .matmul(&pooled)?
            .reshape(&[self.config.feat_dim])?
            .add(&self.fc_bias)
    }

    /// Project 0..=num_slots encoded images (slot order = input order,
    /// missing slots zero) to the guidance vector.
    pub fn build_guidance(&self, imgs: &[Tensor]) -> Result<Tensor> {
        if imgs.len() > self.config.num_slots {
            return Err(MorphError::invalid(format!(
                "{} auxiliary images but only {} slots",
                imgs.len(),
                self.config.num_slots
            )));
        }
        let mut slots = Vec::with_capacity(self.config.num_slots);
        for img in imgs {
            slots.push(self.encode_image(img)?);
        }
        while slots.len() < self.config.num_slots {
            slots.push(Tensor::zeros(&[self.config.feat_dim]));
        }
        let stacked = Tensor::concat_axis0(&slots)?.reshape(&[self.config.concat_len(), 1])?;
        self.proj_weight
            .matmul(&stacked)?
            .reshape(&[self.config.guidance_dim])?
            .add(&self.proj_bias)
    }
}
