//! The denoiser: a depth-2 U-Net over [2,H,W] displacement fields with the
//! source image concatenated as a third input channel. Plain conv blocks
//! contract, KAN blocks sit at the bottleneck and in the expansive path,
//! conditioning enters three ways: step/age embeddings are added per channel
//! in every block, and the guidance vector attends into the bottleneck.

use crate::error::{MorphError, Result};
use crate::kan::KanBlock;
use crate::rng::{randn_scaled, Prng};
use crate::tensor::{Resample, Tensor};

/// Sinusoidal position code: pairs (sin, cos) of x scaled by frequencies
/// 10000^(-2i/dim). x = 0 gives [0,1,0,1,...].
pub fn sinusoidal_embedding(x: f32, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(MorphError::invalid(format!(
            "embedding dim must be a positive even number, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10000.0f64).powf(-2.0 * i as f64 / dim as f64);
        let angle = x as f64 * freq;
        out[2 * i] = angle.sin() as f32;
        out[2 * i + 1] = angle.cos() as f32;
    }
    Tensor::from_vec(out, &[dim])
}

/// Everything the denoiser is conditioned on for one prediction.
#[derive(Debug, Clone)]
pub struct GuidanceContext {
    /// Source intensity image [1,H,W] in [0,1].
    pub c1_source: Tensor,
    /// Diffusion step index, 1-based.
    pub t: usize,
    /// Target age mapped into [0,1].
    pub t_age_norm: f32,
    /// Guidance vector from the auxiliary-image encoder.
    pub c2: Tensor,
}

impl GuidanceContext {
    pub fn new(c1_source: Tensor, t: usize, t_age_norm: f32, c2: Tensor) -> Result<Self> {
        if c1_source.rank() != 3 || c1_source.shape()[0] != 1 {
            return Err(MorphError::shape(format!(
                "c1 must be [1,H,W], got {:?}",
                c1_source.shape()
            )));
        }
        if t < 1 {
            return Err(MorphError::invalid("step index t starts at 1".to_string()));
        }
        if !(0.0..=1.0).contains(&t_age_norm) {
            return Err(MorphError::invalid(format!(
                "t_age_norm {t_age_norm} outside [0,1]"
            )));
        }
        if c2.rank() != 1 {
            return Err(MorphError::shape(format!(
                "c2 must be a vector, got {:?}",
                c2.shape()
            )));
        }
        Ok(Self {
            c1_source,
            t,
            t_age_norm,
            c2,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnetConfig {
    /// Channels after the first conv; deeper stages double it.
    pub base_width: usize,
    /// Width of the step/age embedding vectors.
    pub emb_dim: usize,
    /// Length of c2 accepted by the bottleneck attention.
    pub guidance_dim: usize,
    /// KAN blocks at bottleneck/expansive path; plain conv blocks otherwise.
    pub use_kan: bool,
    /// Attend to c2 at the bottleneck; ignore c2 entirely otherwise.
    pub use_ftie: bool,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            emb_dim: 64,
            guidance_dim: 64,
            use_kan: true,
            use_ftie: true,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 1 {
            return Err(MorphError::invalid("base_width must be >= 1".to_string()));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(MorphError::invalid(
                "emb_dim must be a positive even number".to_string(),
            ));
        }
        if self.guidance_dim == 0 {
            return Err(MorphError::invalid("guidance_dim must be >= 1".to_string()));
        }
        Ok(())
    }
}

// Channel-mixing block: conv + optional conditioning bias, then either a
// channel-wise KAN or a plain silu.
#[derive(Debug, Clone)]
enum MixBlock {
    Kan(KanBlock),
    Plain { kernel: Tensor, bias: Tensor },
}

impl MixBlock {
    fn new(c_in: usize, c_out: usize, use_kan: bool, rng: &mut Prng) -> Self {
        if use_kan {
            MixBlock::Kan(KanBlock::new(c_in, c_out, rng))
        } else {
            let fan_in = c_in * 9;
            let kernel = Tensor::from_vec(
                randn_scaled(rng, c_out * c_in * 9, (2.0 / fan_in as f32).sqrt()),
                &[c_out, c_in, 3, 3],
            )
            .expect("kernel shape")
            .requires_grad();
            MixBlock::Plain {
                kernel,
                bias: Tensor::zeros(&[c_out]).requires_grad(),
            }
        }
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        match self {
            MixBlock::Kan(b) => b.named_params(prefix),
            MixBlock::Plain { kernel, bias } => vec![
                (format!("{prefix}.conv.kernel"), kernel.clone()),
                (format!("{prefix}.conv.bias"), bias.clone()),
            ],
        }
    }

    fn forward(&self, x: &Tensor, channel_bias: Option<&Tensor>) -> Result<Tensor> {
        match self {
            MixBlock::Kan(b) => b.forward_with_channel_bias(x, channel_bias),
            MixBlock::Plain { kernel, bias } => {
                let mut h = x.conv2d(kernel, 1, 1)?;
                h = h.add(&bias.broadcast_to(h.shape())?)?;
                if let Some(b) = channel_bias {
                    h = h.add(&b.broadcast_to(h.shape())?)?;
                }
                Ok(h.silu())
            }
        }
    }
}

// 2-layer MLP used on sinusoidal embeddings.
#[derive(Debug, Clone)]
struct EmbedMlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl EmbedMlp {
    fn new(dim: usize, rng: &mut Prng) -> Self {
        let std = 1.0 / (dim as f32).sqrt();
        Self {
            w1: Tensor::from_vec(randn_scaled(rng, dim * dim, std), &[dim, dim])
                .expect("w1 shape")
                .requires_grad(),
            b1: Tensor::zeros(&[dim]).requires_grad(),
            w2: Tensor::from_vec(randn_scaled(rng, dim * dim, std), &[dim, dim])
                .expect("w2 shape")
                .requires_grad(),
            b2: Tensor::zeros(&[dim]).requires_grad(),
        }
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), self.b2.clone()),
        ]
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = self.b1.numel();
        let h = self
            .w1
            .matmul(&x.reshape(&[dim, 1])?)?
            .reshape(&[dim])?
            .add(&self.b1)?
            .silu();
        self.w2
            .matmul(&h.reshape(&[dim, 1])?)?
            .reshape(&[dim])?
            .add(&self.b2)
    }
}

// Per-block linear mapping the summed embedding to channel offsets.
fn inject(emb: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (c, e) = (weight.shape()[0], weight.shape()[1]);
    weight.matmul(&emb.reshape(&[e, 1])?)?.reshape(&[c])
}

fn inject_weight(c: usize, e: usize, rng: &mut Prng) -> Tensor {
    Tensor::from_vec(
        randn_scaled(rng, c * e, 1.0 / (e as f32).sqrt()),
        &[c, e],
    )
    .expect("inject shape")
    .requires_grad()
}

/// Depth-2 conditional U-Net predicting the noise added to a [2,H,W] field.
#[derive(Debug, Clone)]
pub struct DiffKanUnet {
    pub config: UnetConfig,
    enc1: MixBlock, // always plain; 3 -> w
    enc1_emb: Tensor,
    enc2: MixBlock, // always plain; w -> 2w
    enc2_emb: Tensor,
    bott: MixBlock, // 2w -> 2w
    bott_emb: Tensor,
    attn_wq: Tensor,
    attn_wk: Tensor,
    attn_wv: Tensor,
    attn_wo: Tensor,
    exp1: MixBlock, // 4w -> w
    exp1_emb: Tensor,
    exp2: MixBlock, // 2w -> w
    exp2_emb: Tensor,
    final_kernel: Tensor,
    final_bias: Tensor,
    emb_t: EmbedMlp,
    emb_age: EmbedMlp,
}

impl DiffKanUnet {
    pub fn new(config: UnetConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let w = config.base_width;
        let e = config.emb_dim;
        let g = config.guidance_dim;
        let cb = 2 * w; // bottleneck channels
        let attn_std = 1.0 / (cb as f32).sqrt();
        let attn_g_std = 1.0 / (g as f32).sqrt();
        Ok(Self {
            config,
            enc1: MixBlock::new(3, w, false, rng),
            enc1_emb: inject_weight(w, e, rng),
            enc2: MixBlock::new(w, cb, false, rng),
            enc2_emb: inject_weight(cb, e, rng),
            bott: MixBlock::new(cb, cb, config.use_kan, rng),
            bott_emb: inject_weight(cb, e, rng),
            attn_wq: Tensor::from_vec(randn_scaled(rng, cb * cb, attn_std), &[cb, cb])?
                .requires_grad(),
            attn_wk: Tensor::from_vec(randn_scaled(rng, cb * g, attn_g_std), &[cb, g])?
                .requires_grad(),
            attn_wv: Tensor::from_vec(randn_scaled(rng, cb * g, attn_g_std), &[cb, g])?
                .requires_grad(),
            // zero output projection: attention is an exact no-op at init
            attn_wo: Tensor::zeros(&[cb, cb]).requires_grad(),
            exp1: MixBlock::new(2 * cb, w, config.use_kan, rng),
            exp1_emb: inject_weight(w, e, rng),
            exp2: MixBlock::new(2 * w, w, config.use_kan, rng),
            exp2_emb: inject_weight(w, e, rng),
            // zero-init head: the untrained net predicts zero noise
            final_kernel: Tensor::zeros(&[2, w, 3, 3]).requires_grad(),
            final_bias: Tensor::zeros(&[2]).requires_grad(),
            emb_t: EmbedMlp::new(e, rng),
            emb_age: EmbedMlp::new(e, rng),
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.extend(self.enc1.named_params("unet.enc1"));
        out.push(("unet.enc1.emb".to_string(), self.enc1_emb.clone()));
        out.extend(self.enc2.named_params("unet.enc2"));
        out.push(("unet.enc2.emb".to_string(), self.enc2_emb.clone()));
        out.extend(self.bott.named_params("unet.bott"));
        out.push(("unet.bott.emb".to_string(), self.bott_emb.clone()));
        if self.config.use_ftie {
            out.push(("unet.attn.wq".to_string(), self.attn_wq.clone()));
            out.push(("unet.attn.wk".to_string(), self.attn_wk.clone()));
            out.push(("unet.attn.wv".to_string(), self.attn_wv.clone()));
            out.push(("unet.attn.wo".to_string(), self.attn_wo.clone()));
        }
        out.extend(self.exp1.named_params("unet.exp1"));
        out.push(("unet.exp1.emb".to_string(), self.exp1_emb.clone()));
        out.extend(self.exp2.named_params("unet.exp2"));
        out.push(("unet.exp2.emb".to_string(), self.exp2_emb.clone()));
        out.push(("unet.final.kernel".to_string(), self.final_kernel.clone()));
        out.push(("unet.final.bias".to_string(), self.final_bias.clone()));
        out.extend(self.emb_t.named_params("unet.emb.t"));
        out.extend(self.emb_age.named_params("unet.emb.age"));
        out
    }

    /// Swap one named parameter for `t` (shape-checked). Used by the
    /// finite-difference harness to probe weight-space gradients.
    pub fn with_replaced(&self, name: &str, t: Tensor) -> Result<DiffKanUnet> {
        let mut copy = self.clone();
        {
            let slot = copy.named_slot(name)?;
            if slot.shape() != t.shape() {
                return Err(MorphError::shape(format!(
                    "replacement for {name}: {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(copy)
    }

    fn named_slot(&mut self, name: &str) -> Result<&mut Tensor> {
        fn mix<'a>(b: &'a mut MixBlock, rest: &str) -> Option<&'a mut Tensor> {
            match (b, rest) {
                (MixBlock::Kan(k), "conv.kernel") => Some(&mut k.conv_kernel),
                (MixBlock::Kan(k), "conv.bias") => Some(&mut k.conv_bias),
                (MixBlock::Kan(k), "kan.coeffs") => Some(&mut k.kan.spline_coeffs),
                (MixBlock::Kan(k), "kan.base") => Some(&mut k.kan.base_weight),
                (MixBlock::Kan(k), "kan.scale") => Some(&mut k.kan.spline_scale),
                (MixBlock::Plain { kernel, .. }, "conv.kernel") => Some(kernel),
                (MixBlock::Plain { bias, .. }, "conv.bias") => Some(bias),
                _ => None,
            }
        }
        let slot = match name {
            "unet.enc1.emb" => Some(&mut self.enc1_emb),
            "unet.enc2.emb" => Some(&mut self.enc2_emb),
            "unet.bott.emb" => Some(&mut self.bott_emb),
            "unet.exp1.emb" => Some(&mut self.exp1_emb),
            "unet.exp2.emb" => Some(&mut self.exp2_emb),
            "unet.attn.wq" => Some(&mut self.attn_wq),
            "unet.attn.wk" => Some(&mut self.attn_wk),
            "unet.attn.wv" => Some(&mut self.attn_wv),
            "unet.attn.wo" => Some(&mut self.attn_wo),
            "unet.final.kernel" => Some(&mut self.final_kernel),
            "unet.final.bias" => Some(&mut self.final_bias),
            "unet.emb.t.w1" => Some(&mut self.emb_t.w1),
            "unet.emb.t.b1" => Some(&mut self.emb_t.b1),
            "unet.emb.t.w2" => Some(&mut self.emb_t.w2),
            "unet.emb.t.b2" => Some(&mut self.emb_t.b2),
            "unet.emb.age.w1" => Some(&mut self.emb_age.w1),
            "unet.emb.age.b1" => Some(&mut self.emb_age.b1),
            "unet.emb.age.w2" => Some(&mut self.emb_age.w2),
            "unet.emb.age.b2" => Some(&mut self.emb_age.b2),
            _ => {
                let (block, rest) = match name {
                    n if n.starts_with("unet.enc1.") => (Some(&mut self.enc1), &n[10..]),
                    n if n.starts_with("unet.enc2.") => (Some(&mut self.enc2), &n[10..]),
                    n if n.starts_with("unet.bott.") => (Some(&mut self.bott), &n[10..]),
                    n if n.starts_with("unet.exp1.") => (Some(&mut self.exp1), &n[10..]),
                    n if n.starts_with("unet.exp2.") => (Some(&mut self.exp2), &n[10..]),
                    _ => (None, ""),
                };
                block.and_then(|b| mix(b, rest))
            }
        };
        slot.ok_or_else(|| MorphError::invalid(format!("no parameter named `{name}`")))
    }

    /// Combined conditioning vector for step t and normalized age.
    pub fn embed_step_age(&self, t: usize, t_age_norm: f32) -> Result<Tensor> {
        let e = self.config.emb_dim;
        let st = sinusoidal_embedding(t as f32, e)?;
        let sa = sinusoidal_embedding(t_age_norm * 1000.0, e)?;
        self.emb_t.forward(&st)?.add(&self.emb_age.forward(&sa)?)
    }

    /// Single-head attention from the guidance vector into bottleneck
    /// features: one key/value token, residual output projection.
    pub fn cross_attention(&self, feats: &Tensor, c2: &Tensor) -> Result<Tensor> {
        let (c, h, w) = (feats.shape()[0], feats.shape()[1], feats.shape()[2]);
        if c2.rank() != 1 || c2.shape()[0] != self.config.guidance_dim {
            return Err(MorphError::shape(format!(
                "c2 must be [{}], got {:?}",
                self.config.guidance_dim,
                c2.shape()
            )));
        }
        let g = self.config.guidance_dim;
        let x = feats.reshape(&[c, h * w])?.transpose2d()?; // [HW, C]
        let q = x.matmul(&self.attn_wq.transpose2d()?)?; // [HW, C]
        let key = self.attn_wk.matmul(&c2.reshape(&[g, 1])?)?; // [C, 1]
        let val = self.attn_wv.matmul(&c2.reshape(&[g, 1])?)?; // [C, 1]
        let scores = q.matmul(&key)?.scale(1.0 / (c as f32).sqrt()); // [HW, 1]
        let attn = scores.softmax_rows()?; // all ones: one key
        let gathered = attn.matmul(&val.transpose2d()?)?; // [HW, C]
        let out = x.add(&gathered.matmul(&self.attn_wo.transpose2d()?)?)?;
        out.transpose2d()?.reshape(&[c, h, w])
    }

    /// Predict the noise in `phi_t` given the conditioning context.
    pub fn denoise(&self, phi_t: &Tensor, ctx: &GuidanceContext) -> Result<Tensor> {
        if phi_t.rank() != 3 || phi_t.shape()[0] != 2 {
            return Err(MorphError::shape(format!(
                "phi_t must be [2,H,W], got {:?}",
                phi_t.shape()
            )));
        }
        let (h, w) = (phi_t.shape()[1], phi_t.shape()[2]);
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(MorphError::shape(format!(
                "H and W must be positive multiples of 4, got {h}x{w}"
            )));
        }
        if ctx.c1_source.shape() != [1, h, w] {
            return Err(MorphError::shape(format!(
                "c1 {:?} does not match field {:?}",
                ctx.c1_source.shape(),
                phi_t.shape()
            )));
        }
        let emb = self.embed_step_age(ctx.t, ctx.t_age_norm)?;

        let x = Tensor::concat_axis0(&[phi_t.clone(), ctx.c1_source.clone()])?;
        let a1 = self.enc1.forward(&x, Some(&inject(&emb, &self.enc1_emb)?))?;
        let d1 = a1.resample2x(Resample::Down)?;
        let a2 = self.enc2.forward(&d1, Some(&inject(&emb, &self.enc2_emb)?))?;
        let d2 = a2.resample2x(Resample::Down)?;

        let mut b = self.bott.forward(&d2, Some(&inject(&emb, &self.bott_emb)?))?;
        if self.config.use_ftie {
            b = self.cross_attention(&b, &ctx.c2)?;
        }

        let u1 = Tensor::concat_axis0(&[b.resample2x(Resample::Up)?, a2])?;
        let e1 = self.exp1.forward(&u1, Some(&inject(&emb, &self.exp1_emb)?))?;
        let u2 = Tensor::concat_axis0(&[e1.resample2x(Resample::Up)?, a1])?;
        let e2 = self.exp2.forward(&u2, Some(&inject(&emb, &self.exp2_emb)?))?;

        let out = e2.conv2d(&self.final_kernel, 1, 1)?;
        out.add(&self.final_bias.broadcast_to(out.shape())?)
    }
}
