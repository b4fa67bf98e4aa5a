//! Kolmogorov-Arnold layers: every edge carries a learnable univariate
//! B-spline on top of a fixed silu base path.
//!
//! `output_o(x) = Σ_i base[o,i]·silu(x_i)
//!              + Σ_i scale[o,i]·Σ_j coeffs[o,i,j]·B_j(clamp(x_i))`
//!
//! The spline grid is static (no extension during training); inputs are
//! expected roughly in its domain and are clamped otherwise.

use crate::error::{MorphError, Result};
use crate::rng::{randn_scaled, Prng};
use crate::spline::{spline_basis, SplineGrid};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    /// `[out_dim, in_dim, basis_count]`
    pub spline_coeffs: Tensor,
    /// `[out_dim, in_dim]`
    pub base_weight: Tensor,
    /// `[out_dim, in_dim]`
    pub spline_scale: Tensor,
}

impl KanLayer {
    /// Small spline init keeps the layer near its conv+silu baseline at the
    /// start of training: coeffs ~ N(0, 0.1/sqrt(in)), base ~ N(0, 1/sqrt(in)),
    /// scale = 1.
    pub fn new(in_dim: usize, out_dim: usize, grid: SplineGrid, rng: &mut Prng) -> Self {
        let nb = grid.basis_count();
        let coeffs = Tensor::from_vec(
            randn_scaled(rng, out_dim * in_dim * nb, 0.1 / (in_dim as f32).sqrt()),
            &[out_dim, in_dim, nb],
        )
        .expect("coeff shape")
        .requires_grad();
        let base = Tensor::from_vec(
            randn_scaled(rng, out_dim * in_dim, 1.0 / (in_dim as f32).sqrt()),
            &[out_dim, in_dim],
        )
        .expect("base shape")
        .requires_grad();
        let scale = Tensor::ones(&[out_dim, in_dim]).requires_grad();
        Self {
            in_dim,
            out_dim,
            grid,
            spline_coeffs: coeffs,
            base_weight: base,
            spline_scale: scale,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.coeffs"), self.spline_coeffs.clone()),
            (format!("{prefix}.base"), self.base_weight.clone()),
            (format!("{prefix}.scale"), self.spline_scale.clone()),
        ]
    }

    /// `[batch, in_dim] -> [batch, out_dim]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_dim {
            return Err(MorphError::shape(format!(
                "kan layer: input {:?}, expected [batch, {}]",
                x.shape(),
                self.in_dim
            )));
        }
        let batch = x.shape()[0];
        let nb = self.grid.basis_count();

        let base_out = x.silu().matmul(&self.base_weight.transpose2d()?)?;

        // basis rows follow x's row-major order: row b*in + i.
        let basis = spline_basis(x, &self.grid).reshape(&[batch, self.in_dim * nb])?;
        // fold spline_scale into the coefficients: w[o, i*nb+j] = scale[o,i]*coeffs[o,i,j]
        let oi = self.out_dim * self.in_dim;
        let scaled = self
            .spline_scale
            .reshape(&[oi])?
            .broadcast_to(&[oi, 1, nb])?
            .reshape(&[oi, nb])?
            .mul(&self.spline_coeffs.reshape(&[oi, nb])?)?
            .reshape(&[self.out_dim, self.in_dim * nb])?;
        let spline_out = basis.matmul(&scaled.transpose2d()?)?;

        base_out.add(&spline_out)
    }
}

/// Convolution (same padding) followed by a channel-wise KAN layer shared
/// across spatial locations.
#[derive(Debug, Clone)]
pub struct KanBlock {
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub kan: KanLayer,
}

impl KanBlock {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Prng) -> Self {
        // He-style fan-in init for the conv, matching the plain conv blocks.
        let fan_in = c_in * 9;
        let kernel = Tensor::from_vec(
            randn_scaled(rng, c_out * c_in * 9, (2.0 / fan_in as f32).sqrt()),
            &[c_out, c_in, 3, 3],
        )
        .expect("kernel shape")
        .requires_grad();
        let bias = Tensor::zeros(&[c_out]).requires_grad();
        let kan = KanLayer::new(c_out, c_out, SplineGrid::default_kan(), rng);
        Self {
            conv_kernel: kernel,
            conv_bias: bias,
            kan,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.conv.kernel"), self.conv_kernel.clone()),
            (format!("{prefix}.conv.bias"), self.conv_bias.clone()),
        ];
        out.extend(self.kan.named_params(&format!("{prefix}.kan")));
        out
    }

    /// `[C,H,W] -> [C',H,W]`; spatial shape is preserved (same padding).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with_channel_bias(x, None)
    }

    /// Like [`KanBlock::forward`], with an optional per-channel bias added
    /// between the convolution and the KAN mixing (conditioning injection).
    pub fn forward_with_channel_bias(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv2d_part(x)?;
        if let Some(b) = bias {
            h = h.add(&b.broadcast_to(h.shape())?)?;
        }
        let (c, hh, ww) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        // channel vectors as rows: [H*W, C]
        let pixels = h.reshape(&[c, hh * ww])?.transpose2d()?;
        let mixed = self.kan.forward(&pixels)?;
        mixed.transpose2d()?.reshape(&[c, hh, ww])
    }

    fn conv2d_part(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.conv_kernel, 1, 1)?;
        let b = self.conv_bias.broadcast_to(y.shape())?;
        y.add(&b)
    }
}
