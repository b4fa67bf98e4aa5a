//! 2D convolution (cross-correlation convention) and 2x resampling.

use super::{accumulate, Tensor};
use crate::error::{MorphError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Down,
    Up,
}

// Dot product with eight independent f32 lanes so LLVM can vectorize the
// reduction without reassociating a serial chain; lanes are combined in f64.
pub(crate) fn dot8(a: &[f32], b: &[f32]) -> f64 {
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        tail += xa * xb;
    }
    lanes.iter().map(|v| *v as f64).sum::<f64>() + tail as f64
}

// Valid output range along one axis for a given kernel offset: all
// oy < out_extent with 0 <= oy*stride + koff - pad < extent. Returns an
// empty (lo > hi) range when none.
fn out_range(
    extent: usize,
    out_extent: usize,
    koff: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo_num = pad as isize - koff as isize;
    let lo = if lo_num <= 0 {
        0
    } else {
        (lo_num as usize).div_ceil(stride)
    };
    let hi_num = extent as isize - 1 + pad as isize - koff as isize;
    if hi_num < 0 {
        return (1, 0);
    }
    (lo, (hi_num as usize / stride).min(out_extent - 1))
}

impl Tensor {
    /// Cross-correlation of a `[C_in,H,W]` input with a `[C_out,C_in,k,k]`
    /// kernel. Output is `[C_out,H',W']` with `H' = (H + 2·pad − k)/stride + 1`;
    /// a non-integral output extent is an error.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        if self.rank() != 3 || kernel.rank() != 4 {
            return Err(MorphError::shape(format!(
                "conv2d: input {:?} kernel {:?}, need [C,H,W] and [Co,Ci,k,k]",
                self.shape(),
                kernel.shape()
            )));
        }
        let (ci, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (co, cik, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if cik != ci {
            return Err(MorphError::shape(format!(
                "conv2d: input channels {} vs kernel {}",
                ci, cik
            )));
        }
        if kh != kw {
            return Err(MorphError::shape(format!(
                "conv2d: non-square kernel {}x{}",
                kh, kw
            )));
        }
        if stride == 0 {
            return Err(MorphError::invalid("conv2d: stride 0".to_string()));
        }
        let k = kh;
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(MorphError::shape(format!(
                "conv2d: {}x{} input, k={}, stride={}, pad={} gives non-integral output",
                h, w, k, stride, padding
            )));
        }
        let oh = (span_h - k) / stride + 1;
        let ow = (span_w - k) / stride + 1;

        let out = self.with_data(|inp| {
            kernel.with_data(|ker| {
                forward(inp, ker, ci, h, w, co, k, stride, padding, oh, ow)
            })
        });

        let (tin, tker) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            out,
            vec![co, oh, ow],
            vec![tin.clone(), tker.clone()],
            Box::new(move |g| {
                let (gin, gker) = tin.with_data(|inp| {
                    tker.with_data(|ker| {
                        backward(g, inp, ker, ci, h, w, co, k, stride, padding, oh, ow)
                    })
                });
                accumulate(&tin, &gin);
                accumulate(&tker, &gker);
            }),
        ))
    }

    /// 2x spatial resampling of a `[C,H,W]` tensor. `Down` is 2x2 average
    /// pooling (even H, W required); `Up` is nearest-neighbor replication.
    pub fn resample2x(&self, dir: Resample) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(MorphError::shape(format!(
                "resample2x: need [C,H,W], got {:?}",
                self.shape()
            )));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        match dir {
            Resample::Down => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(MorphError::shape(format!(
                        "resample2x down: odd extent in {}x{}",
                        h, w
                    )));
                }
                let (oh, ow) = (h / 2, w / 2);
                let data = self.with_data(|x| {
                    let mut out = vec![0.0f32; c * oh * ow];
                    for ch in 0..c {
                        let ip = &x[ch * h * w..(ch + 1) * h * w];
                        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
                        for y in 0..oh {
                            for xo in 0..ow {
                                let s = ip[2 * y * w + 2 * xo] as f64
                                    + ip[2 * y * w + 2 * xo + 1] as f64
                                    + ip[(2 * y + 1) * w + 2 * xo] as f64
                                    + ip[(2 * y + 1) * w + 2 * xo + 1] as f64;
                                op[y * ow + xo] = (s * 0.25) as f32;
                            }
                        }
                    }
                    out
                });
                let a = self.clone();
                Ok(Tensor::from_op(
                    data,
                    vec![c, oh, ow],
                    vec![a.clone()],
                    Box::new(move |g| {
                        let mut ga = vec![0.0f32; c * h * w];
                        for ch in 0..c {
                            let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
                            let ap = &mut ga[ch * h * w..(ch + 1) * h * w];
                            for y in 0..oh {
                                for xo in 0..ow {
                                    let q = gp[y * ow + xo] * 0.25;
                                    ap[2 * y * w + 2 * xo] += q;
                                    ap[2 * y * w + 2 * xo + 1] += q;
                                    ap[(2 * y + 1) * w + 2 * xo] += q;
                                    ap[(2 * y + 1) * w + 2 * xo + 1] += q;
                                }
                            }
                        }
                        accumulate(&a, &ga);
                    }),
                ))
            }
            Resample::Up => {
                let (oh, ow) = (2 * h, 2 * w);
                let data = self.with_data(|x| {
                    let mut out = vec![0.0f32; c * oh * ow];
                    for ch in 0..c {
                        let ip = &x[ch * h * w..(ch + 1) * h * w];
                        let op = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
                        for y in 0..h {
                            for xo in 0..w {
                                let v = ip[y * w + xo];
                                op[2 * y * ow + 2 * xo] = v;
                                op[2 * y * ow + 2 * xo + 1] = v;
                                op[(2 * y + 1) * ow + 2 * xo] = v;
                                op[(2 * y + 1) * ow + 2 * xo + 1] = v;
                            }
                        }
                    }
                    out
                });
                let a = self.clone();
                Ok(Tensor::from_op(
                    data,
                    vec![c, oh, ow],
                    vec![a.clone()],
                    Box::new(move |g| {
                        let mut ga = vec![0.0f32; c * h * w];
                        for ch in 0..c {
                            let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
                            let ap = &mut ga[ch * h * w..(ch + 1) * h * w];
                            for y in 0..h {
                                for xo in 0..w {
                                    let s = gp[2 * y * ow + 2 * xo] as f64
                                        + gp[2 * y * ow + 2 * xo + 1] as f64
                                        + gp[(2 * y + 1) * ow + 2 * xo] as f64
                                        + gp[(2 * y + 1) * ow + 2 * xo + 1] as f64;
                                    ap[y * w + xo] += s as f32;
                                }
                            }
                        }
                        accumulate(&a, &ga);
                    }),
                ))
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn forward(
    inp: &[f32],
    ker: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut acc = vec![0.0f32; co * oh * ow];
    for o in 0..co {
        let oplane = &mut acc[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let iplane = &inp[c * h * w..(c + 1) * h * w];
            let kbase = (o * ci + c) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = out_range(h, oh, ky, stride, pad);
                if oy0 > oy1 {
                    continue;
                }
                for kx in 0..k {
                    let (ox0, ox1) = out_range(w, ow, kx, stride, pad);
                    if ox0 > ox1 {
                        continue;
                    }
                    let kv = ker[kbase + ky * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in oy0..=oy1 {
                        let iy = oy * stride + ky - pad;
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = ox0 + kx - pad;
                            for (ov, iv) in orow[ox0..=ox1]
                                .iter_mut()
                                .zip(&irow[off..off + (ox1 - ox0 + 1)])
                            {
                                *ov += kv * *iv;
                            }
                        } else {
                            for ox in ox0..=ox1 {
                                let ix = ox * stride + kx - pad;
                                orow[ox] += kv * irow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn backward(
    g: &[f32],
    inp: &[f32],
    ker: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut gin = vec![0.0f32; ci * h * w];
    let mut gker = vec![0.0f64; co * ci * k * k];
    for o in 0..co {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let iplane = &inp[c * h * w..(c + 1) * h * w];
            let giplane = &mut gin[c * h * w..(c + 1) * h * w];
            let kbase = (o * ci + c) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = out_range(h, oh, ky, stride, pad);
                if oy0 > oy1 {
                    continue;
                }
                for kx in 0..k {
                    let (ox0, ox1) = out_range(w, ow, kx, stride, pad);
                    if ox0 > ox1 {
                        continue;
                    }
                    let kv = ker[kbase + ky * k + kx];
                    let mut kacc = 0.0f64;
                    for oy in oy0..=oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let irow = &iplane[iy * w..(iy + 1) * w];
                        let girow = &mut giplane[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let off = ox0 + kx - pad;
                            let len = ox1 - ox0 + 1;
                            let gseg = &grow[ox0..ox0 + len];
                            let iseg = &irow[off..off + len];
                            for (gi, gv) in girow[off..off + len].iter_mut().zip(gseg) {
                                *gi += kv * *gv;
                            }
                            kacc += dot8(gseg, iseg);
                        } else {
                            let mut rowacc = 0.0f32;
                            for ox in ox0..=ox1 {
                                let ix = ox * stride + kx - pad;
                                let gv = grow[ox];
                                girow[ix] += kv * gv;
                                rowacc += gv * irow[ix];
                            }
                            kacc += rowacc as f64;
                        }
                    }
                    gker[kbase + ky * k + kx] += kacc;
                }
            }
        }
    }
    (gin, gker.into_iter().map(|v| v as f32).collect())
}
