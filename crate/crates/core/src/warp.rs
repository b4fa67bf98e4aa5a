//! Spatial transformer: apply dense displacement fields to images.
//!
//! Fields are `[2,H,W]` tensors in pixel units, channel 0 holding the
//! horizontal displacement u_x and channel 1 the vertical u_y. Warping is
//! backward (pull): `out(y,x) = bilinear(img, x + u_x(y,x), y + u_y(y,x))`,
//! with corners outside the image contributing zero.

use crate::error::{MorphError, Result};
use crate::tensor::{accumulate, Tensor};

#[derive(Debug, Clone)]
pub struct DeformationField {
    pub u: Tensor,
    pub normalized: bool,
    pub u_max: f32,
}

impl DeformationField {
    /// Field in pixel units.
    pub fn new(u: Tensor, u_max: f32) -> Result<Self> {
        check_field_shape(&u)?;
        if u_max <= 0.0 {
            return Err(MorphError::invalid(format!("u_max {u_max} must be positive")));
        }
        Ok(Self {
            u,
            normalized: false,
            u_max,
        })
    }

    /// Field already scaled to [-1,1]. Values outside that range are clamped;
    /// the second return is how many elements needed clamping.
    pub fn from_normalized(u: Tensor, u_max: f32) -> Result<(Self, usize)> {
        check_field_shape(&u)?;
        if u_max <= 0.0 {
            return Err(MorphError::invalid(format!("u_max {u_max} must be positive")));
        }
        let mut data = u.to_vec();
        let mut clamped = 0usize;
        for v in &mut data {
            if *v > 1.0 || *v < -1.0 {
                clamped += 1;
                *v = v.clamp(-1.0, 1.0);
            }
        }
        let u = if clamped > 0 {
            Tensor::from_vec(data, u.shape())?
        } else {
            u
        };
        Ok((
            Self {
                u,
                normalized: true,
                u_max,
            },
            clamped,
        ))
    }

    pub fn height(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[2]
    }

    /// Scale pixel units down to [-1,1], clamping and counting overflows.
    pub fn normalize(&self) -> Result<(Self, usize)> {
        if self.normalized {
            return Err(MorphError::invalid("field is already normalized".to_string()));
        }
        let scaled = self.u.scale(1.0 / self.u_max);
        let mut data = scaled.to_vec();
        let mut clamped = 0usize;
        for v in &mut data {
            if *v > 1.0 || *v < -1.0 {
                clamped += 1;
                *v = v.clamp(-1.0, 1.0);
            }
        }
        // clamping is a data edit, not a differentiable op; fields being
        // normalized for storage or training targets are constants anyway.
        let u = Tensor::from_vec(data, self.u.shape())?;
        Ok((
            Self {
                u,
                normalized: true,
                u_max: self.u_max,
            },
            clamped,
        ))
    }

    /// Scale a normalized field back to pixel units. Differentiable (no
    /// clamp on this side), so sampled fields can flow into image losses.
    pub fn denormalize(&self) -> Result<Self> {
        if !self.normalized {
            return Err(MorphError::invalid("field is not normalized".to_string()));
        }
        Ok(Self {
            u: self.u.scale(self.u_max),
            normalized: false,
            u_max: self.u_max,
        })
    }
}

fn check_field_shape(u: &Tensor) -> Result<()> {
    if u.rank() != 3 || u.shape()[0] != 2 {
        return Err(MorphError::shape(format!(
            "deformation field must be [2,H,W], got {:?}",
            u.shape()
        )));
    }
    Ok(())
}

/// Pull-warp `img` by a pixel-unit field. Differentiable with respect to
/// both the image and the field.
pub fn warp_image(img: &Tensor, field: &DeformationField) -> Result<Tensor> {
    if field.normalized {
        return Err(MorphError::invalid(
            "warp_image expects a field in pixel units; denormalize first".to_string(),
        ));
    }
    if img.rank() != 3 {
        return Err(MorphError::shape(format!(
            "warp_image: image must be [C,H,W], got {:?}",
            img.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if field.height() != h || field.width() != w {
        return Err(MorphError::shape(format!(
            "warp_image: image {:?} vs field {:?}",
            img.shape(),
            field.u.shape()
        )));
    }

    let u = field.u.clone();
    let img_t = img.clone();
    let us = u.to_vec();
    let is = img.to_vec();
    let hw = h * w;

    let mut out = vec![0.0f32; c * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f32 + us[p];
            let sy = y as f32 + us[hw + p];
            let (corners, wts) = bilinear_corners(sx, sy, h, w);
            for ch in 0..c {
                let plane = &is[ch * hw..(ch + 1) * hw];
                let mut v = 0.0f32;
                for (idx, wt) in corners.iter().zip(&wts) {
                    if let Some(i) = idx {
                        v += wt * plane[*i];
                    }
                }
                out[ch * hw + p] = v;
            }
        }
    }

    Ok(Tensor::from_op(
        out,
        vec![c, h, w],
        vec![img_t.clone(), u.clone()],
        Box::new(move |g| {
            let mut gimg = vec![0.0f32; c * hw];
            let mut gu = vec![0.0f32; 2 * hw];
            let is_b = img_t.to_vec();
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let sx = x as f32 + us[p];
                    let sy = y as f32 + us[hw + p];
                    let (corners, wts) = bilinear_corners(sx, sy, h, w);
                    let (dwx, dwy) = bilinear_weight_grads(sx, sy);
                    let mut gx_acc = 0.0f64;
                    let mut gy_acc = 0.0f64;
                    for ch in 0..c {
                        let go = g[ch * hw + p];
                        if go == 0.0 {
                            continue;
                        }
                        let plane = &is_b[ch * hw..(ch + 1) * hw];
                        for k in 0..4 {
                            if let Some(i) = corners[k] {
                                gimg[ch * hw + i] += go * wts[k];
                                gx_acc += (go * dwx[k] * plane[i]) as f64;
                                gy_acc += (go * dwy[k] * plane[i]) as f64;
                            }
                        }
                    }
                    gu[p] += gx_acc as f32;
                    gu[hw + p] += gy_acc as f32;
                }
            }
            accumulate(&img_t, &gimg);
            accumulate(&u, &gu);
        }),
    ))
}

/// Sample `img` at continuous `coords` (rows of `[n,2]` as (x, y)).
/// Returns `[C,n]`; out-of-bounds corners contribute zero. Differentiable
/// with respect to both arguments.
pub fn bilinear_sample(img: &Tensor, coords: &Tensor) -> Result<Tensor> {
    if img.rank() != 3 {
        return Err(MorphError::shape(format!(
            "bilinear_sample: image must be [C,H,W], got {:?}",
            img.shape()
        )));
    }
    if coords.rank() != 2 || coords.shape()[1] != 2 {
        return Err(MorphError::shape(format!(
            "bilinear_sample: coords must be [n,2], got {:?}",
            coords.shape()
        )));
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let n = coords.shape()[0];
    let hw = h * w;
    let cs = coords.to_vec();
    let is = img.to_vec();

    let mut out = vec![0.0f32; c * n];
    for j in 0..n {
        let (sx, sy) = (cs[2 * j], cs[2 * j + 1]);
        let (corners, wts) = bilinear_corners(sx, sy, h, w);
        for ch in 0..c {
            let plane = &is[ch * hw..(ch + 1) * hw];
            let mut v = 0.0f32;
            for (idx, wt) in corners.iter().zip(&wts) {
                if let Some(i) = idx {
                    v += wt * plane[*i];
                }
            }
            out[ch * n + j] = v;
        }
    }

    let img_t = img.clone();
    let coords_t = coords.clone();
    Ok(Tensor::from_op(
        out,
        vec![c, n],
        vec![img_t.clone(), coords_t.clone()],
        Box::new(move |g| {
            let mut gimg = vec![0.0f32; c * hw];
            let mut gc = vec![0.0f32; 2 * n];
            let is_b = img_t.to_vec();
            for j in 0..n {
                let (sx, sy) = (cs[2 * j], cs[2 * j + 1]);
                let (corners, wts) = bilinear_corners(sx, sy, h, w);
                let (dwx, dwy) = bilinear_weight_grads(sx, sy);
                let mut gx = 0.0f64;
                let mut gy = 0.0f64;
                for ch in 0..c {
                    let go = g[ch * n + j];
                    if go == 0.0 {
                        continue;
                    }
                    let plane = &is_b[ch * hw..(ch + 1) * hw];
                    for k in 0..4 {
                        if let Some(i) = corners[k] {
                            gimg[ch * hw + i] += go * wts[k];
                            gx += (go * dwx[k] * plane[i]) as f64;
                            gy += (go * dwy[k] * plane[i]) as f64;
                        }
                    }
                }
                gc[2 * j] += gx as f32;
                gc[2 * j + 1] += gy as f32;
            }
            accumulate(&img_t, &gimg);
            accumulate(&coords_t, &gc);
        }),
    ))
}

// Corner flat indices (None when outside) and weights for (sx, sy), order
// (x0,y0), (x1,y0), (x0,y1), (x1,y1).
#[inline]
fn bilinear_corners(sx: f32, sy: f32, h: usize, w: usize) -> ([Option<usize>; 4], [f32; 4]) {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let idx = |xx: i64, yy: i64| -> Option<usize> {
        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
            None
        } else {
            Some(yy as usize * w + xx as usize)
        }
    };
    (
        [
            idx(x0, y0),
            idx(x0 + 1, y0),
            idx(x0, y0 + 1),
            idx(x0 + 1, y0 + 1),
        ],
        [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    )
}

// d(weight)/d(sx) and d(weight)/d(sy) for the four corners: piecewise
// constant per cell, evaluated from the cell containing the sample.
#[inline]
fn bilinear_weight_grads(sx: f32, sy: f32) -> ([f32; 4], [f32; 4]) {
    let fx = sx - sx.floor();
    let fy = sy - sy.floor();
    (
        [-(1.0 - fy), 1.0 - fy, -fy, fy],
        [-(1.0 - fx), -fx, 1.0 - fx, fx],
    )
}

/// Determinant of the warp Jacobian `[[1+du_x/dx, du_x/dy],[du_y/dx,
/// 1+du_y/dy]]` per pixel; central differences inside, one-sided at the
/// borders. Values ≤ 0 mark folding. Plain values, no tape.
pub fn jacobian_determinant(field: &DeformationField) -> Result<Tensor> {
    if field.normalized {
        return Err(MorphError::invalid(
            "jacobian expects pixel units; denormalize first".to_string(),
        ));
    }
    let (h, w) = (field.height(), field.width());
    if h < 2 || w < 2 {
        return Err(MorphError::shape(format!(
            "jacobian needs at least 2x2, got {h}x{w}"
        )));
    }
    let us = field.u.to_vec();
    let hw = h * w;
    let ux = &us[..hw];
    let uy = &us[hw..];
    let dd = |plane: &[f32], y: usize, x: usize, axis: usize| -> f64 {
        // axis 0: d/dx (along W), axis 1: d/dy (along H)
        let (lo, hi, denom) = if axis == 0 {
            let x0 = x.saturating_sub(1);
            let x1 = (x + 1).min(w - 1);
            (plane[y * w + x0], plane[y * w + x1], (x1 - x0) as f64)
        } else {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            (plane[y0 * w + x], plane[y1 * w + x], (y1 - y0) as f64)
        };
        (hi as f64 - lo as f64) / denom
    };
    let mut det = vec![0.0f32; hw];
    for y in 0..h {
        for x in 0..w {
            let a = 1.0 + dd(ux, y, x, 0);
            let b = dd(ux, y, x, 1);
            let c2 = dd(uy, y, x, 0);
            let d = 1.0 + dd(uy, y, x, 1);
            det[y * w + x] = (a * d - b * c2) as f32;
        }
    }
    Tensor::from_vec(det, &[h, w])
}

/// Warp an integer label map by one-hot encoding, warping each channel
/// bilinearly, and taking the per-pixel argmax. Unmapped pixels (all
/// channels zero, i.e. sampled outside) return `background`.
pub fn warp_labels(labels: &Tensor, field: &DeformationField, background: f32) -> Result<Tensor> {
    if labels.rank() != 2 {
        return Err(MorphError::shape(format!(
            "warp_labels: labels must be [H,W], got {:?}",
            labels.shape()
        )));
    }
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    let ls = labels.to_vec();
    let mut classes: Vec<i64> = ls.iter().map(|v| *v as i64).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() > 64 {
        return Err(MorphError::invalid(format!(
            "warp_labels: {} distinct labels looks like a non-label image",
            classes.len()
        )));
    }
    let mut onehot = Vec::with_capacity(classes.len() * h * w);
    for cl in &classes {
        for v in &ls {
            onehot.push(if *v as i64 == *cl { 1.0f32 } else { 0.0 });
        }
    }
    let stack = Tensor::from_vec(onehot, &[classes.len(), h, w])?;
    let warped = warp_image(&stack, field)?;
    let ws = warped.to_vec();
    let hw = h * w;
    let mut out = vec![0.0f32; hw];
    for p in 0..hw {
        let mut best = background;
        let mut best_v = 0.0f32;
        for (ci, cl) in classes.iter().enumerate() {
            let v = ws[ci * hw + p];
            if v > best_v {
                best_v = v;
                best = *cl as f32;
            }
        }
        out[p] = best;
    }
    Tensor::from_vec(out, &[h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, rng_from, uniform};
    use crate::tensor::finite_difference_check;

    fn field_from(ux: Vec<f32>, uy: Vec<f32>, h: usize, w: usize) -> DeformationField {
        let mut data = ux;
        data.extend(uy);
        DeformationField::new(Tensor::from_vec(data, &[2, h, w]).unwrap(), 10.0).unwrap()
    }

    // independent reference: match-based, no shared corner helper
    fn naive_warp(img: &[f32], u: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
        let hw = h * w;
        let mut out = vec![0.0f32; c * hw];
        let sample = |plane: &[f32], sx: f32, sy: f32| -> f32 {
            let x0 = sx.floor() as i64;
            let y0 = sy.floor() as i64;
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            let mut acc = 0.0f32;
            for (dx, dy, wt) in [
                (0i64, 0i64, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let xx = x0 + dx;
                let yy = y0 + dy;
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    acc += wt * plane[yy as usize * w + xx as usize];
                }
            }
            acc
        };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    out[ch * hw + p] = sample(
                        &img[ch * hw..(ch + 1) * hw],
                        x as f32 + u[p],
                        y as f32 + u[hw + p],
                    );
                }
            }
        }
        out
    }

    #[test]
    fn zero_field_is_bitwise_identity() {
        let mut rng = rng_from(1);
        let img = Tensor::from_vec(randn(&mut rng, 3 * 5 * 7), &[3, 5, 7]).unwrap();
        let f = field_from(vec![0.0; 35], vec![0.0; 35], 5, 7);
        let out = warp_image(&img, &f).unwrap();
        for (a, b) in out.to_vec().iter().zip(img.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unit_shift_moves_columns() {
        let img = Tensor::from_vec((0..12).map(|v| v as f32).collect(), &[1, 3, 4]).unwrap();
        let f = field_from(vec![1.0; 12], vec![0.0; 12], 3, 4);
        let out = warp_image(&img, &f).unwrap().to_vec();
        let inp = img.to_vec();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out[y * 4 + x], inp[y * 4 + x + 1]);
            }
            assert_eq!(out[y * 4 + 3], 0.0, "rightmost column zeroed");
        }
    }

    #[test]
    fn half_shift_interpolates_midpoint() {
        let img = Tensor::from_vec(vec![0.0, 1.0], &[1, 1, 2]).unwrap();
        let f = field_from(vec![0.5, 0.5], vec![0.0, 0.0], 1, 2);
        let out = warp_image(&img, &f).unwrap().to_vec();
        assert!((out[0] - 0.5).abs() < 1e-7, "{out:?}");
    }

    #[test]
    fn matches_naive_oracle_on_50_cases() {
        let mut rng = rng_from(2);
        for case in 0..50 {
            let (h, w) = (4 + (case % 5), 4 + (case % 3));
            let c = 1 + (case % 2);
            let img = randn(&mut rng, c * h * w);
            let u = uniform(&mut rng, 2 * h * w, -3.0, 3.0);
            let img_t = Tensor::from_vec(img.clone(), &[c, h, w]).unwrap();
            let f = DeformationField::new(
                Tensor::from_vec(u.clone(), &[2, h, w]).unwrap(),
                10.0,
            )
            .unwrap();
            let fast = warp_image(&img_t, &f).unwrap().to_vec();
            let slow = naive_warp(&img, &u, c, h, w);
            for (i, (a, b)) in fast.iter().zip(&slow).enumerate() {
                assert!(
                    (a - b).abs() < 1e-6,
                    "case {case} index {i}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn warp_is_linear_in_intensity() {
        let mut rng = rng_from(3);
        let a = Tensor::from_vec(randn(&mut rng, 1 * 6 * 6), &[1, 6, 6]).unwrap();
        let b = Tensor::from_vec(randn(&mut rng, 1 * 6 * 6), &[1, 6, 6]).unwrap();
        let u = uniform(&mut rng, 72, -2.0, 2.0);
        let f = DeformationField::new(Tensor::from_vec(u, &[2, 6, 6]).unwrap(), 10.0).unwrap();
        let combo = a.scale(2.5).add(&b.scale(-0.5)).unwrap();
        let lhs = warp_image(&combo, &f).unwrap().to_vec();
        let wa = warp_image(&a, &f).unwrap().scale(2.5);
        let wb = warp_image(&b, &f).unwrap().scale(-0.5);
        let rhs = wa.add(&wb).unwrap().to_vec();
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn warp_gradcheck_wrt_image_and_field() {
        let mut rng = rng_from(4);
        let img0 = Tensor::from_vec(randn(&mut rng, 25), &[1, 5, 5]).unwrap();
        // keep samples strictly interior and mid-cell so the piecewise
        // bilinear surface is smooth within the fd stencil
        let u0 = Tensor::from_vec(uniform(&mut rng, 50, 0.3, 0.7), &[2, 5, 5]).unwrap();
        let w = Tensor::from_vec(uniform(&mut rng, 25, 0.5, 1.5), &[25]).unwrap();

        let uf = u0.clone();
        let err = finite_difference_check(
            |img| {
                let f = DeformationField::new(uf.detach(), 10.0)?;
                Ok(warp_image(img, &f)?.reshape(&[25])?.mul(&w)?.mean())
            },
            &img0,
            0.5, // linear in intensities
        )
        .unwrap();
        assert!(err < 1e-3, "image grad err {err}");

        let imgf = img0.clone();
        let err = finite_difference_check(
            |u| {
                let f = DeformationField::new(u.clone(), 10.0)?;
                Ok(warp_image(&imgf, &f)?.reshape(&[25])?.mul(&w)?.mean())
            },
            &u0,
            0.25,
        )
        .unwrap();
        assert!(err < 1e-3, "field grad err {err}");
    }

    #[test]
    fn bilinear_sample_fixtures_and_gradcheck() {
        let img = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0], &[1, 2, 2]).unwrap();
        // lattice points exact
        let coords = Tensor::from_vec(vec![0.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        let out = bilinear_sample(&img, &coords).unwrap().to_vec();
        assert_eq!(out, vec![0.0, 3.0]);
        // center of the patch
        let center = Tensor::from_vec(vec![0.5, 0.5], &[1, 2]).unwrap();
        let out = bilinear_sample(&img, &center).unwrap().to_vec();
        assert!((out[0] - 1.5).abs() < 1e-7);

        let mut rng = rng_from(5);
        let img5 = Tensor::from_vec(randn(&mut rng, 25), &[1, 5, 5]).unwrap();
        // mid-cell coords: sampling is linear per coordinate inside a cell,
        // so a wide stencil that stays in the cell is exact
        let frac = uniform(&mut rng, 12, 0.3, 0.7);
        let cells = uniform(&mut rng, 12, 0.0, 3.0);
        let cvals: Vec<f32> = frac
            .iter()
            .zip(&cells)
            .map(|(f, c)| c.floor() + f)
            .collect();
        let c0 = Tensor::from_vec(cvals, &[6, 2]).unwrap();
        let w = Tensor::from_vec(uniform(&mut rng, 6, 0.5, 1.5), &[6]).unwrap();
        let err = finite_difference_check(
            |coords| {
                Ok(bilinear_sample(&img5, coords)?
                    .reshape(&[6])?
                    .mul(&w)?
                    .mean())
            },
            &c0,
            0.25,
        )
        .unwrap();
        assert!(err < 1e-3, "coord grad err {err}");
    }

    #[test]
    fn normalize_round_trip_and_clamping() {
        let f = field_from(vec![5.0, 15.0], vec![-10.0, 0.0], 1, 2);
        let (n, clamped) = f.normalize().unwrap();
        assert_eq!(clamped, 1);
        assert_eq!(n.u.to_vec(), vec![0.5, 1.0, -1.0, 0.0]);
        assert!(n.normalized);
        let back = n.denormalize().unwrap();
        assert!(!back.normalized);
        assert_eq!(back.u.to_vec(), vec![5.0, 10.0, -10.0, 0.0]);

        // within range: exact round trip
        let f2 = field_from(vec![5.0, -2.5], vec![0.0, 7.5], 1, 2);
        let (n2, c2) = f2.normalize().unwrap();
        assert_eq!(c2, 0);
        let b2 = n2.denormalize().unwrap();
        for (a, b) in b2.u.to_vec().iter().zip(f2.u.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_creation_clamps_and_counts() {
        let u = Tensor::from_vec(vec![0.5, 1.5, -2.0, 0.0], &[2, 1, 2]).unwrap();
        let (f, clamped) = DeformationField::from_normalized(u, 10.0).unwrap();
        assert_eq!(clamped, 2);
        assert_eq!(f.u.to_vec(), vec![0.5, 1.0, -1.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let u = Tensor::zeros(&[3, 2, 2]);
        assert!(DeformationField::new(u, 10.0).is_err());
        let u = Tensor::zeros(&[2, 2, 2]);
        assert!(DeformationField::new(u.clone(), 0.0).is_err());
        let f = DeformationField::new(u, 10.0).unwrap();
        assert!(f.denormalize().is_err());
        let img = Tensor::zeros(&[1, 3, 3]);
        assert!(warp_image(&img, &f).is_err()); // 2x2 field vs 3x3 image
    }

    #[test]
    fn jacobian_identity_and_translation() {
        let f = field_from(vec![0.0; 16], vec![0.0; 16], 4, 4);
        let det = jacobian_determinant(&f).unwrap().to_vec();
        assert!(det.iter().all(|v| *v == 1.0));

        let f = field_from(vec![3.0; 16], vec![-2.0; 16], 4, 4);
        let det = jacobian_determinant(&f).unwrap().to_vec();
        assert!(det.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn jacobian_linear_scaling_is_1_21_interior() {
        let (h, w) = (8, 8);
        let mut ux = vec![0.0f32; h * w];
        let mut uy = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                ux[y * w + x] = 0.1 * x as f32;
                uy[y * w + x] = 0.1 * y as f32;
            }
        }
        let f = field_from(ux, uy, h, w);
        let det = jacobian_determinant(&f).unwrap().to_vec();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let v = det[y * w + x];
                assert!((v - 1.21).abs() < 1e-3, "det at ({y},{x}) = {v}");
            }
        }
    }

    #[test]
    fn label_warp_tracks_image_warp() {
        // threshold-defined labels stay aligned with the warped intensities
        let (h, w) = (16, 16);
        let mut img = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let dx = x as f32 - 7.5;
                let dy = y as f32 - 7.5;
                img[y * w + x] = if (dx * dx + dy * dy).sqrt() < 5.0 { 1.0 } else { 0.0 };
            }
        }
        let labels: Vec<f32> = img.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
        let mut ux = vec![0.0f32; h * w];
        let uy = vec![0.0f32; h * w];
        for v in ux.iter_mut() {
            *v = 1.3;
        }
        let f = field_from(ux, uy, h, w);
        let img_t = Tensor::from_vec(img, &[1, h, w]).unwrap();
        let lab_t = Tensor::from_vec(labels, &[h, w]).unwrap();
        let wimg = warp_image(&img_t, &f).unwrap().to_vec();
        let wlab = warp_labels(&lab_t, &f, 0.0).unwrap().to_vec();
        let mut agree = 0usize;
        let mut total = 0usize;
        for p in 0..h * w {
            let img_label = if wimg[p] > 0.5 { 1.0 } else { 0.0 };
            // skip interpolation boundary band where intensity is ambiguous
            if (wimg[p] - 0.5).abs() < 0.4 {
                continue;
            }
            total += 1;
            if img_label == wlab[p] {
                agree += 1;
            }
        }
        assert!(total > 0);
        let frac = agree as f32 / total as f32;
        assert!(frac >= 0.99, "agreement {frac}");
    }
}
