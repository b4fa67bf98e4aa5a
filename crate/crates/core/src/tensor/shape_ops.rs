//! Shape manipulation: reshape, broadcast, slicing along axis 0, concat.

use super::{accumulate, Tensor};
use crate::error::{MorphError, Result};

impl Tensor {
    /// View with a new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(MorphError::shape(format!(
                "reshape: {:?} ({} elements) into {:?} ({})",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![a.clone()],
            Box::new(move |g| accumulate(&a, g)),
        ))
    }

    /// Repeat a tensor to a larger shape. Supported patterns:
    /// scalar -> anything, [C] -> [C, H, W] (per-channel bias), and
    /// [C] -> [R, C] (per-row bias). Gradient sums over the repeated axes.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let numel: usize = shape.iter().product();
        if self.is_scalar() {
            let a = self.clone();
            let v = self.0.data.borrow()[0];
            return Ok(Tensor::from_op(
                vec![v; numel],
                shape.to_vec(),
                vec![a.clone()],
                Box::new(move |g| {
                    let s: f64 = g.iter().map(|v| *v as f64).sum();
                    accumulate(&a, &[s as f32]);
                }),
            ));
        }
        if self.rank() == 1 && shape.len() == 2 && shape[1] == self.shape()[0] {
            let (r, c) = (shape[0], shape[1]);
            let a = self.clone();
            let src = self.to_vec();
            let mut out = Vec::with_capacity(r * c);
            for _ in 0..r {
                out.extend_from_slice(&src);
            }
            return Ok(Tensor::from_op(
                out,
                shape.to_vec(),
                vec![a.clone()],
                Box::new(move |g| {
                    let mut ga = vec![0.0f64; c];
                    for row in g.chunks_exact(c) {
                        for (s, v) in ga.iter_mut().zip(row) {
                            *s += *v as f64;
                        }
                    }
                    let ga: Vec<f32> = ga.into_iter().map(|v| v as f32).collect();
                    accumulate(&a, &ga);
                }),
            ));
        }
        if self.rank() == 1 && shape.len() == 3 && shape[0] == self.shape()[0] {
            let c = shape[0];
            let hw = shape[1] * shape[2];
            let a = self.clone();
            let src = self.to_vec();
            let mut out = Vec::with_capacity(numel);
            for ch in &src {
                out.extend(std::iter::repeat(*ch).take(hw));
            }
            return Ok(Tensor::from_op(
                out,
                shape.to_vec(),
                vec![a.clone()],
                Box::new(move |g| {
                    let mut ga = vec![0.0f32; c];
                    for (i, gc) in ga.iter_mut().enumerate() {
                        let mut s = 0.0f64;
                        for v in &g[i * hw..(i + 1) * hw] {
                            s += *v as f64;
                        }
                        *gc = s as f32;
                    }
                    accumulate(&a, &ga);
                }),
            ));
        }
        Err(MorphError::shape(format!(
            "broadcast_to: {:?} -> {:?} not supported",
            self.shape(),
            shape
        )))
    }

    /// Contiguous slice along axis 0: rows `start..start+len`.
    pub fn slice_axis0(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(MorphError::shape("slice_axis0 on scalar".to_string()));
        }
        let d0 = self.shape()[0];
        if start + len > d0 {
            return Err(MorphError::shape(format!(
                "slice_axis0: rows {}..{} out of {}",
                start,
                start + len,
                d0
            )));
        }
        let inner: usize = self.shape()[1..].iter().product();
        let mut shape = self.shape().to_vec();
        shape[0] = len;
        let a = self.clone();
        let data = self.with_data(|x| x[start * inner..(start + len) * inner].to_vec());
        let total = self.numel();
        Ok(Tensor::from_op(
            data,
            shape,
            vec![a.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0f32; total];
                ga[start * inner..(start + len) * inner].copy_from_slice(g);
                accumulate(&a, &ga);
            }),
        ))
    }

    /// Concatenate tensors along axis 0; trailing dims must agree.
    pub fn concat_axis0(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(MorphError::shape("concat_axis0 of nothing".to_string()));
        }
        let tail = &parts[0].shape()[1..];
        let mut d0 = 0usize;
        for p in parts {
            if p.rank() == 0 || &p.shape()[1..] != tail {
                return Err(MorphError::shape(format!(
                    "concat_axis0: {:?} does not stack on [_, {:?}]",
                    p.shape(),
                    tail
                )));
            }
            d0 += p.shape()[0];
        }
        let inner: usize = tail.iter().product();
        let mut shape = vec![d0];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(d0 * inner);
        for p in parts {
            p.with_data(|x| data.extend_from_slice(x));
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
        Ok(Tensor::from_op(
            data,
            shape,
            owned.clone(),
            Box::new(move |g| {
                let mut offset = 0usize;
                for (p, sz) in owned.iter().zip(&sizes) {
                    accumulate(p, &g[offset..offset + sz]);
                    offset += sz;
                }
            }),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(MorphError::shape(format!(
                "transpose2d on rank-{} tensor",
                self.rank()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let a = self.clone();
        let data = self.with_data(|x| {
            let mut out = vec![0.0f32; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            out
        });
        Ok(Tensor::from_op(
            data,
            vec![c, r],
            vec![a.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0f32; r * c];
                for j in 0..c {
                    for i in 0..r {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&a, &ga);
            }),
        ))
    }
}
