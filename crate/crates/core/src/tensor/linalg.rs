//! Matrix multiplication for rank-2 tensors.

use super::conv::dot8;
use super::{accumulate, Tensor};
use crate::error::{MorphError, Result};

// Plain triple loop, ikj order for cache-friendly row-major access.
// Accumulation is f32: the axpy inner loop vectorizes, and like the conv
// kernels this is a linear op whose precision is test-gated.
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

fn mm_at_b(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    // a is [m,k] but we want a^T @ b where b is [m,n]; result [k,n].
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * *bv;
            }
        }
    }
    out
}

fn mm_a_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    // a [m,k] times b^T where b is [n,k]; result [m,n].
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot8(arow, brow) as f32;
        }
    }
    out
}

impl Tensor {
    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(MorphError::shape(format!(
                "matmul: ranks {} and {}, need 2 and 2",
                self.rank(),
                other.rank()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(MorphError::shape(format!(
                "matmul: inner dims {} vs {}",
                k, k2
            )));
        }
        let out = self.with_data(|a| other.with_data(|b| mm(a, b, m, k, n)));
        let (ta, tb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![ta.clone(), tb.clone()],
            Box::new(move |g| {
                // dA = G @ B^T, dB = A^T @ G
                let ga = tb.with_data(|b| mm_a_bt(g, b, m, n, k));
                accumulate(&ta, &ga);
                let gb = ta.with_data(|a| mm_at_b(a, g, m, k, n));
                accumulate(&tb, &gb);
            }),
        ))
    }
}
