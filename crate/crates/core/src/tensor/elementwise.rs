//! Elementwise operations and reductions.
//!
//! Binary ops accept equal shapes, or a scalar (single-element tensor) on
//! either side; anything else is a shape error. Structured broadcasts go
//! through [`Tensor::broadcast_to`] instead so each gradient rule stays a
//! one-liner.

use super::{accumulate, same_shape, Tensor};
use crate::error::{MorphError, Result};

fn silu_val(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

enum Operand {
    Full,
    ScalarLhs,
    ScalarRhs,
}

fn binary_mode(a: &Tensor, b: &Tensor, op: &str) -> Result<Operand> {
    if a.shape() == b.shape() {
        Ok(Operand::Full)
    } else if a.is_scalar() {
        Ok(Operand::ScalarLhs)
    } else if b.is_scalar() {
        Ok(Operand::ScalarRhs)
    } else {
        Err(MorphError::shape(format!(
            "{op}: incompatible shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mode = binary_mode(self, other, "add")?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<f32> = match mode {
            Operand::Full => self.with_data(|x| {
                other.with_data(|y| x.iter().zip(y).map(|(xi, yi)| xi + yi).collect())
            }),
            Operand::ScalarLhs => {
                let s = self.0.data.borrow()[0];
                other.with_data(|y| y.iter().map(|yi| s + yi).collect())
            }
            Operand::ScalarRhs => {
                let s = other.0.data.borrow()[0];
                self.with_data(|x| x.iter().map(|xi| xi + s).collect())
            }
        };
        let shape = if self.is_scalar() && !other.is_scalar() {
            other.shape().to_vec()
        } else {
            self.shape().to_vec()
        };
        Ok(Tensor::from_op(
            out,
            shape,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                if a.is_scalar() && g.len() > 1 {
                    accumulate(&a, &[g.iter().map(|v| *v as f64).sum::<f64>() as f32]);
                } else {
                    accumulate(&a, g);
                }
                if b.is_scalar() && g.len() > 1 {
                    accumulate(&b, &[g.iter().map(|v| *v as f64).sum::<f64>() as f32]);
                } else {
                    accumulate(&b, g);
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let mode = binary_mode(self, other, "sub")?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<f32> = match mode {
            Operand::Full => self.with_data(|x| {
                other.with_data(|y| x.iter().zip(y).map(|(xi, yi)| xi - yi).collect())
            }),
            Operand::ScalarLhs => {
                let s = self.0.data.borrow()[0];
                other.with_data(|y| y.iter().map(|yi| s - yi).collect())
            }
            Operand::ScalarRhs => {
                let s = other.0.data.borrow()[0];
                self.with_data(|x| x.iter().map(|xi| xi - s).collect())
            }
        };
        let shape = if self.is_scalar() && !other.is_scalar() {
            other.shape().to_vec()
        } else {
            self.shape().to_vec()
        };
        Ok(Tensor::from_op(
            out,
            shape,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                if a.is_scalar() && g.len() > 1 {
                    accumulate(&a, &[g.iter().map(|v| *v as f64).sum::<f64>() as f32]);
                } else {
                    accumulate(&a, g);
                }
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                if b.is_scalar() && g.len() > 1 {
                    accumulate(&b, &[neg.iter().map(|v| *v as f64).sum::<f64>() as f32]);
                } else {
                    accumulate(&b, &neg);
                }
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let mode = binary_mode(self, other, "mul")?;
        let (a, b) = (self.clone(), other.clone());
        let out: Vec<f32> = match mode {
            Operand::Full => self.with_data(|x| {
                other.with_data(|y| x.iter().zip(y).map(|(xi, yi)| xi * yi).collect())
            }),
            Operand::ScalarLhs => {
                let s = self.0.data.borrow()[0];
                other.with_data(|y| y.iter().map(|yi| s * yi).collect())
            }
            Operand::ScalarRhs => {
                let s = other.0.data.borrow()[0];
                self.with_data(|x| x.iter().map(|xi| xi * s).collect())
            }
        };
        let shape = if self.is_scalar() && !other.is_scalar() {
            other.shape().to_vec()
        } else {
            self.shape().to_vec()
        };
        Ok(Tensor::from_op(
            out,
            shape,
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = if a.is_scalar() && g.len() > 1 {
                    let s: f64 = b.with_data(|y| {
                        g.iter().zip(y).map(|(gi, yi)| *gi as f64 * *yi as f64).sum()
                    });
                    vec![s as f32]
                } else if b.is_scalar() && g.len() > 1 {
                    let s = b.0.data.borrow()[0];
                    g.iter().map(|gi| gi * s).collect()
                } else {
                    b.with_data(|y| g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())
                };
                accumulate(&a, &ga);
                let gb: Vec<f32> = if b.is_scalar() && g.len() > 1 {
                    let s: f64 = a.with_data(|x| {
                        g.iter().zip(x).map(|(gi, xi)| *gi as f64 * *xi as f64).sum()
                    });
                    vec![s as f32]
                } else if a.is_scalar() && g.len() > 1 {
                    let s = a.0.data.borrow()[0];
                    g.iter().map(|gi| gi * s).collect()
                } else {
                    a.with_data(|x| g.iter().zip(x).map(|(gi, xi)| gi * xi).collect())
                };
                accumulate(&b, &gb);
            }),
        ))
    }

    /// Elementwise division. Denominator values of exactly zero are a
    /// numerical error; callers add their own epsilon where needed.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.with_data(|y| y.iter().any(|v| *v == 0.0)) {
            return Err(MorphError::numeric("div: denominator contains zero".to_string()));
        }
        let recip = other.recip()?;
        self.mul(&recip)
    }

    fn recip(&self) -> Result<Tensor> {
        let a = self.clone();
        let out: Vec<f32> = self.with_data(|x| x.iter().map(|xi| 1.0 / xi).collect());
        let saved = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(&saved)
                    .map(|(gi, ri)| -gi * ri * ri)
                    .collect();
                accumulate(&a, &ga);
            }),
        ))
    }

    /// Multiply by a compile-time constant (no tape node for the constant).
    pub fn scale(&self, k: f32) -> Tensor {
        let a = self.clone();
        let out: Vec<f32> = self.with_data(|x| x.iter().map(|xi| xi * k).collect());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g.iter().map(|gi| gi * k).collect();
                accumulate(&a, &ga);
            }),
        )
    }

    /// Add a compile-time constant.
    pub fn shift(&self, k: f32) -> Tensor {
        let a = self.clone();
        let out: Vec<f32> = self.with_data(|x| x.iter().map(|xi| xi + k).collect());
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| accumulate(&a, g)),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Tensor {
        let a = self.clone();
        let xs = self.to_vec();
        let out: Vec<f32> = xs.iter().map(|x| silu_val(*x)).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(&xs)
                    .map(|(gi, xi)| gi * silu_grad(*xi))
                    .collect();
                accumulate(&a, &ga);
            }),
        )
    }

    /// Row-wise softmax of a [rows, cols] tensor (max-shifted, f64 sums).
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(MorphError::shape(format!(
                "softmax_rows expects [rows, cols], got {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let xs = self.to_vec();
        let mut out = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                let e = ((x - m) as f64).exp();
                *o = e as f32;
                sum += e;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = (*o as f64 / sum) as f32;
            }
        }
        let a = self.clone();
        let saved = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                // ds_k = p_k * (g_k - Σ_j g_j p_j) per row
                let mut ga = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    let p = &saved[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = 0.0f64;
                    for (pj, gj) in p.iter().zip(gr) {
                        dot += *pj as f64 * *gj as f64;
                    }
                    for ((out_g, pk), gk) in ga[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(p)
                        .zip(gr)
                    {
                        *out_g = (*pk as f64 * (*gk as f64 - dot)) as f32;
                    }
                }
                accumulate(&a, &ga);
            }),
        ))
    }

    pub fn square(&self) -> Tensor {
        let a = self.clone();
        let xs = self.to_vec();
        let out: Vec<f32> = xs.iter().map(|x| x * x).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(&xs)
                    .map(|(gi, xi)| 2.0 * gi * xi)
                    .collect();
                accumulate(&a, &ga);
            }),
        )
    }

    /// Elementwise square root; negative inputs are a numerical error.
    pub fn sqrt(&self) -> Result<Tensor> {
        if self.with_data(|x| x.iter().any(|v| *v < 0.0)) {
            return Err(MorphError::numeric("sqrt of negative value".to_string()));
        }
        let a = self.clone();
        let out: Vec<f32> = self.with_data(|x| x.iter().map(|xi| xi.sqrt()).collect());
        let saved = out.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g
                    .iter()
                    .zip(&saved)
                    .map(|(gi, si)| if *si == 0.0 { 0.0 } else { gi / (2.0 * si) })
                    .collect();
                accumulate(&a, &ga);
            }),
        ))
    }

    /// Natural log; non-positive inputs are a numerical error.
    pub fn log(&self) -> Result<Tensor> {
        if self.with_data(|x| x.iter().any(|v| *v <= 0.0)) {
            return Err(MorphError::numeric("log of non-positive value".to_string()));
        }
        let a = self.clone();
        let xs = self.to_vec();
        let out: Vec<f32> = xs.iter().map(|x| x.ln()).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g.iter().zip(&xs).map(|(gi, xi)| gi / xi).collect();
                accumulate(&a, &ga);
            }),
        ))
    }

    pub fn sin(&self) -> Tensor {
        let a = self.clone();
        let xs = self.to_vec();
        let out: Vec<f32> = xs.iter().map(|x| x.sin()).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g.iter().zip(&xs).map(|(gi, xi)| gi * xi.cos()).collect();
                accumulate(&a, &ga);
            }),
        )
    }

    pub fn exp(&self) -> Tensor {
        let a = self.clone();
        let out: Vec<f32> = self.with_data(|x| x.iter().map(|xi| xi.exp()).collect());
        let saved = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = g.iter().zip(&saved).map(|(gi, ei)| gi * ei).collect();
                accumulate(&a, &ga);
            }),
        )
    }

    /// Sum of all elements, rank-0 output. Accumulates in f64.
    pub fn sum(&self) -> Tensor {
        let a = self.clone();
        let total: f64 = self.with_data(|x| x.iter().map(|v| *v as f64).sum());
        let n = self.numel();
        Tensor::from_op(
            vec![total as f32],
            Vec::new(),
            vec![a.clone()],
            Box::new(move |g| {
                accumulate(&a, &vec![g[0]; n]);
            }),
        )
    }

    /// Arithmetic mean of all elements, rank-0 output.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Mean of squared elements; the workhorse for L2-style losses.
    pub fn mean_square(&self) -> Tensor {
        self.square().mean()
    }

    /// Mean of absolute values (L1).
    pub fn mean_abs(&self) -> Tensor {
        let a = self.clone();
        let xs = self.to_vec();
        let n = xs.len();
        let total: f64 = xs.iter().map(|v| v.abs() as f64).sum();
        Tensor::from_op(
            vec![(total / n as f64) as f32],
            Vec::new(),
            vec![a.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = xs
                    .iter()
                    .map(|xi| g[0] * xi.signum() / n as f32)
                    .collect();
                accumulate(&a, &ga);
            }),
        )
    }

    /// Inner product of two equally-shaped tensors, rank-0 output.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "dot")?;
        let (a, b) = (self.clone(), other.clone());
        let total: f64 = self.with_data(|x| {
            other.with_data(|y| x.iter().zip(y).map(|(xi, yi)| *xi as f64 * *yi as f64).sum())
        });
        Ok(Tensor::from_op(
            vec![total as f32],
            Vec::new(),
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let ga: Vec<f32> = b.with_data(|y| y.iter().map(|yi| g[0] * yi).collect());
                accumulate(&a, &ga);
                let gb: Vec<f32> = a.with_data(|x| x.iter().map(|xi| g[0] * xi).collect());
                accumulate(&b, &gb);
            }),
        ))
    }
}
