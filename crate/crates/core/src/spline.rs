//! B-spline basis evaluation on an open-uniform knot grid.
//!
//! The grid clamps its ends (each boundary knot repeated order+1 times), so
//! the G + order basis functions form a partition of unity on the whole
//! domain and the first/last functions interpolate the endpoints.

use crate::error::{MorphError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SplineGrid {
    order: usize,
    num_intervals: usize,
    lo: f32,
    hi: f32,
    knots: Vec<f32>,
    knots_f64: Vec<f64>,
    last_nonempty: usize,
}

impl SplineGrid {
    pub fn new(order: usize, num_intervals: usize, lo: f32, hi: f32) -> Result<Self> {
        if lo >= hi {
            return Err(MorphError::invalid(format!(
                "spline grid domain [{lo}, {hi}] is degenerate"
            )));
        }
        if order == 0 || num_intervals == 0 {
            return Err(MorphError::invalid(
                "spline grid needs order >= 1 and at least one interval".to_string(),
            ));
        }
        // Open-uniform: boundary knots with multiplicity order+1, uniform
        // interior. Count = G + 2*order + 1.
        let g = num_intervals;
        let step = (hi as f64 - lo as f64) / g as f64;
        let mut knots = Vec::with_capacity(g + 2 * order + 1);
        for _ in 0..=order {
            knots.push(lo);
        }
        for i in 1..g {
            knots.push((lo as f64 + step * i as f64) as f32);
        }
        for _ in 0..=order {
            knots.push(hi);
        }
        debug_assert_eq!(knots.len(), g + 2 * order + 1);
        let knots_f64: Vec<f64> = knots.iter().map(|k| *k as f64).collect();
        let nspans = knots.len() - 1;
        let last_nonempty = (0..nspans)
            .rev()
            .find(|&i| knots_f64[i] < knots_f64[i + 1])
            .unwrap();
        Ok(Self {
            order,
            num_intervals,
            lo,
            hi,
            knots,
            knots_f64,
            last_nonempty,
        })
    }

    /// Defaults used by every KAN layer in the backbone.
    pub fn default_kan() -> Self {
        Self::new(3, 5, -1.0, 1.0).expect("static grid")
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn domain(&self) -> (f32, f32) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f32] {
        &self.knots
    }

    /// Number of basis functions, G + order.
    pub fn basis_count(&self) -> usize {
        self.num_intervals + self.order
    }

    /// Cox-de Boor values of every basis function at `x` (clamped to the
    /// domain first). Non-negative, sums to 1.
    pub fn basis(&self, x: f32) -> Vec<f32> {
        self.basis_and_deriv(x).0
    }

    /// Basis values and their derivatives at `x`. Outside the domain the
    /// clamp makes the function constant, so derivatives are zero there.
    pub fn basis_and_deriv(&self, x: f32) -> (Vec<f32>, Vec<f32>) {
        let nb = self.basis_count();
        let mut values = vec![0.0f32; nb];
        let mut deriv = vec![0.0f32; nb];
        let mut scratch = vec![0.0f64; self.scratch_len()];
        self.basis_and_deriv_into(x, &mut scratch, &mut values, &mut deriv);
        (values, deriv)
    }

    /// Length of the scratch slice `basis_and_deriv_into` needs.
    pub fn scratch_len(&self) -> usize {
        2 * (self.knots.len() - 1)
    }

    /// Allocation-free core of `basis_and_deriv`: callers evaluating many
    /// points reuse one scratch buffer instead of paying several heap
    /// allocations per point. `values` and `deriv` must hold basis_count()
    /// entries and `scratch` at least scratch_len().
    pub fn basis_and_deriv_into(
        &self,
        x: f32,
        scratch: &mut [f64],
        values: &mut [f32],
        deriv: &mut [f32],
    ) {
        let clamped = x < self.lo || x > self.hi;
        let x = x.clamp(self.lo, self.hi) as f64;
        let p = self.order;
        let t = &self.knots_f64;
        let nb = self.basis_count();
        let nspans = t.len() - 1;
        debug_assert!(scratch.len() >= 2 * nspans);
        debug_assert_eq!(values.len(), nb);
        debug_assert_eq!(deriv.len(), nb);
        let (cur, lower) = scratch.split_at_mut(nspans);
        // Degree-0 seed: indicator of the half-open knot span, with the last
        // nonempty span closed so x = hi lands on the final function.
        for (i, c) in cur.iter_mut().enumerate() {
            let inside = if i == self.last_nonempty {
                x >= t[i] && x <= t[i + 1]
            } else {
                x >= t[i] && x < t[i + 1]
            };
            *c = if inside && t[i] < t[i + 1] { 1.0 } else { 0.0 };
        }
        // Elevate degree in place: row d entry i reads entries i and i+1 of
        // row d-1, so a forward sweep can overwrite as it goes. The degree
        // p-1 row is saved for the derivative rule.
        for d in 1..=p {
            let rows = nspans - d;
            if d == p {
                lower[..rows + 1].copy_from_slice(&cur[..rows + 1]);
            }
            for i in 0..rows {
                let left_den = t[i + d] - t[i];
                let right_den = t[i + d + 1] - t[i + 1];
                let mut v = 0.0;
                if left_den > 0.0 {
                    v += (x - t[i]) / left_den * cur[i];
                }
                if right_den > 0.0 {
                    v += (t[i + d + 1] - x) / right_den * cur[i + 1];
                }
                cur[i] = v;
            }
        }
        for (i, vv) in values.iter_mut().enumerate() {
            *vv = cur[i] as f32;
        }
        if clamped {
            deriv.fill(0.0);
        } else {
            for (i, dv) in deriv.iter_mut().enumerate() {
                let left_den = t[i + p] - t[i];
                let right_den = t[i + p + 1] - t[i + 1];
                let mut v = 0.0;
                if left_den > 0.0 {
                    v += lower[i] / left_den;
                }
                if right_den > 0.0 {
                    v -= lower[i + 1] / right_den;
                }
                *dv = (p as f64 * v) as f32;
            }
        }
    }
}

/// Differentiable basis expansion: maps a tensor with n elements to an
/// `[n, basis_count]` matrix whose rows are the basis values at each input.
pub fn spline_basis(x: &Tensor, grid: &SplineGrid) -> Tensor {
    let n = x.numel();
    let nb = grid.basis_count();
    let xs = x.to_vec();
    let mut values = vec![0.0f32; n * nb];
    let mut derivs = vec![0.0f32; n * nb];
    let mut scratch = vec![0.0f64; grid.scratch_len()];
    for (i, xi) in xs.iter().enumerate() {
        grid.basis_and_deriv_into(
            *xi,
            &mut scratch,
            &mut values[i * nb..(i + 1) * nb],
            &mut derivs[i * nb..(i + 1) * nb],
        );
    }
    let parent = x.clone();
    Tensor::from_op(
        values,
        vec![n, nb],
        vec![parent.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0f32; n];
            for (i, gi) in gx.iter_mut().enumerate() {
                let mut s = 0.0f64;
                for j in 0..nb {
                    s += g[i * nb + j] as f64 * derivs[i * nb + j] as f64;
                }
                *gi = s as f32;
            }
            crate::tensor::accumulate(&parent, &gx);
        }),
    )
}
