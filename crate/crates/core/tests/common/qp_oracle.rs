//! Exhaustive active-set reference solver for small box QPs.
//!
//! Every coordinate is either pinned to a bound or free; for each pattern
//! the free block is solved exactly and the pattern is kept when the result
//! is feasible. For a convex QP the optimal pattern is among them, so the
//! best feasible candidate is the global minimum.

#![allow(dead_code)]

use nalgebra::{Cholesky, DMatrix, DVector};

pub struct OracleSolution {
    pub u: DVector<f64>,
    pub objective: f64,
}

/// `(H, f, lower, upper)`.
pub type Qp = (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

pub fn enumerate_raw(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> OracleSolution {
    let n = f.len();
    assert!(n <= 16, "enumeration is exponential in the dimension");
    let slack = 1e-12;
    let mut best = OracleSolution {
        u: DVector::zeros(n),
        objective: f64::INFINITY,
    };
    let mut x = DVector::zeros(n);
    for free_mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| free_mask >> i & 1 == 1).collect();
        let fixed: Vec<usize> = (0..n).filter(|i| free_mask >> i & 1 == 0).collect();
        let k = free.len();
        // x_free = -Hff^-1 (f_free + Hfx x_fixed) = base - m x_fixed
        let (base, m) = if k == 0 {
            (DVector::zeros(0), DMatrix::zeros(0, fixed.len()))
        } else {
            let hff = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
            let Some(chol) = Cholesky::new(hff) else {
                continue;
            };
            let ff = DVector::from_fn(k, |a, _| f[free[a]]);
            let hfx = DMatrix::from_fn(k, fixed.len(), |a, b| h[(free[a], fixed[b])]);
            (-chol.solve(&ff), chol.solve(&hfx))
        };
        for bound_mask in 0u32..(1 << fixed.len()) {
            let xfix = DVector::from_fn(fixed.len(), |b, _| {
                if bound_mask >> b & 1 == 1 {
                    hi[fixed[b]]
                } else {
                    lo[fixed[b]]
                }
            });
            let xfree = &base - &m * &xfix;
            let feasible = (0..k).all(|a| {
                let i = free[a];
                xfree[a] >= lo[i] - slack && xfree[a] <= hi[i] + slack
            });
            if !feasible {
                continue;
            }
            for (b, &i) in fixed.iter().enumerate() {
                x[i] = xfix[b];
            }
            for (a, &i) in free.iter().enumerate() {
                x[i] = xfree[a].clamp(lo[i], hi[i]);
            }
            let obj = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
            if obj < best.objective {
                best.objective = obj;
                best.u.copy_from(&x);
            }
        }
    }
    best
}

/// Random strictly convex QP with a box that is active for some coordinates.
pub fn random_raw<R: rand::Rng>(rng: &mut R, n: usize) -> Qp {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * rng.random_range(1e-3..1.0);
    let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lo = DVector::from_fn(n, |_, _| rng.random_range(-1.0..0.0));
    let hi = DVector::from_fn(n, |i, _| lo[i] + rng.random_range(0.1..1.5));
    (h, f, lo, hi)
}
