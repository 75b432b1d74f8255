//! Dense vector and matrix helpers used by the solver and problem families.
//!
//! Everything here works on plain `f64` slices. Matrices are small and dense
//! (inner problems in the hundreds of dimensions at most), so a hand-rolled
//! Cholesky is enough and keeps the dependency surface flat.

use crate::error::{MorbitError, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm2_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// a += s * b
pub fn axpy(a: &mut [f64], s: f64, b: &[f64]) {
    debug_assert_eq!(a.len(), b.len());
    for (ai, bi) in a.iter_mut().zip(b) {
        *ai += s * bi;
    }
}

pub fn scale(a: &mut [f64], s: f64) {
    for ai in a.iter_mut() {
        *ai *= s;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(MorbitError::domain("rows of unequal length"));
        }
        Ok(DenseMatrix {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Maximum relative asymmetry |a_ij - a_ji| / max(1, |a_ij|).
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let d = (self.get(i, j) - self.get(j, i)).abs();
                worst = worst.max(d / self.get(i, j).abs().max(1.0));
            }
        }
        worst
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| dot(&self.data[i * self.cols..(i + 1) * self.cols], v))
            .collect()
    }

    /// Transpose-vector product A^T v.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            axpy(&mut out, v[i], row);
        }
        out
    }

    /// Cholesky factorization of a symmetric positive definite matrix.
    /// Fails when a pivot is not strictly positive, which is exactly the
    /// strong-convexity check the hypergradient solve relies on.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        if self.rows != self.cols {
            return Err(MorbitError::Shape {
                what: "cholesky input",
                expected: self.rows,
                got: self.cols,
            });
        }
        let n = self.rows;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return Err(MorbitError::NotStronglyConvex(format!(
                    "pivot {d:.3e} at column {j} is not positive"
                )));
            }
            let dj = d.sqrt();
            l[j * n + j] = dj;
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / dj;
            }
        }
        Ok(CholeskyFactor { n, l })
    }
}

/// Lower-triangular Cholesky factor; solves A x = b via two triangular solves.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    l: Vec<f64>,
}

impl CholeskyFactor {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(b.len(), self.n);
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }
}

/// x^(p/q) for x > 0 with one compensated Newton correction, so that clean
/// rational powers (e.g. 1e5^(-3/5) = 1e-3) come out correctly rounded.
/// Plain `powf` is off by 1-2 ulp on such inputs because the exponent p/q is
/// itself rounded before exponentiation.
pub fn pow_rational(x: f64, p: i32, q: u32) -> f64 {
    assert!(q > 0, "pow_rational requires q > 0");
    if x <= 0.0 || !x.is_finite() {
        return f64::NAN;
    }
    let y0 = x.powf(p as f64 / q as f64);
    if y0 == 0.0 || !y0.is_finite() {
        return y0;
    }
    let (num, inv) = if p < 0 { ((-p) as u32, true) } else { (p as u32, false) };
    // Solve z^q = x^num for z, starting from the powf estimate.
    let z0 = if inv { 1.0 / y0 } else { y0 };
    let zq = dd_powi(z0, q);
    let xp = dd_powi(x, num);
    let f = dd_sub(zq, xp);
    let df = (q as f64) * dd_powi(z0, q - 1).hi;
    if !df.is_finite() || df == 0.0 {
        return y0;
    }
    let z1 = z0 - (f.hi + f.lo) / df;
    if inv {
        1.0 / z1
    } else {
        z1
    }
}

// Double-double helpers for the Newton correction above. `two_prod` relies on
// fused multiply-add being exact, which IEEE-754 guarantees.
#[derive(Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    let e = a.mul_add(b, -p);
    Dd { hi: p, lo: e }
}

fn dd_mul_f64(a: Dd, b: f64) -> Dd {
    let p = two_prod(a.hi, b);
    let lo = a.lo.mul_add(b, p.lo);
    two_sum(p.hi, lo)
}

fn dd_sub(a: Dd, b: Dd) -> Dd {
    let s = two_sum(a.hi, -b.hi);
    let lo = s.lo + (a.lo - b.lo);
    two_sum(s.hi, lo)
}

fn dd_powi(x: f64, n: u32) -> Dd {
    let mut acc = Dd { hi: 1.0, lo: 0.0 };
    for _ in 0..n {
        acc = dd_mul_f64(acc, x);
    }
    acc
}
