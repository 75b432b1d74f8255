//! Euclidean projections onto the probability simplex and onto outer
//! feasible sets.
//!
//! The simplex projection is the sort-and-threshold method: sort the input
//! descending, find the largest prefix whose running mean leaves its last
//! element positive after shifting, and clamp everything below the resulting
//! threshold to zero. It is exact in O(n log n) and needs no iteration.

use crate::error::{MorbitError, Result};
use crate::linalg::{norm2, sub};
use crate::state::ConstraintSet;

/// Tolerance under which an input is treated as already feasible and
/// returned verbatim. Returning feasible points unchanged is exact (the
/// projection is the identity on the set) and makes projection idempotent
/// to the bit.
const FEASIBLE_TOL: f64 = 1e-13;

/// Projects `v` onto the probability simplex { w : w_i >= 0, sum w_i = 1 }.
pub fn project_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(MorbitError::domain("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MorbitError::domain(
            "simplex projection requires finite entries",
        ));
    }
    // feasible inputs are their own projection
    let sum: f64 = v.iter().sum();
    if v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= FEASIBLE_TOL * v.len() as f64 {
        return Ok(v.to_vec());
    }

    let mut sorted = v.to_vec();
    // descending; ties keep original relative order, which the threshold
    // rule is insensitive to
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite entries"));

    let mut prefix = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        prefix += u;
        let candidate = (prefix - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
        // once u - candidate <= 0 the support is fixed, but later candidates
        // cannot reactivate; scanning on keeps the loop branch-simple
    }
    Ok(v.iter().map(|&x| (x - theta).max(0.0)).collect())
}

/// Projects `v` onto the given constraint set.
pub fn project_set(v: &[f64], set: &ConstraintSet) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MorbitError::domain("projection requires finite entries"));
    }
    match set {
        ConstraintSet::Unconstrained => Ok(v.to_vec()),
        ConstraintSet::Box { lower, upper } => {
            if lower.len() != v.len() {
                return Err(MorbitError::Shape {
                    what: "box projection input",
                    expected: lower.len(),
                    got: v.len(),
                });
            }
            Ok(v.iter()
                .zip(lower.iter().zip(upper))
                .map(|(&x, (&l, &u))| x.clamp(l, u))
                .collect())
        }
        ConstraintSet::Ball { center, radius } => {
            if center.len() != v.len() {
                return Err(MorbitError::Shape {
                    what: "ball projection input",
                    expected: center.len(),
                    got: v.len(),
                });
            }
            let d = norm2(&sub(v, center));
            if d <= radius * (1.0 + FEASIBLE_TOL) {
                return Ok(v.to_vec());
            }
            let s = radius / d;
            Ok(v.iter()
                .zip(center)
                .map(|(&x, &c)| c + (x - c) * s)
                .collect())
        }
    }
}

/// A vector validated to lie on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(MorbitError::domain("simplex vector cannot be empty"));
        }
        let sum: f64 = v.iter().sum();
        if v.iter().any(|&x| x < -1e-12 || !x.is_finite()) || (sum - 1.0).abs() > 1e-12 {
            return Err(MorbitError::domain(format!(
                "not a simplex vector: sum {sum}"
            )));
        }
        Ok(SimplexVector(v))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(MorbitError::domain("simplex vector cannot be empty"));
        }
        Ok(SimplexVector(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}
