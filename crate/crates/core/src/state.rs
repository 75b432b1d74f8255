//! Iterate state: decision variables plus the seeded random streams that
//! make every run replayable.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_task, MorbitError, Result};
use crate::linalg::{all_finite, norm2, sub};

/// Feasible set for the outer variable.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    Unconstrained,
    /// Axis-aligned box given by per-coordinate bounds.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Euclidean ball of the given center and radius.
    Ball { center: Vec<f64>, radius: f64 },
}

impl ConstraintSet {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            ConstraintSet::Unconstrained => Ok(()),
            ConstraintSet::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(MorbitError::Shape {
                        what: "box bounds",
                        expected: dim,
                        got: lower.len().min(upper.len()),
                    });
                }
                if lower.iter().zip(upper).any(|(l, u)| l > u || !l.is_finite() || !u.is_finite()) {
                    return Err(MorbitError::domain(
                        "box bounds must be finite with lower <= upper",
                    ));
                }
                Ok(())
            }
            ConstraintSet::Ball { center, radius } => {
                if center.len() != dim {
                    return Err(MorbitError::Shape {
                        what: "ball center",
                        expected: dim,
                        got: center.len(),
                    });
                }
                if !(*radius > 0.0) || !radius.is_finite() || !all_finite(center) {
                    return Err(MorbitError::domain("ball needs finite center and radius > 0"));
                }
                Ok(())
            }
        }
    }

    /// Distance from `v` to the set (0 when inside).
    pub fn distance(&self, v: &[f64]) -> f64 {
        match self {
            ConstraintSet::Unconstrained => 0.0,
            ConstraintSet::Box { lower, upper } => {
                let mut d2 = 0.0;
                for i in 0..v.len() {
                    let c = v[i].clamp(lower[i], upper[i]);
                    d2 += (v[i] - c) * (v[i] - c);
                }
                d2.sqrt()
            }
            ConstraintSet::Ball { center, radius } => {
                (norm2(&sub(v, center)) - radius).max(0.0)
            }
        }
    }

    /// Default initial point: origin when feasible-by-construction, box
    /// center, or ball center.
    pub fn default_point(&self, dim: usize) -> Vec<f64> {
        match self {
            ConstraintSet::Unconstrained => vec![0.0; dim],
            ConstraintSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| 0.5 * (l + u))
                .collect(),
            ConstraintSet::Ball { center, .. } => center.clone(),
        }
    }
}

/// The n + 2 independent random streams behind one seeded run: one per task
/// for inner-batch sampling, one for outer-gradient batches, and one for the
/// returned-iterate draw. Separating them pins down exactly which draw each
/// random decision consumes, so trajectories are bit-reproducible no matter
/// how tasks are scheduled.
#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
    task: Vec<ChaCha8Rng>,
    outer: ChaCha8Rng,
    tau: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64, n_tasks: usize) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        RngStreams {
            seed,
            task: (0..n_tasks).map(|i| stream(i as u64)).collect(),
            outer: stream(n_tasks as u64),
            tau: stream(n_tasks as u64 + 1),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_tasks(&self) -> usize {
        self.task.len()
    }

    pub fn next_task_seed(&mut self, task: usize) -> u64 {
        self.task[task].next_u64()
    }

    pub fn next_outer_seed(&mut self) -> u64 {
        self.outer.next_u64()
    }

    /// Uniform draw from {1, ..., k_max} on the dedicated stream.
    pub fn draw_return_index(&mut self, k_max: usize) -> usize {
        self.tau.gen_range(1..=k_max)
    }
}

/// Full iterate state of the solver at the start of iteration `k`:
/// outer variable, per-task inner variables, simplex weights, and the
/// random streams.
#[derive(Debug, Clone)]
pub struct IterateState {
    pub x: Vec<f64>,
    pub ys: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub k: usize,
    pub rng: RngStreams,
}

impl IterateState {
    /// State with uniform simplex weights and streams seeded from `seed`.
    pub fn new(x: Vec<f64>, ys: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let n = ys.len();
        if n == 0 {
            return Err(MorbitError::domain("at least one task is required"));
        }
        let lambda = vec![1.0 / n as f64; n];
        Ok(IterateState {
            x,
            ys,
            lambda,
            k: 0,
            rng: RngStreams::new(seed, n),
        })
    }

    pub fn with_lambda(mut self, lambda: Vec<f64>) -> Result<Self> {
        if lambda.len() != self.ys.len() {
            return Err(MorbitError::Shape {
                what: "lambda",
                expected: self.ys.len(),
                got: lambda.len(),
            });
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn n_tasks(&self) -> usize {
        self.ys.len()
    }

    pub fn y(&self, task: usize) -> Result<&[f64]> {
        check_task(task, self.ys.len())?;
        Ok(&self.ys[task])
    }

    /// Checks the structural invariants: weights on the simplex within 1e-12,
    /// outer iterate inside the constraint set within 1e-12, finite entries.
    pub fn validate(&self, constraint: &ConstraintSet) -> Result<()> {
        if !all_finite(&self.x)
            || !all_finite(&self.lambda)
            || self.ys.iter().any(|y| !all_finite(y))
        {
            return Err(MorbitError::domain("non-finite entry in iterate state"));
        }
        let sum: f64 = self.lambda.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.lambda.iter().any(|&l| l < -1e-12) {
            return Err(MorbitError::domain(format!(
                "lambda is off the simplex: sum {sum}, min {:?}",
                self.lambda.iter().cloned().fold(f64::INFINITY, f64::min)
            )));
        }
        if constraint.distance(&self.x) > 1e-12 {
            return Err(MorbitError::domain(
                "outer iterate lies outside the constraint set",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_count_matches_tasks_plus_two() {
        let s = RngStreams::new(3, 4);
        assert_eq!(s.n_tasks(), 4);
        // distinct streams must disagree on their first draw
        let mut a = RngStreams::new(3, 4);
        let d0 = a.next_task_seed(0);
        let d1 = a.next_task_seed(1);
        let dx = a.next_outer_seed();
        assert_ne!(d0, d1);
        assert_ne!(d0, dx);
        let _ = s;
    }

    #[test]
    fn return_index_is_in_range_and_deterministic() {
        let mut a = RngStreams::new(11, 2);
        let mut b = RngStreams::new(11, 2);
        let ta = a.draw_return_index(1000);
        let tb = b.draw_return_index(1000);
        assert_eq!(ta, tb);
        assert!((1..=1000).contains(&ta));
        assert_eq!(RngStreams::new(11, 2).draw_return_index(1), 1);
    }

    #[test]
    fn validate_rejects_off_simplex_lambda() {
        let st = IterateState::new(vec![0.0], vec![vec![0.0]; 2], 0)
            .unwrap()
            .with_lambda(vec![0.6, 0.6])
            .unwrap();
        assert!(st.validate(&ConstraintSet::Unconstrained).is_err());
    }

    #[test]
    fn validate_rejects_infeasible_x() {
        let st = IterateState::new(vec![2.0], vec![vec![0.0]], 0).unwrap();
        let set = ConstraintSet::Box {
            lower: vec![-1.0],
            upper: vec![1.0],
        };
        assert!(st.validate(&set).is_err());
        let inside = IterateState::new(vec![0.5], vec![vec![0.0]], 0).unwrap();
        assert!(inside.validate(&set).is_ok());
    }

    #[test]
    fn box_validation_and_center() {
        let set = ConstraintSet::Box {
            lower: vec![0.0, -2.0],
            upper: vec![1.0, 2.0],
        };
        set.validate(2).unwrap();
        assert_eq!(set.default_point(2), vec![0.5, 0.0]);
        let bad = ConstraintSet::Box {
            lower: vec![1.0],
            upper: vec![0.0],
        };
        assert!(bad.validate(1).is_err());
    }
}
