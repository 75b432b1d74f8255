//! Step-size schedules for the two-timescale solver.
//!
//! Given regularity constants and a horizon K, the derived schedule couples
//! the three step sizes so that the inner variables track their moving
//! optima faster than the outer variable moves, and the weight ascent is
//! slow enough to keep the saddle-point error bounded:
//!
//!   nu    = min( mu_g / (l_g^2 (1 + sigma_g^2)),  2 / mu_g )
//!   alpha = min( mu_g nu / (16 g_y l),            K^{-3/5} / (4 g_y l) )
//!   beta  = min( nu,                              4 K^{-2/5} / mu_g )
//!   gamma = 2 K^{-3/5} / (b_ell sqrt(n))
//!
//! The rational powers are evaluated exactly on representable decades (see
//! [`crate::linalg::pow_rational`]) so published worked values reproduce
//! bit for bit.

use crate::constants::RegularityConstants;
use crate::error::{MorbitError, Result};
use crate::linalg::pow_rational;

/// How a schedule was produced, kept for run records and config echoes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSource {
    /// Derived from regularity constants and the horizon.
    Derived {
        constants: RegularityConstants,
        n_tasks: usize,
        horizon: u64,
    },
    /// Supplied directly by the caller.
    Manual,
}

/// The three step sizes used by one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    /// Outer descent step on x.
    pub alpha: f64,
    /// Inner descent step on each y_i.
    pub beta: f64,
    /// Simplex ascent step on the weights.
    pub gamma: f64,
    /// Tracking step bound the derivation passed through, when derived.
    pub nu: Option<f64>,
    pub source: ScheduleSource,
}

impl StepSchedule {
    /// A caller-chosen schedule. Steps must be positive and finite; gamma
    /// may be zero (weight updates disabled).
    pub fn manual(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        for (name, v, allow_zero) in [("alpha", alpha, false), ("beta", beta, false), ("gamma", gamma, true)] {
            if !v.is_finite() || v < 0.0 || (v == 0.0 && !allow_zero) {
                return Err(MorbitError::domain(format!(
                    "step size {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self {
            alpha,
            beta,
            gamma,
            nu: None,
            source: ScheduleSource::Manual,
        })
    }
}

/// Derives the coupled schedule for `n` tasks over horizon `k_max`.
pub fn schedule_from_constants(
    constants: &RegularityConstants,
    n: usize,
    k_max: u64,
) -> Result<StepSchedule> {
    constants.validate()?;
    if n == 0 {
        return Err(MorbitError::domain("schedule needs at least one task"));
    }
    if k_max == 0 {
        return Err(MorbitError::domain("schedule needs a positive horizon"));
    }
    let c = constants;
    let k = k_max as f64;
    let k_m35 = pow_rational(k, -3, 5);
    let k_m25 = pow_rational(k, -2, 5);

    let nu = (c.mu_g / (c.l_g * c.l_g * (1.0 + c.sigma_g * c.sigma_g))).min(2.0 / c.mu_g);
    let alpha = (c.mu_g * nu / (16.0 * c.g_y * c.l)).min(k_m35 / (4.0 * c.g_y * c.l));
    let beta = nu.min(4.0 * k_m25 / c.mu_g);
    let gamma = 2.0 * k_m35 / (c.b_ell * (n as f64).sqrt());

    for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma), ("nu", nu)] {
        if !v.is_finite() || v <= 0.0 {
            return Err(MorbitError::domain(format!(
                "derived step size {name} is not positive and finite: {v}"
            )));
        }
    }
    Ok(StepSchedule {
        alpha,
        beta,
        gamma,
        nu: Some(nu),
        source: ScheduleSource::Derived {
            constants: *constants,
            n_tasks: n,
            horizon: k_max,
        },
    })
}
