//! Regularity constants of a problem instance.
//!
//! These are user-supplied descriptions of the problem (strong convexity,
//! smoothness, noise scales, value bounds), not quantities estimated from
//! data. The step-size schedule consumes them; `derive_constants` computes
//! the three composite constants that the schedule needs from per-component
//! Lipschitz data when the user has those instead.

use crate::error::{MorbitError, Result};

/// Constants describing one problem instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityConstants {
    /// Strong-convexity modulus of every inner objective in y.
    pub mu_g: f64,
    /// Lipschitz constant of the inner gradients (smoothness of g in y).
    pub l_g: f64,
    /// Inner stochastic-gradient noise scale.
    pub sigma_g: f64,
    /// Outer stochastic-gradient noise scale.
    pub sigma_f: f64,
    /// Initial bias bound of the outer gradient estimator.
    pub b0: f64,
    /// Lipschitz constant of x -> y_i*(x).
    pub g_y: f64,
    /// Lipschitz constant of y -> implicit outer gradient at fixed x.
    pub l: f64,
    /// Smoothness of the reduced objectives x -> l_i(x).
    pub l_f: f64,
    /// Uniform bound on |l_i(x)| over the feasible set.
    pub b_ell: f64,
}

impl RegularityConstants {
    /// All constants one; handy in tests and as a documented baseline.
    pub fn all_ones() -> Self {
        RegularityConstants {
            mu_g: 1.0,
            l_g: 1.0,
            sigma_g: 1.0,
            sigma_f: 1.0,
            b0: 1.0,
            g_y: 1.0,
            l: 1.0,
            l_f: 1.0,
            b_ell: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mu_g", self.mu_g),
            ("l_g", self.l_g),
            ("g_y", self.g_y),
            ("l", self.l),
            ("l_f", self.l_f),
            ("b_ell", self.b_ell),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(MorbitError::domain(format!(
                    "{name} must be a positive finite number, got {v}"
                )));
            }
        }
        let nonnegative = [
            ("sigma_g", self.sigma_g),
            ("sigma_f", self.sigma_f),
            ("b0", self.b0),
        ];
        for (name, v) in nonnegative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(MorbitError::domain(format!(
                    "{name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-component Lipschitz and bound data for the two objectives. Barred
/// constants are Lipschitz moduli with respect to x, unbarred with respect
/// to y; `c_*` are uniform bounds on gradients or Hessians.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentLipschitz {
    /// Strong-convexity modulus of the inner objectives.
    pub mu_g: f64,
    /// Lipschitz modulus of grad_x f in y.
    pub l_fx: f64,
    /// Lipschitz modulus of grad_y f in y.
    pub l_fy: f64,
    /// Lipschitz modulus of grad_y f in x.
    pub lbar_fy: f64,
    /// Uniform bound on ||grad_y f||.
    pub c_fy: f64,
    /// Uniform bound on the cross Hessian of g.
    pub c_gxy: f64,
    /// Lipschitz modulus of the cross Hessian of g in y.
    pub l_gxy: f64,
    /// Lipschitz modulus of the inner Hessian of g in y.
    pub l_gyy: f64,
    /// Lipschitz modulus of the cross Hessian of g in x.
    pub lbar_gxy: f64,
    /// Lipschitz modulus of the inner Hessian of g in x.
    pub lbar_gyy: f64,
    /// Cross-Hessian bound entering the inner-tracking constant
    /// (usually equal to `c_gxy`).
    pub c_g: f64,
}

impl ComponentLipschitz {
    pub fn all_ones() -> Self {
        ComponentLipschitz {
            mu_g: 1.0,
            l_fx: 1.0,
            l_fy: 1.0,
            lbar_fy: 1.0,
            c_fy: 1.0,
            c_gxy: 1.0,
            l_gxy: 1.0,
            l_gyy: 1.0,
            lbar_gxy: 1.0,
            lbar_gyy: 1.0,
            c_g: 1.0,
        }
    }
}

/// The composite constants derived from component data:
/// `l` bounds the error of the implicit outer gradient against the reduced
/// gradient (||grad_bar f(x, y) - grad l(x)|| <= l ||y*(x) - y||), `g_y` is
/// the Lipschitz constant of x -> y*(x), and `l_f` is the smoothness of the
/// reduced objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    pub l: f64,
    pub l_f: f64,
    pub g_y: f64,
}

/// Closed-form composition of per-component regularity data.
pub fn derive_constants(c: &ComponentLipschitz) -> Result<DerivedConstants> {
    if !(c.mu_g > 0.0) || !c.mu_g.is_finite() {
        return Err(MorbitError::domain(format!(
            "mu_g must be positive, got {}",
            c.mu_g
        )));
    }
    let nonneg = [
        c.l_fx, c.l_fy, c.lbar_fy, c.c_fy, c.c_gxy, c.l_gxy, c.l_gyy, c.lbar_gxy, c.lbar_gyy,
        c.c_g,
    ];
    if nonneg.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(MorbitError::domain(
            "component constants must be nonnegative and finite",
        ));
    }
    let mu = c.mu_g;
    let l = c.l_fx + c.l_fy * c.c_gxy / mu + c.c_fy * (c.l_gxy / mu + c.l_gyy * c.c_gxy / (mu * mu));
    let l_f = c.l_fx
        + (c.lbar_fy + l) * c.c_gxy / mu
        + c.c_fy * (c.lbar_gxy / mu + c.lbar_gyy * c.c_gxy / (mu * mu));
    let g_y = c.c_g / mu;
    Ok(DerivedConstants { l, l_f, g_y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_composition() {
        let d = derive_constants(&ComponentLipschitz::all_ones()).unwrap();
        // by substitution: l = 1 + 1 + 1*(1 + 1) = 4,
        // l_f = 1 + (1 + 4)*1 + 1*(1 + 1) = 8, g_y = 1
        assert_eq!(d.l, 4.0);
        assert_eq!(d.l_f, 8.0);
        assert_eq!(d.g_y, 1.0);
    }

    #[test]
    fn tracking_constant_is_cross_bound_over_modulus() {
        let mut c = ComponentLipschitz::all_ones();
        c.c_g = 2.0;
        c.mu_g = 4.0;
        assert_eq!(derive_constants(&c).unwrap().g_y, 0.5);
    }

    #[test]
    fn zero_outer_gradient_bound_drops_inner_curvature_terms() {
        let mut c = ComponentLipschitz::all_ones();
        c.c_fy = 0.0;
        let d = derive_constants(&c).unwrap();
        assert_eq!(d.l, c.l_fx + c.l_fy * c.c_gxy / c.mu_g);
    }

    #[test]
    fn rejects_nonpositive_modulus() {
        let mut c = ComponentLipschitz::all_ones();
        c.mu_g = 0.0;
        assert!(derive_constants(&c).is_err());
        let mut r = RegularityConstants::all_ones();
        r.mu_g = -1.0;
        assert!(r.validate().is_err());
        let mut r2 = RegularityConstants::all_ones();
        r2.sigma_g = -0.5;
        assert!(r2.validate().is_err());
        assert!(RegularityConstants::all_ones().validate().is_ok());
    }
}
