//! Parameter-shifted Bautin normal form.
//!
//! The nonautonomous system `ż = F(z − Λ(rt))` is studied in its autonomous
//! form on `(x, y, Λ)`:
//!
//! ```text
//! ż = F(z − Λ),   Λ̇ = r Λ (λmax − Λ),   F(z) = (a + iω) z − b|z|² z + |z|⁴ z
//! ```
//!
//! All complex arithmetic is written out on real `(x, y)` pairs so the
//! Jacobian is an explicit real 3×3 matrix.

use nalgebra::{Matrix2, Matrix3, Vector3};
use thiserror::Error;

/// A point `(x, y, Λ)` of the extended phase space.
pub type ExtendedState = Vector3<f64>;

/// Builds an [`ExtendedState`] from its components.
pub fn extended_state(x: f64, y: f64, lambda: f64) -> ExtendedState {
    Vector3::new(x, y, lambda)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shift rate r must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("lambda_max must be positive, got {0}")]
    NonPositiveLambdaMax(f64),
    #[error("parameter {name} must be finite")]
    NonFinite { name: &'static str },
    #[error(
        "periodic orbits need 0 < a < b^2/4 = {fold}: a = {a} lies beyond the {} bifurcation",
        if *a <= 0.0 { "Hopf (a = 0)" } else { "fold of limit cycles (a = b^2/4)" }
    )]
    NoPeriodicOrbits { a: f64, fold: f64 },
}

/// The five constants fixing one instance of the model.
///
/// The past limit is always `λ₋ = 0` and the future limit `λ₊ = lambda_max`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SystemParams {
    pub a: f64,
    pub b: f64,
    pub omega: f64,
    pub r: f64,
    pub lambda_max: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            a: 0.1,
            b: 1.0,
            omega: 3.0,
            r: 0.1,
            lambda_max: 8.0,
        }
    }
}

impl SystemParams {
    pub fn new(a: f64, b: f64, omega: f64, r: f64, lambda_max: f64) -> Result<Self, ModelError> {
        let p = Self {
            a,
            b,
            omega,
            r,
            lambda_max,
        };
        p.validate()?;
        Ok(p)
    }

    /// Default `b`, `ω`, `λmax` with the given `a` and `r`.
    pub fn with_ar(a: f64, r: f64) -> Self {
        Self {
            a,
            r,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("omega", self.omega),
            ("r", self.r),
            ("lambda_max", self.lambda_max),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { name });
            }
        }
        if self.r <= 0.0 {
            return Err(ModelError::NonPositiveRate(self.r));
        }
        if self.lambda_max <= 0.0 {
            return Err(ModelError::NonPositiveLambdaMax(self.lambda_max));
        }
        Ok(())
    }

    /// Checks `0 < a < b²/4`, the range where both frozen periodic orbits exist.
    pub fn require_periodic_orbits(&self) -> Result<(), ModelError> {
        let fold = self.b * self.b / 4.0;
        if self.a > 0.0 && self.a < fold && self.b > 0.0 {
            Ok(())
        } else {
            Err(ModelError::NoPeriodicOrbits { a: self.a, fold })
        }
    }

    /// Period `2π/ω` of every frozen periodic orbit.
    pub fn orbit_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.omega
    }

    pub fn with_r(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    pub fn with_a(mut self, a: f64) -> Self {
        self.a = a;
        self
    }
}

/// The tanh parameter shift `Λ(τ) = λmax (tanh(τ λmax / 2) + 1) / 2`.
///
/// Written in logistic form to stay accurate in both tails.
pub fn parameter_shift(tau: f64, lambda_max: f64) -> f64 {
    let e = tau * lambda_max;
    if e >= 0.0 {
        lambda_max / (1.0 + (-e).exp())
    } else {
        let q = e.exp();
        lambda_max * q / (1.0 + q)
    }
}

/// Rate of change `dΛ/dτ` of [`parameter_shift`].
pub fn parameter_shift_rate(tau: f64, lambda_max: f64) -> f64 {
    let l = parameter_shift(tau, lambda_max);
    l * (lambda_max - l)
}

/// Inverse of [`parameter_shift`]: the `τ` at which the shift equals `lambda`.
pub fn parameter_shift_inverse(lambda: f64, lambda_max: f64) -> f64 {
    (lambda / (lambda_max - lambda)).ln() / lambda_max
}

/// The Bautin normal form `F(z)` on `z = x + iy`.
pub fn bautin_field(x: f64, y: f64, p: &SystemParams) -> (f64, f64) {
    let q = x * x + y * y;
    let c = p.a - p.b * q + q * q;
    (c * x - p.omega * y, p.omega * x + c * y)
}

/// Real 2×2 derivative of [`bautin_field`] at `(x, y)`.
pub fn bautin_derivative(x: f64, y: f64, p: &SystemParams) -> Matrix2<f64> {
    let q = x * x + y * y;
    let c = p.a - p.b * q + q * q;
    // dc/dx = d x, dc/dy = d y
    let d = 2.0 * (2.0 * q - p.b);
    Matrix2::new(
        c + d * x * x,
        -p.omega + d * x * y,
        p.omega + d * x * y,
        c + d * y * y,
    )
}

/// Right-hand side of the extended autonomous system.
pub fn extended_field(w: &ExtendedState, p: &SystemParams) -> ExtendedState {
    let (fx, fy) = bautin_field(w[0] - w[2], w[1], p);
    Vector3::new(fx, fy, p.r * w[2] * (p.lambda_max - w[2]))
}

/// Frozen-system field `ż = F(z − λ)` with `Λ̇ = 0`; the third component of
/// `w` is ignored in favour of the fixed `lambda`.
pub fn frozen_field(w: &ExtendedState, lambda: f64, p: &SystemParams) -> ExtendedState {
    let (fx, fy) = bautin_field(w[0] - lambda, w[1], p);
    Vector3::new(fx, fy, 0.0)
}

/// Exact Jacobian of [`extended_field`].
pub fn jacobian(w: &ExtendedState, p: &SystemParams) -> Matrix3<f64> {
    let df = bautin_derivative(w[0] - w[2], w[1], p);
    Matrix3::new(
        df[(0, 0)],
        df[(0, 1)],
        -df[(0, 0)],
        df[(1, 0)],
        df[(1, 1)],
        -df[(1, 0)],
        0.0,
        0.0,
        p.r * (p.lambda_max - 2.0 * w[2]),
    )
}

/// Adjoint variational field `u̇ = −J(w)ᵀ u`.
pub fn adjoint_field(w: &ExtendedState, u: &Vector3<f64>, p: &SystemParams) -> Vector3<f64> {
    -(jacobian(w, p).transpose() * u)
}

/// Squared distance `|z − Λ|²` from the instantaneous frozen equilibrium.
pub fn offset_sq(w: &ExtendedState) -> f64 {
    let dx = w[0] - w[2];
    dx * dx + w[1] * w[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn shift_midpoint_and_limits() {
        assert_eq!(parameter_shift(0.0, 8.0), 4.0);
        assert!(parameter_shift(3.0, 8.0) < 8.0);
        assert_relative_eq!(parameter_shift(50.0, 8.0), 8.0, epsilon = 1e-12);
        // 8 (tanh(-4) + 1) / 2, evaluated at 30 digits
        assert_relative_eq!(parameter_shift(-1.0, 8.0), 0.002_682_801_043_731_825, max_relative = 1e-13);
        assert!(parameter_shift(-50.0, 8.0) > 0.0);
    }

    #[test]
    fn shift_matches_tanh_form() {
        for &tau in &[-3.0, -0.4, 0.0, 0.25, 2.0] {
            let tanh_form = 8.0 * ((tau * 8.0 / 2.0_f64).tanh() + 1.0) / 2.0;
            assert_relative_eq!(parameter_shift(tau, 8.0), tanh_form, max_relative = 1e-13);
        }
        let tau = parameter_shift_inverse(1.257, 8.0);
        assert_relative_eq!(parameter_shift(tau, 8.0), 1.257, max_relative = 1e-13);
    }

    #[test]
    fn bautin_examples() {
        let p = SystemParams::default();
        assert_eq!(bautin_field(0.0, 0.0, &p), (0.0, 0.0));
        let (fx, fy) = bautin_field(1.0, 0.0, &p);
        assert_relative_eq!(fx, 0.1, epsilon = 1e-15);
        assert_relative_eq!(fy, 3.0, epsilon = 1e-15);
        let rs = (1.0 - (1.0 - 4.0 * p.a).sqrt()) / 2.0;
        let (fx, fy) = bautin_field(rs.sqrt(), 0.0, &p);
        assert!(fx.abs() < 1e-15);
        assert_relative_eq!(fy, 3.0 * rs.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn extended_field_on_centre_line() {
        let p = SystemParams::default();
        let d = extended_field(&extended_state(4.0, 0.0, 4.0), &p);
        assert_eq!((d[0], d[1]), (0.0, 0.0));
        assert_relative_eq!(d[2], 1.6, epsilon = 1e-14);
        for l in [0.0, 8.0] {
            assert_eq!(extended_field(&extended_state(l + 0.3, 0.2, l), &p)[2], 0.0);
        }
    }

    #[test]
    fn jacobian_at_origin_and_future_equilibrium() {
        let p = SystemParams::default();
        let j0 = jacobian(&Vector3::zeros(), &p);
        assert_relative_eq!(j0.fixed_view::<2, 2>(0, 0).into_owned(), Matrix2::new(0.1, -3.0, 3.0, 0.1));
        let jp = jacobian(&extended_state(8.0, 0.0, 8.0), &p);
        let ev = jp.complex_eigenvalues();
        let mut re: Vec<f64> = ev.iter().map(|c| c.re).collect();
        re.sort_by(f64::total_cmp);
        assert_relative_eq!(re[0], -0.8, epsilon = 1e-12);
        assert_relative_eq!(re[1], 0.1, epsilon = 1e-12);
        assert!(ev.iter().any(|c| (c.im - 3.0).abs() < 1e-12));
    }

    #[test]
    fn adjoint_zero_and_spectrum() {
        let p = SystemParams::default();
        let w = extended_state(8.0, 0.0, 8.0);
        assert_eq!(adjoint_field(&w, &Vector3::zeros(), &p), Vector3::zeros());
        let m = -jacobian(&w, &p).transpose();
        let mut re: Vec<f64> = m.complex_eigenvalues().iter().map(|c| c.re).collect();
        re.sort_by(f64::total_cmp);
        assert_relative_eq!(re[0], -0.1, epsilon = 1e-12);
        assert_relative_eq!(re[2], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn orbit_range_errors_name_the_bifurcation() {
        let e = SystemParams::with_ar(0.0, 0.1).require_periodic_orbits().unwrap_err();
        assert!(e.to_string().contains("Hopf"));
        let e = SystemParams::with_ar(0.3, 0.1).require_periodic_orbits().unwrap_err();
        assert!(e.to_string().contains("fold"));
        assert!(SystemParams::new(0.1, 1.0, 3.0, -1.0, 8.0).is_err());
        assert!(SystemParams::new(0.1, 1.0, 3.0, 0.1, 0.0).is_err());
    }
}
