//! Frozen and limit systems: the equilibria `Z(λ)`, the periodic orbits
//! `Γˢ(λ)`, `Γᵘ(λ)` and their Floquet data inside the extended system.
//!
//! The frozen orbits are circles of squared radius `R_s < R_u` about `(λ, 0)`,
//! traversed with `θ̇ = ω`. Floquet multipliers and eigendirections come from
//! the periodic eigenvalue problem `γ' = T_Γ J(g(s T_Γ)) γ`, `γ(1) = β γ(0)`,
//! `|γ(0)| = 1`, solved by the shooting engine and seeded from the monodromy
//! matrix.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Complex, Matrix2, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::bvp::{self, BvpConfig, BvpError, BvpGuess, BvpProblem};
use crate::integrator::{Integrator, IntegratorConfig, VariationalSystem};
use crate::model::{self, ExtendedState, ModelError, SystemParams};

#[derive(Debug, Error, Clone)]
pub enum FrozenError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("Floquet eigenvalue problem failed for the {direction} direction: {source}")]
    Bvp {
        direction: &'static str,
        #[source]
        source: BvpError,
    },
    #[error("variational integration failed: {0}")]
    Integration(String),
    #[error("monodromy matrix has non-real multipliers {0:?}")]
    ComplexMultipliers(Vec<Complex<f64>>),
}

/// Squared radii `(R_s, R_u)`: the roots of `a − b u + u² = 0`.
pub fn orbit_radii(a: f64, b: f64) -> Result<(f64, f64), ModelError> {
    let fold = b * b / 4.0;
    if !(a > 0.0 && a <= fold && b > 0.0) {
        return Err(ModelError::NoPeriodicOrbits { a, fold });
    }
    let disc = (b * b - 4.0 * a).max(0.0).sqrt();
    // The smaller root in cancellation-free form.
    let ru = (b + disc) / 2.0;
    let rs = if ru > 0.0 { a / ru } else { 0.0 };
    Ok((rs, ru))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Limit {
    /// `Λ = 0`.
    Past,
    /// `Λ = λmax`.
    Future,
}

impl Limit {
    pub fn lambda(self, p: &SystemParams) -> f64 {
        match self {
            Limit::Past => 0.0,
            Limit::Future => p.lambda_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Stability {
    Stable,
    Unstable,
}

/// A frozen periodic orbit `Γˢ(λ)` or `Γᵘ(λ)` embedded at the level `Λ = plane`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrozenPeriodicOrbit {
    pub lambda: f64,
    pub squared_radius: f64,
    pub stability: Stability,
    pub period: f64,
    pub plane: f64,
}

impl FrozenPeriodicOrbit {
    /// The orbit of the given stability in the past or future limit system.
    pub fn limit(which: Limit, stability: Stability, p: &SystemParams) -> Result<Self, ModelError> {
        let l = which.lambda(p);
        Self::frozen(l, stability, p).map(|o| Self { plane: l, ..o })
    }

    /// The orbit of the frozen system at `λ`, placed at `Λ = λ`.
    pub fn frozen(lambda: f64, stability: Stability, p: &SystemParams) -> Result<Self, ModelError> {
        p.require_periodic_orbits()?;
        let (rs, ru) = orbit_radii(p.a, p.b)?;
        Ok(Self {
            lambda,
            squared_radius: match stability {
                Stability::Stable => rs,
                Stability::Unstable => ru,
            },
            stability,
            period: p.orbit_period(),
            plane: lambda,
        })
    }

    pub fn radius(&self) -> f64 {
        self.squared_radius.sqrt()
    }

    /// `g(θ) = (λ + ρ cos θ, ρ sin θ, plane)`.
    pub fn point(&self, theta: f64) -> ExtendedState {
        let rho = self.radius();
        Vector3::new(self.lambda + rho * theta.cos(), rho * theta.sin(), self.plane)
    }

    /// `dg/dθ`.
    pub fn tangent(&self, theta: f64) -> Vector3<f64> {
        let rho = self.radius();
        Vector3::new(-rho * theta.sin(), rho * theta.cos(), 0.0)
    }

    /// Phase `θ ∈ [0, 2π)` of the projection of `w` onto the orbit's plane.
    pub fn phase_of(&self, w: &ExtendedState) -> f64 {
        w[1].atan2(w[0] - self.lambda).rem_euclid(TAU)
    }

    /// Radial Floquet exponent `2R(2R − b)`, in units of time.
    pub fn radial_exponent(&self, p: &SystemParams) -> f64 {
        2.0 * self.squared_radius * (2.0 * self.squared_radius - p.b)
    }

    /// Floquet exponent `r(λmax − 2Λ)` of the direction leaving the plane.
    pub fn axial_exponent(&self, p: &SystemParams) -> f64 {
        p.r * (p.lambda_max - 2.0 * self.plane)
    }

    /// `exp(∮ tr J dt)`, the product of the multipliers.
    pub fn liouville_product(&self, p: &SystemParams) -> f64 {
        ((self.radial_exponent(p) + self.axial_exponent(p)) * self.period).exp()
    }
}

/// One Floquet multiplier with its eigendirection sampled over `s ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloquetDirection {
    pub multiplier: f64,
    /// `γ(s_k)` at `s_k = k / (len − 1)`, with `|γ(0)| = 1`.
    pub mesh: Vec<Vector3<f64>>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloquetData {
    pub orbit: FrozenPeriodicOrbit,
    pub params: SystemParams,
    pub stable: FloquetDirection,
    pub center: FloquetDirection,
    pub unstable: FloquetDirection,
    /// Brute-force monodromy matrix used to seed the eigenvalue problems.
    pub monodromy: Matrix3<f64>,
}

impl FloquetData {
    pub fn multipliers(&self) -> [f64; 3] {
        [
            self.stable.multiplier,
            self.center.multiplier,
            self.unstable.multiplier,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloquetConfig {
    pub bvp: BvpConfig,
    /// Phase samples of the tabulated bundles.
    pub samples: usize,
}

impl Default for FloquetConfig {
    fn default() -> Self {
        Self {
            bvp: BvpConfig {
                tol: 1e-11,
                integrator: IntegratorConfig::default().with_tolerances(1e-11, 1e-13),
                ..BvpConfig::default()
            },
            samples: 512,
        }
    }
}

/// Linearisation along the orbit on the scaled phase `s`.
struct EigenProblem<'a> {
    orbit: &'a FrozenPeriodicOrbit,
    params: &'a SystemParams,
}

impl EigenProblem<'_> {
    fn matrix(&self, s: f64) -> Matrix3<f64> {
        model::jacobian(&self.orbit.point(TAU * s), self.params) * self.orbit.period
    }
}

impl BvpProblem<3> for EigenProblem<'_> {
    fn num_segments(&self) -> usize {
        1
    }
    fn num_params(&self) -> usize {
        1
    }
    fn num_conditions(&self) -> usize {
        4
    }
    fn rhs(&self, _: usize, s: f64, y: &Vector3<f64>, _: &[f64]) -> Vector3<f64> {
        self.matrix(s) * y
    }
    fn rhs_uses_param(&self, _: usize) -> bool {
        false
    }
    fn boundary(&self, st: &[Vector3<f64>], en: &[Vector3<f64>], p: &[f64], out: &mut [f64]) {
        let g = en[0] - st[0] * p[0];
        out[..3].copy_from_slice(g.as_slice());
        out[3] = st[0].norm_squared() - 1.0;
    }
}

fn sign_fixed(v: Vector3<f64>) -> Vector3<f64> {
    let lead = v.iter().copied().find(|c| c.abs() > 1e-10).unwrap_or(1.0);
    if lead < 0.0 {
        -v
    } else {
        v
    }
}

fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let (i, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    vt.row(i).transpose().normalize()
}

/// Monodromy matrix of the extended system over one period from `g(0)`.
pub fn monodromy(orbit: &FrozenPeriodicOrbit, p: &SystemParams, cfg: &IntegratorConfig) -> Result<Matrix3<f64>, FrozenError> {
    let sys = VariationalSystem { params: *p };
    let y0 = VariationalSystem::pack(&orbit.point(0.0), &Matrix3::identity());
    let integ = Integrator::new(IntegratorConfig {
        escape_radius_sq: f64::INFINITY,
        ..*cfg
    });
    let end = integ
        .propagate(&sys, &y0, 0.0, orbit.period)
        .map_err(|e| FrozenError::Integration(e.to_string()))?;
    Ok(VariationalSystem::unpack(&end.state).1)
}

/// Floquet multipliers and eigendirections of a frozen orbit.
pub fn floquet(orbit: &FrozenPeriodicOrbit, p: &SystemParams, cfg: &FloquetConfig) -> Result<FloquetData, FrozenError> {
    let mono = monodromy(orbit, p, &cfg.bvp.integrator)?;
    let eig = mono.complex_eigenvalues();
    if eig.iter().any(|c| c.im.abs() > 1e-8 * c.norm().max(1.0)) {
        return Err(FrozenError::ComplexMultipliers(eig.iter().copied().collect()));
    }
    let mut seeds: Vec<(f64, Vector3<f64>)> = eig
        .iter()
        .map(|c| (c.re, null_vector(&(mono - Matrix3::identity() * c.re))))
        .collect();

    // Centre: the seed closest to the orbit tangent; the other two by modulus.
    let tangent = orbit.tangent(0.0).normalize();
    let ci = (0..3)
        .max_by(|&i, &j| {
            seeds[i].1.dot(&tangent).abs().total_cmp(&seeds[j].1.dot(&tangent).abs())
        })
        .expect("three seeds");
    let centre_seed = seeds.remove(ci);
    seeds.sort_by(|x, y| x.0.abs().total_cmp(&y.0.abs()));

    let problem = EigenProblem { orbit, params: p };
    let m = cfg.bvp.subintervals;
    let solve = |direction: &'static str, (beta, v): (f64, Vector3<f64>)| -> Result<FloquetDirection, FrozenError> {
        let wrap = |source| FrozenError::Bvp { direction, source };
        let sh = bvp::Shooting::new(&problem, cfg.bvp, 0).map_err(wrap)?;
        let guess: BvpGuess<3> = sh.guess_from_starts(&[v], &[beta]).map_err(wrap)?;
        let sol = bvp::solve(&problem, &guess, &cfg.bvp).map_err(wrap)?;
        let flip = if sign_fixed(*sol.start(0)) == *sol.start(0) { 1.0 } else { -1.0 };
        debug_assert_eq!(sol.mesh[0].len(), m + 1);
        Ok(FloquetDirection {
            multiplier: sol.params[0],
            mesh: sol.mesh[0].iter().map(|g| g * flip).collect(),
            residual: sol.residual_norm,
        })
    };
    Ok(FloquetData {
        orbit: *orbit,
        params: *p,
        stable: solve("stable", seeds[0])?,
        center: solve("center", centre_seed)?,
        unstable: solve("unstable", seeds[1])?,
        monodromy: mono,
    })
}

/// Periodic Floquet bundles `β^{−s} γ(s)` tabulated over the phase, with
/// adjoint (dual) bundles.
#[derive(Debug, Clone)]
pub struct FloquetBundle {
    pub data: FloquetData,
    values: [Vec<Vector3<f64>>; 2],
    slopes: [Vec<Vector3<f64>>; 2],
}

/// Directions at one phase, ordered stable, centre, unstable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseFrame {
    pub right: [Vector3<f64>; 3],
    /// Rows of the inverse of `[γ_s γ_c γ_u]`: `⟨left_i, right_j⟩ = δ_ij`.
    pub left: [Vector3<f64>; 3],
}

impl FloquetBundle {
    pub fn new(data: FloquetData, samples: usize, integ: &IntegratorConfig) -> Result<Self, FrozenError> {
        let k = samples.max(8);
        let problem = EigenProblem {
            orbit: &data.orbit,
            params: &data.params,
        };
        let integrator = Integrator::new(IntegratorConfig {
            escape_radius_sq: f64::INFINITY,
            ..*integ
        });
        let mut values: [Vec<Vector3<f64>>; 2] = Default::default();
        let mut slopes: [Vec<Vector3<f64>>; 2] = Default::default();
        for (slot, dir) in [&data.stable, &data.unstable].into_iter().enumerate() {
            let ln_beta = dir.multiplier.abs().ln();
            let ode = |s: f64, y: &Vector3<f64>| problem.matrix(s) * y;
            let mut y = dir.mesh[0];
            for i in 0..k {
                let s = i as f64 / k as f64;
                let scale = (-ln_beta * s).exp();
                values[slot].push(y * scale);
                // d/dθ of β^{−s} γ(s), with θ = 2π s
                slopes[slot].push((problem.matrix(s) * y - y * ln_beta) * scale / TAU);
                y = integrator
                    .propagate(&ode, &y, s, (i + 1) as f64 / k as f64)
                    .map_err(|e| FrozenError::Integration(e.to_string()))?
                    .state;
            }
        }
        Ok(Self { data, values, slopes })
    }

    fn interp(&self, slot: usize, theta: f64) -> Vector3<f64> {
        let k = self.values[slot].len();
        let h = TAU / k as f64;
        let x = theta.rem_euclid(TAU) / h;
        let i = (x.floor() as usize).min(k - 1);
        let t = x - i as f64;
        let j = (i + 1) % k;
        let (y0, y1) = (&self.values[slot][i], &self.values[slot][j]);
        let (d0, d1) = (self.slopes[slot][i] * h, self.slopes[slot][j] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        y0 * (2.0 * t3 - 3.0 * t2 + 1.0) + d0 * (t3 - 2.0 * t2 + t) + y1 * (-2.0 * t3 + 3.0 * t2) + d1 * (t3 - t2)
    }

    /// Unit stable, centre and unstable directions at phase `theta`, with the
    /// centre direction pinned to the orbit tangent.
    pub fn frame(&self, theta: f64) -> PhaseFrame {
        let right = [
            self.interp(0, theta).normalize(),
            self.data.orbit.tangent(theta).normalize(),
            self.interp(1, theta).normalize(),
        ];
        let m = Matrix3::from_columns(&right);
        let inv = m.try_inverse().expect("Floquet directions are independent");
        let left = [
            inv.row(0).transpose(),
            inv.row(1).transpose(),
            inv.row(2).transpose(),
        ];
        PhaseFrame { right, left }
    }
}

type BundleKey = (u8, u8, [u64; 5]);

fn bundle_cache() -> &'static Mutex<HashMap<BundleKey, Arc<FloquetBundle>>> {
    static CACHE: OnceLock<Mutex<HashMap<BundleKey, Arc<FloquetBundle>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Floquet bundle of a limit-system orbit, memoised on the exact parameters.
pub fn limit_bundle(which: Limit, stability: Stability, p: &SystemParams) -> Result<Arc<FloquetBundle>, FrozenError> {
    let key = (
        which as u8,
        stability as u8,
        [p.a, p.b, p.omega, p.r, p.lambda_max].map(f64::to_bits),
    );
    if let Some(b) = bundle_cache().lock().expect("cache lock").get(&key) {
        return Ok(b.clone());
    }
    let cfg = FloquetConfig::default();
    let orbit = FrozenPeriodicOrbit::limit(which, stability, p)?;
    let data = floquet(&orbit, p, &cfg)?;
    let bundle = Arc::new(FloquetBundle::new(data, cfg.samples, &cfg.bvp.integrator)?);
    let mut cache = bundle_cache().lock().expect("cache lock");
    if cache.len() > 256 {
        cache.clear();
    }
    cache.insert(key, bundle.clone());
    Ok(bundle)
}

/// Eigen-decomposition of the Jacobian at `Z₋ = 0` or `Z₊ = (λmax, 0, λmax)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumData {
    pub location: ExtendedState,
    /// `a + iω`, `a − iω`, then the axial eigenvalue `∓ r λmax`.
    pub eigenvalues: [Complex<f64>; 3],
    /// Real basis `e_x`, `e_y` of the invariant plane of `a ± iω`
    /// (the unstable plane for `a > 0`).
    pub focus_basis: [Vector3<f64>; 2],
    /// Eigenvector of the axial eigenvalue, stable at `Z₊` and unstable at `Z₋`.
    pub axial_direction: Vector3<f64>,
    /// Dual basis: `⟨focus_left_i, focus_basis_j⟩ = δ_ij` and both annihilate
    /// `axial_direction`.
    pub focus_left: [Vector3<f64>; 2],
    pub axial_left: Vector3<f64>,
}

pub fn equilibrium_data(which: Limit, p: &SystemParams) -> EquilibriumData {
    let l = which.lambda(p);
    let location = Vector3::new(l, 0.0, l);
    let kappa = p.r * (p.lambda_max - 2.0 * l);
    let a = Matrix2::new(p.a, -p.omega, p.omega, p.a);
    // (A − κ) v = A e_x
    let v = (a - Matrix2::identity() * kappa)
        .try_inverse()
        .expect("a ± iω ≠ κ")
        * Vector2::new(p.a, p.omega);
    let axial_direction = Vector3::new(v[0], v[1], 1.0).normalize();
    let ex = Vector3::x();
    let ey = Vector3::y();
    let inv = Matrix3::from_columns(&[ex, ey, axial_direction])
        .try_inverse()
        .expect("independent eigenvectors");
    EquilibriumData {
        location,
        eigenvalues: [
            Complex::new(p.a, p.omega),
            Complex::new(p.a, -p.omega),
            Complex::new(kappa, 0.0),
        ],
        focus_basis: [ex, ey],
        axial_direction,
        focus_left: [inv.row(0).transpose(), inv.row(1).transpose()],
        axial_left: inv.row(2).transpose(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn radii_examples() {
        let (rs, ru) = orbit_radii(0.1, 1.0).unwrap();
        assert_relative_eq!(rs, 0.112702, epsilon = 5e-7);
        assert_relative_eq!(ru, 0.887298, epsilon = 5e-7);
        for r in [rs, ru] {
            assert!((0.1 - r + r * r).abs() < 1e-14);
        }
        let (rs, ru) = orbit_radii(0.25, 1.0).unwrap();
        assert_relative_eq!(rs, 0.5, epsilon = 1e-15);
        assert_relative_eq!(ru, 0.5, epsilon = 1e-15);
        assert!(orbit_radii(0.0, 1.0).unwrap_err().to_string().contains("Hopf"));
        assert!(orbit_radii(0.3, 1.0).unwrap_err().to_string().contains("fold"));
    }

    #[test]
    fn orbit_parameterisation_is_on_the_circle() {
        let p = SystemParams::default();
        let o = FrozenPeriodicOrbit::limit(Limit::Future, Stability::Unstable, &p).unwrap();
        for k in 0..7 {
            let g = o.point(k as f64);
            assert_relative_eq!(model::offset_sq(&g), o.squared_radius, epsilon = 1e-14);
            assert_eq!(g[2], 8.0);
            let f = model::frozen_field(&g, o.lambda, &p);
            assert_relative_eq!(f * (1.0 / p.omega), o.tangent(k as f64), epsilon = 1e-13);
        }
        assert!(o.squared_radius > 0.5);
        assert!(FrozenPeriodicOrbit::limit(Limit::Past, Stability::Stable, &p).unwrap().squared_radius < 0.5);
    }

    #[test]
    fn equilibrium_bases() {
        let p = SystemParams::default();
        for which in [Limit::Past, Limit::Future] {
            let e = equilibrium_data(which, &p);
            let j = model::jacobian(&e.location, &p);
            let k = e.eigenvalues[2].re;
            assert_relative_eq!(j * e.axial_direction, e.axial_direction * k, epsilon = 1e-13);
            assert!(e.axial_direction[2].abs() > 0.1);
            // focus plane is invariant: its image has no Λ-part
            for v in e.focus_basis {
                assert_eq!((j * v)[2], 0.0);
            }
            assert_relative_eq!(e.axial_left.dot(&e.axial_direction), 1.0, epsilon = 1e-14);
            assert!(e.focus_left[0].dot(&e.axial_direction).abs() < 1e-14);
            // left eigenvector of the axial eigenvalue
            assert_relative_eq!(j.transpose() * e.axial_left, e.axial_left * k, epsilon = 1e-13);
        }
        assert_relative_eq!(equilibrium_data(Limit::Future, &p).eigenvalues[2].re, -0.8);
        assert_relative_eq!(equilibrium_data(Limit::Past, &p).eigenvalues[2].re, 0.8);
    }

    /// Periodic Λ-bundle of `Γˢ₋` from the rotating-frame solution of the
    /// forced linear equations for its radial and angular parts.
    fn analytic_axial_bundle(theta: f64, p: &SystemParams) -> Vector3<f64> {
        let (rs, _) = orbit_radii(p.a, p.b).unwrap();
        let mu = 2.0 * rs * (2.0 * rs - p.b);
        let kappa = p.r * p.lambda_max;
        let w = p.omega;
        let k = mu - kappa;
        let alpha = kappa * (k * theta.cos() - w * theta.sin()) / (w * w + k * k);
        let beta = kappa * (-w * theta.cos() + kappa * theta.sin()) / (w * w + kappa * kappa);
        let (c, s) = (theta.cos(), theta.sin());
        Vector3::new(alpha * c - beta * s + 1.0, alpha * s + beta * c, 1.0)
    }

    #[test]
    fn floquet_of_past_stable_orbit() {
        let p = SystemParams::default();
        let o = FrozenPeriodicOrbit::limit(Limit::Past, Stability::Stable, &p).unwrap();
        let d = floquet(&o, &p, &FloquetConfig::default()).unwrap();
        let t = p.orbit_period();
        let (rs, _) = orbit_radii(p.a, p.b).unwrap();
        let expect = [(2.0 * rs * (2.0 * rs - 1.0) * t).exp(), 1.0, (p.r * p.lambda_max * t).exp()];
        for (b, e) in d.multipliers().iter().zip(expect) {
            assert_relative_eq!(*b, e, max_relative = 1e-8);
        }
        let prod: f64 = d.multipliers().iter().product();
        assert_relative_eq!(prod, o.liouville_product(&p), max_relative = 1e-8);
        for dir in [&d.stable, &d.center, &d.unstable] {
            let g0 = dir.mesh[0];
            let g1 = *dir.mesh.last().unwrap();
            assert_relative_eq!(g0.norm(), 1.0, epsilon = 1e-10);
            assert_relative_eq!(g1, g0 * dir.multiplier, epsilon = 1e-8);
            assert!(g0.iter().find(|c| c.abs() > 1e-10).unwrap() > &0.0);
        }
        // radial and tangential
        assert!(d.stable.mesh[0][1].abs() < 1e-8 && d.stable.mesh[0][2].abs() < 1e-8);
        assert!(d.center.mesh[0][0].abs() < 1e-8 && d.center.mesh[0][2].abs() < 1e-8);

        let bundle = FloquetBundle::new(d, 256, &FloquetConfig::default().bvp.integrator).unwrap();
        for k in 0..23 {
            let th = 0.37 * k as f64;
            let f = bundle.frame(th);
            let exact = analytic_axial_bundle(th, &p).normalize();
            let got = f.right[2] * f.right[2].dot(&exact).signum();
            assert_relative_eq!(got, exact, epsilon = 1e-8);
            let radial = Vector3::new(th.cos(), th.sin(), 0.0);
            assert_relative_eq!(f.right[0].dot(&radial).abs(), 1.0, epsilon = 1e-8);
            let m = Matrix3::from_rows(&[f.left[0].transpose(), f.left[1].transpose(), f.left[2].transpose()])
                * Matrix3::from_columns(&f.right);
            assert_relative_eq!(m, Matrix3::identity(), epsilon = 1e-12);
        }
    }

    #[test]
    fn floquet_of_future_unstable_orbit() {
        let p = SystemParams::default();
        let o = FrozenPeriodicOrbit::limit(Limit::Future, Stability::Unstable, &p).unwrap();
        let d = floquet(&o, &p, &FloquetConfig::default()).unwrap();
        let t = p.orbit_period();
        let (_, ru) = orbit_radii(p.a, p.b).unwrap();
        assert_relative_eq!(d.stable.multiplier, (-p.r * p.lambda_max * t).exp(), max_relative = 1e-8);
        assert_relative_eq!(d.unstable.multiplier, (2.0 * ru * (2.0 * ru - 1.0) * t).exp(), max_relative = 1e-8);
        assert_relative_eq!(d.center.multiplier, 1.0, epsilon = 1e-8);
        assert!(d.stable.mesh[0][2].abs() > 0.1);
    }
}
