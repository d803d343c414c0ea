//! Lin's method for connecting orbits of the extended system.
//!
//! Three kinds of connection are computed as two-segment boundary-value
//! problems split at the Lin section `Σ = {Λ = λmax/2}`:
//!
//! * PtoE, `W^u(Γˢ₋) ∩ W^s(Z₊)`: isolated in `r`, gives `r₀`;
//! * codimension-zero PtoP, `W^u(Γˢ₋) ∩ W^s(Γᵘ₊)`: transverse, exists in the
//!   partial-tipping region;
//! * codimension-one PtoP: the tangency at the ends of that region, found by
//!   adding the adjoint variational equation along the connection. Gives `r₁`
//!   (lower fold) and `r₂` (upper fold).
//!
//! The segment `w⁻` starts on the linear unstable bundle of `Γˢ₋` and ends in
//! `Σ`; `w⁺` starts in `Σ` and ends on the linear stable bundle of `Z₊` or
//! `Γᵘ₊`. The mismatch `w⁺(0) − w⁻(1) = ξ ℓ` is the Lin gap.
//!
//! Since `Λ` obeys its own logistic equation, the half time `T` of each
//! segment fixes how far from `Λ = 0` and `Λ = λmax` the segments start and
//! end: with `T = ln((λmax − δ)/δ)/(r λmax)` the departure point sits at
//! `Λ = δ` and the arrival point at `Λ = λmax − δ`.

use std::f64::consts::TAU;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::{Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::bvp::{
    self, BranchEnd, BvpConfig, BvpError, BvpGuess, BvpProblem, BvpSolution, ContinuationConfig,
    ContinuationError,
};
use crate::frozen::{self, FloquetBundle, FrozenError, Limit, Stability};
use crate::integrator::{ExtendedSystem, Integrator, IntegratorConfig};
use crate::model::{self, ExtendedState, ModelError, SystemParams};

const THETA: usize = 0;
const PHI: usize = 1;
const XI: usize = 2;
const RATE: usize = 3;
const A: usize = 4;
const NUM_PARAMS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ConnectionKind {
    Ptoe,
    Ptop0,
    Ptop1,
}

impl fmt::Display for ConnectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConnectionKind::Ptoe => "ptoe",
            ConnectionKind::Ptop0 => "ptop0",
            ConnectionKind::Ptop1 => "ptop1",
        })
    }
}

impl FromStr for ConnectionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ptoe" => Ok(Self::Ptoe),
            "ptop0" => Ok(Self::Ptop0),
            "ptop1" => Ok(Self::Ptop1),
            _ => Err(format!("unknown connection kind {s:?} (expected ptoe, ptop0 or ptop1)")),
        }
    }
}

/// Which vectors the projection boundary conditions are paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProjectionBasis {
    /// Dual (left) vectors: the condition holds exactly on the intended
    /// eigendirection.
    Adjoint,
    /// Inner products with the eigendirections themselves, as printed.
    Literal,
}

/// Extra condition closing the codimension-zero PtoP problem at fixed `(a, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PtopClosure {
    /// Keep `φ` at its guess value and solve for `ϑ` and `ξ`.
    ArrivalPhase,
    /// Keep `ϑ` at its guess value and solve for `φ` and `ξ`.
    DeparturePhase,
    /// `|w⁻(0) − g₁(ϑ)| = δ`. With the section pin this repeats information
    /// already fixed by `T`, so the Newton matrix is singular; kept for
    /// comparison.
    DepartureOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinSetup {
    pub lin_basis: Vector3<f64>,
    /// Distance in `Λ` of the segment end points from the limit planes.
    pub delta: f64,
    /// Multiplies the half time derived from `delta`.
    pub time_factor: f64,
    /// Shooting intervals per segment; `None` picks `max(10, ⌈T⌉)`.
    pub subintervals: Option<usize>,
    pub departure_basis: ProjectionBasis,
    pub arrival_basis: ProjectionBasis,
    pub closure: PtopClosure,
    /// `n` in the adjoint normalisation `⟨u⁻(1), n⟩ = 1`.
    pub adjoint_normal: Vector3<f64>,
    /// Phase samples of the section curves used for seeding.
    pub seed_samples: usize,
    /// Largest pseudo-arclength step when continuing a threshold in `a`.
    pub continuation_max_step: f64,
    pub continuation_max_points: usize,
    pub bvp: BvpConfig,
}

impl Default for LinSetup {
    fn default() -> Self {
        Self {
            lin_basis: Vector3::y(),
            delta: 1e-3,
            time_factor: 1.0,
            subintervals: None,
            departure_basis: ProjectionBasis::Adjoint,
            arrival_basis: ProjectionBasis::Adjoint,
            closure: PtopClosure::ArrivalPhase,
            adjoint_normal: Vector3::x(),
            seed_samples: 720,
            continuation_max_step: 0.5,
            continuation_max_points: 2000,
            bvp: BvpConfig {
                tol: 1e-9,
                max_iter: 40,
                ..BvpConfig::default()
            },
        }
    }
}

impl LinSetup {
    /// Scaled integration time of each segment.
    pub fn half_time(&self, r: f64, lambda_max: f64) -> f64 {
        self.time_factor * ((lambda_max - self.delta) / self.delta).ln() / (r * lambda_max)
    }

    /// `Λ` at the start of `w⁻`; by symmetry `w⁺` ends at `λmax` minus this.
    pub fn departure_level(&self, r: f64, lambda_max: f64) -> f64 {
        model::parameter_shift(-r * self.half_time(r, lambda_max), lambda_max)
    }

    fn intervals(&self, r: f64, lambda_max: f64) -> usize {
        self.subintervals
            .unwrap_or_else(|| (self.half_time(r, lambda_max).ceil() as usize).max(10))
    }
}

#[derive(Debug, Error, Clone)]
pub enum LinError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Frozen(#[from] FrozenError),
    #[error(transparent)]
    Bvp(#[from] BvpError),
    #[error("no {kind} seed found at a = {a}, r = {r}: {reason}")]
    NoSeed {
        kind: ConnectionKind,
        a: f64,
        r: f64,
        reason: String,
    },
    #[error("Lin gap does not change sign over [{lo}, {hi}] (xi = {xi_lo:e}, {xi_hi:e})")]
    Bracket {
        lo: f64,
        hi: f64,
        xi_lo: f64,
        xi_hi: f64,
    },
    #[error("codimension-zero branch ended ({end:?}) without a fold in r")]
    NoFold { end: BranchEnd },
    #[error("continuation stalled after {} points", partial.points.len())]
    Stall { partial: ContinuationCurve },
    #[error("Lin-space condition fails: rank {rank} < 2 (smallest singular value {sigma:e})")]
    LinSpace { rank: usize, sigma: f64 },
}

/// Checks made on every converged solution.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct LinDiagnostics {
    pub residual_norm: f64,
    pub iterations: usize,
    /// `|w⁺(0) − w⁻(1) − ξ ℓ|∞`.
    pub gap_identity_error: f64,
    /// `|⟨w⁻(1) − (0, 0, λmax/2), (0, 0, 1)⟩|`.
    pub section_error: f64,
    /// Departure projections in the configured basis.
    pub departure_projection: [f64; 2],
    pub arrival_projection: [f64; 2],
    /// Second singular value of the normalised `[W⁻, W⁺, ℓ]` in `Σ`.
    pub lin_space_sigma: f64,
    pub lin_space_rank: usize,
    /// Codimension one only: `⟨u⁺(1), γ_c⁺(φ)⟩ / max |u|`, the condition left
    /// out of the square system.
    pub dropped_adjoint_condition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinSolution {
    pub kind: ConnectionKind,
    pub params: SystemParams,
    pub theta: f64,
    /// Arrival phase on `Γᵘ₊`; `None` for PtoE.
    pub phi: Option<f64>,
    pub xi: f64,
    pub half_time: f64,
    pub subintervals: usize,
    /// `w⁻(s_k)`, `k = 0..=subintervals`.
    pub w_minus: Vec<Vector3<f64>>,
    pub w_plus: Vec<Vector3<f64>>,
    pub u_minus: Option<Vec<Vector3<f64>>>,
    pub u_plus: Option<Vec<Vector3<f64>>>,
    pub adjoint_normal: Vector3<f64>,
    pub diagnostics: LinDiagnostics,
}

impl LinSolution {
    pub fn rate(&self) -> f64 {
        self.params.r
    }

    fn param_vec(&self) -> Vec<f64> {
        let mut p = vec![0.0; NUM_PARAMS];
        p[THETA] = self.theta;
        p[PHI] = self.phi.unwrap_or(0.0);
        p[XI] = self.xi;
        p[RATE] = self.params.r;
        p[A] = self.params.a;
        p
    }

    fn state_guess(&self) -> BvpGuess<3> {
        let m = self.subintervals;
        BvpGuess {
            nodes: vec![self.w_minus[..m].to_vec(), self.w_plus[..m].to_vec()],
            params: self.param_vec(),
        }
    }

    fn adjoint_guess(&self) -> Option<BvpGuess<6>> {
        let (um, up) = (self.u_minus.as_ref()?, self.u_plus.as_ref()?);
        let m = self.subintervals;
        let join = |w: &[Vector3<f64>], u: &[Vector3<f64>]| -> Vec<Vector6<f64>> {
            (0..m).map(|k| stack(&w[k], &u[k])).collect()
        };
        Some(BvpGuess {
            nodes: vec![join(&self.w_minus, um), join(&self.w_plus, up)],
            params: self.param_vec(),
        })
    }
}

fn stack(w: &Vector3<f64>, u: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(w[0], w[1], w[2], u[0], u[1], u[2])
}

fn split(y: &Vector6<f64>) -> (Vector3<f64>, Vector3<f64>) {
    (y.fixed_rows::<3>(0).into_owned(), y.fixed_rows::<3>(3).into_owned())
}

fn with_params(base: &SystemParams, p: &[f64]) -> SystemParams {
    SystemParams {
        a: p[A],
        r: p[RATE],
        ..*base
    }
}

/// Frozen data the boundary conditions need at one `(a, r)`.
struct Geometry {
    departure: std::sync::Arc<FloquetBundle>,
    arrival: Option<std::sync::Arc<FloquetBundle>>,
    zplus: frozen::EquilibriumData,
}

impl Geometry {
    fn new(kind: ConnectionKind, p: &SystemParams) -> Result<Self, FrozenError> {
        Ok(Self {
            departure: frozen::limit_bundle(Limit::Past, Stability::Stable, p)?,
            arrival: match kind {
                ConnectionKind::Ptoe => None,
                _ => Some(frozen::limit_bundle(Limit::Future, Stability::Unstable, p)?),
            },
            zplus: frozen::equilibrium_data(Limit::Future, p),
        })
    }

    /// Departure residuals for the configured basis.
    fn departure(&self, w0: &ExtendedState, theta: f64, basis: ProjectionBasis) -> [f64; 2] {
        let f = self.departure.frame(theta);
        let d = w0 - self.departure.data.orbit.point(theta);
        match basis {
            ProjectionBasis::Adjoint => [d.dot(&f.left[0]), d.dot(&f.left[1])],
            ProjectionBasis::Literal => [d.dot(&f.right[0]), d.dot(&f.right[1])],
        }
    }

    fn arrival(&self, w1: &ExtendedState, phi: f64, basis: ProjectionBasis) -> [f64; 2] {
        match &self.arrival {
            None => {
                let e = w1 - self.zplus.location;
                match basis {
                    ProjectionBasis::Adjoint => [e.dot(&self.zplus.focus_left[0]), e.dot(&self.zplus.focus_left[1])],
                    ProjectionBasis::Literal => [e.dot(&self.zplus.focus_basis[0]), e.dot(&self.zplus.focus_basis[1])],
                }
            }
            Some(b) => {
                let f = b.frame(phi);
                let e = w1 - b.data.orbit.point(phi);
                match basis {
                    ProjectionBasis::Adjoint => [e.dot(&f.left[2]), e.dot(&f.left[1])],
                    ProjectionBasis::Literal => [e.dot(&f.right[2]), e.dot(&f.right[1])],
                }
            }
        }
    }
}

/// Segment equations and boundary conditions of the PtoE and PtoP problems.
struct GapProblem<'a> {
    base: SystemParams,
    kind: ConnectionKind,
    setup: &'a LinSetup,
    pins: Vec<(usize, f64)>,
    offset_closure: bool,
}

impl GapProblem<'_> {
    fn conditions(&self) -> usize {
        8 + self.pins.len() + self.offset_closure as usize
    }

    /// The eight state conditions; shared with the codimension-one problem.
    fn state_conditions(
        &self,
        geo: &Geometry,
        st: [&ExtendedState; 2],
        en: [&ExtendedState; 2],
        p: &[f64],
        out: &mut [f64],
    ) {
        let d = geo.departure(st[0], p[THETA], self.setup.departure_basis);
        let e = geo.arrival(en[1], p[PHI], self.setup.arrival_basis);
        out[0] = d[0];
        out[1] = d[1];
        out[2] = e[0];
        out[3] = e[1];
        out[4] = en[0][2] - self.base.lambda_max / 2.0;
        let g = st[1] - en[0] - self.setup.lin_basis * p[XI];
        out[5..8].copy_from_slice(g.as_slice());
    }

    fn pin_conditions(&self, p: &[f64], out: &mut [f64]) {
        for (o, (i, v)) in out.iter_mut().zip(&self.pins) {
            *o = p[*i] - v;
        }
    }
}

impl BvpProblem<3> for GapProblem<'_> {
    fn num_segments(&self) -> usize {
        2
    }
    fn num_params(&self) -> usize {
        NUM_PARAMS
    }
    fn num_conditions(&self) -> usize {
        self.conditions()
    }
    fn rhs(&self, _: usize, _: f64, y: &Vector3<f64>, p: &[f64]) -> Vector3<f64> {
        let mp = with_params(&self.base, p);
        model::extended_field(y, &mp) * self.setup.half_time(mp.r, mp.lambda_max)
    }
    fn rhs_uses_param(&self, i: usize) -> bool {
        i == RATE || i == A
    }
    fn boundary(&self, st: &[Vector3<f64>], en: &[Vector3<f64>], p: &[f64], out: &mut [f64]) {
        let mp = with_params(&self.base, p);
        let Ok(geo) = Geometry::new(self.kind, &mp) else {
            out.fill(f64::NAN);
            return;
        };
        self.state_conditions(&geo, [&st[0], &st[1]], [&en[0], &en[1]], p, out);
        self.pin_conditions(p, &mut out[8..8 + self.pins.len()]);
        if self.offset_closure {
            let d = st[0] - geo.departure.data.orbit.point(p[THETA]);
            out[8 + self.pins.len()] = d.norm() - self.setup.delta;
        }
    }
}

/// The codimension-one PtoP problem on `(w, u)`.
struct TangencyProblem<'a> {
    gap: GapProblem<'a>,
    normal: Vector3<f64>,
}

impl BvpProblem<6> for TangencyProblem<'_> {
    fn num_segments(&self) -> usize {
        2
    }
    fn num_params(&self) -> usize {
        NUM_PARAMS
    }
    fn num_conditions(&self) -> usize {
        15 + self.gap.pins.len()
    }
    fn rhs(&self, _: usize, _: f64, y: &Vector6<f64>, p: &[f64]) -> Vector6<f64> {
        let mp = with_params(&self.gap.base, p);
        let t = self.gap.setup.half_time(mp.r, mp.lambda_max);
        let (w, u) = split(y);
        stack(&model::extended_field(&w, &mp), &model::adjoint_field(&w, &u, &mp)) * t
    }
    fn rhs_uses_param(&self, i: usize) -> bool {
        i == RATE || i == A
    }
    fn boundary(&self, st: &[Vector6<f64>], en: &[Vector6<f64>], p: &[f64], out: &mut [f64]) {
        let mp = with_params(&self.gap.base, p);
        let Ok(geo) = Geometry::new(ConnectionKind::Ptop1, &mp) else {
            out.fill(f64::NAN);
            return;
        };
        let (w0m, u0m) = split(&st[0]);
        let (w1m, u1m) = split(&en[0]);
        let (w0p, u0p) = split(&st[1]);
        let (w1p, u1p) = split(&en[1]);
        self.gap.state_conditions(&geo, [&w0m, &w0p], [&w1m, &w1p], p, out);
        let fd = geo.departure.frame(p[THETA]);
        let fa = geo.arrival.as_ref().expect("PtoP geometry").frame(p[PHI]);
        out[8] = u0m.dot(&fd.right[2]);
        out[9] = u0m.dot(&fd.right[1]);
        out[10] = u1p.dot(&fa.right[0]);
        let c = u0p - u1m;
        out[11..14].copy_from_slice(c.as_slice());
        out[14] = u1m.dot(&self.normal) - 1.0;
        self.gap.pin_conditions(p, &mut out[15..]);
    }
}

fn solution_from_state(
    kind: ConnectionKind,
    problem: &GapProblem<'_>,
    sol: &BvpSolution<3>,
) -> LinSolution {
    let p = &sol.params;
    let mp = with_params(&problem.base, p);
    LinSolution {
        kind,
        params: mp,
        theta: p[THETA].rem_euclid(TAU),
        phi: (kind != ConnectionKind::Ptoe).then(|| p[PHI].rem_euclid(TAU)),
        xi: p[XI],
        half_time: problem.setup.half_time(mp.r, mp.lambda_max),
        subintervals: sol.mesh[0].len() - 1,
        w_minus: sol.mesh[0].clone(),
        w_plus: sol.mesh[1].clone(),
        u_minus: None,
        u_plus: None,
        adjoint_normal: problem.setup.adjoint_normal,
        diagnostics: LinDiagnostics {
            residual_norm: sol.residual_norm,
            iterations: sol.iterations,
            ..Default::default()
        },
    }
}

/// Departure point on the linear unstable bundle of `Γˢ₋` at level `Λ = level`.
fn departure_point(b: &FloquetBundle, theta: f64, level: f64) -> ExtendedState {
    let gu = b.frame(theta).right[2];
    b.data.orbit.point(theta) + gu * (level / gu[2])
}

/// Arrival point on the linear stable bundle of `Γᵘ₊` at `Λ = λmax − depth`.
fn arrival_point(b: &FloquetBundle, phi: f64, depth: f64) -> ExtendedState {
    let gs = b.frame(phi).right[0];
    b.data.orbit.point(phi) - gs * (depth / gs[2])
}

fn zplus_arrival_point(z: &frozen::EquilibriumData, depth: f64) -> ExtendedState {
    z.location - z.axial_direction * (depth / z.axial_direction[2])
}

fn integrator_for(setup: &LinSetup) -> Integrator {
    Integrator::new(setup.bvp.integrator)
}

/// Flows `y` over physical time `dt` (negative for backward) without escape.
fn flow(setup: &LinSetup, p: &SystemParams, y: &ExtendedState, dt: f64) -> Option<ExtendedState> {
    let sys = ExtendedSystem { params: *p };
    let e = integrator_for(setup).propagate(&sys, y, 0.0, dt).ok()?;
    (e.termination == crate::integrator::Termination::TimeReached).then_some(e.state)
}

/// Samples a segment at the shooting nodes, integrating from `s = from`
/// (`0` or `1`).
fn segment_nodes(
    setup: &LinSetup,
    p: &SystemParams,
    y: &ExtendedState,
    m: usize,
    from_end: bool,
) -> Option<Vec<ExtendedState>> {
    let t = setup.half_time(p.r, p.lambda_max);
    let h = t / m as f64;
    let mut v = vec![*y];
    for _ in 0..m {
        let next = flow(setup, p, v.last()?, if from_end { -h } else { h })?;
        v.push(next);
    }
    if from_end {
        v.reverse();
    }
    Some(v)
}

/// A closed curve in `Σ` sampled over a phase.
#[derive(Debug, Clone)]
pub struct SectionCurve {
    pub phases: Vec<f64>,
    /// `None` where the orbit escaped before reaching `Σ`.
    pub points: Vec<Option<ExtendedState>>,
}

impl SectionCurve {
    fn segments(&self) -> impl Iterator<Item = (usize, ExtendedState, ExtendedState)> + '_ {
        let n = self.points.len();
        (0..n).filter_map(move |i| {
            let (a, b) = (self.points[i]?, self.points[(i + 1) % n]?);
            // Skip jumps across a gap in the curve.
            ((a - b).norm() < 0.5).then_some((i, a, b))
        })
    }

    fn phase_at(&self, i: usize, t: f64) -> f64 {
        let n = self.phases.len();
        let (p0, mut p1) = (self.phases[i], self.phases[(i + 1) % n]);
        if p1 < p0 {
            p1 += TAU;
        }
        (p0 + t * (p1 - p0)).rem_euclid(TAU)
    }
}

/// `W^u(Γˢ₋) ∩ Σ` traced from the departure points.
pub fn departure_curve(p: &SystemParams, setup: &LinSetup, n: usize) -> Result<SectionCurve, LinError> {
    let b = frozen::limit_bundle(Limit::Past, Stability::Stable, p)?;
    let level = setup.departure_level(p.r, p.lambda_max);
    let t = setup.half_time(p.r, p.lambda_max);
    let phases: Vec<f64> = (0..n).map(|k| TAU * k as f64 / n as f64).collect();
    let integ = Integrator::new(IntegratorConfig {
        escape_radius_sq: 4.0,
        ..setup.bvp.integrator
    });
    let sys = ExtendedSystem { params: *p };
    let points = phases
        .par_iter()
        .map(|&th| {
            let e = integ.propagate(&sys, &departure_point(&b, th, level), 0.0, t).ok()?;
            (e.termination == crate::integrator::Termination::TimeReached).then_some(e.state)
        })
        .collect();
    Ok(SectionCurve { phases, points })
}

/// `W^s(Γᵘ₊) ∩ Σ` traced backward from the arrival points.
pub fn arrival_curve(p: &SystemParams, setup: &LinSetup, n: usize) -> Result<SectionCurve, LinError> {
    let b = frozen::limit_bundle(Limit::Future, Stability::Unstable, p)?;
    let depth = setup.departure_level(p.r, p.lambda_max);
    let t = setup.half_time(p.r, p.lambda_max);
    let phases: Vec<f64> = (0..n).map(|k| TAU * k as f64 / n as f64).collect();
    let points = phases
        .par_iter()
        .map(|&ph| flow(setup, p, &arrival_point(&b, ph, depth), -t))
        .collect();
    Ok(SectionCurve { phases, points })
}

/// `W^s(Z₊) ∩ Σ`.
pub fn zplus_section_point(p: &SystemParams, setup: &LinSetup) -> Option<ExtendedState> {
    let z = frozen::equilibrium_data(Limit::Future, p);
    let depth = setup.departure_level(p.r, p.lambda_max);
    flow(setup, p, &zplus_arrival_point(&z, depth), -setup.half_time(p.r, p.lambda_max))
}

/// Solves a state problem from a guess.
fn solve_state(
    kind: ConnectionKind,
    base: &SystemParams,
    setup: &LinSetup,
    pins: Vec<(usize, f64)>,
    offset_closure: bool,
    guess: &BvpGuess<3>,
) -> Result<LinSolution, LinError> {
    let problem = GapProblem {
        base: *base,
        kind,
        setup,
        pins,
        offset_closure,
    };
    let cfg = BvpConfig {
        subintervals: guess.nodes[0].len(),
        ..setup.bvp
    };
    let sol = bvp::solve(&problem, guess, &cfg)?;
    let mut out = solution_from_state(kind, &problem, &sol);
    diagnose(&mut out, setup)?;
    Ok(out)
}

fn rate_pins(a: f64, r: f64) -> Vec<(usize, f64)> {
    vec![(A, a), (RATE, r)]
}

/// Gap of the PtoE problem at `(a, r)`, warm-started from `guess`.
pub fn gap_ptoe(a: f64, r: f64, setup: &LinSetup, guess: &LinSolution) -> Result<LinSolution, LinError> {
    let base = guess.params;
    SystemParams { a, r, ..base }.require_periodic_orbits()?;
    let mut g = guess.state_guess();
    g.params[A] = a;
    g.params[RATE] = r;
    let mut pins = rate_pins(a, r);
    pins.push((PHI, 0.0));
    g.params[PHI] = 0.0;
    solve_state(ConnectionKind::Ptoe, &base, setup, pins, false, &g)
}

/// Gap of the codimension-zero PtoP problem at `(a, r)`, closed according to
/// [`LinSetup::closure`] with the phase values of `guess`.
pub fn gap_ptop(a: f64, r: f64, setup: &LinSetup, guess: &LinSolution) -> Result<LinSolution, LinError> {
    let base = guess.params;
    SystemParams { a, r, ..base }.require_periodic_orbits()?;
    let mut g = guess.state_guess();
    g.params[A] = a;
    g.params[RATE] = r;
    let mut pins = rate_pins(a, r);
    let mut offset = false;
    match setup.closure {
        PtopClosure::ArrivalPhase => pins.push((PHI, g.params[PHI])),
        PtopClosure::DeparturePhase => pins.push((THETA, g.params[THETA])),
        PtopClosure::DepartureOffset => offset = true,
    }
    solve_state(ConnectionKind::Ptop0, &base, setup, pins, offset, &g)
}

fn build_state_guess(
    kind: ConnectionKind,
    p: &SystemParams,
    setup: &LinSetup,
    theta: f64,
    phi: f64,
) -> Option<LinSolution> {
    let m = setup.intervals(p.r, p.lambda_max);
    let level = setup.departure_level(p.r, p.lambda_max);
    let dep = frozen::limit_bundle(Limit::Past, Stability::Stable, p).ok()?;
    let wm = segment_nodes(setup, p, &departure_point(&dep, theta, level), m, false)?;
    let end = match kind {
        ConnectionKind::Ptoe => zplus_arrival_point(&frozen::equilibrium_data(Limit::Future, p), level),
        _ => {
            let arr = frozen::limit_bundle(Limit::Future, Stability::Unstable, p).ok()?;
            arrival_point(&arr, phi, level)
        }
    };
    let mut wp = segment_nodes(setup, p, &end, m, true)?;
    // Shift w⁺ into Σ at the x of w⁻(1) so the gap lies along ℓ.
    let shift = wm[m] - wp[0];
    let xi = -shift.dot(&setup.lin_basis) / setup.lin_basis.norm_squared();
    let _ = &mut wp;
    Some(LinSolution {
        kind,
        params: *p,
        theta,
        phi: (kind != ConnectionKind::Ptoe).then_some(phi),
        xi,
        half_time: setup.half_time(p.r, p.lambda_max),
        subintervals: m,
        w_minus: wm,
        w_plus: wp,
        u_minus: None,
        u_plus: None,
        adjoint_normal: setup.adjoint_normal,
        diagnostics: LinDiagnostics::default(),
    })
}

/// All PtoE gap solutions at `(a, r)`: one per crossing of the line through
/// `W^s(Z₊) ∩ Σ` along `ℓ` with `W^u(Γˢ₋) ∩ Σ`, sorted by `ξ`.
pub fn seed_ptoe(p: &SystemParams, setup: &LinSetup) -> Result<Vec<LinSolution>, LinError> {
    p.require_periodic_orbits()?;
    let no_seed = |reason: &str| LinError::NoSeed {
        kind: ConnectionKind::Ptoe,
        a: p.a,
        r: p.r,
        reason: reason.into(),
    };
    let target = zplus_section_point(p, setup).ok_or_else(|| no_seed("W^s(Z+) did not reach the section"))?;
    let curve = departure_curve(p, setup, setup.seed_samples)?;
    // Crossings of the curve with the line target + t ℓ.
    let ell = setup.lin_basis.normalize();
    let normal = Vector3::new(-ell[1], ell[0], 0.0);
    let side = |w: &ExtendedState| (w - target).dot(&normal);
    let mut out = Vec::new();
    for (i, a0, b0) in curve.segments() {
        let (sa, sb) = (side(&a0), side(&b0));
        if sa == 0.0 || sa * sb < 0.0 {
            let t = sa / (sa - sb);
            let theta = curve.phase_at(i, t);
            let Some(g) = build_state_guess(ConnectionKind::Ptoe, p, setup, theta, 0.0) else {
                continue;
            };
            if let Ok(s) = gap_ptoe(p.a, p.r, setup, &g) {
                if !out.iter().any(|o: &LinSolution| (o.theta - s.theta).abs() < 1e-6) {
                    out.push(s);
                }
            }
        }
    }
    if out.is_empty() {
        return Err(no_seed("no crossing with the departure curve"));
    }
    out.sort_by(|x, y| x.xi.total_cmp(&y.xi));
    Ok(out)
}

/// Codimension-zero PtoP solutions at `(a, r)` at the intersections of the
/// departure and arrival curves, each with `φ` pinned at the intersection.
pub fn seed_ptop(p: &SystemParams, setup: &LinSetup) -> Result<Vec<LinSolution>, LinError> {
    p.require_periodic_orbits()?;
    let cm = departure_curve(p, setup, setup.seed_samples)?;
    let cp = arrival_curve(p, setup, setup.seed_samples)?;
    let segs_p: Vec<_> = cp.segments().collect();
    let mut hits = Vec::new();
    for (i, a0, a1) in cm.segments() {
        for (j, b0, b1) in &segs_p {
            if let Some((s, t)) = segment_intersection(&a0, &a1, b0, b1) {
                hits.push((cm.phase_at(i, s), cp.phase_at(*j, t)));
            }
        }
    }
    let setup0 = LinSetup {
        closure: PtopClosure::ArrivalPhase,
        ..*setup
    };
    let mut out: Vec<LinSolution> = Vec::new();
    for (theta, phi) in hits {
        let Some(g) = build_state_guess(ConnectionKind::Ptop0, p, setup, theta, phi) else {
            continue;
        };
        if let Ok(s) = gap_ptop(p.a, p.r, &setup0, &g) {
            if !out.iter().any(|o| (o.theta - s.theta).abs() < 1e-6 && o.phi == s.phi) {
                out.push(s);
            }
        }
    }
    if out.is_empty() {
        return Err(LinError::NoSeed {
            kind: ConnectionKind::Ptop0,
            a: p.a,
            r: p.r,
            reason: "departure and arrival curves do not intersect".into(),
        });
    }
    Ok(out)
}

fn segment_intersection(
    a0: &ExtendedState,
    a1: &ExtendedState,
    b0: &ExtendedState,
    b1: &ExtendedState,
) -> Option<(f64, f64)> {
    let (da, db) = (a1 - a0, b1 - b0);
    let den = da[0] * db[1] - da[1] * db[0];
    if den == 0.0 {
        return None;
    }
    let (ex, ey) = (b0[0] - a0[0], b0[1] - a0[1]);
    let s = (ex * db[1] - ey * db[0]) / den;
    let t = (ex * da[1] - ey * da[0]) / den;
    ((0.0..1.0).contains(&s) && (0.0..1.0).contains(&t)).then_some((s, t))
}

/// Fills the geometric diagnostics and asserts the Lin-space condition.
fn diagnose(sol: &mut LinSolution, setup: &LinSetup) -> Result<(), LinError> {
    let p = sol.params;
    let geo = Geometry::new(sol.kind, &p)?;
    let m = sol.subintervals;
    let (w0m, w1m, w0p, w1p) = (sol.w_minus[0], sol.w_minus[m], sol.w_plus[0], sol.w_plus[m]);
    let d = &mut sol.diagnostics;
    d.gap_identity_error = (w0p - w1m - setup.lin_basis * sol.xi).amax();
    d.section_error = (w1m[2] - p.lambda_max / 2.0).abs();
    d.departure_projection = geo.departure(&w0m, sol.theta, setup.departure_basis);
    d.arrival_projection = geo.arrival(&w1p, sol.phi.unwrap_or(0.0), setup.arrival_basis);

    // Tangents of the section curves by re-shooting at nearby phases.
    let h = 1e-5;
    let level = setup.departure_level(p.r, p.lambda_max);
    let t = sol.half_time;
    let shoot_dep = |th: f64| flow(setup, &p, &departure_point(&geo.departure, th, level), t);
    let mut cols = Vec::new();
    if let (Some(a), Some(b)) = (shoot_dep(sol.theta + h), shoot_dep(sol.theta - h)) {
        cols.push(a - b);
    }
    if let (Some(arr), Some(phi)) = (&geo.arrival, sol.phi) {
        let shoot = |ph: f64| flow(setup, &p, &arrival_point(arr, ph, level), -t);
        if let (Some(a), Some(b)) = (shoot(phi + h), shoot(phi - h)) {
            cols.push(a - b);
        }
    }
    cols.push(setup.lin_basis);
    let mut mat = nalgebra::DMatrix::zeros(2, cols.len());
    for (j, c) in cols.iter().enumerate() {
        let v = nalgebra::Vector2::new(c[0], c[1]);
        let n = v.norm();
        if n > 0.0 {
            mat.set_column(j, &(v / n));
        }
    }
    let sv = mat.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    d.lin_space_sigma = s.get(1).copied().unwrap_or(0.0);
    d.lin_space_rank = s.iter().filter(|&&x| x > 1e-6).count();
    if d.lin_space_rank < 2 {
        return Err(LinError::LinSpace {
            rank: d.lin_space_rank,
            sigma: d.lin_space_sigma,
        });
    }
    if let (Some(up), Some(arr), Some(phi)) = (&sol.u_plus, &geo.arrival, sol.phi) {
        let scale = up
            .iter()
            .chain(sol.u_minus.iter().flatten())
            .map(|u| u.norm())
            .fold(0.0, f64::max);
        d.dropped_adjoint_condition = Some(up[m].dot(&arr.frame(phi).right[1]) / scale);
    }
    Ok(())
}

/// Bracketed Newton iteration on a scalar function with a forward-difference
/// derivative, falling back to bisection whenever the Newton step leaves the
/// bracket. Stops when the step is below `tol`.
pub fn newton_bracketed<E>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    lo: f64,
    hi: f64,
    tol: f64,
    fd_step: f64,
    max_iter: usize,
) -> Result<Result<(f64, usize), (f64, f64, f64, f64)>, E> {
    let (mut lo, mut hi) = (lo.min(hi), lo.max(hi));
    let (mut flo, fhi) = (f(lo)?, f(hi)?);
    if flo == 0.0 {
        return Ok(Ok((lo, 0)));
    }
    if fhi == 0.0 {
        return Ok(Ok((hi, 0)));
    }
    if flo * fhi > 0.0 {
        return Ok(Err((lo, hi, flo, fhi)));
    }
    let mut x = if (flo - fhi).abs() > 0.0 {
        lo - flo * (hi - lo) / (fhi - flo)
    } else {
        0.5 * (lo + hi)
    };
    for it in 1..=max_iter {
        let fx = f(x)?;
        if fx == 0.0 {
            return Ok(Ok((x, it)));
        }
        if fx * flo < 0.0 {
            hi = x;
        } else {
            lo = x;
            flo = fx;
        }
        let h = if x + fd_step <= hi { fd_step } else { -fd_step };
        let slope = (f(x + h)? - fx) / h;
        let mut next = x - fx / slope;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if step < tol || hi - lo < tol {
            return Ok(Ok((x, it)));
        }
    }
    Ok(Ok((x, max_iter)))
}

/// A critical rate with the connection found there.
#[derive(Debug, Clone)]
pub struct CriticalRate {
    pub r: f64,
    pub solution: LinSolution,
    pub iterations: usize,
}

/// Solves along a branch of gap solutions, warm-starting from the nearest
/// rate already solved.
struct BranchTracker<'a> {
    setup: &'a LinSetup,
    a: f64,
    solved: Vec<LinSolution>,
    solve: fn(f64, f64, &LinSetup, &LinSolution) -> Result<LinSolution, LinError>,
}

impl BranchTracker<'_> {
    fn at(&mut self, r: f64) -> Result<LinSolution, LinError> {
        let near = self
            .solved
            .iter()
            .min_by(|x, y| (x.rate() - r).abs().total_cmp(&(y.rate() - r).abs()))
            .expect("seeded tracker")
            .clone();
        // March in small steps so the solve stays on the branch.
        let steps = ((r - near.rate()).abs() / 0.004).ceil().max(1.0) as usize;
        let mut cur = near;
        for k in 1..=steps {
            let rk = cur.rate() + (r - cur.rate()) / (steps - k + 1) as f64;
            cur = (self.solve)(self.a, rk, self.setup, &cur)?;
        }
        self.solved.push(cur.clone());
        Ok(cur)
    }
}

/// The PtoE critical rate `r₀` within `bracket`: Newton on `r ↦ ξ(a, r)`
/// with the step tolerance and difference step of `tol`, `fd_step`.
pub fn find_critical_rate(
    base: &SystemParams,
    a: f64,
    bracket: (f64, f64),
    setup: &LinSetup,
) -> Result<CriticalRate, LinError> {
    let (lo, hi) = (bracket.0.min(bracket.1), bracket.0.max(bracket.1));
    let p_lo = SystemParams { a, r: lo, ..*base };
    let seeds = seed_ptoe(&p_lo, setup)?;
    let mut last = None;
    for seed in seeds {
        let mut tr = BranchTracker {
            setup,
            a,
            solved: vec![seed],
            solve: gap_ptoe,
        };
        let res = newton_bracketed(|r| tr.at(r).map(|s| s.xi), lo, hi, 1e-5, 1e-4, 60);
        match res {
            Ok(Ok((r, iterations))) => {
                let solution = tr.at(r)?;
                // Polish ξ = 0 with r free.
                let polished = polish_ptoe(&solution, setup).unwrap_or(solution);
                return Ok(CriticalRate {
                    r: polished.rate(),
                    solution: polished,
                    iterations,
                });
            }
            Ok(Err((lo, hi, xi_lo, xi_hi))) => {
                last = Some(LinError::Bracket {
                    lo,
                    hi,
                    xi_lo,
                    xi_hi,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one seed"))
}

/// Re-solves a PtoE solution with `ξ = 0` imposed and `r` free.
fn polish_ptoe(sol: &LinSolution, setup: &LinSetup) -> Result<LinSolution, LinError> {
    let mut g = sol.state_guess();
    g.params[PHI] = 0.0;
    let pins = vec![(A, sol.params.a), (XI, 0.0), (PHI, 0.0)];
    solve_state(ConnectionKind::Ptoe, &sol.params, setup, pins, false, &g)
}

/// Which end of the partial-tipping interval a codimension-one connection
/// bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FoldBranch {
    /// `r₁`, onset of partial tipping.
    Lower,
    /// `r₂`, onset of total tipping.
    Upper,
}

impl FromStr for FoldBranch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lower" => Ok(Self::Lower),
            "upper" => Ok(Self::Upper),
            _ => Err(format!("unknown branch {s:?} (expected lower or upper)")),
        }
    }
}

fn continuation_defaults(param: usize, direction: f64) -> ContinuationConfig {
    ContinuationConfig {
        param,
        direction,
        initial_step: 0.01,
        min_step: 1e-6,
        max_step: 0.05,
        max_points: 400,
        param_bounds: (f64::NEG_INFINITY, f64::INFINITY),
        stop_at_fold: false,
        corrector_max_iter: 12,
    }
}

/// Continues a codimension-zero PtoP connection (`ξ = 0`) in `r` at fixed
/// `a` until the first fold in `r`.
pub fn continue_ptop_to_fold(
    seed: &LinSolution,
    direction: f64,
    setup: &LinSetup,
) -> Result<bvp::Branch<3>, LinError> {
    let base = seed.params;
    // Move onto ξ = 0 at the seed rate.
    let g = seed.state_guess();
    let start = solve_state(
        ConnectionKind::Ptop0,
        &base,
        setup,
        vec![(A, base.a), (RATE, base.r), (XI, 0.0)],
        false,
        &g,
    )?;
    let problem = GapProblem {
        base,
        kind: ConnectionKind::Ptop0,
        setup,
        pins: vec![(A, base.a), (XI, 0.0)],
        offset_closure: false,
    };
    let cfg = BvpConfig {
        subintervals: start.subintervals,
        ..setup.bvp
    };
    let start_sol = BvpSolution {
        mesh: vec![start.w_minus.clone(), start.w_plus.clone()],
        params: start.param_vec(),
        residual_norm: start.diagnostics.residual_norm,
        iterations: 0,
    };
    let cc = ContinuationConfig {
        param: RATE,
        stop_at_fold: true,
        param_bounds: (1e-3, 2.0),
        ..continuation_defaults(RATE, direction)
    };
    match bvp::continue_solution(&problem, &start_sol, &cfg, &cc) {
        Ok(b) if b.end == BranchEnd::Fold => Ok(b),
        Ok(b) => Err(LinError::NoFold { end: b.end }),
        Err(ContinuationError::Bvp(e)) => Err(e.into()),
        Err(ContinuationError::Stall { partial, .. }) => Err(LinError::NoFold { end: partial.end }),
    }
}

/// Builds the codimension-one guess at a point of the codimension-zero branch:
/// the adjoint starts along the dual stable vector of `Γˢ₋` and is carried
/// along both segments.
fn tangency_guess(sol: &BvpSolution<3>, base: &SystemParams, setup: &LinSetup) -> Result<LinSolution, LinError> {
    let p = &sol.params;
    let mp = with_params(base, p);
    let dep = frozen::limit_bundle(Limit::Past, Stability::Stable, &mp)?;
    let u0 = dep.frame(p[THETA]).left[0];
    let m = sol.mesh[0].len() - 1;
    let t = setup.half_time(mp.r, mp.lambda_max);
    let integ = integrator_for(setup);
    let sys = crate::integrator::AdjointSystem { params: mp };
    let carry = |w: &[Vector3<f64>], u0: Vector3<f64>| -> Result<Vec<Vector3<f64>>, LinError> {
        let mut u = vec![u0];
        for k in 0..m {
            let y = stack(&w[k], &u[k]);
            let e = integ
                .propagate(&sys, &y, 0.0, t / m as f64)
                .map_err(|e| BvpError::Integration {
                    segment: 0,
                    interval: k,
                    message: e.to_string(),
                })?;
            u.push(split(&e.state).1);
        }
        Ok(u)
    };
    let um = carry(&sol.mesh[0], u0)?;
    let up = carry(&sol.mesh[1], um[m])?;
    let mut normal = setup.adjoint_normal;
    let at_section = um[m];
    if at_section.dot(&normal).abs() < 1e-3 * at_section.norm() * normal.norm() {
        normal = at_section.normalize();
    }
    let scale = 1.0 / at_section.dot(&normal);
    let problem = GapProblem {
        base: *base,
        kind: ConnectionKind::Ptop1,
        setup,
        pins: vec![],
        offset_closure: false,
    };
    let mut out = solution_from_state(ConnectionKind::Ptop1, &problem, sol);
    out.u_minus = Some(um.iter().map(|u| u * scale).collect());
    out.u_plus = Some(up.iter().map(|u| u * scale).collect());
    out.adjoint_normal = normal;
    Ok(out)
}

fn solve_tangency(
    guess: &LinSolution,
    setup: &LinSetup,
    pins: Vec<(usize, f64)>,
) -> Result<LinSolution, LinError> {
    let g = guess.adjoint_guess().ok_or_else(|| LinError::NoSeed {
        kind: ConnectionKind::Ptop1,
        a: guess.params.a,
        r: guess.params.r,
        reason: "guess carries no adjoint segments".into(),
    })?;
    let problem = TangencyProblem {
        gap: GapProblem {
            base: guess.params,
            kind: ConnectionKind::Ptop1,
            setup,
            pins,
            offset_closure: false,
        },
        normal: guess.adjoint_normal,
    };
    let cfg = BvpConfig {
        subintervals: guess.subintervals,
        ..setup.bvp
    };
    let sol = bvp::solve(&problem, &g, &cfg)?;
    tangency_solution(&problem, &sol, setup)
}

fn tangency_solution(
    problem: &TangencyProblem<'_>,
    sol: &BvpSolution<6>,
    setup: &LinSetup,
) -> Result<LinSolution, LinError> {
    let state = BvpSolution {
        mesh: sol
            .mesh
            .iter()
            .map(|seg| seg.iter().map(|y| split(y).0).collect())
            .collect(),
        params: sol.params.clone(),
        residual_norm: sol.residual_norm,
        iterations: sol.iterations,
    };
    let mut out = solution_from_state(ConnectionKind::Ptop1, &problem.gap, &state);
    out.u_minus = Some(sol.mesh[0].iter().map(|y| split(y).1).collect());
    out.u_plus = Some(sol.mesh[1].iter().map(|y| split(y).1).collect());
    out.adjoint_normal = problem.normal;
    diagnose(&mut out, setup)?;
    Ok(out)
}

/// Codimension-one PtoP connection at fixed `a` from a guess carrying
/// adjoint segments; `r`, `ϑ`, `φ` are solved for with `ξ = 0`.
pub fn solve_codim1_ptop(guess: &LinSolution, setup: &LinSetup) -> Result<LinSolution, LinError> {
    solve_tangency(guess, setup, vec![(A, guess.params.a), (XI, 0.0)])
}

/// Default rate inside the partial-tipping region used to start the fold
/// search.
pub const PTOP_SEED_RATE: f64 = 0.15;

/// `r₁` (lower) or `r₂` (upper) at `a`: seeds a codimension-zero connection at
/// `seed_rate`, continues it in `r` to the fold and solves the
/// codimension-one problem there.
pub fn critical_ptop_rate(
    base: &SystemParams,
    a: f64,
    branch: FoldBranch,
    seed_rate: f64,
    setup: &LinSetup,
) -> Result<CriticalRate, LinError> {
    let (p, seeds) = seed_ptop_near(base, a, seed_rate, setup)?;
    let seed_rate = p.r;
    let direction = match branch {
        FoldBranch::Lower => -1.0,
        FoldBranch::Upper => 1.0,
    };
    let mut last = None;
    for seed in &seeds {
        let branch = match continue_ptop_to_fold(seed, direction, setup) {
            Ok(b) => b,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        let n = branch.points.len();
        let near = if n >= 2 && branch.points[n - 2].param_tangent.abs() < branch.points[n - 1].param_tangent.abs() {
            &branch.points[n - 2]
        } else {
            &branch.points[n - 1]
        };
        let fold_r = near.solution.params[RATE];
        let ok_side = match direction > 0.0 {
            true => fold_r > seed_rate,
            false => fold_r < seed_rate,
        };
        if !ok_side {
            last = Some(LinError::NoFold { end: branch.end });
            continue;
        }
        let result = tangency_guess(&near.solution, &p, setup).and_then(|g| solve_codim1_ptop(&g, setup));
        match result {
            Ok(sol) => {
                return Ok(CriticalRate {
                    r: sol.rate(),
                    iterations: sol.diagnostics.iterations,
                    solution: sol,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(LinError::NoFold { end: BranchEnd::MaxPoints }))
}

/// Seeds at `rate`, or failing that at the nearest rate on a 0.005 grid
/// around it where the partial-tipping band is hit.
fn seed_ptop_near(
    base: &SystemParams,
    a: f64,
    rate: f64,
    setup: &LinSetup,
) -> Result<(SystemParams, Vec<LinSolution>), LinError> {
    let mut first = None;
    for k in 0..=32 {
        let off = 0.005 * ((k + 1) / 2) as f64 * if k % 2 == 1 { -1.0 } else { 1.0 };
        let p = SystemParams { a, r: rate + off, ..*base };
        if p.r <= 0.0 {
            continue;
        }
        match seed_ptop(&p, setup) {
            Ok(s) => return Ok((p, s)),
            Err(e @ LinError::NoSeed { .. }) => {
                first.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(first.expect("at least one rate tried"))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CurvePoint {
    pub a: f64,
    pub r: f64,
    pub theta: f64,
    pub phi: Option<f64>,
    pub residual: f64,
}

/// Ordered `(a, r)` samples of a critical-rate curve.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ContinuationCurve {
    pub kind: ConnectionKind,
    pub points: Vec<CurvePoint>,
}

impl ContinuationCurve {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "a,r,kind,theta,phi,residual")?;
        for p in &self.points {
            let phi = p.phi.map(|v| format!("{v:.12}")).unwrap_or_default();
            writeln!(
                w,
                "{:.12},{:.12},{},{:.12},{},{:.3e}",
                p.a, p.r, self.kind, p.theta, phi, p.residual
            )?;
        }
        Ok(())
    }
}

fn curve_point(kind: ConnectionKind, params: &[f64], residual: f64) -> CurvePoint {
    CurvePoint {
        a: params[A],
        r: params[RATE],
        theta: params[THETA].rem_euclid(TAU),
        phi: (kind != ConnectionKind::Ptoe).then(|| params[PHI].rem_euclid(TAU)),
        residual,
    }
}

/// Continues a critical-rate curve in `a` over `a_range` from a converged
/// PtoE (`ξ = 0`) or codimension-one PtoP solution.
pub fn continue_threshold(
    seed: &LinSolution,
    a_range: (f64, f64),
    setup: &LinSetup,
) -> Result<ContinuationCurve, LinError> {
    let (lo, hi) = (a_range.0.min(a_range.1), a_range.0.max(a_range.1));
    let bounds = (lo.max(1e-6), hi.min(seed.params.b * seed.params.b / 4.0 - 1e-6));
    let kind = seed.kind;
    let mut pts: Vec<(CurvePoint, bool)> = Vec::new();
    let mut stalled = None;
    for direction in [-1.0, 1.0] {
        let cc = ContinuationConfig {
            param: A,
            param_bounds: bounds,
            max_step: setup.continuation_max_step,
            max_points: setup.continuation_max_points,
            initial_step: 0.005,
            ..continuation_defaults(A, direction)
        };
        let cfg = BvpConfig {
            subintervals: seed.subintervals,
            ..setup.bvp
        };
        let branch: Result<Vec<(Vec<f64>, f64)>, Option<Vec<(Vec<f64>, f64)>>> = match kind {
            ConnectionKind::Ptop1 => {
                let g = seed.adjoint_guess().expect("codimension-one seed");
                let start = BvpSolution {
                    mesh: g
                        .nodes
                        .iter()
                        .enumerate()
                        .map(|(i, n)| {
                            let mut v = n.clone();
                            let (w, u) = if i == 0 {
                                (&seed.w_minus, seed.u_minus.as_ref().unwrap())
                            } else {
                                (&seed.w_plus, seed.u_plus.as_ref().unwrap())
                            };
                            v.push(stack(&w[seed.subintervals], &u[seed.subintervals]));
                            v
                        })
                        .collect(),
                    params: g.params,
                    residual_norm: seed.diagnostics.residual_norm,
                    iterations: 0,
                };
                continue_tangency(seed, setup, start, &cfg, &cc)
            }
            _ => {
                let problem = GapProblem {
                    base: seed.params,
                    kind: ConnectionKind::Ptoe,
                    setup,
                    pins: vec![(XI, 0.0), (PHI, 0.0)],
                    offset_closure: false,
                };
                let mut params = seed.param_vec();
                params[PHI] = 0.0;
                let start = BvpSolution {
                    mesh: vec![seed.w_minus.clone(), seed.w_plus.clone()],
                    params,
                    residual_norm: seed.diagnostics.residual_norm,
                    iterations: 0,
                };
                collect_branch(bvp::continue_solution(&problem, &start, &cfg, &cc))
            }
        };
        let list = match branch {
            Ok(l) => l,
            Err(partial) => {
                stalled = Some(direction);
                partial.unwrap_or_default()
            }
        };
        for (params, res) in list {
            let pt = curve_point(kind, &params, res);
            if pt.a >= lo - 1e-12 && pt.a <= hi + 1e-12 {
                pts.push((pt, direction > 0.0));
            }
        }
    }
    pts.sort_by(|x, y| x.0.a.total_cmp(&y.0.a));
    pts.dedup_by(|x, y| (x.0.a - y.0.a).abs() < 1e-12);
    let curve = ContinuationCurve {
        kind,
        points: pts.into_iter().map(|p| p.0).collect(),
    };
    match stalled {
        Some(_) if curve.points.len() < 2 => Err(LinError::Stall { partial: curve }),
        _ => Ok(curve),
    }
}

/// Points per leg of the codimension-one continuation.
const TANGENCY_LEG: usize = 25;

/// Continues the tangency problem in legs. The adjoint normalisation
/// `⟨u⁻(1), n⟩ = 1` degenerates once `u⁻(1)` turns away from `n`, so each leg
/// restarts with `n` set to the current `u⁻(1)` direction and `u` rescaled.
#[allow(clippy::type_complexity)]
fn continue_tangency(
    seed: &LinSolution,
    setup: &LinSetup,
    mut start: BvpSolution<6>,
    cfg: &BvpConfig,
    cc: &ContinuationConfig,
) -> Result<Vec<(Vec<f64>, f64)>, Option<Vec<(Vec<f64>, f64)>>> {
    let mut normal = seed.adjoint_normal;
    let mut out: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut direction = cc.direction;
    while out.len() < cc.max_points {
        let problem = TangencyProblem {
            gap: GapProblem {
                base: seed.params,
                kind: ConnectionKind::Ptop1,
                setup,
                pins: vec![(XI, 0.0)],
                offset_closure: false,
            },
            normal,
        };
        let leg = ContinuationConfig {
            direction,
            max_points: TANGENCY_LEG.min(cc.max_points - out.len() + 1),
            ..*cc
        };
        let (branch, stalled) = match bvp::continue_solution(&problem, &start, cfg, &leg) {
            Ok(b) => (b, false),
            Err(ContinuationError::Stall { partial, .. }) => (partial, true),
            Err(ContinuationError::Bvp(_)) if out.is_empty() => return Err(None),
            Err(ContinuationError::Bvp(_)) => return Err(Some(out)),
        };
        let skip = usize::from(!out.is_empty());
        let fresh = branch.points.len().saturating_sub(skip);
        out.extend(
            branch
                .points
                .iter()
                .skip(skip)
                .map(|p| (p.solution.params.clone(), p.solution.residual_norm)),
        );
        if stalled {
            return Err(Some(out));
        }
        if branch.end != BranchEnd::MaxPoints || fresh == 0 {
            break;
        }
        let n = branch.points.len();
        let last = &branch.points[n - 1];
        direction = if last.param_tangent != 0.0 { last.param_tangent.signum() } else { direction };
        start = last.solution.clone();
        let (_, u1) = split(start.mesh[0].last().expect("segment nodes"));
        let scale = u1.norm();
        if !(scale > 0.0) {
            return Err(Some(out));
        }
        normal = u1 / scale;
        for seg in start.mesh.iter_mut() {
            for node in seg.iter_mut() {
                for k in 3..6 {
                    node[k] /= scale;
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::type_complexity)]
fn collect_branch<const N: usize>(
    r: Result<bvp::Branch<N>, ContinuationError<N>>,
) -> Result<Vec<(Vec<f64>, f64)>, Option<Vec<(Vec<f64>, f64)>>> {
    let conv = |b: bvp::Branch<N>| {
        b.points
            .into_iter()
            .map(|p| (p.solution.params, p.solution.residual_norm))
            .collect()
    };
    match r {
        Ok(b) => Ok(conv(b)),
        Err(ContinuationError::Stall { partial, .. }) => Err(Some(conv(partial))),
        Err(ContinuationError::Bvp(_)) => Err(None),
    }
}

/// A converged PtoE solution at the point of a threshold curve nearest `a`,
/// re-solved from scratch at that `a`.
pub fn ptoe_at(base: &SystemParams, a: f64, r: f64, setup: &LinSetup) -> Result<LinSolution, LinError> {
    let seeds = seed_ptoe(&SystemParams { a, r, ..*base }, setup)?;
    seeds
        .into_iter()
        .min_by(|x, y| x.xi.abs().total_cmp(&y.xi.abs()))
        .ok_or_else(|| LinError::NoSeed {
            kind: ConnectionKind::Ptoe,
            a,
            r,
            reason: "empty".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_time_places_segment_ends_at_delta() {
        let s = LinSetup::default();
        for r in [0.05, 0.133, 0.2] {
            let l0 = s.departure_level(r, 8.0);
            assert!((l0 - s.delta).abs() < 1e-12 * s.delta.max(1.0), "r = {r}: {l0}");
        }
        assert!(s.intervals(0.01, 8.0) > 10);
        assert_eq!(s.intervals(0.2, 8.0), 10);
    }

    #[test]
    fn bracketed_newton_on_known_function() {
        let root = 0.123_456_7;
        let f = |r: f64| Ok::<_, ()>((5.0 * (r - root)).tanh() + 0.1 * (r - root).powi(3));
        let (r, _) = newton_bracketed(f, 0.0, 0.5, 1e-5, 1e-4, 60).unwrap().unwrap();
        assert!((r - root).abs() < 1e-5);
        let none = newton_bracketed(|r: f64| Ok::<_, ()>(r * r + 1.0), -1.0, 1.0, 1e-5, 1e-4, 60).unwrap();
        assert!(none.is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [ConnectionKind::Ptoe, ConnectionKind::Ptop0, ConnectionKind::Ptop1] {
            assert_eq!(k.to_string().parse::<ConnectionKind>().unwrap(), k);
        }
        assert!("ptop2".parse::<ConnectionKind>().is_err());
        assert_eq!("upper".parse::<FoldBranch>().unwrap(), FoldBranch::Upper);
    }

    #[test]
    fn curve_csv_layout() {
        let c = ContinuationCurve {
            kind: ConnectionKind::Ptop1,
            points: vec![CurvePoint {
                a: 0.1,
                r: 0.13,
                theta: 1.0,
                phi: Some(2.0),
                residual: 1e-10,
            }],
        };
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "a,r,kind,theta,phi,residual");
        assert_eq!(lines[1].split(',').count(), 6);
        assert!(lines[1].contains(",ptop1,"));
    }

    #[test]
    fn ptoe_gap_changes_sign_across_root() {
        let setup = LinSetup::default();
        let seeds = seed_ptoe(&SystemParams::with_ar(0.1, 0.19), &setup).unwrap();
        let changes = seeds.iter().any(|s| {
            let mut tr = BranchTracker {
                setup: &setup,
                a: 0.1,
                solved: vec![s.clone()],
                solve: gap_ptoe,
            };
            let hi = tr.at(0.21).unwrap();
            hi.xi.signum() != s.xi.signum()
        });
        assert!(changes);
        for s in &seeds {
            assert!(s.diagnostics.gap_identity_error < 1e-8);
            assert!(s.diagnostics.section_error < 1e-8);
            assert!(s.diagnostics.departure_projection.iter().all(|v| v.abs() < 1e-8));
            assert!(s.diagnostics.arrival_projection.iter().all(|v| v.abs() < 1e-8));
        }
    }

    #[test]
    fn ptop_seeds_inside_partial_region_only() {
        let setup = LinSetup::default();
        let sols = seed_ptop(&SystemParams::with_ar(0.1, 0.15), &setup).unwrap();
        assert!(sols.len() >= 2);
        let phis: Vec<f64> = sols.iter().map(|s| s.phi.unwrap()).collect();
        assert!(phis.iter().any(|p| (p - phis[0]).abs() > 1e-3));
        for s in &sols {
            assert!(s.xi.abs() < 1e-3, "xi = {}", s.xi);
            assert_eq!(s.diagnostics.lin_space_rank, 2);
        }
        let tracking = seed_ptop(&SystemParams::with_ar(0.1, 0.1), &setup);
        assert!(matches!(tracking, Err(LinError::NoSeed { .. })));
    }

    #[test]
    fn departure_offset_closure_is_singular() {
        let setup = LinSetup::default();
        let seed = &seed_ptop(&SystemParams::with_ar(0.1, 0.15), &setup).unwrap()[0];
        let offset = LinSetup {
            closure: PtopClosure::DepartureOffset,
            ..setup
        };
        let res = gap_ptop(0.1, 0.15, &offset, seed);
        assert!(
            matches!(res, Err(LinError::Bvp(BvpError::RankDeficient { .. })) | Err(LinError::Bvp(BvpError::NoConvergence { .. }))),
            "{res:?}"
        );
        let theta_closed = LinSetup {
            closure: PtopClosure::DeparturePhase,
            ..setup
        };
        let s = gap_ptop(0.1, 0.15, &theta_closed, seed).unwrap();
        assert!((s.theta - seed.theta).abs() < 1e-9);
        assert!(s.xi.abs() < 1e-3);
    }
}
