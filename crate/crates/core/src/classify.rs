//! Ensemble shooting: tipping classification, pullback fibers and the
//! stable manifold of `Z₊`.
//!
//! Time is measured so that `Λ(0) = λmax/2`; a run covers `[−T, T]` with
//! `Λ(±T)` at distance `s` from the limits.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::frozen::orbit_radii;
use crate::integrator::{ExtendedSystem, Integrator, IntegratorConfig, Termination};
use crate::model::{self, ExtendedState, ModelError, SystemParams};

/// `T` such that `s ≤ Λ(t) ≤ λmax − s` exactly on `[−T, T]`.
pub fn integration_time(r: f64, lambda_max: f64, s: f64) -> f64 {
    ((lambda_max - s) / s).ln() / (r * lambda_max)
}

/// Ensemble size: 200 at `r ≤ 0.06`, 20000 at `r ≥ 0.24`, log-linear between.
pub fn ensemble_size_schedule(r: f64) -> usize {
    let t = ((r - 0.06) / 0.18).clamp(0.0, 1.0);
    (200.0 * 100f64.powf(t)).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShootingConfig {
    /// Ensemble size; `None` uses [`ensemble_size_schedule`].
    pub ensemble: Option<usize>,
    /// Margin of `Λ` from its limits at the ends of a run.
    pub s: f64,
    /// Outward radial offset of the seeds from the frozen stable orbit.
    pub seed_offset: f64,
    pub integrator: IntegratorConfig,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        Self {
            ensemble: None,
            s: 0.01,
            seed_offset: 1e-3,
            integrator: IntegratorConfig::default(),
        }
    }
}

impl ShootingConfig {
    pub fn ensemble_size(&self, r: f64) -> usize {
        self.ensemble.unwrap_or_else(|| ensemble_size_schedule(r))
    }

    pub fn validate(&self, p: &SystemParams) -> Result<(), ConfigError> {
        if let Some(m) = self.ensemble {
            if m < 2 {
                return Err(ConfigError::Ensemble(m));
            }
        }
        if !(self.s > 0.0 && self.s < p.lambda_max / 2.0) {
            return Err(ConfigError::Margin(self.s));
        }
        if !(self.seed_offset >= 0.0) {
            return Err(ConfigError::Offset(self.seed_offset));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("ensemble size must be at least 2, got {0}")]
    Ensemble(usize),
    #[error("margin s must lie in (0, lambda_max/2), got {0}")]
    Margin(f64),
    #[error("seed offset must be non-negative, got {0}")]
    Offset(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum TippingClass {
    Tracking,
    Partial,
    Total,
}

impl fmt::Display for TippingClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TippingClass::Tracking => "Tracking",
            TippingClass::Partial => "Partial",
            TippingClass::Total => "Total",
        })
    }
}

impl FromStr for TippingClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "tracking" => Ok(Self::Tracking),
            "partial" => Ok(Self::Partial),
            "total" => Ok(Self::Total),
            _ => Err(format!("unknown class {s:?}")),
        }
    }
}

/// Where `W^s(Z₊)` comes from in the past limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum PastLimit {
    /// `Z₋`.
    Equilibrium,
    /// `Γᵘ₋`.
    UnstableOrbit,
}

impl fmt::Display for PastLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PastLimit::Equilibrium => "Z-",
            PastLimit::UnstableOrbit => "Gu-",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Region {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl Region {
    /// Label of a `(class, past limit)` signature.
    ///
    /// The assignment puts the exemplar points `(a, r)` = (0.1, 0.1),
    /// (0.005, 0.157), (0.1, 0.15), (0.04, 0.18), (0.2, 0.15), (0.1, 0.21) in
    /// regions I to VI.
    pub fn from_signature(class: TippingClass, limit: PastLimit) -> Self {
        use PastLimit::*;
        use TippingClass::*;
        match (class, limit) {
            (Tracking, Equilibrium) => Region::I,
            (Tracking, UnstableOrbit) => Region::II,
            (Partial, Equilibrium) => Region::III,
            (Partial, UnstableOrbit) => Region::IV,
            (Total, Equilibrium) => Region::V,
            (Total, UnstableOrbit) => Region::VI,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Seeds: `m` evenly phased points on the circle of radius `ρ_s + offset`
/// about the frozen equilibrium at level `lambda`.
pub fn ring(p: &SystemParams, lambda: f64, offset: f64, m: usize) -> Result<Vec<(f64, ExtendedState)>, ModelError> {
    let (rs, _) = orbit_radii(p.a, p.b)?;
    let rho = rs.sqrt() + offset;
    Ok((0..m)
        .map(|k| {
            let th = TAU * k as f64 / m as f64;
            (th, model::extended_state(lambda + rho * th.cos(), rho * th.sin(), lambda))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TippingReport {
    pub a: f64,
    pub r: f64,
    pub class: TippingClass,
    pub tipped_fraction: f64,
    /// Maximal runs of tipped seed phases, `(first, last)`; an arc may wrap
    /// through zero.
    pub arcs: Vec<(f64, f64)>,
    pub ensemble: usize,
    pub half_time: f64,
    /// Members whose integration failed; they count in neither class.
    pub failed: usize,
    pub region: Option<Region>,
    pub past_limit: Option<PastLimit>,
    /// `false` when the backward end of `W^s(Z₊)` was too close to `ρ_s` to
    /// call even after a longer run.
    pub limit_resolved: bool,
}

impl TippingReport {
    pub fn degraded(&self) -> bool {
        self.failed > 0
    }
}

/// Fate of one ensemble member started at `Λ = s` and run for `2T`.
fn member_tipped(integ: &Integrator, p: &SystemParams, y0: &ExtendedState, span: f64, rho_u: f64) -> Option<bool> {
    let e = integ.propagate(&ExtendedSystem { params: *p }, y0, 0.0, span).ok()?;
    match e.termination {
        Termination::Escape => Some(true),
        Termination::TimeReached => {
            let dz = ((e.state[0] - p.lambda_max).powi(2) + e.state[1].powi(2)).sqrt();
            Some(dz > rho_u)
        }
        _ => None,
    }
}

fn arcs(phases: &[f64], tipped: &[bool]) -> Vec<(f64, f64)> {
    let m = tipped.len();
    let Some(start) = (0..m).find(|&k| !tipped[k]) else {
        return if m > 0 { vec![(phases[0], phases[m - 1])] } else { vec![] };
    };
    let mut out = Vec::new();
    let mut run: Option<usize> = None;
    for j in 1..=m {
        let k = (start + j) % m;
        match (tipped[k], run) {
            (true, None) => run = Some(k),
            (false, Some(b)) => {
                out.push((phases[b], phases[(k + m - 1) % m]));
                run = None;
            }
            _ => {}
        }
    }
    out
}

/// Classifies `(p.a, p.r)` by shooting an ensemble from near `Γˢ₋`.
pub fn classify_point(p: &SystemParams, cfg: &ShootingConfig) -> Result<TippingReport, ConfigError> {
    p.validate()?;
    p.require_periodic_orbits()?;
    cfg.validate(p)?;
    let m = cfg.ensemble_size(p.r);
    let t = integration_time(p.r, p.lambda_max, cfg.s);
    let (_, ru) = orbit_radii(p.a, p.b)?;
    let seeds = ring(p, cfg.s, cfg.seed_offset, m)?;
    let integ = Integrator::new(cfg.integrator);
    let fates: Vec<Option<bool>> = seeds
        .par_iter()
        .map(|(_, y)| member_tipped(&integ, p, y, 2.0 * t, ru.sqrt()))
        .collect();
    let failed = fates.iter().filter(|f| f.is_none()).count();
    let tipped: Vec<bool> = fates.iter().map(|f| f.unwrap_or(false)).collect();
    let n_tipped = tipped.iter().filter(|&&b| b).count();
    let valid = m - failed;
    let class = match n_tipped {
        0 => TippingClass::Tracking,
        n if n == valid => TippingClass::Total,
        _ => TippingClass::Partial,
    };
    let phases: Vec<f64> = seeds.iter().map(|s| s.0).collect();
    Ok(TippingReport {
        a: p.a,
        r: p.r,
        class,
        tipped_fraction: if valid > 0 { n_tipped as f64 / valid as f64 } else { f64::NAN },
        arcs: arcs(&phases, &tipped),
        ensemble: m,
        half_time: t,
        failed,
        region: None,
        past_limit: None,
        limit_resolved: true,
    })
}

/// Backward orbit of `W^s(Z₊)` from `(λmax, 0, λmax − s)` down to `Λ = s`.
#[derive(Debug, Clone)]
pub struct StableManifold {
    pub trajectory: crate::integrator::Trajectory<3>,
    pub past_limit: PastLimit,
    /// `|z − Λ|` at the backward end.
    pub end_distance: f64,
    pub resolved: bool,
}

fn backward_branch(p: &SystemParams, s_end: f64, cfg: &ShootingConfig) -> Result<(crate::integrator::Trajectory<3>, f64), String> {
    let start = model::extended_state(p.lambda_max, 0.0, p.lambda_max - cfg.s);
    let span = model::parameter_shift_inverse(p.lambda_max - cfg.s, p.lambda_max) / p.r
        - model::parameter_shift_inverse(s_end, p.lambda_max) / p.r;
    let integ = Integrator::new(IntegratorConfig {
        escape_radius_sq: f64::INFINITY,
        ..cfg.integrator
    });
    let traj = integ
        .integrate(&ExtendedSystem { params: *p }, &start, 0.0, -span)
        .map_err(|e| e.to_string())?;
    let d = model::offset_sq(traj.last_state()).sqrt();
    Ok((traj, d))
}

/// `W^s(Z₊)` traced backward and labelled by its past limit. An end distance
/// within 25% of `ρ_s` is retried once at a ten times smaller margin.
pub fn stable_manifold_zplus(p: &SystemParams, cfg: &ShootingConfig) -> Result<StableManifold, ConfigError> {
    p.require_periodic_orbits()?;
    cfg.validate(p)?;
    let (rs, _) = orbit_radii(p.a, p.b)?;
    let rho_s = rs.sqrt();
    let ambiguous = |d: f64| (d - rho_s).abs() < 0.25 * rho_s;
    let mut last = None;
    for s_end in [cfg.s, cfg.s / 10.0] {
        let Ok((traj, d)) = backward_branch(p, s_end, cfg) else {
            continue;
        };
        let done = !ambiguous(d);
        last = Some((traj, d));
        if done {
            break;
        }
    }
    let (trajectory, d) = last.ok_or(ConfigError::Model(ModelError::NonFinite { name: "W^s(Z+) orbit" }))?;
    Ok(StableManifold {
        trajectory,
        past_limit: if d < rho_s { PastLimit::Equilibrium } else { PastLimit::UnstableOrbit },
        end_distance: d,
        resolved: !ambiguous(d),
    })
}

/// [`classify_point`] plus the past limit of `W^s(Z₊)` and the region label.
pub fn classify_region(p: &SystemParams, cfg: &ShootingConfig) -> Result<TippingReport, ConfigError> {
    let mut rep = classify_point(p, cfg)?;
    let wsz = stable_manifold_zplus(p, cfg)?;
    rep.past_limit = Some(wsz.past_limit);
    rep.limit_resolved = wsz.resolved;
    rep.region = Some(Region::from_signature(rep.class, wsz.past_limit));
    Ok(rep)
}

/// One cell of a parameter sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepCell {
    pub a: f64,
    pub r: f64,
    pub report: Result<TippingReport, String>,
}

/// Classifies every `(a, r)` of the grid, row-major in `a`. The result order
/// does not depend on scheduling.
pub fn sweep(base: &SystemParams, a_grid: &[f64], r_grid: &[f64], cfg: &ShootingConfig, regions: bool) -> Vec<SweepCell> {
    let cells: Vec<(f64, f64)> = a_grid
        .iter()
        .flat_map(|&a| r_grid.iter().map(move |&r| (a, r)))
        .collect();
    cells
        .par_iter()
        .map(|&(a, r)| {
            let p = SystemParams { a, r, ..*base };
            let rep = if regions { classify_region(&p, cfg) } else { classify_point(&p, cfg) };
            SweepCell {
                a,
                r,
                report: rep.map_err(|e| e.to_string()),
            }
        })
        .collect()
}

/// Which end of the partial-tipping interval to locate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    /// Smallest `r` with a tipped member.
    Onset,
    /// Smallest `r` with every member tipped.
    Total,
}

/// Bisects the rate in `bracket` at which the classification crosses
/// `which`, to width `tol`. The ensemble size is fixed at the schedule value
/// for the upper end so that the phase grid does not change during the
/// search.
pub fn bisect_transition(
    base: &SystemParams,
    a: f64,
    bracket: (f64, f64),
    which: Transition,
    cfg: &ShootingConfig,
    tol: f64,
) -> Result<f64, ConfigError> {
    let cfg = ShootingConfig {
        ensemble: Some(cfg.ensemble_size(bracket.1)),
        ..*cfg
    };
    let past = |r: f64| -> Result<bool, ConfigError> {
        let rep = classify_point(&SystemParams { a, r, ..*base }, &cfg)?;
        Ok(match which {
            Transition::Onset => rep.tipped_fraction > 0.0,
            Transition::Total => rep.class == TippingClass::Total,
        })
    };
    let (mut lo, mut hi) = bracket;
    if past(lo)? || !past(hi)? {
        return Err(ConfigError::Model(ModelError::NonFinite { name: "transition bracket" }));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if past(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sampled fibers of the pullback attractor.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PullbackFiberSet {
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// `points[i][k]`: sample `k` at `times[i]`, `None` once it escaped.
    pub points: Vec<Vec<Option<[f64; 2]>>>,
    /// Time at which each sample escaped, if it did.
    pub escapes: Vec<Option<f64>>,
}

#[derive(serde::Serialize)]
struct FiberRecord<'a> {
    t: f64,
    #[serde(rename = "Lambda")]
    lambda: f64,
    points: Vec<&'a [f64; 2]>,
}

impl PullbackFiberSet {
    /// JSON array of `{t, Lambda, points}`; escaped samples are left out.
    pub fn to_json(&self) -> serde_json::Result<String> {
        let recs: Vec<FiberRecord<'_>> = self
            .times
            .iter()
            .zip(&self.lambdas)
            .zip(&self.points)
            .map(|((&t, &lambda), pts)| FiberRecord {
                t,
                lambda,
                points: pts.iter().flatten().collect(),
            })
            .collect();
        serde_json::to_string(&recs)
    }

    /// Semi-distance `sup_{x ∈ fiber} dist(x, Γˢ(Λ))` from the fiber at
    /// `times[i]` to the frozen stable orbit at the instantaneous `Λ`.
    pub fn semi_distance_to_frozen_orbit(&self, i: usize, p: &SystemParams) -> Result<f64, ModelError> {
        let (rs, _) = orbit_radii(p.a, p.b)?;
        let rho = rs.sqrt();
        let l = self.lambdas[i];
        let mut pts = self.points[i].iter().flatten().peekable();
        if pts.peek().is_none() {
            return Ok(f64::INFINITY);
        }
        Ok(pts.map(|q| ((q[0] - l).hypot(q[1]) - rho).abs()).fold(0.0, f64::max))
    }

    /// Hausdorff distance between the fiber at `times[i]` and the frozen
    /// stable orbit at the instantaneous `Λ`, the orbit sampled at
    /// `circle_samples` points.
    pub fn distance_to_frozen_orbit(&self, i: usize, p: &SystemParams, circle_samples: usize) -> Result<f64, ModelError> {
        let (rs, _) = orbit_radii(p.a, p.b)?;
        let rho = rs.sqrt();
        let l = self.lambdas[i];
        let pts: Vec<[f64; 2]> = self.points[i].iter().flatten().copied().collect();
        let to_circle = self.semi_distance_to_frozen_orbit(i, p)?;
        if pts.is_empty() {
            return Ok(f64::INFINITY);
        }
        let from_circle = (0..circle_samples)
            .map(|k| {
                let th = TAU * k as f64 / circle_samples as f64;
                let c = [l + rho * th.cos(), rho * th.sin()];
                pts.iter()
                    .map(|q| (q[0] - c[0]).hypot(q[1] - c[1]))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        Ok(to_circle.max(from_circle))
    }
}

/// Evolves a ring of `samples` seeds placed at `times[0]` about the frozen
/// stable orbit and records it on `times` (increasing). Escapes are recorded,
/// not treated as errors.
pub fn pullback_fibers(
    p: &SystemParams,
    cfg: &ShootingConfig,
    samples: usize,
    times: &[f64],
) -> Result<PullbackFiberSet, ConfigError> {
    p.require_periodic_orbits()?;
    cfg.validate(p)?;
    let (&t0, &t1) = (times.first().expect("time grid"), times.last().expect("time grid"));
    let lambda0 = model::parameter_shift(p.r * t0, p.lambda_max);
    let seeds = ring(p, lambda0, cfg.seed_offset, samples)?;
    let integ = Integrator::new(cfg.integrator);
    let sys = ExtendedSystem { params: *p };
    let runs: Vec<(Vec<Option<[f64; 2]>>, Option<f64>)> = seeds
        .par_iter()
        .map(|(_, y)| {
            let traj = match integ.integrate(&sys, y, t0, t1) {
                Ok(t) => t,
                Err(e) => e.partial().clone(),
            };
            let end = traj.last_time();
            let escaped = (traj.termination != Termination::TimeReached).then_some(end);
            let pts = times
                .iter()
                .map(|&t| {
                    (t <= end)
                        .then(|| traj.interpolate(t))
                        .flatten()
                        .map(|w| [w[0], w[1]])
                })
                .collect();
            (pts, escaped)
        })
        .collect();
    let points = (0..times.len())
        .map(|i| runs.iter().map(|(pts, _)| pts[i]).collect())
        .collect();
    Ok(PullbackFiberSet {
        times: times.to_vec(),
        lambdas: times
            .iter()
            .map(|&t| model::parameter_shift(p.r * t, p.lambda_max))
            .collect(),
        points,
        escapes: runs.iter().map(|r| r.1).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integration_time_examples() {
        let t = integration_time(0.1, 8.0, 0.01);
        assert!((t - 799f64.ln() / 0.8).abs() < 1e-12);
        assert!((t - 8.3542).abs() < 1e-4);
        assert!(integration_time(0.1, 8.0, 4.0).abs() < 1e-15);
        assert!((integration_time(0.2, 8.0, 0.01) - t / 2.0).abs() < 1e-12);
        // Λ(−T) = s
        assert!((model::parameter_shift(-0.1 * t, 8.0) - 0.01).abs() < 1e-14);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(ensemble_size_schedule(0.06), 200);
        assert_eq!(ensemble_size_schedule(0.01), 200);
        assert_eq!(ensemble_size_schedule(0.24), 20000);
        assert_eq!(ensemble_size_schedule(0.30), 20000);
        assert_eq!(ensemble_size_schedule(0.15), 2000);
        let mut prev = 0;
        for k in 0..=100 {
            let m = ensemble_size_schedule(0.003 * k as f64);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn arcs_wrap_through_zero() {
        let ph: Vec<f64> = (0..6).map(|k| k as f64).collect();
        let t = [true, false, false, true, true, true];
        assert_eq!(arcs(&ph, &t), vec![(3.0, 0.0)]);
        let t = [false, true, false, true, false, false];
        assert_eq!(arcs(&ph, &t), vec![(1.0, 1.0), (3.0, 3.0)]);
        assert!(arcs(&ph, &[false; 6]).is_empty());
        assert_eq!(arcs(&ph, &[true; 6]), vec![(0.0, 5.0)]);
    }

    #[test]
    fn signatures_map_to_distinct_regions() {
        use std::collections::HashSet;
        let mut seen = HashSet::new();
        for c in [TippingClass::Tracking, TippingClass::Partial, TippingClass::Total] {
            for l in [PastLimit::Equilibrium, PastLimit::UnstableOrbit] {
                assert!(seen.insert(Region::from_signature(c, l)));
            }
        }
    }

    #[test]
    fn config_validation() {
        let p = SystemParams::default();
        let bad = ShootingConfig {
            ensemble: Some(1),
            ..Default::default()
        };
        assert!(bad.validate(&p).is_err());
        let bad = ShootingConfig {
            s: 4.0,
            ..Default::default()
        };
        assert!(bad.validate(&p).is_err());
        assert!(classify_point(&SystemParams::with_ar(0.3, 0.1), &ShootingConfig::default()).is_err());
    }
}
