//! Multipoint boundary-value problems by multiple shooting and damped Newton,
//! plus pseudo-arclength continuation of solution families.
//!
//! A problem is a list of ODE segments on `s ∈ [0, 1]` (any time scale is
//! folded into the right-hand side), a vector of scalar parameters and a
//! boundary residual on the segment end points. Each segment is cut into
//! `subintervals` shooting intervals whose start states are Newton unknowns;
//! continuity between consecutive intervals adds the matching equations.
//!
//! Newton Jacobians are forward finite differences. A column for a node state
//! only re-integrates the one interval that node starts, so a Jacobian costs
//! about `N + (params that enter the vector field)` full integrations.

use nalgebra::{DMatrix, DVector, SVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::integrator::{Integrator, IntegratorConfig, OdeSystem};

/// A boundary-value problem with `num_segments` segments of dimension `N`.
pub trait BvpProblem<const N: usize>: Sync {
    fn num_segments(&self) -> usize;
    fn num_params(&self) -> usize;
    fn num_conditions(&self) -> usize;

    /// `dy/ds` on segment `segment`.
    fn rhs(&self, segment: usize, s: f64, y: &SVector<f64, N>, params: &[f64]) -> SVector<f64, N>;

    /// Whether parameter `p` enters [`BvpProblem::rhs`]; parameters that only
    /// appear in the boundary conditions need no re-integration.
    fn rhs_uses_param(&self, _p: usize) -> bool {
        true
    }

    /// Writes `num_conditions` residuals.
    fn boundary(
        &self,
        starts: &[SVector<f64, N>],
        ends: &[SVector<f64, N>],
        params: &[f64],
        out: &mut [f64],
    );
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BvpConfig {
    pub subintervals: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub max_halvings: usize,
    pub integrator: IntegratorConfig,
    /// Ratio of smallest to largest singular value below which the Newton
    /// matrix is reported as rank deficient.
    pub singular_rcond: f64,
}

impl Default for BvpConfig {
    fn default() -> Self {
        Self {
            subintervals: 10,
            tol: 1e-9,
            max_iter: 30,
            fd_step: 1e-4,
            max_halvings: 8,
            integrator: IntegratorConfig::default(),
            singular_rcond: 1e-13,
        }
    }
}

#[derive(Debug, Error, Clone)]
pub enum BvpError {
    #[error("boundary-value system is not square: {unknowns} unknowns vs {equations} equations")]
    NotSquare { unknowns: usize, equations: usize },
    #[error("guess has the wrong shape: {0}")]
    BadGuess(String),
    #[error("integration failed on segment {segment}, interval {interval}: {message}")]
    Integration {
        segment: usize,
        interval: usize,
        message: String,
    },
    #[error("Newton did not converge in {iterations} iterations (best residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },
    #[error("Newton matrix is rank deficient (rcond {rcond:e})")]
    RankDeficient {
        rcond: f64,
        null_direction: Vec<f64>,
        iterate: Vec<f64>,
    },
}

/// Node states and parameters of a multiple-shooting discretisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BvpGuess<const N: usize> {
    /// `nodes[segment][k]` is the state at `s = k / subintervals`.
    pub nodes: Vec<Vec<SVector<f64, N>>>,
    pub params: Vec<f64>,
}

/// A converged multiple-shooting solution.
#[derive(Debug, Clone, PartialEq)]
pub struct BvpSolution<const N: usize> {
    /// `mesh[segment]` holds `subintervals + 1` states at `s = k / subintervals`;
    /// the last entry is the integrated end point.
    pub mesh: Vec<Vec<SVector<f64, N>>>,
    pub params: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl<const N: usize> BvpSolution<N> {
    pub fn start(&self, segment: usize) -> &SVector<f64, N> {
        &self.mesh[segment][0]
    }

    pub fn end(&self, segment: usize) -> &SVector<f64, N> {
        self.mesh[segment].last().expect("non-empty mesh")
    }

    /// The node part of the solution, reusable as a warm start.
    pub fn to_guess(&self) -> BvpGuess<N> {
        BvpGuess {
            nodes: self
                .mesh
                .iter()
                .map(|m| m[..m.len() - 1].to_vec())
                .collect(),
            params: self.params.clone(),
        }
    }
}

struct SegmentOde<'a, P: ?Sized, const N: usize> {
    problem: &'a P,
    segment: usize,
    params: &'a [f64],
}

impl<P: BvpProblem<N> + ?Sized, const N: usize> OdeSystem<N> for SegmentOde<'_, P, N> {
    fn rhs(&self, s: f64, y: &SVector<f64, N>) -> SVector<f64, N> {
        self.problem.rhs(self.segment, s, y, self.params)
    }
}

/// The discretised problem: unknown layout, residual and Jacobian.
pub struct Shooting<'p, P: ?Sized, const N: usize> {
    problem: &'p P,
    pub config: BvpConfig,
    integrator: Integrator,
    segments: usize,
    params: usize,
    m: usize,
}

impl<'p, P: BvpProblem<N> + ?Sized, const N: usize> Shooting<'p, P, N> {
    /// Builds the discretisation and checks that it is square once
    /// `free_params` of the parameters are released for continuation.
    pub fn new(problem: &'p P, config: BvpConfig, free_params: usize) -> Result<Self, BvpError> {
        let segments = problem.num_segments();
        let params = problem.num_params();
        let m = config.subintervals.max(1);
        let s = Self {
            problem,
            config,
            integrator: Integrator::new(IntegratorConfig {
                escape_radius_sq: f64::INFINITY,
                ..config.integrator
            }),
            segments,
            params,
            m,
        };
        let unknowns = s.num_unknowns();
        let equations = s.num_equations() + free_params;
        if unknowns != equations {
            return Err(BvpError::NotSquare {
                unknowns,
                equations,
            });
        }
        Ok(s)
    }

    pub fn num_unknowns(&self) -> usize {
        self.segments * self.m * N + self.params
    }

    pub fn num_equations(&self) -> usize {
        self.segments * (self.m - 1) * N + self.problem.num_conditions()
    }

    fn node_offset(&self, seg: usize, k: usize) -> usize {
        (seg * self.m + k) * N
    }

    fn param_offset(&self) -> usize {
        self.segments * self.m * N
    }

    pub fn pack(&self, guess: &BvpGuess<N>) -> Result<DVector<f64>, BvpError> {
        if guess.nodes.len() != self.segments || guess.params.len() != self.params {
            return Err(BvpError::BadGuess(format!(
                "expected {} segments and {} params, got {} and {}",
                self.segments,
                self.params,
                guess.nodes.len(),
                guess.params.len()
            )));
        }
        let mut x = DVector::zeros(self.num_unknowns());
        for (seg, nodes) in guess.nodes.iter().enumerate() {
            if nodes.len() != self.m {
                return Err(BvpError::BadGuess(format!(
                    "segment {seg} has {} nodes, expected {}",
                    nodes.len(),
                    self.m
                )));
            }
            for (k, y) in nodes.iter().enumerate() {
                x.rows_mut(self.node_offset(seg, k), N).copy_from(y);
            }
        }
        let po = self.param_offset();
        for (i, p) in guess.params.iter().enumerate() {
            x[po + i] = *p;
        }
        Ok(x)
    }

    fn node(&self, x: &DVector<f64>, seg: usize, k: usize) -> SVector<f64, N> {
        SVector::<f64, N>::from_iterator(x.rows(self.node_offset(seg, k), N).iter().copied())
    }

    fn params_of<'a>(&self, x: &'a DVector<f64>) -> &'a [f64] {
        &x.as_slice()[self.param_offset()..]
    }

    /// Integrates shooting interval `k` of segment `seg` from `y`.
    pub fn flow(
        &self,
        seg: usize,
        k: usize,
        y: &SVector<f64, N>,
        params: &[f64],
    ) -> Result<SVector<f64, N>, BvpError> {
        let ode = SegmentOde {
            problem: self.problem,
            segment: seg,
            params,
        };
        let s0 = k as f64 / self.m as f64;
        let s1 = (k + 1) as f64 / self.m as f64;
        self.integrator
            .propagate(&ode, y, s0, s1)
            .map(|e| e.state)
            .map_err(|e| BvpError::Integration {
                segment: seg,
                interval: k,
                message: e.to_string(),
            })
    }

    fn all_flows(&self, x: &DVector<f64>) -> Result<Vec<SVector<f64, N>>, BvpError> {
        let params = self.params_of(x);
        (0..self.segments * self.m)
            .into_par_iter()
            .map(|i| {
                let (seg, k) = (i / self.m, i % self.m);
                self.flow(seg, k, &self.node(x, seg, k), params)
            })
            .collect()
    }

    fn assemble(&self, x: &DVector<f64>, flows: &[SVector<f64, N>]) -> DVector<f64> {
        let mut f = DVector::zeros(self.num_equations());
        let mut row = 0;
        for seg in 0..self.segments {
            for k in 0..self.m - 1 {
                let d = self.node(x, seg, k + 1) - flows[seg * self.m + k];
                f.rows_mut(row, N).copy_from(&d);
                row += N;
            }
        }
        let starts: Vec<_> = (0..self.segments).map(|s| self.node(x, s, 0)).collect();
        let ends: Vec<_> = (0..self.segments)
            .map(|s| flows[s * self.m + self.m - 1])
            .collect();
        self.problem
            .boundary(&starts, &ends, self.params_of(x), &mut f.as_mut_slice()[row..]);
        f
    }

    pub fn residual(&self, x: &DVector<f64>) -> Result<DVector<f64>, BvpError> {
        let flows = self.all_flows(x)?;
        Ok(self.assemble(x, &flows))
    }

    /// Forward-difference Jacobian at `x`, given the interval flows there.
    fn jacobian_with(
        &self,
        x: &DVector<f64>,
        flows: &[SVector<f64, N>],
        f0: &DVector<f64>,
    ) -> Result<DMatrix<f64>, BvpError> {
        let n = self.num_unknowns();
        let po = self.param_offset();
        let h = self.config.fd_step;
        let cols: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|j| -> Result<DVector<f64>, BvpError> {
                let mut xp = x.clone();
                xp[j] += h;
                let fp = if j < po {
                    let (seg, k) = (j / N / self.m, (j / N) % self.m);
                    let mut fl = flows.to_vec();
                    fl[seg * self.m + k] =
                        self.flow(seg, k, &self.node(&xp, seg, k), self.params_of(&xp))?;
                    self.assemble(&xp, &fl)
                } else if self.problem.rhs_uses_param(j - po) {
                    let fl = self.all_flows(&xp)?;
                    self.assemble(&xp, &fl)
                } else {
                    self.assemble(&xp, flows)
                };
                Ok((fp - f0) / h)
            })
            .collect::<Result<_, _>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, BvpError> {
        let flows = self.all_flows(x)?;
        let f0 = self.assemble(x, &flows);
        self.jacobian_with(x, &flows, &f0)
    }

    pub fn unpack(&self, x: &DVector<f64>, residual_norm: f64, iterations: usize) -> Result<BvpSolution<N>, BvpError> {
        let flows = self.all_flows(x)?;
        let mesh = (0..self.segments)
            .map(|seg| {
                let mut v: Vec<_> = (0..self.m).map(|k| self.node(x, seg, k)).collect();
                v.push(flows[seg * self.m + self.m - 1]);
                v
            })
            .collect();
        Ok(BvpSolution {
            mesh,
            params: self.params_of(x).to_vec(),
            residual_norm,
            iterations,
        })
    }

    /// Samples the segments by integrating from their start states.
    pub fn guess_from_starts(
        &self,
        starts: &[SVector<f64, N>],
        params: &[f64],
    ) -> Result<BvpGuess<N>, BvpError> {
        let mut nodes = Vec::with_capacity(self.segments);
        for (seg, y0) in starts.iter().enumerate() {
            let mut v = vec![*y0];
            for k in 0..self.m - 1 {
                let next = self.flow(seg, k, &v[k], params)?;
                v.push(next);
            }
            nodes.push(v);
        }
        Ok(BvpGuess {
            nodes,
            params: params.to_vec(),
        })
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves `J dx = rhs`, reporting rank deficiency with the null direction.
fn solve_linear(
    j: &DMatrix<f64>,
    rhs: &DVector<f64>,
    rcond_min: f64,
    iterate: &DVector<f64>,
) -> Result<DVector<f64>, BvpError> {
    let lu = j.clone().lu();
    let diag = lu.u().diagonal();
    let (mn, mx) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), d| (a.min(d.abs()), b.max(d.abs())));
    let suspicious = !(mx > 0.0) || mn / mx < rcond_min * 10.0;
    if !suspicious {
        if let Some(dx) = lu.solve(rhs) {
            if dx.iter().all(|v| v.is_finite()) {
                return Ok(dx);
            }
        }
    }
    let svd = j.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if rcond < rcond_min {
        let vt = svd.v_t.as_ref().expect("requested V^T");
        return Err(BvpError::RankDeficient {
            rcond,
            null_direction: vt.row(imin).iter().copied().collect(),
            iterate: iterate.iter().copied().collect(),
        });
    }
    svd.solve(rhs, 0.0).map_err(|_| BvpError::RankDeficient {
        rcond,
        null_direction: vec![],
        iterate: iterate.iter().copied().collect(),
    })
}

/// Damped Newton on a square system given residual and Jacobian closures.
pub(crate) fn damped_newton(
    x0: DVector<f64>,
    residual: impl Fn(&DVector<f64>) -> Result<DVector<f64>, BvpError>,
    jacobian: impl Fn(&DVector<f64>, &DVector<f64>) -> Result<DMatrix<f64>, BvpError>,
    tol: f64,
    max_iter: usize,
    max_halvings: usize,
    rcond_min: f64,
) -> Result<(DVector<f64>, f64, usize), BvpError> {
    let mut x = x0;
    let mut f = residual(&x)?;
    let mut norm = inf_norm(&f);
    if !norm.is_finite() {
        return Err(BvpError::NoConvergence {
            iterations: 0,
            residual: norm,
            best: x.iter().copied().collect(),
        });
    }
    let mut best = (x.clone(), norm);
    for iter in 0..max_iter {
        if norm <= tol {
            return Ok((x, norm, iter));
        }
        let j = jacobian(&x, &f)?;
        let dx = solve_linear(&j, &(-&f), rcond_min, &x)?;
        let f2 = f.norm();
        let mut lambda = 1.0;
        let mut accepted = None;
        let mut last_ok = None;
        for _ in 0..=max_halvings {
            let xt = &x + &dx * lambda;
            if let Ok(ft) = residual(&xt) {
                if ft.iter().all(|v| v.is_finite()) {
                    if ft.norm() < f2 {
                        accepted = Some((xt, ft));
                        break;
                    }
                    last_ok = Some((xt, ft));
                }
            }
            lambda *= 0.5;
        }
        let Some((xn, fn_)) = accepted.or(last_ok) else {
            return Err(BvpError::NoConvergence {
                iterations: iter,
                residual: best.1,
                best: best.0.iter().copied().collect(),
            });
        };
        x = xn;
        f = fn_;
        norm = inf_norm(&f);
        if norm < best.1 {
            best = (x.clone(), norm);
        }
    }
    if norm <= tol {
        return Ok((x, norm, max_iter));
    }
    Err(BvpError::NoConvergence {
        iterations: max_iter,
        residual: best.1,
        best: best.0.iter().copied().collect(),
    })
}

/// Solves a square boundary-value problem from `guess`.
pub fn solve<P: BvpProblem<N> + ?Sized, const N: usize>(
    problem: &P,
    guess: &BvpGuess<N>,
    config: &BvpConfig,
) -> Result<BvpSolution<N>, BvpError> {
    let sh = Shooting::new(problem, *config, 0)?;
    let x0 = sh.pack(guess)?;
    let (x, norm, it) = damped_newton(
        x0,
        |x| sh.residual(x),
        |x, f| {
            let flows = sh.all_flows(x)?;
            sh.jacobian_with(x, &flows, f)
        },
        config.tol,
        config.max_iter,
        config.max_halvings,
        config.singular_rcond,
    )?;
    sh.unpack(&x, norm, it)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContinuationConfig {
    /// Index of the continued parameter.
    pub param: usize,
    /// Initial direction of travel in the continued parameter (`±1`).
    pub direction: f64,
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub max_points: usize,
    /// The branch is truncated when the parameter leaves `[min, max]`.
    pub param_bounds: (f64, f64),
    pub stop_at_fold: bool,
    pub corrector_max_iter: usize,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            param: 0,
            direction: 1.0,
            initial_step: 0.01,
            min_step: 1e-7,
            max_step: 0.1,
            max_points: 200,
            param_bounds: (f64::NEG_INFINITY, f64::INFINITY),
            stop_at_fold: false,
            corrector_max_iter: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchPoint<const N: usize> {
    pub solution: BvpSolution<N>,
    /// Continued-parameter component of the unit tangent.
    pub param_tangent: f64,
    /// Set on the point right after the parameter tangent changed sign.
    pub fold: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchEnd {
    MaxPoints,
    LeftBounds,
    Fold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<const N: usize> {
    pub points: Vec<BranchPoint<N>>,
    pub end: BranchEnd,
}

impl<const N: usize> Branch<N> {
    pub fn folds(&self) -> impl Iterator<Item = (usize, &BranchPoint<N>)> {
        self.points.iter().enumerate().filter(|(_, p)| p.fold)
    }

    pub fn param_values(&self, param: usize) -> Vec<f64> {
        self.points.iter().map(|p| p.solution.params[param]).collect()
    }
}

#[derive(Debug, Error, Clone)]
pub enum ContinuationError<const N: usize> {
    #[error("continuation stalled: step fell below {min_step:e} after {} points", partial.points.len())]
    Stall { min_step: f64, partial: Branch<N> },
    #[error(transparent)]
    Bvp(#[from] BvpError),
}

/// Pseudo-arclength continuation of a one-parameter family.
///
/// `problem` must have one condition fewer than a square problem; parameter
/// `cfg.param` is the continuation parameter.
pub fn continue_solution<P: BvpProblem<N> + ?Sized, const N: usize>(
    problem: &P,
    start: &BvpSolution<N>,
    bvp: &BvpConfig,
    cfg: &ContinuationConfig,
) -> Result<Branch<N>, ContinuationError<N>> {
    let sh = Shooting::new(problem, *bvp, 1)?;
    let pidx = sh.param_offset() + cfg.param;
    let n = sh.num_unknowns();
    let mut x = sh.pack(&start.to_guess())?;

    // Initial tangent: null vector of J normalised with positive parameter
    // component times the requested direction.
    let tangent_from = |x: &DVector<f64>, prev: &DVector<f64>| -> Result<DVector<f64>, BvpError> {
        let j = sh.jacobian(x)?;
        let mut a = DMatrix::zeros(n, n);
        a.rows_mut(0, n - 1).copy_from(&j);
        a.row_mut(n - 1).copy_from(&prev.transpose());
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let t = solve_linear(&a, &rhs, bvp.singular_rcond, x)?;
        Ok(&t / t.norm())
    };
    let mut e = DVector::zeros(n);
    e[pidx] = cfg.direction.signum();
    let mut t = tangent_from(&x, &e)?;
    let corrected = |pred: &DVector<f64>, t: &DVector<f64>| {
        damped_newton(
            pred.clone(),
            |y| {
                let f = sh.residual(y)?;
                let mut g = DVector::zeros(n);
                g.rows_mut(0, n - 1).copy_from(&f);
                g[n - 1] = (y - pred).dot(t);
                Ok(g)
            },
            |y, _| {
                let j = sh.jacobian(y)?;
                let mut a = DMatrix::zeros(n, n);
                a.rows_mut(0, n - 1).copy_from(&j);
                a.row_mut(n - 1).copy_from(&t.transpose());
                Ok(a)
            },
            bvp.tol,
            cfg.corrector_max_iter,
            bvp.max_halvings,
            bvp.singular_rcond,
        )
    };

    let mut points = vec![BranchPoint {
        solution: sh.unpack(&x, start.residual_norm, 0)?,
        param_tangent: t[pidx],
        fold: false,
    }];
    let mut h = cfg.initial_step;
    while points.len() < cfg.max_points {
        let pred = &x + &t * h;
        match corrected(&pred, &t) {
            Ok((xn, norm, iters)) => {
                let tn = match tangent_from(&xn, &t) {
                    Ok(tn) => tn,
                    Err(_) => {
                        h *= 0.5;
                        if h < cfg.min_step {
                            return Err(ContinuationError::Stall {
                                min_step: cfg.min_step,
                                partial: Branch {
                                    points,
                                    end: BranchEnd::MaxPoints,
                                },
                            });
                        }
                        continue;
                    }
                };
                let fold = tn[pidx] * t[pidx] < 0.0;
                let p = xn[pidx];
                points.push(BranchPoint {
                    solution: sh.unpack(&xn, norm, iters)?,
                    param_tangent: tn[pidx],
                    fold,
                });
                x = xn;
                t = tn;
                if p < cfg.param_bounds.0 || p > cfg.param_bounds.1 {
                    return Ok(Branch {
                        points,
                        end: BranchEnd::LeftBounds,
                    });
                }
                if fold && cfg.stop_at_fold {
                    return Ok(Branch {
                        points,
                        end: BranchEnd::Fold,
                    });
                }
                if iters <= 3 {
                    h = (h * 1.5).min(cfg.max_step);
                }
            }
            Err(_) => {
                h *= 0.5;
                if h < cfg.min_step {
                    return Err(ContinuationError::Stall {
                        min_step: cfg.min_step,
                        partial: Branch {
                            points,
                            end: BranchEnd::MaxPoints,
                        },
                    });
                }
            }
        }
    }
    Ok(Branch {
        points,
        end: BranchEnd::MaxPoints,
    })
}
