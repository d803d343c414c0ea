//! Adaptive Dormand–Prince 5(4) integration with cubic-Hermite dense output,
//! plane-crossing events and escape detection.
//!
//! Backward integration (`t1 < t0`) is handled by negative steps.

use nalgebra::{Matrix3, SVector, Vector3, Vector6};
use thiserror::Error;

use crate::model::{self, ExtendedState, SystemParams};

/// A (possibly nonautonomous) vector field on `R^N`.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &SVector<f64, N>) -> SVector<f64, N>;

    /// Quantity compared against [`IntegratorConfig::escape_radius_sq`].
    /// `None` disables escape detection.
    fn escape_metric(&self, _y: &SVector<f64, N>) -> Option<f64> {
        None
    }
}

impl<F, const N: usize> OdeSystem<N> for F
where
    F: Fn(f64, &SVector<f64, N>) -> SVector<f64, N>,
{
    fn rhs(&self, t: f64, y: &SVector<f64, N>) -> SVector<f64, N> {
        self(t, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Integration stops with [`Termination::Escape`] once the system's
    /// escape metric (for the extended system `|z − Λ|²`) reaches this value.
    pub escape_radius_sq: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-11,
            max_step: 1.0,
            escape_radius_sq: 4.0,
            max_steps: 5_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(mut self, rel_tol: f64, abs_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self.abs_tol = abs_tol;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Termination {
    TimeReached,
    Event,
    Escape,
}

#[derive(Debug, Error, Clone)]
pub enum IntegrationError<const N: usize> {
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64, partial: Trajectory<N> },
    #[error("exceeded {max_steps} steps at t = {t}")]
    TooManySteps {
        t: f64,
        max_steps: usize,
        partial: Trajectory<N>,
    },
    #[error("non-finite initial state or derivative at t = {t}")]
    NonFinite { t: f64, partial: Trajectory<N> },
}

impl<const N: usize> IntegrationError<N> {
    pub fn partial(&self) -> &Trajectory<N> {
        match self {
            Self::StepSizeUnderflow { partial, .. }
            | Self::TooManySteps { partial, .. }
            | Self::NonFinite { partial, .. } => partial,
        }
    }
}

/// Accepted steps of one integration, monotone in the integration direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<const N: usize> {
    pub times: Vec<f64>,
    pub states: Vec<SVector<f64, N>>,
    /// Field values at the stored states, used for Hermite interpolation.
    pub derivatives: Vec<SVector<f64, N>>,
    pub termination: Termination,
}

/// A located plane crossing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crossing<const N: usize> {
    pub t: f64,
    pub state: SVector<f64, N>,
}

/// Final state of an integration that did not keep its steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Endpoint<const N: usize> {
    pub t: f64,
    pub state: SVector<f64, N>,
    pub termination: Termination,
    pub steps: usize,
}

fn hermite<const N: usize>(
    t0: f64,
    y0: &SVector<f64, N>,
    f0: &SVector<f64, N>,
    t1: f64,
    y1: &SVector<f64, N>,
    f1: &SVector<f64, N>,
    t: f64,
) -> SVector<f64, N> {
    let h = t1 - t0;
    if h == 0.0 {
        return *y0;
    }
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    y0 * h00 + f0 * (h10 * h) + y1 * h01 + f1 * (h11 * h)
}

impl<const N: usize> Trajectory<N> {
    fn start(t0: f64, y0: SVector<f64, N>, f0: SVector<f64, N>) -> Self {
        Self {
            times: vec![t0],
            states: vec![y0],
            derivatives: vec![f0],
            termination: Termination::TimeReached,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first_time(&self) -> f64 {
        self.times[0]
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least its initial point")
    }

    pub fn last_state(&self) -> &SVector<f64, N> {
        self.states.last().expect("trajectory has at least its initial point")
    }

    fn forward(&self) -> bool {
        self.last_time() >= self.first_time()
    }

    /// Index `i` of the step `[times[i], times[i+1]]` containing `t`.
    fn segment_of(&self, t: f64) -> Option<usize> {
        let n = self.len();
        if n == 1 {
            return (t == self.times[0]).then_some(0);
        }
        let (lo, hi) = if self.forward() {
            (self.times[0], self.times[n - 1])
        } else {
            (self.times[n - 1], self.times[0])
        };
        if t < lo || t > hi {
            return None;
        }
        let fwd = self.forward();
        let k = self
            .times
            .partition_point(|&ti| if fwd { ti <= t } else { ti >= t });
        Some(k.saturating_sub(1).min(n - 2))
    }

    /// Dense output at `t`; `None` outside the integrated window.
    pub fn interpolate(&self, t: f64) -> Option<SVector<f64, N>> {
        let i = self.segment_of(t)?;
        if self.len() == 1 {
            return Some(self.states[0]);
        }
        Some(hermite(
            self.times[i],
            &self.states[i],
            &self.derivatives[i],
            self.times[i + 1],
            &self.states[i + 1],
            &self.derivatives[i + 1],
            t,
        ))
    }

    /// First crossing of the plane `⟨normal, y⟩ = offset`, located on the
    /// dense output; `None` if the event function never changes sign.
    pub fn find_crossing(&self, normal: &SVector<f64, N>, offset: f64) -> Option<Crossing<N>> {
        let g = |y: &SVector<f64, N>| normal.dot(y) - offset;
        for i in 0..self.len().saturating_sub(1) {
            let g0 = g(&self.states[i]);
            let g1 = g(&self.states[i + 1]);
            if g0 == 0.0 && i == 0 {
                continue;
            }
            if g0 * g1 <= 0.0 && g0 != g1 {
                let interp = |t: f64| {
                    hermite(
                        self.times[i],
                        &self.states[i],
                        &self.derivatives[i],
                        self.times[i + 1],
                        &self.states[i + 1],
                        &self.derivatives[i + 1],
                        t,
                    )
                };
                let t = root_on_interval(
                    |t| g(&interp(t)),
                    self.times[i],
                    g0,
                    self.times[i + 1],
                    g1,
                    1e-13,
                );
                return Some(Crossing { t, state: interp(t) });
            }
        }
        None
    }
}

/// Illinois-modified regula falsi on a sign-changing bracket.
fn root_on_interval(
    mut g: impl FnMut(f64) -> f64,
    mut a: f64,
    mut ga: f64,
    mut b: f64,
    mut gb: f64,
    tol: f64,
) -> f64 {
    if ga == 0.0 {
        return a;
    }
    if gb == 0.0 {
        return b;
    }
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * gb - b * ga) / (gb - ga);
        let gc = g(c);
        if gc == 0.0 || (b - a).abs() <= tol * (1.0 + c.abs()) {
            return c;
        }
        if gc * gb < 0.0 {
            a = b;
            ga = gb;
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        } else {
            b = c;
            gb = gc;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() <= tol * (1.0 + b.abs()) {
            return b;
        }
    }
    b
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct StepResult<const N: usize> {
    y: SVector<f64, N>,
    f: SVector<f64, N>,
    err: f64,
}

/// One Dormand–Prince step of size `h` from `(t, y)` with `f = rhs(t, y)`.
fn dopri_step<S: OdeSystem<N> + ?Sized, const N: usize>(
    sys: &S,
    cfg: &IntegratorConfig,
    t: f64,
    y: &SVector<f64, N>,
    f: &SVector<f64, N>,
    h: f64,
) -> StepResult<N> {
    let k1 = f;
    let k2 = sys.rhs(t + C2 * h, &(y + k1 * (h * A21)));
    let k3 = sys.rhs(t + C3 * h, &(y + (k1 * A31 + k2 * A32) * h));
    let k4 = sys.rhs(t + C4 * h, &(y + (k1 * A41 + k2 * A42 + k3 * A43) * h));
    let k5 = sys.rhs(
        t + C5 * h,
        &(y + (k1 * A51 + k2 * A52 + k3 * A53 + k4 * A54) * h),
    );
    let k6 = sys.rhs(
        t + h,
        &(y + (k1 * A61 + k2 * A62 + k3 * A63 + k4 * A64 + k5 * A65) * h),
    );
    let y_new = y + (k1 * B1 + k3 * B3 + k4 * B4 + k5 * B5 + k6 * B6) * h;
    let k7 = sys.rhs(t + h, &y_new);
    let e = (k1 * E1 + k3 * E3 + k4 * E4 + k5 * E5 + k6 * E6 + k7 * E7) * h;
    let mut acc = 0.0;
    for i in 0..N {
        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
        let q = e[i] / sc;
        acc += q * q;
    }
    let err = if N == 0 { 0.0 } else { (acc / N as f64).sqrt() };
    StepResult {
        y: y_new,
        f: k7,
        err: if y_new.iter().all(|v| v.is_finite()) && err.is_finite() {
            err
        } else {
            f64::INFINITY
        },
    }
}

fn initial_step<S: OdeSystem<N> + ?Sized, const N: usize>(
    sys: &S,
    cfg: &IntegratorConfig,
    t0: f64,
    y0: &SVector<f64, N>,
    f0: &SVector<f64, N>,
    span: f64,
) -> f64 {
    let norm = |v: &SVector<f64, N>| {
        let mut acc = 0.0;
        for i in 0..N {
            let sc = cfg.abs_tol + cfg.rel_tol * y0[i].abs();
            acc += (v[i] / sc).powi(2);
        }
        (acc / N.max(1) as f64).sqrt()
    };
    let d0 = norm(y0);
    let d1 = norm(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span.abs()).min(cfg.max_step);
    let dir = span.signum();
    let y1 = y0 + f0 * (dir * h0);
    let f1 = sys.rhs(t0 + dir * h0, &y1);
    let d2 = norm(&(f1 - f0)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    if !h1.is_finite() {
        return h0;
    }
    (100.0 * h0).min(h1).min(cfg.max_step).min(span.abs())
}

/// What the driver does with each accepted step.
trait StepSink<const N: usize> {
    /// Returns `true` when the integration should stop at the end of this step.
    fn accept(
        &mut self,
        t0: f64,
        y0: &SVector<f64, N>,
        f0: &SVector<f64, N>,
        t1: f64,
        y1: &SVector<f64, N>,
        f1: &SVector<f64, N>,
    ) -> bool;
}

struct Driven<const N: usize> {
    t: f64,
    y: SVector<f64, N>,
    f: SVector<f64, N>,
    termination: Termination,
    steps: usize,
}

enum DriveError {
    Underflow,
    TooMany,
    NonFinite,
}

fn drive<S: OdeSystem<N> + ?Sized, K: StepSink<N>, const N: usize>(
    sys: &S,
    cfg: &IntegratorConfig,
    y0: &SVector<f64, N>,
    t0: f64,
    t1: f64,
    sink: &mut K,
) -> (Driven<N>, Option<DriveError>) {
    let f0 = sys.rhs(t0, y0);
    let mut st = Driven {
        t: t0,
        y: *y0,
        f: f0,
        termination: Termination::TimeReached,
        steps: 0,
    };
    if !y0.iter().chain(f0.iter()).all(|v| v.is_finite()) {
        return (st, Some(DriveError::NonFinite));
    }
    if t1 == t0 {
        return (st, None);
    }
    if let Some(m) = sys.escape_metric(y0) {
        if m >= cfg.escape_radius_sq {
            st.termination = Termination::Escape;
            return (st, None);
        }
    }
    let dir = (t1 - t0).signum();
    let mut h = initial_step(sys, cfg, t0, y0, &st.f, t1 - t0);
    let mut last_rejected = false;
    loop {
        let remaining = (t1 - st.t) * dir;
        if remaining <= 0.0 {
            return (st, None);
        }
        if st.steps >= cfg.max_steps {
            return (st, Some(DriveError::TooMany));
        }
        let min_h = 16.0 * f64::EPSILON * st.t.abs().max(1.0);
        if h < min_h {
            return (st, Some(DriveError::Underflow));
        }
        let mut hs = h.min(cfg.max_step);
        let last = hs >= remaining * (1.0 - 1e-12);
        if last {
            hs = remaining;
        }
        let step = dopri_step(sys, cfg, st.t, &st.y, &st.f, dir * hs);
        if step.err <= 1.0 {
            let t_new = if last { t1 } else { st.t + dir * hs };
            st.steps += 1;
            let stop = sink.accept(st.t, &st.y, &st.f, t_new, &step.y, &step.f);
            st.t = t_new;
            st.y = step.y;
            st.f = step.f;
            if stop {
                st.termination = Termination::Event;
                return (st, None);
            }
            if let Some(m) = sys.escape_metric(&st.y) {
                if m >= cfg.escape_radius_sq {
                    st.termination = Termination::Escape;
                    return (st, None);
                }
            }
            let mut fac = if step.err == 0.0 {
                5.0
            } else {
                (0.9 * step.err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            h = hs * fac;
        } else {
            last_rejected = true;
            let fac = if step.err.is_finite() {
                (0.9 * step.err.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.25
            };
            h = hs * fac;
        }
    }
}

struct Recorder<const N: usize> {
    traj: Trajectory<N>,
}

impl<const N: usize> StepSink<N> for Recorder<N> {
    fn accept(
        &mut self,
        _t0: f64,
        _y0: &SVector<f64, N>,
        _f0: &SVector<f64, N>,
        t1: f64,
        y1: &SVector<f64, N>,
        f1: &SVector<f64, N>,
    ) -> bool {
        self.traj.times.push(t1);
        self.traj.states.push(*y1);
        self.traj.derivatives.push(*f1);
        false
    }
}

struct Discard;

impl<const N: usize> StepSink<N> for Discard {
    fn accept(
        &mut self,
        _: f64,
        _: &SVector<f64, N>,
        _: &SVector<f64, N>,
        _: f64,
        _: &SVector<f64, N>,
        _: &SVector<f64, N>,
    ) -> bool {
        false
    }
}

struct PlaneWatch<const N: usize> {
    normal: SVector<f64, N>,
    offset: f64,
    first: bool,
    step: Option<(f64, SVector<f64, N>, SVector<f64, N>, f64, SVector<f64, N>, SVector<f64, N>)>,
    record: Option<Trajectory<N>>,
}

impl<const N: usize> StepSink<N> for PlaneWatch<N> {
    fn accept(
        &mut self,
        t0: f64,
        y0: &SVector<f64, N>,
        f0: &SVector<f64, N>,
        t1: f64,
        y1: &SVector<f64, N>,
        f1: &SVector<f64, N>,
    ) -> bool {
        let g0 = self.normal.dot(y0) - self.offset;
        let g1 = self.normal.dot(y1) - self.offset;
        let skip_start = self.first && g0 == 0.0;
        self.first = false;
        if !skip_start && g0 * g1 <= 0.0 && g0 != g1 {
            self.step = Some((t0, *y0, *f0, t1, *y1, *f1));
            return true;
        }
        if let Some(tr) = self.record.as_mut() {
            tr.times.push(t1);
            tr.states.push(*y1);
            tr.derivatives.push(*f1);
        }
        false
    }
}

fn to_error<const N: usize>(e: DriveError, t: f64, partial: Trajectory<N>, max_steps: usize) -> IntegrationError<N> {
    match e {
        DriveError::Underflow => IntegrationError::StepSizeUnderflow { t, partial },
        DriveError::TooMany => IntegrationError::TooManySteps {
            t,
            max_steps,
            partial,
        },
        DriveError::NonFinite => IntegrationError::NonFinite { t, partial },
    }
}

/// Stateless adaptive integrator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Integrator {
    pub config: IntegratorConfig,
}

impl Integrator {
    pub fn new(config: IntegratorConfig) -> Self {
        Self { config }
    }

    /// Integrates from `t0` to `t1`, keeping every accepted step.
    pub fn integrate<S: OdeSystem<N> + ?Sized, const N: usize>(
        &self,
        sys: &S,
        y0: &SVector<f64, N>,
        t0: f64,
        t1: f64,
    ) -> Result<Trajectory<N>, IntegrationError<N>> {
        let mut rec = Recorder {
            traj: Trajectory::start(t0, *y0, sys.rhs(t0, y0)),
        };
        let (st, err) = drive(sys, &self.config, y0, t0, t1, &mut rec);
        let mut traj = rec.traj;
        traj.termination = st.termination;
        match err {
            None => Ok(traj),
            Some(e) => Err(to_error(e, st.t, traj, self.config.max_steps)),
        }
    }

    /// Integrates from `t0` to `t1` keeping only the final state.
    pub fn propagate<S: OdeSystem<N> + ?Sized, const N: usize>(
        &self,
        sys: &S,
        y0: &SVector<f64, N>,
        t0: f64,
        t1: f64,
    ) -> Result<Endpoint<N>, IntegrationError<N>> {
        let (st, err) = drive(sys, &self.config, y0, t0, t1, &mut Discard);
        match err {
            None => Ok(Endpoint {
                t: st.t,
                state: st.y,
                termination: st.termination,
                steps: st.steps,
            }),
            Some(e) => {
                let partial = Trajectory::start(st.t, st.y, st.f);
                Err(to_error(e, st.t, partial, self.config.max_steps))
            }
        }
    }

    /// Integrates until the first crossing of `⟨normal, y⟩ = offset` or `t1`.
    ///
    /// The crossing is located on the dense output and then polished with
    /// exact single steps from the start of the bracketing step, so the
    /// returned time is accurate to about `1e-10`.
    pub fn integrate_to_plane<S: OdeSystem<N> + ?Sized, const N: usize>(
        &self,
        sys: &S,
        y0: &SVector<f64, N>,
        t0: f64,
        t1: f64,
        normal: &SVector<f64, N>,
        offset: f64,
        keep_steps: bool,
    ) -> Result<(Option<Crossing<N>>, Trajectory<N>), IntegrationError<N>> {
        let f0 = sys.rhs(t0, y0);
        let mut watch = PlaneWatch {
            normal: *normal,
            offset,
            first: true,
            step: None,
            record: keep_steps.then(|| Trajectory::start(t0, *y0, f0)),
        };
        let (st, err) = drive(sys, &self.config, y0, t0, t1, &mut watch);
        let mut traj = watch
            .record
            .take()
            .unwrap_or_else(|| Trajectory::start(st.t, st.y, st.f));
        if let Some(e) = err {
            return Err(to_error(e, st.t, traj, self.config.max_steps));
        }
        traj.termination = st.termination;
        let Some((ta, ya, fa, tb, yb, fb)) = watch.step else {
            if !keep_steps {
                traj = Trajectory::start(st.t, st.y, st.f);
                traj.termination = st.termination;
            }
            return Ok((None, traj));
        };
        let g = |y: &SVector<f64, N>| normal.dot(y) - offset;
        let interp = |t: f64| hermite(ta, &ya, &fa, tb, &yb, &fb, t);
        let mut t = root_on_interval(|t| g(&interp(t)), ta, g(&ya), tb, g(&yb), 1e-14);
        let exact = |t: f64| {
            if t == ta {
                ya
            } else {
                dopri_step(sys, &self.config, ta, &ya, &fa, t - ta).y
            }
        };
        let mut y = exact(t);
        // Secant polish on exact states.
        let dg = normal.dot(&sys.rhs(t, &y));
        if dg != 0.0 {
            for _ in 0..4 {
                let corr = g(&y) / dg;
                if !corr.is_finite() {
                    break;
                }
                let tn = (t - corr).clamp(ta.min(tb), ta.max(tb));
                y = exact(tn);
                let done = (tn - t).abs() < 1e-13;
                t = tn;
                if done {
                    break;
                }
            }
        }
        let f = sys.rhs(t, &y);
        traj.times.push(t);
        traj.states.push(y);
        traj.derivatives.push(f);
        traj.termination = Termination::Event;
        if !keep_steps {
            traj = Trajectory::start(t, y, f);
            traj.termination = Termination::Event;
        }
        Ok((Some(Crossing { t, state: y }), traj))
    }
}

/// The extended autonomous system on `(x, y, Λ)`.
#[derive(Debug, Clone, Copy)]
pub struct ExtendedSystem {
    pub params: SystemParams,
}

impl OdeSystem<3> for ExtendedSystem {
    fn rhs(&self, _t: f64, y: &ExtendedState) -> ExtendedState {
        model::extended_field(y, &self.params)
    }

    fn escape_metric(&self, y: &ExtendedState) -> Option<f64> {
        Some(model::offset_sq(y))
    }
}

/// Frozen system `ż = F(z − λ)` at a fixed parameter value.
#[derive(Debug, Clone, Copy)]
pub struct FrozenSystem {
    pub params: SystemParams,
    pub lambda: f64,
}

impl OdeSystem<3> for FrozenSystem {
    fn rhs(&self, _t: f64, y: &ExtendedState) -> ExtendedState {
        model::frozen_field(y, self.lambda, &self.params)
    }

    fn escape_metric(&self, y: &ExtendedState) -> Option<f64> {
        let dx = y[0] - self.lambda;
        Some(dx * dx + y[1] * y[1])
    }
}

/// Extended system together with its 3×3 variational matrix, packed as
/// `(w, Φ[:,0], Φ[:,1], Φ[:,2])`.
#[derive(Debug, Clone, Copy)]
pub struct VariationalSystem {
    pub params: SystemParams,
}

impl VariationalSystem {
    pub fn pack(w: &ExtendedState, phi: &Matrix3<f64>) -> SVector<f64, 12> {
        let mut y = SVector::<f64, 12>::zeros();
        y.fixed_rows_mut::<3>(0).copy_from(w);
        for c in 0..3 {
            y.fixed_rows_mut::<3>(3 + 3 * c).copy_from(&phi.column(c));
        }
        y
    }

    pub fn unpack(y: &SVector<f64, 12>) -> (ExtendedState, Matrix3<f64>) {
        let w = y.fixed_rows::<3>(0).into_owned();
        let phi = Matrix3::from_columns(&[
            y.fixed_rows::<3>(3).into_owned(),
            y.fixed_rows::<3>(6).into_owned(),
            y.fixed_rows::<3>(9).into_owned(),
        ]);
        (w, phi)
    }
}

impl OdeSystem<12> for VariationalSystem {
    fn rhs(&self, _t: f64, y: &SVector<f64, 12>) -> SVector<f64, 12> {
        let (w, phi) = Self::unpack(y);
        let j = model::jacobian(&w, &self.params);
        Self::pack(&model::extended_field(&w, &self.params), &(j * phi))
    }
}

/// Extended system together with one adjoint vector, packed as `(w, u)`.
#[derive(Debug, Clone, Copy)]
pub struct AdjointSystem {
    pub params: SystemParams,
}

impl OdeSystem<6> for AdjointSystem {
    fn rhs(&self, _t: f64, y: &Vector6<f64>) -> Vector6<f64> {
        let w: Vector3<f64> = y.fixed_rows::<3>(0).into_owned();
        let u: Vector3<f64> = y.fixed_rows::<3>(3).into_owned();
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0)
            .copy_from(&model::extended_field(&w, &self.params));
        out.fixed_rows_mut::<3>(3)
            .copy_from(&model::adjoint_field(&w, &u, &self.params));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector1;

    #[test]
    fn exponential_decay_is_accurate() {
        let sys = |_t: f64, y: &Vector1<f64>| -y;
        let end = Integrator::default()
            .propagate(&sys, &Vector1::new(1.0), 0.0, 5.0)
            .unwrap();
        assert_relative_eq!(end.state[0], (-5.0f64).exp(), max_relative = 1e-8);
        assert_eq!(end.t, 5.0);
    }

    #[test]
    fn zero_field_is_constant() {
        let sys = |_t: f64, _y: &Vector3<f64>| Vector3::zeros();
        let y0 = Vector3::new(1.0, -2.0, 3.0);
        let tr = Integrator::default().integrate(&sys, &y0, 0.0, 10.0).unwrap();
        assert!(tr.states.iter().all(|s| *s == y0));
        assert_eq!(tr.termination, Termination::TimeReached);
    }

    #[test]
    fn backward_integration_uses_negative_steps() {
        let sys = |_t: f64, y: &Vector1<f64>| *y;
        let tr = Integrator::default()
            .integrate(&sys, &Vector1::new(1.0), 0.0, -2.0)
            .unwrap();
        assert!(tr.times.windows(2).all(|w| w[1] < w[0]));
        assert_relative_eq!(tr.last_state()[0], (-2.0f64).exp(), max_relative = 1e-8);
        let mid = tr.interpolate(-1.0).unwrap();
        assert_relative_eq!(mid[0], (-1.0f64).exp(), max_relative = 1e-6);
        assert!(tr.interpolate(0.5).is_none());
    }

    #[test]
    fn zero_length_interval() {
        let sys = |_t: f64, y: &Vector1<f64>| *y;
        let tr = Integrator::default()
            .integrate(&sys, &Vector1::new(1.0), 3.0, 3.0)
            .unwrap();
        assert_eq!(tr.len(), 1);
    }

    #[test]
    fn quintic_blowup_stops_at_escape_radius() {
        let p = SystemParams::default();
        let sys = ExtendedSystem { params: p };
        let y0 = crate::model::extended_state(1.2, 0.0, 0.0);
        let end = Integrator::default().propagate(&sys, &y0, 0.0, 100.0).unwrap();
        assert_eq!(end.termination, Termination::Escape);
        assert!(crate::model::offset_sq(&end.state) >= 4.0);
        assert!(end.t < 100.0);
    }

    #[test]
    fn frozen_plane_is_never_crossed() {
        let p = SystemParams::default();
        let sys = FrozenSystem { params: p, lambda: 1.0 };
        let y0 = crate::model::extended_state(1.3, 0.0, 1.0);
        let (c, tr) = Integrator::default()
            .integrate_to_plane(&sys, &y0, 0.0, 10.0, &Vector3::z(), 4.0, true)
            .unwrap();
        assert!(c.is_none());
        assert_eq!(tr.termination, Termination::TimeReached);
        assert!(tr.find_crossing(&Vector3::z(), 4.0).is_none());
    }
}
