//! Transport distance between multipeakon profiles, computed as the cost of
//! an optimized monotone plan between the graph measures (1 + u_x^2) dx.

use crate::dynamics::{DynamicsError, Trajectory};
use crate::peakon::{int_exp, MultipeakonState, Piece};
use crate::quad::{adaptive_with_breaks, bisect, pairwise_sum};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

const TAU: f64 = 2.0 * PI;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("invalid transport plan: {0}")]
    PlanInvalid(String),
    #[error("states live on different domains")]
    DomainMismatch,
    #[error("collision at t = {time} inside the transport window")]
    CollisionInWindow { time: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Point of R x R x T, the angle being 2 arctan of the slope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPoint {
    pub x: f64,
    pub u: f64,
    pub theta: f64,
}

impl MetricPoint {
    pub fn new(x: f64, u: f64, theta: f64) -> Self {
        MetricPoint { x, u, theta: theta.rem_euclid(TAU) }
    }

    pub fn from_slope(x: f64, u: f64, ux: f64) -> Self {
        Self::new(x, u, 2.0 * ux.atan())
    }
}

fn arc(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// min(|x - x'| + |u - u'| + |theta - theta'|_*, 1).
pub fn d_diamond(a: &MetricPoint, b: &MetricPoint) -> f64 {
    ((a.x - b.x).abs() + (a.u - b.u).abs() + arc(a.theta, b.theta)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlanInterp {
    /// Piecewise linear in (x, psi).
    #[default]
    Linear,
    /// Piecewise linear between the cumulative graph masses of u and v.
    MassLinear,
}

fn default_tail_rate() -> f64 {
    1.0
}

/// Monotone plan through the knots. On the line the plan continues as
/// x + delta e^{-rate |x - x_end|} beyond the outer knots; on the circle the
/// last knot must equal the first shifted by (1, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanKnots {
    pub knots: Vec<[f64; 2]>,
    #[serde(default)]
    pub interp: PlanInterp,
    #[serde(default = "default_tail_rate")]
    pub tail_rate: f64,
}

impl PlanKnots {
    pub fn new(knots: Vec<[f64; 2]>, interp: PlanInterp) -> Self {
        PlanKnots { knots, interp, tail_rate: 1.0 }
    }

    pub fn identity_line(a: f64, b: f64) -> Self {
        Self::new(vec![[a, a], [b, b]], PlanInterp::Linear)
    }

    pub fn identity_circle() -> Self {
        Self::new(vec![[0.0, 0.0], [1.0, 1.0]], PlanInterp::Linear)
    }

    pub fn inverse(&self) -> Self {
        PlanKnots {
            knots: self.knots.iter().map(|k| [k[1], k[0]]).collect(),
            interp: self.interp,
            tail_rate: self.tail_rate,
        }
    }

    pub fn validate(&self, periodic: bool) -> Result<(), MetricError> {
        let k = &self.knots;
        if k.len() < 2 {
            return Err(MetricError::PlanInvalid("need at least two knots".into()));
        }
        if k.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetricError::PlanInvalid("non-finite knot".into()));
        }
        if k.windows(2).any(|w| !(w[1][0] > w[0][0] && w[1][1] > w[0][1])) {
            return Err(MetricError::PlanInvalid("knots must increase in both coordinates".into()));
        }
        let (first, last) = (k[0], k[k.len() - 1]);
        if periodic {
            if (last[0] - first[0] - 1.0).abs() > 1e-12 || (last[1] - first[1] - 1.0).abs() > 1e-12 {
                return Err(MetricError::PlanInvalid("periodic plan must close with shift (1, 1)".into()));
            }
        } else {
            let worst = (first[1] - first[0]).abs().max((last[1] - last[0]).abs());
            if !(self.tail_rate > 0.0) || self.tail_rate * worst >= 1.0 {
                return Err(MetricError::PlanInvalid(format!(
                    "tail offset {worst} too large for rate {}",
                    self.tail_rate
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

/// Closed-form profile data: values, slopes and the cumulative graph mass
/// M(x) = x + integral of u_x^2 up to x.
#[derive(Debug, Clone)]
pub(crate) struct Graph {
    periodic: bool,
    pieces: Vec<Piece>,
    cum: Vec<f64>,
    total_g: f64,
    peaks: Vec<f64>,
}

fn piece_eval(pc: &Piece, x: f64) -> (f64, f64) {
    let s = x - pc.r;
    let a = if pc.alpha == 0.0 { 0.0 } else { pc.alpha * s.exp() };
    let b = if pc.beta == 0.0 { 0.0 } else { pc.beta * (-s).exp() };
    (a + b, a - b)
}

fn piece_g(pc: &Piece, s0: f64, s1: f64) -> f64 {
    let mut g = 0.0;
    if pc.alpha != 0.0 {
        g += pc.alpha * pc.alpha * int_exp(2.0, s0, s1);
    }
    if pc.beta != 0.0 {
        g += pc.beta * pc.beta * int_exp(-2.0, s0, s1);
    }
    if pc.alpha != 0.0 && pc.beta != 0.0 {
        g -= 2.0 * pc.alpha * pc.beta * (s1 - s0);
    }
    g
}

impl Graph {
    pub(crate) fn new(state: &MultipeakonState) -> Self {
        let periodic = state.domain.is_periodic();
        let pieces = state.pieces(&[]);
        let mut cum = Vec::with_capacity(pieces.len() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for pc in &pieces {
            let (s0, s1) = pc.s_range();
            acc += piece_g(pc, s0, s1);
            cum.push(acc);
        }
        Graph { periodic, pieces, cum, total_g: acc, peaks: state.positions() }
    }

    /// Mass of one period (circle only).
    pub(crate) fn period_mass(&self) -> f64 {
        1.0 + self.total_g
    }

    fn reduce(&self, x: f64) -> (f64, f64) {
        if self.periodic {
            let k = x.floor();
            let r = x - k;
            if r >= 1.0 {
                (k + 1.0, 0.0)
            } else {
                (k, r)
            }
        } else {
            (0.0, x)
        }
    }

    fn piece_index(&self, xr: f64) -> usize {
        self.pieces.partition_point(|p| p.lo <= xr).saturating_sub(1).min(self.pieces.len() - 1)
    }

    pub(crate) fn eval(&self, x: f64) -> (f64, f64) {
        let (_, xr) = self.reduce(x);
        piece_eval(&self.pieces[self.piece_index(xr)], xr)
    }

    pub(crate) fn mass(&self, x: f64) -> f64 {
        let (k, xr) = self.reduce(x);
        let i = self.piece_index(xr);
        let pc = &self.pieces[i];
        let g = self.cum[i] + piece_g(pc, pc.lo - pc.r, xr - pc.r);
        k * self.period_mass() + xr + g
    }

    pub(crate) fn inv_mass(&self, m: f64) -> f64 {
        let (k, mr) = if self.periodic {
            let p = self.period_mass();
            let k = (m / p).floor();
            (k, (m - k * p).clamp(0.0, p))
        } else {
            (0.0, m)
        };
        // piece i covers masses [lo_i + cum_i, hi_i + cum_{i+1}]
        let n = self.pieces.len();
        let (mut i, mut hi_i) = (0, n);
        while hi_i - i > 1 {
            let mid = (i + hi_i) / 2;
            if self.pieces[mid].lo + self.cum[mid] <= mr {
                i = mid;
            } else {
                hi_i = mid;
            }
        }
        let pc = &self.pieces[i];
        let mut lo = (mr - self.cum[i + 1]).max(pc.lo);
        let mut hi = (mr - self.cum[i]).min(pc.hi);
        if hi < lo {
            hi = lo;
        }
        let f = |x: f64| x + self.cum[i] + piece_g(pc, pc.lo - pc.r, x - pc.r) - mr;
        let mut x = 0.5 * (lo + hi);
        for _ in 0..80 {
            let fx = f(x);
            if fx == 0.0 {
                break;
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = 1.0 + piece_eval(pc, x).1.powi(2);
            let mut nx = x - fx / d;
            if !(nx > lo && nx < hi) {
                nx = 0.5 * (lo + hi);
            }
            if (nx - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) || hi - lo <= f64::EPSILON * x.abs().max(1.0) {
                x = nx;
                break;
            }
            x = nx;
        }
        k + x
    }

    /// Peak positions (lifted on the circle) inside [a, b].
    fn peaks_in(&self, a: f64, b: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for &q in &self.peaks {
            if self.periodic {
                let mut m = (a - q).ceil();
                while q + m <= b {
                    out.push(q + m);
                    m += 1.0;
                }
            } else if q >= a && q <= b {
                out.push(q);
            }
        }
        out
    }
}

fn d_local(x: f64, ux: (f64, f64), y: f64, vy: (f64, f64)) -> f64 {
    let t1 = 2.0 * ux.1.atan();
    let t2 = 2.0 * vy.1.atan();
    ((x - y).abs() + (ux.0 - vy.0).abs() + arc(t1, t2)).min(1.0)
}

/// Cost integrand in x for a plan with local value y and slope dpsi.
fn integrand_x(u: &Graph, v: &Graph, x: f64, y: f64, dpsi: f64) -> f64 {
    let a = u.eval(x);
    let b = v.eval(y);
    let mu = 1.0 + a.1 * a.1;
    let mv = (1.0 + b.1 * b.1) * dpsi;
    d_local(x, a, y, b) * mu.min(mv) + (mu - mv).abs()
}

/// Options of the plan optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceOptions {
    /// Knot count; 4 (n_u + n_v) + 8 when absent.
    pub knots: Option<usize>,
    pub max_sweeps: usize,
    pub rel_tol: f64,
    /// Nodes per axis of the warm-start grid.
    pub grid: usize,
    pub golden_iters: usize,
    /// Refinement factor of the banded second grid pass.
    pub fine_factor: usize,
    pub quad_tol: f64,
    /// Quadrature tolerance inside the line searches.
    pub search_tol: f64,
    /// Padding of the line window beyond the outermost peakons.
    pub window_pad: f64,
    /// Length of the integrated identity tails on the line.
    pub tail_length: f64,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions {
            knots: None,
            max_sweeps: 200,
            rel_tol: 1e-6,
            grid: 800,
            golden_iters: 10,
            fine_factor: 16,
            quad_tol: 1e-10,
            search_tol: 1e-7,
            window_pad: 12.0,
            tail_length: 60.0,
        }
    }
}

/// Plan evaluation bound to a pair of profiles.
struct Bound<'a> {
    u: &'a Graph,
    v: &'a Graph,
    plan: &'a PlanKnots,
    mx: Vec<f64>,
    my: Vec<f64>,
    periodic: bool,
}

impl<'a> Bound<'a> {
    fn new(u: &'a Graph, v: &'a Graph, plan: &'a PlanKnots) -> Self {
        let (mx, my) = match plan.interp {
            PlanInterp::Linear => (vec![], vec![]),
            PlanInterp::MassLinear => (
                plan.knots.iter().map(|k| u.mass(k[0])).collect(),
                plan.knots.iter().map(|k| v.mass(k[1])).collect(),
            ),
        };
        Bound { u, v, plan, mx, my, periodic: u.periodic }
    }

    /// (psi(x), psi'(x)).
    fn apply(&self, x: f64) -> (f64, f64) {
        let k = &self.plan.knots;
        let n = k.len();
        let (x0, xn) = (k[0][0], k[n - 1][0]);
        let mut shift = 0.0;
        let mut x = x;
        if self.periodic {
            let m = ((x - x0) / (xn - x0)).floor();
            x -= m;
            shift = m;
        } else if x < x0 || x > xn {
            let (xe, d) = if x < x0 { (x0, k[0][1] - x0) } else { (xn, k[n - 1][1] - xn) };
            let sgn = if x < x0 { -1.0 } else { 1.0 };
            let e = (-self.plan.tail_rate * (x - xe).abs()).exp();
            return (x + d * e, 1.0 - sgn * self.plan.tail_rate * d * e);
        }
        let i = k.partition_point(|kk| kk[0] <= x).clamp(1, n - 1) - 1;
        match self.plan.interp {
            PlanInterp::Linear => {
                let s = (k[i + 1][1] - k[i][1]) / (k[i + 1][0] - k[i][0]);
                (k[i][1] + s * (x - k[i][0]) + shift, s)
            }
            PlanInterp::MassLinear => {
                let s = (self.my[i + 1] - self.my[i]) / (self.mx[i + 1] - self.mx[i]);
                let y = self.v.inv_mass(self.my[i] + s * (self.u.mass(x) - self.mx[i]));
                let a = self.u.eval(x).1;
                let b = self.v.eval(y).1;
                (y + shift, s * (1.0 + a * a) / (1.0 + b * b))
            }
        }
    }

    fn segment_cost(&self, i: usize, tol: f64) -> f64 {
        let k = &self.plan.knots;
        match self.plan.interp {
            PlanInterp::Linear => {
                let (x0, y0) = (k[i][0], k[i][1]);
                let (x1, y1) = (k[i + 1][0], k[i + 1][1]);
                let s = (y1 - y0) / (x1 - x0);
                let mut br = self.u.peaks_in(x0, x1);
                br.extend(self.v.peaks_in(y0, y1).into_iter().map(|q| x0 + (q - y0) / s));
                let mut f = |x: f64| integrand_x(self.u, self.v, x, x + ((y0 - x0) + (s - 1.0) * (x - x0)), s);
                adaptive_with_breaks(&mut f, x0, x1, &br, tol)
            }
            PlanInterp::MassLinear => mass_segment_cost(
                self.u,
                self.v,
                [self.mx[i], self.my[i]],
                [self.mx[i + 1], self.my[i + 1]],
                tol,
            ),
        }
    }

    fn tails_cost(&self, length: f64, tol: f64) -> f64 {
        if self.periodic {
            return 0.0;
        }
        let k = &self.plan.knots;
        let (x0, xn) = (k[0][0], k[k.len() - 1][0]);
        let mut total = 0.0;
        for (a, b) in [(x0 - length, x0), (xn, xn + length)] {
            let mut br = self.u.peaks_in(a, b);
            let (ya, yb) = (self.apply(a).0, self.apply(b).0);
            for q in self.v.peaks_in(ya.min(yb), ya.max(yb)) {
                br.push(bisect(|x| self.apply(x).0 - q, a, b, 1e-14));
            }
            let mut f = |x: f64| {
                let (y, d) = self.apply(x);
                integrand_x(self.u, self.v, x, y, d)
            };
            total += adaptive_with_breaks(&mut f, a, b, &br, tol);
        }
        total
    }
}

/// Cost of a mass-linear segment between mass-space knots p0 and p1.
fn mass_segment_cost(u: &Graph, v: &Graph, p0: [f64; 2], p1: [f64; 2], tol: f64) -> f64 {
    let dx = p1[0] - p0[0];
    let dy = p1[1] - p0[1];
    let s = dy / dx;
    let x0 = u.inv_mass(p0[0]);
    let x1 = u.inv_mass(p1[0]);
    let y0 = v.inv_mass(p0[1]);
    let y1 = v.inv_mass(p1[1]);
    let mut br = u.peaks_in(x0, x1);
    br.extend(v.peaks_in(y0, y1).into_iter().map(|q| u.inv_mass(p0[0] + (v.mass(q) - p0[1]) / s)));
    let mut f = |x: f64| {
        let a = u.eval(x);
        let y = v.inv_mass(p0[1] + s * (u.mass(x) - p0[0]));
        d_local(x, a, y, v.eval(y)) * (1.0 + a.1 * a.1)
    };
    let dint = adaptive_with_breaks(&mut f, x0, x1, &br, tol);
    (dx.min(dy) / dx) * dint + (dx - dy).abs()
}

fn check_domains(u: &MultipeakonState, v: &MultipeakonState) -> Result<bool, MetricError> {
    let (pu, pv) = (u.domain.is_periodic(), v.domain.is_periodic());
    if pu != pv {
        return Err(MetricError::DomainMismatch);
    }
    Ok(pu)
}

/// J^psi(u, v).
pub fn cost(u: &MultipeakonState, v: &MultipeakonState, psi: &PlanKnots) -> Result<f64, MetricError> {
    let periodic = check_domains(u, v)?;
    psi.validate(periodic)?;
    let opts = DistanceOptions::default();
    let (gu, gv) = (Graph::new(u), Graph::new(v));
    Ok(plan_cost(&gu, &gv, psi, &opts))
}

fn plan_cost(u: &Graph, v: &Graph, psi: &PlanKnots, opts: &DistanceOptions) -> f64 {
    let b = Bound::new(u, v, psi);
    let segs: Vec<f64> = (0..psi.knots.len() - 1).map(|i| b.segment_cost(i, opts.quad_tol)).collect();
    pairwise_sum(&segs) + b.tails_cost(opts.tail_length, opts.quad_tol)
}

/// (phi1(x), phi2(psi(x))) with rho = (1 + v_x^2(psi)) psi' / (1 + u_x^2).
pub fn phi_weights(
    u: &MultipeakonState,
    v: &MultipeakonState,
    psi: &PlanKnots,
    x: f64,
) -> Result<(f64, f64), MetricError> {
    let periodic = check_domains(u, v)?;
    psi.validate(periodic)?;
    let (gu, gv) = (Graph::new(u), Graph::new(v));
    let b = Bound::new(&gu, &gv, psi);
    Ok(phi_at(&b, x).0)
}

fn phi_at(b: &Bound, x: f64) -> ((f64, f64), f64, f64) {
    let (y, d) = b.apply(x);
    let mu = 1.0 + b.u.eval(x).1.powi(2);
    let mv = 1.0 + b.v.eval(y).1.powi(2);
    let rho = mv * d / mu;
    ((rho.min(1.0), (1.0 / rho).min(1.0)), mu, mv * d)
}

/// Count of sample points where phi1 (1 + u_x^2) = phi2 (1 + v_x^2) psi'
/// fails to 1e-12 relative, or where max(phi1, phi2) != 1.
pub fn phi_violations(
    u: &MultipeakonState,
    v: &MultipeakonState,
    psi: &PlanKnots,
    per_segment: usize,
) -> Result<usize, MetricError> {
    let periodic = check_domains(u, v)?;
    psi.validate(periodic)?;
    let (gu, gv) = (Graph::new(u), Graph::new(v));
    let b = Bound::new(&gu, &gv, psi);
    let mut bad = 0;
    for w in psi.knots.windows(2) {
        for j in 0..per_segment {
            let x = w[0][0] + (w[1][0] - w[0][0]) * (j as f64 + 0.5) / per_segment as f64;
            let ((p1, p2), mu, mvd) = phi_at(&b, x);
            let lhs = p1 * mu;
            let rhs = p2 * mvd;
            if (lhs - rhs).abs() > 1e-12 * lhs.abs().max(1.0) || (p1.max(p2) - 1.0).abs() > 1e-15 {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub j: f64,
    pub plan: PlanKnots,
    /// Coordinate-descent sweeps performed.
    pub iterations: usize,
    /// Cost after each sweep; nonincreasing.
    pub history: Vec<f64>,
}

impl DistanceReport {
    pub fn to_json(&self, phi_violations: usize) -> String {
        serde_json::json!({
            "J": self.j,
            "plan": self.plan.knots,
            "iterations": self.iterations,
            "phi_violations": phi_violations,
        })
        .to_string()
    }
}

/// Upper bound on the transport distance, symmetric in (u, v) by running the
/// optimizer in both directions.
pub fn distance(
    u: &MultipeakonState,
    v: &MultipeakonState,
    opts: &DistanceOptions,
) -> Result<DistanceReport, MetricError> {
    check_domains(u, v)?;
    let fwd = optimize(u, v, opts)?;
    let bwd = optimize(v, u, opts)?;
    if bwd.j < fwd.j {
        Ok(DistanceReport { plan: bwd.plan.inverse(), ..bwd })
    } else {
        Ok(fwd)
    }
}

/// One-directional plan optimization.
pub fn optimize(
    u: &MultipeakonState,
    v: &MultipeakonState,
    opts: &DistanceOptions,
) -> Result<DistanceReport, MetricError> {
    let periodic = check_domains(u, v)?;
    let (gu, gv) = (Graph::new(u), Graph::new(v));
    let k = opts.knots.unwrap_or(4 * (u.len() + v.len()) + 8).max(2);
    let (a, b) = if periodic {
        (0.0, 1.0)
    } else {
        let pts: Vec<f64> = u.positions().into_iter().chain(v.positions()).collect();
        let lo = pts.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if pts.is_empty() { (0.0, 0.0) } else { (lo, hi) };
        (lo - opts.window_pad, hi + opts.window_pad)
    };
    let identity = if periodic { PlanKnots::identity_circle() } else { PlanKnots::identity_line(a, b) };
    let id_cost = plan_cost(&gu, &gv, &identity, opts);
    if u.is_empty() && v.is_empty() || id_cost == 0.0 {
        return Ok(DistanceReport { j: id_cost, plan: identity, iterations: 0, history: vec![id_cost] });
    }
    let tails = if periodic {
        0.0
    } else {
        Bound::new(&gu, &gv, &identity).tails_cost(opts.tail_length, opts.quad_tol)
    };

    let (xa, xb) = (gu.mass(a), gu.mass(b));
    let (ya, yb) = if periodic { (0.0, gv.period_mass()) } else { (gv.mass(a), gv.mass(b)) };
    let matching = polyline_uniform([xa, ya], [xb, yb], k);
    let warm = warm_start(&gu, &gv, [xa, ya], [xb, yb], periodic, k, opts);
    let mut best: Option<MassPlan> = None;
    for pts in [matching, warm] {
        let mp = MassPlan::new(&gu, &gv, pts, periodic, opts);
        if best.as_ref().map_or(true, |b| mp.total() < b.total()) {
            best = Some(mp);
        }
    }
    let mut mp = best.expect("candidate");
    let (iterations, history) = mp.descend(&gu, &gv, opts, tails);
    let plan = mp.to_plan(&gu, &gv);
    let refined = plan_cost(&gu, &gv, &plan, opts);
    if id_cost <= refined {
        return Ok(DistanceReport { j: id_cost, plan: identity, iterations, history });
    }
    Ok(DistanceReport { j: refined, plan, iterations, history })
}

fn polyline_uniform(p0: [f64; 2], p1: [f64; 2], k: usize) -> Vec<[f64; 2]> {
    (0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            if i == k - 1 {
                p1
            } else {
                [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])]
            }
        })
        .collect()
}

/// Knots in mass coordinates with cached segment costs.
struct MassPlan {
    pts: Vec<[f64; 2]>,
    seg: Vec<f64>,
    periodic: bool,
    /// Period masses of u and v (circle only).
    pu: f64,
    pv: f64,
}

impl MassPlan {
    fn new(u: &Graph, v: &Graph, pts: Vec<[f64; 2]>, periodic: bool, opts: &DistanceOptions) -> Self {
        let seg = pts
            .windows(2)
            .map(|w| mass_segment_cost(u, v, w[0], w[1], opts.search_tol))
            .collect();
        let (pu, pv) = if periodic { (u.period_mass(), v.period_mass()) } else { (0.0, 0.0) };
        MassPlan { pts, seg, periodic, pu, pv }
    }

    fn total(&self) -> f64 {
        pairwise_sum(&self.seg)
    }

    fn to_plan(&self, u: &Graph, v: &Graph) -> PlanKnots {
        let mut knots: Vec<[f64; 2]> = self.pts.iter().map(|p| [u.inv_mass(p[0]), v.inv_mass(p[1])]).collect();
        if self.periodic {
            let n = knots.len();
            knots[0][0] = 0.0;
            knots[n - 1] = [knots[0][0] + 1.0, knots[0][1] + 1.0];
        }
        PlanKnots::new(knots, PlanInterp::MassLinear)
    }

    /// Coordinate descent with golden-section line searches; a move is kept
    /// only when it lowers the cost of the affected segments.
    fn descend(&mut self, u: &Graph, v: &Graph, opts: &DistanceOptions, offset: f64) -> (usize, Vec<f64>) {
        let n = self.pts.len();
        let span = (self.pts[n - 1][0] - self.pts[0][0]).max(self.pts[n - 1][1] - self.pts[0][1]);
        let gap = 1e-9 * span;
        let mut step: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let lo = if i > 0 { self.pts[i - 1] } else { self.pts[i] };
                let hi = if i + 1 < n { self.pts[i + 1] } else { self.pts[i] };
                [0.25 * (hi[0] - lo[0]).max(gap), 0.25 * (hi[1] - lo[1]).max(gap)]
            })
            .collect();
        let mut history = vec![self.total() + offset];
        let mut shift_step = 0.05 * (self.pts[n - 1][1] - self.pts[0][1]);
        let mut sweeps = 0;
        while sweeps < opts.max_sweeps {
            sweeps += 1;
            let before = self.total();
            for i in 0..n - 1 {
                let interior = i > 0;
                if !interior && !self.periodic {
                    continue;
                }
                for c in [1usize, 0] {
                    if !interior && c == 0 {
                        continue;
                    }
                    self.line_search(u, v, i, c, &mut step[i][c], gap, opts);
                }
            }
            if self.periodic {
                self.shift_search(u, v, &mut shift_step, gap, opts);
            }
            let after = self.total();
            history.push(after + offset);
            if before - after <= opts.rel_tol * (after + offset).abs() {
                break;
            }
        }
        (sweeps, history)
    }

    /// Translates every ordinate at once (circle only).
    fn shift_search(&mut self, u: &Graph, v: &Graph, step: &mut f64, gap: f64, opts: &DistanceOptions) {
        let base = self.pts.clone();
        let current = self.total();
        let eval = |d: f64| -> (f64, Vec<f64>) {
            let pts: Vec<[f64; 2]> = base.iter().map(|p| [p[0], p[1] + d]).collect();
            let seg: Vec<f64> = pts
                .windows(2)
                .map(|w| mass_segment_cost(u, v, w[0], w[1], opts.search_tol))
                .collect();
            (pairwise_sum(&seg), seg)
        };
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (-*step, *step);
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = eval(x1);
        let mut f2 = eval(x2);
        let mut best = if f1.0 <= f2.0 { (x1, f1.clone()) } else { (x2, f2.clone()) };
        for _ in 0..opts.golden_iters {
            if f1.0 <= f2.0 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = eval(x1);
                if f1.0 < best.1 .0 {
                    best = (x1, f1.clone());
                }
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = eval(x2);
                if f2.0 < best.1 .0 {
                    best = (x2, f2.clone());
                }
            }
        }
        if best.1 .0 < current {
            let d = best.0;
            for p in self.pts.iter_mut() {
                p[1] += d;
            }
            self.seg = best.1 .1;
            *step = if d.abs() > 0.5 * *step { *step * 1.5 } else { (2.0 * d.abs()).max(gap) };
        } else {
            *step = (*step * 0.5).max(gap);
        }
    }

    fn neighbors(&self, i: usize, c: usize) -> (f64, f64) {
        let n = self.pts.len();
        let period = if c == 0 { self.pu } else { self.pv };
        if i == 0 {
            (self.pts[n - 2][c] - period, self.pts[1][c])
        } else {
            (self.pts[i - 1][c], self.pts[i + 1][c])
        }
    }

    fn set(&mut self, i: usize, c: usize, val: f64) {
        self.pts[i][c] = val;
        if i == 0 && self.periodic {
            let n = self.pts.len();
            let period = if c == 0 { self.pu } else { self.pv };
            self.pts[n - 1][c] = val + period;
        }
    }

    fn local(&self, u: &Graph, v: &Graph, i: usize, tol: f64) -> (usize, f64, usize, f64) {
        let n = self.pts.len();
        let left = if i == 0 { n - 2 } else { i - 1 };
        let a = mass_segment_cost(u, v, self.pts[left], self.pts[left + 1], tol);
        let b = mass_segment_cost(u, v, self.pts[i], self.pts[i + 1], tol);
        (left, a, i, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn line_search(
        &mut self,
        u: &Graph,
        v: &Graph,
        i: usize,
        c: usize,
        step: &mut f64,
        gap: f64,
        opts: &DistanceOptions,
    ) {
        let (nlo, nhi) = self.neighbors(i, c);
        let cur = self.pts[i][c];
        let n = self.pts.len();
        let left = if i == 0 { n - 2 } else { i - 1 };
        let current = self.seg[left] + self.seg[i];
        let lo = (cur - *step).max(nlo + gap);
        let hi = (cur + *step).min(nhi - gap);
        if !(hi > lo) {
            *step *= 0.5;
            return;
        }
        let eval = |this: &mut Self, x: f64| {
            this.set(i, c, x);
            let (_, a, _, b) = this.local(u, v, i, opts.search_tol);
            (a + b, a, b)
        };
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (lo, hi);
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = eval(self, x1);
        let mut f2 = eval(self, x2);
        let mut best = if f1.0 <= f2.0 { (x1, f1) } else { (x2, f2) };
        for _ in 0..opts.golden_iters {
            if f1.0 <= f2.0 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = eval(self, x1);
                if f1.0 < best.1 .0 {
                    best = (x1, f1);
                }
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = eval(self, x2);
                if f2.0 < best.1 .0 {
                    best = (x2, f2);
                }
            }
        }
        if best.1 .0 < current {
            self.set(i, c, best.0);
            self.seg[left] = best.1 .1;
            self.seg[i] = best.1 .2;
            let moved = (best.0 - cur).abs();
            *step = if moved > 0.5 * *step { *step * 1.5 } else { (2.0 * moved).max(gap) };
        } else {
            self.set(i, c, cur);
            *step = (*step * 0.5).max(gap);
        }
    }
}

/// Staircase optimum of the discretized cost on a mass grid, compressed to
/// at most `k` knots.
fn warm_start(
    u: &Graph,
    v: &Graph,
    p0: [f64; 2],
    p1: [f64; 2],
    periodic: bool,
    k: usize,
    opts: &DistanceOptions,
) -> Vec<[f64; 2]> {
    let dx = p1[0] - p0[0];
    let dy = p1[1] - p0[1];
    let h = dx.max(dy) / opts.grid.max(8) as f64;
    let nx = (dx / h).ceil().max(1.0) as usize;
    let ny = (dy / h).ceil().max(1.0) as usize;
    let hx = dx / nx as f64;
    let hy = dy / ny as f64;
    let col = |g: &Graph, m: f64| {
        let x = g.inv_mass(m);
        let (val, sl) = g.eval(x);
        (x, val, 2.0 * sl.atan())
    };
    let us: Vec<(f64, f64, f64)> = (0..=nx).map(|i| col(u, p0[0] + hx * i as f64)).collect();
    let (lo, hi) = if periodic { (-(ny as isize), 2 * ny as isize) } else { (0, ny as isize) };
    let vs: Vec<(f64, f64, f64)> = (lo..=hi).map(|j| col(v, p0[1] + hy * j as f64)).collect();
    let hm = hx.min(hy);
    let hd = (hx - hy).abs();
    let w = ny + 1;
    let run = |j0: isize| -> (f64, Vec<u8>) {
        let mut cost = vec![f64::INFINITY; (nx + 1) * w];
        let mut mv = vec![0u8; (nx + 1) * w];
        let dcache: Vec<f64> = (0..=nx)
            .flat_map(|i| (0..=ny).map(move |j| (i, j)))
            .map(|(i, j)| {
                let a = us[i];
                let b = vs[(j0 + j as isize - lo) as usize];
                ((a.0 - b.0).abs() + (a.1 - b.1).abs() + arc(a.2, b.2)).min(1.0)
            })
            .collect();
        cost[0] = 0.0;
        for i in 0..=nx {
            for j in 0..=ny {
                if i == 0 && j == 0 {
                    continue;
                }
                let id = i * w + j;
                let mut c = f64::INFINITY;
                let mut m = 0u8;
                if i > 0 {
                    let t = cost[id - w] + hx;
                    if t < c {
                        c = t;
                        m = 1;
                    }
                }
                if j > 0 {
                    let t = cost[id - 1] + hy;
                    if t < c {
                        c = t;
                        m = 2;
                    }
                }
                if i > 0 && j > 0 {
                    let t = cost[id - w - 1] + 0.5 * (dcache[id - w - 1] + dcache[id]) * hm + hd;
                    if t < c {
                        c = t;
                        m = 3;
                    }
                }
                cost[id] = c;
                mv[id] = m;
            }
        }
        (cost[nx * w + ny], mv)
    };
    let (j0, mv) = if periodic {
        // coarse scan of the start offset, then bisection-like refinement
        let m = 16.min(ny) as isize;
        let stride0 = (ny as isize / m).max(1);
        let mut best: Option<(f64, isize, Vec<u8>)> = None;
        let consider = |j: isize, best: &mut Option<(f64, isize, Vec<u8>)>| {
            let j = j.clamp(lo, hi - ny as isize);
            if best.as_ref().map_or(false, |b| b.1 == j) {
                return;
            }
            let (c, mv) = run(j);
            if best.as_ref().map_or(true, |b| c < b.0) {
                *best = Some((c, j, mv));
            }
        };
        for k in 0..m {
            consider(k * stride0 - ny as isize / 2, &mut best);
        }
        let mut stride = stride0;
        while stride > 1 {
            stride = (stride + 1) / 2;
            let centre = best.as_ref().expect("offset").1;
            consider(centre - stride, &mut best);
            consider(centre + stride, &mut best);
        }
        let (_, j0, mv) = best.expect("offset");
        (j0, mv)
    } else {
        (0, run(0).1)
    };
    let mut path = vec![[nx, ny]];
    let (mut i, mut j) = (nx, ny);
    while i > 0 || j > 0 {
        match mv[i * w + j] {
            1 => i -= 1,
            2 => j -= 1,
            _ => {
                i -= 1;
                j -= 1;
            }
        }
        path.push([i, j]);
    }
    path.reverse();
    let y0 = p0[1] + hy * j0 as f64;
    let pts: Vec<[f64; 2]> = path
        .iter()
        .map(|&[i, j]| [p0[0] + hx * i as f64, y0 + hy * j as f64])
        .collect();
    let fine = refine_band(u, v, &pts, h / opts.fine_factor.max(1) as f64, 4.0 * h);
    let mut pts = simplify(corners(&fine), k);
    if periodic {
        // pin the first abscissa to mass 0 by sliding along the first segment
        pts[0][0] = p0[0];
        let n = pts.len();
        pts[n - 1][0] = p1[0];
    }
    regularize(&mut pts, 1e-7 * h);
    pts
}

/// Staircase optimum on a grid of step `hf` restricted to a band of
/// half-width `width` (in Y) around a coarse monotone path.
fn refine_band(u: &Graph, v: &Graph, coarse: &[[f64; 2]], hf: f64, width: f64) -> Vec<[f64; 2]> {
    let p0 = coarse[0];
    let p1 = coarse[coarse.len() - 1];
    let nx = ((p1[0] - p0[0]) / hf).round().max(1.0) as usize;
    let ny = ((p1[1] - p0[1]) / hf).round().max(1.0) as usize;
    let hx = (p1[0] - p0[0]) / nx as f64;
    let hy = (p1[1] - p0[1]) / ny as f64;
    // Y range of the coarse path over each fine column
    let mut jlo = vec![0usize; nx + 1];
    let mut jhi = vec![ny; nx + 1];
    let mut seg = 0;
    for i in 0..=nx {
        let x = p0[0] + hx * i as f64;
        while seg + 1 < coarse.len() - 1 && coarse[seg + 1][0] < x {
            seg += 1;
        }
        let mut a = seg;
        while a > 0 && coarse[a][0] >= x {
            a -= 1;
        }
        let mut b = seg + 1;
        while b + 1 < coarse.len() && coarse[b][0] <= x {
            b += 1;
        }
        let (ylo, yhi) = (coarse[a][1], coarse[b][1]);
        jlo[i] = (((ylo - width - p0[1]) / hy).floor().max(0.0) as usize).min(ny);
        jhi[i] = (((yhi + width - p0[1]) / hy).ceil().max(0.0) as usize).min(ny);
    }
    jlo[0] = 0;
    jhi[nx] = ny;
    for i in 1..=nx {
        jlo[i] = jlo[i].max(jlo[i - 1]);
    }
    for i in (0..nx).rev() {
        jhi[i] = jhi[i].min(jhi[i + 1]);
    }
    for i in 1..=nx {
        jlo[i] = jlo[i].min(jhi[i - 1] + 1).min(jhi[i]);
    }
    let col = |g: &Graph, m: f64| {
        let x = g.inv_mass(m);
        let (val, sl) = g.eval(x);
        (x, val, 2.0 * sl.atan())
    };
    let us: Vec<(f64, f64, f64)> = (0..=nx).map(|i| col(u, p0[0] + hx * i as f64)).collect();
    let vs: Vec<(f64, f64, f64)> = (0..=ny).map(|j| col(v, p0[1] + hy * j as f64)).collect();
    let dd = |i: usize, j: usize| {
        let (a, b) = (us[i], vs[j]);
        ((a.0 - b.0).abs() + (a.1 - b.1).abs() + arc(a.2, b.2)).min(1.0)
    };
    let hm = hx.min(hy);
    let hd = (hx - hy).abs();
    let mut moves: Vec<Vec<u8>> = Vec::with_capacity(nx + 1);
    let mut prev: Vec<f64> = Vec::new();
    let mut prev_d: Vec<f64> = Vec::new();
    for i in 0..=nx {
        let (lo, hi) = (jlo[i], jhi[i]);
        let mut cur = vec![f64::INFINITY; hi - lo + 1];
        let mut cur_d = vec![0.0; hi - lo + 1];
        let mut mv = vec![0u8; hi - lo + 1];
        let (plo, phi) = if i > 0 { (jlo[i - 1], jhi[i - 1]) } else { (1, 0) };
        for j in lo..=hi {
            let k = j - lo;
            cur_d[k] = dd(i, j);
            if i == 0 && j == 0 {
                cur[k] = 0.0;
                continue;
            }
            let mut c = f64::INFINITY;
            let mut m = 0u8;
            if i > 0 && j >= plo && j <= phi {
                let t = prev[j - plo] + hx;
                if t < c {
                    c = t;
                    m = 1;
                }
            }
            if k > 0 {
                let t = cur[k - 1] + hy;
                if t < c {
                    c = t;
                    m = 2;
                }
            }
            if i > 0 && j >= 1 && j - 1 >= plo && j - 1 <= phi {
                let t = prev[j - 1 - plo] + 0.5 * (prev_d[j - 1 - plo] + cur_d[k]) * hm + hd;
                if t < c {
                    c = t;
                    m = 3;
                }
            }
            cur[k] = c;
            mv[k] = m;
        }
        moves.push(mv);
        prev = cur;
        prev_d = cur_d;
    }
    let mut path = vec![[nx, ny]];
    let (mut i, mut j) = (nx, ny);
    while i > 0 || j > 0 {
        match moves[i][j - jlo[i]] {
            1 => i -= 1,
            2 => j -= 1,
            _ => {
                i -= 1;
                j -= 1;
            }
        }
        path.push([i, j]);
    }
    path.reverse();
    path.iter().map(|&[i, j]| [p0[0] + hx * i as f64, p0[1] + hy * j as f64]).collect()
}

fn corners(path: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = vec![path[0]];
    for w in path.windows(3) {
        let d1 = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
        let d2 = [w[2][0] - w[1][0], w[2][1] - w[1][1]];
        if (d1[0] * d2[1] - d1[1] * d2[0]).abs() > 0.0 {
            out.push(w[1]);
        }
    }
    out.push(path[path.len() - 1]);
    out
}

/// Visvalingam reduction to at most `k` points by smallest triangle area.
fn simplify(pts: Vec<[f64; 2]>, k: usize) -> Vec<[f64; 2]> {
    let mut pts = pts;
    let area = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
        ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs()
    };
    while pts.len() > k.max(2) {
        let mut idx = 1;
        let mut best = f64::INFINITY;
        for i in 1..pts.len() - 1 {
            let a = area(pts[i - 1], pts[i], pts[i + 1]);
            if a < best {
                best = a;
                idx = i;
            }
        }
        pts.remove(idx);
    }
    pts
}

/// Forces strict increase in both coordinates with the given minimal gap,
/// keeping the endpoints.
fn regularize(pts: &mut [[f64; 2]], gap: f64) {
    let n = pts.len();
    for c in 0..2 {
        for i in 1..n - 1 {
            pts[i][c] = pts[i][c].max(pts[i - 1][c] + gap);
        }
        for i in (1..n - 1).rev() {
            pts[i][c] = pts[i][c].min(pts[i + 1][c] - gap);
        }
    }
}

/// Moves every knot along the characteristics x' = u(t, x) of its profile.
pub fn characteristic_plan(
    traj_u: &Trajectory,
    traj_v: &Trajectory,
    psi0: &PlanKnots,
    t: f64,
) -> Result<PlanKnots, MetricError> {
    for traj in [traj_u, traj_v] {
        let (lo, hi) = (traj.t_start.min(t), traj.t_start.max(t));
        if let Some(ev) = traj.events.iter().find(|e| e.t >= lo && e.t <= hi) {
            return Err(MetricError::CollisionInWindow { time: ev.t });
        }
    }
    let xs: Vec<f64> = psi0.knots.iter().map(|k| k[0]).collect();
    let ys: Vec<f64> = psi0.knots.iter().map(|k| k[1]).collect();
    let xt = characteristics(traj_u, &xs, t)?;
    let yt = characteristics(traj_v, &ys, t)?;
    let plan = PlanKnots {
        knots: xt.into_iter().zip(yt).map(|(a, b)| [a, b]).collect(),
        interp: psi0.interp,
        tail_rate: psi0.tail_rate,
    };
    plan.validate(traj_u.domain.is_periodic())?;
    Ok(plan)
}

/// Positions at time t of the characteristics starting at `x0` at the
/// trajectory start, by classical Runge-Kutta.
pub fn characteristics(traj: &Trajectory, x0: &[f64], t: f64) -> Result<Vec<f64>, MetricError> {
    let span = t - traj.t_start;
    let steps = (span.abs() / 2e-3).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let mut x = x0.to_vec();
    let field = |s: f64, x: &[f64]| -> Result<Vec<f64>, MetricError> {
        let st = traj.state_at(s)?;
        Ok(x.iter().map(|&xi| st.evaluate_u(xi)).collect())
    };
    for k in 0..steps {
        let s = traj.t_start + h * k as f64;
        let k1 = field(s, &x)?;
        let tmp: Vec<f64> = x.iter().zip(&k1).map(|(a, d)| a + 0.5 * h * d).collect();
        let k2 = field(s + 0.5 * h, &tmp)?;
        let tmp: Vec<f64> = x.iter().zip(&k2).map(|(a, d)| a + 0.5 * h * d).collect();
        let k3 = field(s + 0.5 * h, &tmp)?;
        let tmp: Vec<f64> = x.iter().zip(&k3).map(|(a, d)| a + h * d).collect();
        let k4 = field(s + h, &tmp)?;
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(x)
}

/// Exponential growth fit of a distance series J(t).
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthFit {
    /// Smallest C with log(J_t / J_0) <= C t at every fitted sample.
    pub c2: f64,
    /// Least-squares slope of log J against t through the origin.
    pub ls_slope: f64,
    /// Root-mean-square residual of the least-squares fit.
    pub residual: f64,
    /// Largest log(J_b / J_a) / (t_b - t_a) over ordered sample pairs.
    pub sup_ratio: f64,
}

pub fn fit_growth(series: &[(f64, f64)]) -> GrowthFit {
    let (t0, j0) = series[0];
    let pts: Vec<(f64, f64)> = series[1..].iter().map(|&(t, j)| (t - t0, (j / j0).ln())).collect();
    let c2 = pts.iter().map(|&(t, l)| l / t).fold(f64::NEG_INFINITY, f64::max);
    let num: f64 = pts.iter().map(|&(t, l)| t * l).sum();
    let den: f64 = pts.iter().map(|&(t, _)| t * t).sum();
    let ls = if den > 0.0 { num / den } else { 0.0 };
    let residual = if pts.is_empty() {
        0.0
    } else {
        (pts.iter().map(|&(t, l)| (l - ls * t).powi(2)).sum::<f64>() / pts.len() as f64).sqrt()
    };
    let mut sup_ratio = f64::NEG_INFINITY;
    for a in 0..series.len() {
        for b in a + 1..series.len() {
            let r = (series[b].1 / series[a].1).ln() / (series[b].0 - series[a].0);
            sup_ratio = sup_ratio.max(r);
        }
    }
    GrowthFit { c2: c2.max(0.0), ls_slope: ls, residual, sup_ratio }
}
