//! Riemann-sum multipeakon approximation of initial profiles and
//! exponentially weighted diagnostics.

use crate::dynamics::{DynamicsError, Trajectory};
use crate::peakon::{int_exp, Domain, MultipeakonState, Peakon, PeakonError};
use crate::quad::{adaptive, adaptive_with_breaks, gl8};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ApproxError {
    #[error("cell count must be at least 1")]
    NoCells,
    #[error("profile is not in the decay class: tail above {tol} beyond |x| = {radius}")]
    NotInClass { tol: f64, radius: f64 },
    #[error("weighted integral diverged")]
    Diverged,
    #[error("weighted energy needs a real-line domain")]
    RequiresRealLine,
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    State(#[from] PeakonError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

fn one() -> f64 {
    1.0
}

/// Closed-form or sampled initial datum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Gaussian {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        center: f64,
        #[serde(default = "one")]
        width: f64,
    },
    Peakon {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        center: f64,
    },
    Sech2 {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        center: f64,
        #[serde(default = "one")]
        width: f64,
    },
    /// mean + sum a_k cos(2 pi k x) + b_k sin(2 pi k x), k >= 1.
    Fourier {
        #[serde(default)]
        mean: f64,
        #[serde(default)]
        cos: Vec<f64>,
        #[serde(default)]
        sin: Vec<f64>,
    },
    /// Piecewise-linear interpolation, zero outside the sampled range.
    Samples { x: Vec<f64>, f: Vec<f64> },
}

/// Which one-sided derivative to take at a kink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Profile {
    pub fn validate(&self) -> Result<(), ApproxError> {
        match self {
            Profile::Gaussian { width, .. } | Profile::Sech2 { width, .. } if !(*width > 0.0) => {
                Err(ApproxError::InvalidProfile("width must be positive".into()))
            }
            Profile::Samples { x, f } => {
                if x.len() != f.len() || x.len() < 2 {
                    return Err(ApproxError::InvalidProfile("samples need matching x and f".into()));
                }
                if x.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(ApproxError::InvalidProfile("sample abscissae must increase".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        match self {
            Profile::Gaussian { amplitude, center, width } => {
                let s = (x - center) / width;
                amplitude * (-s * s).exp()
            }
            Profile::Peakon { amplitude, center } => amplitude * (-(x - center).abs()).exp(),
            Profile::Sech2 { amplitude, center, width } => {
                let c = ((x - center) / width).cosh();
                amplitude / (c * c)
            }
            Profile::Fourier { mean, cos, sin } => {
                let mut v = *mean;
                for (k, a) in cos.iter().enumerate() {
                    v += a * (2.0 * PI * (k + 1) as f64 * x).cos();
                }
                for (k, b) in sin.iter().enumerate() {
                    v += b * (2.0 * PI * (k + 1) as f64 * x).sin();
                }
                v
            }
            Profile::Samples { x: xs, f } => {
                if x < xs[0] || x > xs[xs.len() - 1] {
                    return 0.0;
                }
                let i = xs.partition_point(|v| *v <= x).clamp(1, xs.len() - 1);
                let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
                f[i - 1] + t * (f[i] - f[i - 1])
            }
        }
    }

    /// First derivative, one-sided at kinks.
    pub fn slope(&self, x: f64, side: Side) -> f64 {
        match self {
            Profile::Gaussian { amplitude, center, width } => {
                let s = (x - center) / width;
                -2.0 * s / width * amplitude * (-s * s).exp()
            }
            Profile::Peakon { amplitude, center } => {
                let d = x - center;
                let sgn = if d > 0.0 || (d == 0.0 && side == Side::Right) { 1.0 } else { -1.0 };
                -sgn * amplitude * (-d.abs()).exp()
            }
            Profile::Sech2 { amplitude, center, width } => {
                let s = (x - center) / width;
                let c = s.cosh();
                -2.0 * amplitude * s.tanh() / (c * c) / width
            }
            Profile::Fourier { cos, sin, .. } => {
                let mut v = 0.0;
                for (k, a) in cos.iter().enumerate() {
                    let w = 2.0 * PI * (k + 1) as f64;
                    v -= a * w * (w * x).sin();
                }
                for (k, b) in sin.iter().enumerate() {
                    let w = 2.0 * PI * (k + 1) as f64;
                    v += b * w * (w * x).cos();
                }
                v
            }
            Profile::Samples { x: xs, f } => {
                let n = xs.len();
                let inside = match side {
                    Side::Right => x >= xs[0] && x < xs[n - 1],
                    Side::Left => x > xs[0] && x <= xs[n - 1],
                };
                if !inside {
                    return 0.0;
                }
                let i = match side {
                    Side::Right => xs.partition_point(|v| *v <= x),
                    Side::Left => xs.partition_point(|v| *v < x),
                }
                .clamp(1, n - 1);
                (f[i] - f[i - 1]) / (xs[i] - xs[i - 1])
            }
        }
    }

    /// Points where the derivative may jump.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Profile::Peakon { center, .. } => vec![*center],
            Profile::Samples { x, .. } => x.clone(),
            _ => vec![],
        }
    }
}

fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - t * t)).exp()
    }
}

fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| adaptive(&mut bump, -1.0, 1.0, 1e-15))
}

/// Profile with optional mollification by a smooth compactly supported bump.
struct Smoothed<'a> {
    f: &'a Profile,
    eps: f64,
}

impl Smoothed<'_> {
    fn average<G: FnMut(f64) -> f64>(&self, x: f64, mut g: G) -> f64 {
        let eps = self.eps;
        let norm = bump_mass() * eps;
        let mut breaks: Vec<f64> = self.f.kinks().iter().map(|k| x - k).collect();
        breaks.retain(|b| b.abs() < eps);
        let mut h = |y: f64| bump(y / eps) * g(x - y);
        adaptive_with_breaks(&mut h, -eps, eps, &breaks, 1e-13) / norm
    }

    fn value(&self, x: f64) -> f64 {
        if self.eps == 0.0 {
            self.f.value(x)
        } else {
            self.average(x, |z| self.f.value(z))
        }
    }

    fn slope(&self, x: f64, side: Side) -> f64 {
        if self.eps == 0.0 {
            self.f.slope(x, side)
        } else {
            self.average(x, |z| self.f.slope(z, Side::Right))
        }
    }

    fn kinks(&self) -> Vec<f64> {
        if self.eps == 0.0 {
            self.f.kinks()
        } else {
            vec![]
        }
    }

    /// Integral of the (possibly smoothed) profile over [a, b].
    fn integral(&self, a: f64, b: f64) -> f64 {
        let mut pts = vec![a];
        pts.extend(self.kinks().into_iter().filter(|k| *k > a && *k < b));
        pts.push(b);
        pts.windows(2).map(|w| gl8(|x| self.value(x), w[0], w[1])).sum()
    }

    /// Cell strength: half the integral of (f - f'') over the cell, with the
    /// second-derivative part telescoped to boundary slopes.
    fn cell_strength(&self, a: f64, b: f64) -> f64 {
        0.5 * self.integral(a, b) - 0.5 * (self.slope(b, Side::Left) - self.slope(a, Side::Right))
    }
}

/// Options for the real-line truncation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApproxOptions {
    /// Target H^1 norm of the discarded tails.
    pub tail_tol: f64,
    /// Fixed half-width; computed from `tail_tol` when absent.
    pub radius: Option<f64>,
}

impl Default for ApproxOptions {
    fn default() -> Self {
        ApproxOptions { tail_tol: 1e-4, radius: None }
    }
}

/// Multipeakon with peakons at cell midpoints and cell-integral strengths.
pub fn approximate_multipeakon(
    f: &Profile,
    n: usize,
    domain: Domain,
    epsilon_mollify: f64,
) -> Result<MultipeakonState, ApproxError> {
    approximate_with(f, n, domain, epsilon_mollify, &ApproxOptions::default())
}

pub fn approximate_with(
    f: &Profile,
    n: usize,
    domain: Domain,
    epsilon_mollify: f64,
    opts: &ApproxOptions,
) -> Result<MultipeakonState, ApproxError> {
    f.validate()?;
    if n == 0 {
        return Err(ApproxError::NoCells);
    }
    if !(epsilon_mollify >= 0.0) {
        return Err(ApproxError::InvalidProfile("mollifier scale must be >= 0".into()));
    }
    let (a, b) = match domain {
        Domain::Periodic => (0.0, 1.0),
        Domain::RealLine { .. } => {
            let r = match opts.radius {
                Some(r) => r,
                None => truncation_radius(f, opts.tail_tol)?,
            };
            (-r, r)
        }
    };
    let sm = Smoothed { f, eps: epsilon_mollify };
    let h = (b - a) / n as f64;
    let peakons = (0..n)
        .map(|i| {
            let lo = a + h * i as f64;
            let hi = if i + 1 == n { b } else { lo + h };
            Peakon::new(sm.cell_strength(lo, hi), 0.5 * (lo + hi))
        })
        .collect();
    Ok(MultipeakonState::new(domain, peakons)?)
}

fn tail_h1(f: &Profile, r: f64) -> f64 {
    let kinks = f.kinks();
    let mut g = |x: f64| {
        let v = f.value(x);
        let d = f.slope(x, Side::Right);
        v * v + d * d
    };
    let right = adaptive_with_breaks(&mut g, r, r + 80.0, &kinks, 1e-16);
    let left = adaptive_with_breaks(&mut g, -r - 80.0, -r, &kinks, 1e-16);
    (right + left).sqrt()
}

/// Smallest radius on a quarter-unit grid whose tail H^1 norm is below `tol`.
pub fn truncation_radius(f: &Profile, tol: f64) -> Result<f64, ApproxError> {
    let mut r = 0.5;
    while r <= 200.0 {
        if tail_h1(f, r) < tol {
            return Ok(r);
        }
        r += 0.25;
    }
    Err(ApproxError::NotInClass { tol, radius: 200.0 })
}

/// Radius from the weighted-energy tail bound, ln(C / tol^2) / alpha.
pub fn decay_class_radius(weighted_energy: f64, alpha: f64, tol: f64) -> f64 {
    ((weighted_energy / (tol * tol)).ln() / alpha).max(0.0)
}

/// H^1 distance between a profile and a multipeakon, by quadrature.
pub fn h1_distance(f: &Profile, state: &MultipeakonState) -> f64 {
    let mut breaks = state.positions();
    breaks.extend(f.kinks());
    let mut g = |x: f64| {
        let d0 = f.value(x) - state.evaluate_u(x);
        let d1 = f.slope(x, Side::Right) - state.evaluate_ux(x);
        d0 * d0 + d1 * d1
    };
    let total = match state.domain {
        Domain::Periodic => adaptive_with_breaks(&mut g, 0.0, 1.0, &breaks, 1e-14),
        Domain::RealLine { .. } => {
            let lo = breaks.iter().copied().fold(0.0f64, f64::min) - 60.0;
            let hi = breaks.iter().copied().fold(0.0f64, f64::max) + 60.0;
            adaptive_with_breaks(&mut g, lo, hi, &breaks, 1e-14)
        }
    };
    total.max(0.0).sqrt()
}

/// Integral of (u^2 + u_x^2) e^{alpha |x|}, in closed form.
pub fn weighted_energy(state: &MultipeakonState, alpha: f64) -> Result<f64, ApproxError> {
    if !matches!(state.domain, Domain::RealLine { .. }) {
        return Err(ApproxError::RequiresRealLine);
    }
    let mut total = 0.0;
    for pc in state.pieces(&[0.0]) {
        let sign = if pc.hi <= 0.0 { -1.0 } else { 1.0 };
        let (s0, s1) = pc.s_range();
        let scale = (sign * alpha * pc.r).exp();
        for (c, k) in [(pc.alpha, 2.0), (pc.beta, -2.0)] {
            if c != 0.0 {
                total += 2.0 * c * c * scale * int_exp(k + sign * alpha, s0, s1);
            }
        }
    }
    if !total.is_finite() || total > 1e300 {
        return Err(ApproxError::Diverged);
    }
    Ok(total)
}

/// Weighted energy of a closed-form profile, by quadrature.
pub fn profile_weighted_energy(f: &Profile, alpha: f64) -> Result<f64, ApproxError> {
    f.validate()?;
    let kinks = f.kinks();
    let mut g = |x: f64| {
        let v = f.value(x);
        let d = f.slope(x, Side::Right);
        (v * v + d * d) * (alpha * x.abs()).exp()
    };
    let mut total = adaptive_with_breaks(&mut g, -10.0, 10.0, &kinks, 1e-14);
    let mut edge = 10.0;
    loop {
        let chunk = adaptive_with_breaks(&mut g, edge, edge + 10.0, &kinks, 1e-15)
            + adaptive_with_breaks(&mut g, -edge - 10.0, -edge, &kinks, 1e-15);
        total += chunk;
        edge += 10.0;
        if !total.is_finite() {
            return Err(ApproxError::Diverged);
        }
        if chunk <= 1e-15 * total.max(1e-300) {
            return Ok(total);
        }
        if edge > 400.0 {
            return Err(ApproxError::Diverged);
        }
    }
}

/// Total variation of u, i.e. the L^1 norm of u_x.
pub fn ux_l1(state: &MultipeakonState) -> f64 {
    let mut total = 0.0;
    for pc in state.pieces(&[]) {
        let (s0, s1) = pc.s_range();
        let u = |s: f64| {
            let a = if pc.alpha == 0.0 { 0.0 } else { pc.alpha * s.exp() };
            let b = if pc.beta == 0.0 { 0.0 } else { pc.beta * (-s).exp() };
            a + b
        };
        let mut pts = vec![s0];
        if pc.alpha * pc.beta > 0.0 {
            let st = 0.5 * (pc.beta / pc.alpha).ln();
            if st > s0 && st < s1 {
                pts.push(st);
            }
        }
        pts.push(s1);
        for w in pts.windows(2) {
            total += (u(w[1]) - u(w[0])).abs();
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub t: f64,
    pub weighted_energy: f64,
    pub p_weighted_sup: f64,
    pub ux_l1: f64,
    pub bound: f64,
    pub violated: bool,
}

/// Weighted-energy, weighted-P and total-variation series with the a-priori
/// growth bound (C + E/2) exp(4 sqrt(E) t / (1 - alpha^2)).
pub fn decay_monitor(
    traj: &Trajectory,
    alpha: f64,
    samples: usize,
) -> Result<Vec<DecayRow>, ApproxError> {
    let states = traj.sample_uniform(samples)?;
    let first = &states[0];
    let c0 = weighted_energy(first, alpha)?;
    let e = first.energy();
    let mut rows = Vec::with_capacity(states.len());
    for s in &states {
        let t = s.time - traj.t_start;
        let weighted = weighted_energy(s, alpha)?;
        let p_sup = if s.is_empty() {
            0.0
        } else {
            let lo = s.positions().iter().copied().fold(f64::INFINITY, f64::min) - 20.0;
            let hi = s.positions().iter().copied().fold(f64::NEG_INFINITY, f64::max) + 20.0;
            let m = 1600;
            (0..=m)
                .map(|k| {
                    let x = lo + (hi - lo) * k as f64 / m as f64;
                    s.convolve_p(x).0.abs() * (alpha * x.abs()).exp()
                })
                .fold(0.0, f64::max)
        };
        let bound = (c0 + 0.5 * e) * (4.0 * e.max(0.0).sqrt() * t.abs() / (1.0 - alpha * alpha)).exp();
        rows.push(DecayRow {
            t: s.time,
            weighted_energy: weighted,
            p_weighted_sup: p_sup,
            ux_l1: ux_l1(s),
            bound,
            violated: weighted > bound * (1.0 + 1e-9),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Domain {
        Domain::real_line(0.5).unwrap()
    }

    #[test]
    fn single_cell_peakon_is_exact() {
        let f = Profile::Peakon { amplitude: 1.0, center: 0.0 };
        let opts = ApproxOptions { radius: Some(3.0), ..Default::default() };
        let s = approximate_with(&f, 1, line(), 0.0, &opts).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s.peakons[0].strength - 1.0).abs() < 1e-14);
        assert_eq!(s.peakons[0].position, 0.0);
    }

    #[test]
    fn constant_on_circle() {
        let c = 0.7;
        let f = Profile::Fourier { mean: c, cos: vec![], sin: vec![] };
        for (n, tol) in [(8usize, 1.31e-3), (16, 1e-3)] {
            let s = approximate_multipeakon(&f, n, Domain::Periodic, 0.0).unwrap();
            for pk in &s.peakons {
                assert!((pk.strength - c / (2.0 * n as f64)).abs() < 1e-14);
            }
            let worst = (0..=400)
                .map(|k| (s.evaluate_u(k as f64 / 400.0) - c).abs() / c)
                .fold(0.0, f64::max);
            assert!(worst < tol, "n={n}: {worst}");
        }
    }

    #[test]
    fn weighted_energy_closed_form() {
        let s = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0)]).unwrap();
        assert!((weighted_energy(&s, 0.5).unwrap() - 8.0 / 3.0).abs() < 1e-13);
        let small = weighted_energy(&s, 1e-9).unwrap();
        assert!((small - s.energy()).abs() < 1e-8);
    }

    #[test]
    fn weighted_energy_profile_matches_refined_quadrature() {
        let f = Profile::Gaussian { amplitude: 1.0, center: 0.0, width: 1.0 };
        let v = profile_weighted_energy(&f, 0.5).unwrap();
        let mut g = |x: f64| {
            let a = (-x * x).exp();
            let d = -2.0 * x * a;
            (a * a + d * d) * (0.5 * x.abs()).exp()
        };
        let mut pts = vec![];
        for k in -80..=80 {
            pts.push(k as f64 * 0.25);
        }
        let oracle = adaptive_with_breaks(&mut g, -20.0, 20.0, &pts, 1e-15);
        assert!((v - oracle).abs() < 1e-8 * oracle);
    }

    #[test]
    fn total_variation_of_peakon() {
        let s = MultipeakonState::new(line(), vec![Peakon::new(1.5, 0.3)]).unwrap();
        assert!((ux_l1(&s) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn telescoped_strengths_sum_to_window_integral() {
        let f = Profile::Sech2 { amplitude: 1.0, center: 0.2, width: 0.8 };
        let opts = ApproxOptions { radius: Some(6.0), ..Default::default() };
        let s = approximate_with(&f, 24, line(), 0.0, &opts).unwrap();
        let total: f64 = s.strengths().iter().sum();
        let mut g = |x: f64| f.value(x);
        let direct = 0.5 * adaptive(&mut g, -6.0, 6.0, 1e-14)
            - 0.5 * (f.slope(6.0, Side::Left) - f.slope(-6.0, Side::Right));
        assert!((total - direct).abs() < 1e-12);
    }
}

#[cfg(test)]
mod runs {
    use super::*;

    #[test]
    fn gaussian_error_decreases() {
        let f = Profile::Gaussian { amplitude: 1.0, center: 0.0, width: 1.0 };
        let dom = Domain::real_line(0.5).unwrap();
        let errs: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| h1_distance(&f, &approximate_multipeakon(&f, n, dom, 0.0).unwrap()))
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] * 1.05);
        }
    }

    #[test]
    fn decay_monitor_on_traveling_peakon() {
        let dom = Domain::real_line(0.5).unwrap();
        let s = MultipeakonState::new(dom, vec![Peakon::new(1.0, 0.0)]).unwrap();
        let traj = crate::simulate(&s, 3.0, &crate::IntegratorConfig::default()).unwrap();
        let rows = decay_monitor(&traj, 0.5, 31).unwrap();
        assert!(rows.iter().all(|r| !r.violated));
        // translated peakon: closed-form weighted energy
        for r in &rows {
            let q = r.t;
            let exact = 2.0 * ((0.5 * q).exp() / 1.5 + (0.5 * q).exp() * (1.0 - (-2.5 * q).exp()) / 2.5
                + (0.5 * q).exp() * (-2.5 * q).exp() / 1.5);
            assert!((r.weighted_energy - exact).abs() < 1e-9 * exact, "{} {}", r.weighted_energy, exact);
            assert!((r.ux_l1 - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_monitor_on_empty_state() {
        let dom = Domain::real_line(0.5).unwrap();
        let traj = crate::simulate(&MultipeakonState::empty(dom), 1.0, &crate::IntegratorConfig::default()).unwrap();
        for r in decay_monitor(&traj, 0.5, 5).unwrap() {
            assert_eq!((r.weighted_energy, r.p_weighted_sup, r.ux_l1, r.bound), (0.0, 0.0, 0.0, 0.0));
        }
    }
}
