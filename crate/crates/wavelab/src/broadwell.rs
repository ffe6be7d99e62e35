//! Four-velocity planar Broadwell system in original and blow-up rescaled
//! coordinates.
//!
//! Fields are stored row-major (`j * nx + i`, rows along y) on a node grid.
//! With an outflow boundary the nodes include both edges of the rectangle;
//! with a periodic boundary the right and top edges are identified with the
//! left and bottom ones and not stored.

use crate::quad::pairwise_sum;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use thiserror::Error;

/// Velocities c1..c4.
pub const SPEEDS: [[f64; 2]; 4] = [[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]];

const CFL: f64 = 0.9;
const MAGIC: &[u8; 4] = b"BWG1";

#[derive(Debug, Error)]
pub enum BroadwellError {
    #[error("time step {dt} exceeds the CFL limit {limit}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("expected a {expected:?} grid, found {found:?}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("time {t} is not before the blow-up time {t_star}")]
    PastBlowup { t: f64, t_star: f64 },
    #[error("invalid weight: {0}")]
    WeightInvalid(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Original,
    Rescaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    /// Free outflow, zero inflow.
    #[default]
    Outflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    /// Tensor-product four-point Lagrange.
    Cubic,
}

fn default_bounds() -> [f64; 4] {
    [-1.0, 1.0, -1.0, 1.0]
}

/// Grid geometry: node counts, rectangle `[x0, x1, y0, y1]` and boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "default_bounds")]
    pub bounds: [f64; 4],
    #[serde(default)]
    pub boundary: Boundary,
}

impl GridSpec {
    pub fn square(n: usize, boundary: Boundary) -> Self {
        GridSpec { nx: n, ny: n, bounds: default_bounds(), boundary }
    }

    /// Unit square widened by `halo` on every side.
    pub fn with_halo(n: usize, halo: f64) -> Self {
        let b = 1.0 + halo;
        GridSpec { nx: n, ny: n, bounds: [-b, b, -b, b], boundary: Boundary::Outflow }
    }

    pub fn validate(&self) -> Result<(), BroadwellError> {
        let [x0, x1, y0, y1] = self.bounds;
        if self.nx < 4 || self.ny < 4 {
            return Err(BroadwellError::InvalidGrid("need at least 4 nodes per direction".into()));
        }
        if !(x1 > x0 && y1 > y0) || self.bounds.iter().any(|b| !b.is_finite()) {
            return Err(BroadwellError::InvalidGrid("empty or non-finite rectangle".into()));
        }
        Ok(())
    }

    fn cells(n: usize, boundary: Boundary) -> f64 {
        match boundary {
            Boundary::Periodic => n as f64,
            Boundary::Outflow => (n - 1) as f64,
        }
    }

    pub fn dx(&self) -> f64 {
        (self.bounds[1] - self.bounds[0]) / Self::cells(self.nx, self.boundary)
    }

    pub fn dy(&self) -> f64 {
        (self.bounds[3] - self.bounds[2]) / Self::cells(self.ny, self.boundary)
    }

    pub fn x(&self, i: usize) -> f64 {
        self.bounds[0] + i as f64 * self.dx()
    }

    pub fn y(&self, j: usize) -> f64 {
        self.bounds[2] + j as f64 * self.dy()
    }

    fn weight_1d(n: usize, k: usize, h: f64, boundary: Boundary) -> f64 {
        match boundary {
            Boundary::Outflow if k == 0 || k == n - 1 => 0.5 * h,
            _ => h,
        }
    }

    /// Trapezoid (outflow) or rectangle (periodic) quadrature weight of a node.
    pub fn cell_weight(&self, i: usize, j: usize) -> f64 {
        Self::weight_1d(self.nx, i, self.dx(), self.boundary)
            * Self::weight_1d(self.ny, j, self.dy(), self.boundary)
    }
}

/// Stencil along one axis: node indices and weights.
struct Stencil {
    idx: [usize; 4],
    wt: [f64; 4],
    len: usize,
}

fn stencil_1d(pos: f64, origin: f64, h: f64, n: usize, boundary: Boundary, interp: Interpolation) -> Option<Stencil> {
    let mut f = (pos - origin) / h;
    let periodic = boundary == Boundary::Periodic;
    if periodic {
        f = f.rem_euclid(n as f64);
    } else {
        let tol = 1e-10;
        if f < -tol || f > (n - 1) as f64 + tol {
            return None;
        }
        f = f.clamp(0.0, (n - 1) as f64);
    }
    let base = f.floor() as isize;
    let (start, len) = match interp {
        Interpolation::Bilinear => {
            let s = if periodic { base } else { base.min(n as isize - 2) };
            (s, 2)
        }
        Interpolation::Cubic => {
            let s = if periodic { base - 1 } else { (base - 1).clamp(0, n as isize - 4) };
            (s, 4)
        }
    };
    let s = f - start as f64;
    let mut st = Stencil { idx: [0; 4], wt: [0.0; 4], len };
    for a in 0..len {
        let mut l = 1.0;
        for b in 0..len {
            if b != a {
                l *= (s - b as f64) / (a as f64 - b as f64);
            }
        }
        st.wt[a] = l;
        st.idx[a] = (start + a as isize).rem_euclid(n as isize) as usize;
    }
    Some(st)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroadwellGrid {
    pub frame: Frame,
    pub spec: GridSpec,
    pub w: [Vec<f64>; 4],
    /// Original time t or rescaled time tau.
    pub t: f64,
    /// Mass removed by clipping negative densities, accumulated over steps.
    pub clipped_mass: f64,
}

impl BroadwellGrid {
    pub fn zeros(frame: Frame, spec: GridSpec) -> Result<Self, BroadwellError> {
        spec.validate()?;
        if frame == Frame::Rescaled && spec.boundary == Boundary::Periodic {
            return Err(BroadwellError::InvalidGrid("rescaled frame needs an outflow boundary".into()));
        }
        let n = spec.nx * spec.ny;
        Ok(BroadwellGrid {
            frame,
            spec,
            w: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            t: 0.0,
            clipped_mass: 0.0,
        })
    }

    pub fn from_fn<F>(frame: Frame, spec: GridSpec, f: F) -> Result<Self, BroadwellError>
    where
        F: Fn(f64, f64) -> [f64; 4],
    {
        let mut g = Self::zeros(frame, spec)?;
        for j in 0..spec.ny {
            for i in 0..spec.nx {
                let v = f(spec.x(i), spec.y(j));
                if v.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                    return Err(BroadwellError::InvalidGrid(format!(
                        "density at ({}, {}) must be finite and nonnegative",
                        spec.x(i),
                        spec.y(j)
                    )));
                }
                for k in 0..4 {
                    g.w[k][j * spec.nx + i] = v[k];
                }
            }
        }
        Ok(g)
    }

    pub fn uniform(frame: Frame, spec: GridSpec, a: f64) -> Result<Self, BroadwellError> {
        Self::from_fn(frame, spec, |_, _| [a; 4])
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> f64 {
        self.w[k][j * self.spec.nx + i]
    }

    /// Interpolated density of field `k`; zero outside an outflow rectangle.
    pub fn sample(&self, k: usize, x: f64, y: f64, interp: Interpolation) -> f64 {
        let s = &self.spec;
        let (Some(sx), Some(sy)) = (
            stencil_1d(x, s.bounds[0], s.dx(), s.nx, s.boundary, interp),
            stencil_1d(y, s.bounds[2], s.dy(), s.ny, s.boundary, interp),
        ) else {
            return 0.0;
        };
        let field = &self.w[k];
        let mut acc = 0.0;
        for b in 0..sy.len {
            let row = sy.idx[b] * s.nx;
            let mut r = 0.0;
            for a in 0..sx.len {
                r += sx.wt[a] * field[row + sx.idx[a]];
            }
            acc += sy.wt[b] * r;
        }
        acc
    }

    pub fn mass(&self) -> f64 {
        let s = &self.spec;
        let rows: Vec<f64> = (0..s.ny)
            .into_par_iter()
            .map(|j| {
                let terms: Vec<f64> = (0..s.nx)
                    .map(|i| {
                        let idx = j * s.nx + i;
                        (self.w[0][idx] + self.w[1][idx] + self.w[2][idx] + self.w[3][idx]) * s.cell_weight(i, j)
                    })
                    .collect();
                pairwise_sum(&terms)
            })
            .collect();
        pairwise_sum(&rows)
    }

    pub fn sup(&self, k: usize) -> f64 {
        self.w[k].iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn sup_all(&self) -> f64 {
        (0..4).map(|k| self.sup(k)).fold(0.0, f64::max)
    }

    /// Node position of the largest density over all fields.
    pub fn argmax(&self) -> [f64; 2] {
        let mut best = (f64::NEG_INFINITY, 0);
        for field in &self.w {
            for (idx, &v) in field.iter().enumerate() {
                if v > best.0 {
                    best = (v, idx);
                }
            }
        }
        let (i, j) = (best.1 % self.spec.nx, best.1 / self.spec.nx);
        [self.spec.x(i), self.spec.y(j)]
    }

    fn velocity(&self, k: usize, x: f64, y: f64) -> [f64; 2] {
        let c = SPEEDS[k];
        match self.frame {
            Frame::Original => c,
            Frame::Rescaled => [c[0] + x, c[1] + y],
        }
    }

    /// Largest admissible step: 0.9 min(dx, dy) / max |advection speed|.
    pub fn cfl_limit(&self) -> f64 {
        let [x0, x1, y0, y1] = self.spec.bounds;
        let mut speed: f64 = 0.0;
        for k in 0..4 {
            for &(x, y) in &[(x0, y0), (x0, y1), (x1, y0), (x1, y1)] {
                let v = self.velocity(k, x, y);
                speed = speed.max(v[0].hypot(v[1]));
            }
        }
        CFL * self.spec.dx().min(self.spec.dy()) / speed
    }

    fn foot(&self, k: usize, x: f64, y: f64, h: f64) -> [f64; 2] {
        let c = SPEEDS[k];
        match self.frame {
            Frame::Original => [x - c[0] * h, y - c[1] * h],
            Frame::Rescaled => {
                let e = (-h).exp();
                [(x + c[0]) * e - c[0], (y + c[1]) * e - c[1]]
            }
        }
    }
}

/// Collision sources: g1 = g3 = w2 w4 - w1 w3, g2 = g4 = -g1.
pub fn collision_term(w1: f64, w2: f64, w3: f64, w4: f64) -> [f64; 4] {
    let g = w2 * w4 - w1 * w3;
    [g, -g, g, -g]
}

/// Analytic forcing added to the source, evaluated at (t, x, y).
pub type Forcing<'a> = &'a (dyn Fn(f64, f64, f64) -> [f64; 4] + Sync);

#[derive(Clone, Copy, Default)]
pub struct StepOptions<'a> {
    pub interp: Interpolation,
    pub forcing: Option<Forcing<'a>>,
}

impl std::fmt::Debug for StepOptions<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StepOptions")
            .field("interp", &self.interp)
            .field("forcing", &self.forcing.is_some())
            .finish()
    }
}

fn advect(grid: &BroadwellGrid, h: f64, interp: Interpolation) -> [Vec<f64>; 4] {
    let s = grid.spec;
    let field = |k: usize| {
        let mut out = vec![0.0; s.nx * s.ny];
        out.par_chunks_mut(s.nx).enumerate().for_each(|(j, row)| {
            let y = s.y(j);
            for (i, v) in row.iter_mut().enumerate() {
                let [fx, fy] = grid.foot(k, s.x(i), y, h);
                *v = grid.sample(k, fx, fy, interp);
            }
        });
        out
    };
    [field(0), field(1), field(2), field(3)]
}

fn source_rhs(frame: Frame, w: [f64; 4], extra: Option<[f64; 4]>) -> [f64; 4] {
    let mut g = collision_term(w[0], w[1], w[2], w[3]);
    for k in 0..4 {
        if frame == Frame::Rescaled {
            g[k] -= w[k];
        }
        if let Some(e) = extra {
            g[k] += e[k];
        }
    }
    g
}

/// One Strang step: half advection, Heun source step, half advection.
/// Negative values are clipped to zero and the removed mass accumulated.
pub fn step_with(grid: &BroadwellGrid, dt: f64, opts: &StepOptions) -> Result<BroadwellGrid, BroadwellError> {
    let limit = grid.cfl_limit();
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(BroadwellError::CflViolation { dt, limit });
    }
    let s = grid.spec;
    let mut half = grid.clone();
    half.w = advect(grid, 0.5 * dt, opts.interp);

    let t0 = grid.t;
    let frame = grid.frame;
    let [a, b, c, d] = &mut half.w;
    let rows: Vec<_> = a
        .par_chunks_mut(s.nx)
        .zip(b.par_chunks_mut(s.nx))
        .zip(c.par_chunks_mut(s.nx))
        .zip(d.par_chunks_mut(s.nx))
        .enumerate()
        .collect();
    let clipped_rows: Vec<f64> = rows
        .into_par_iter()
        .map(|(j, (((r0, r1), r2), r3))| {
            let y = s.y(j);
            let mut clipped = Vec::new();
            for i in 0..s.nx {
                let x = s.x(i);
                let w = [r0[i], r1[i], r2[i], r3[i]];
                let f0 = opts.forcing.map(|f| f(t0, x, y));
                let k1 = source_rhs(frame, w, f0);
                let mid = std::array::from_fn(|k| w[k] + dt * k1[k]);
                let f1 = opts.forcing.map(|f| f(t0 + dt, x, y));
                let k2 = source_rhs(frame, mid, f1);
                let mut out: [f64; 4] = std::array::from_fn(|k| w[k] + 0.5 * dt * (k1[k] + k2[k]));
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        clipped.push(-*v * s.cell_weight(i, j));
                        *v = 0.0;
                    }
                }
                r0[i] = out[0];
                r1[i] = out[1];
                r2[i] = out[2];
                r3[i] = out[3];
            }
            pairwise_sum(&clipped)
        })
        .collect();
    let clipped = pairwise_sum(&clipped_rows);

    let mut next = half.clone();
    next.w = advect(&half, 0.5 * dt, opts.interp);
    let late: Vec<f64> = (0..s.ny)
        .into_par_iter()
        .map(|j| {
            let terms: Vec<f64> = (0..s.nx)
                .map(|i| {
                    let idx = j * s.nx + i;
                    let neg: f64 = next.w.iter().map(|f| (-f[idx]).max(0.0)).sum();
                    neg * s.cell_weight(i, j)
                })
                .collect();
            pairwise_sum(&terms)
        })
        .collect();
    for field in next.w.iter_mut() {
        field.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let clipped = clipped + pairwise_sum(&late);
    if clipped > 0.0 {
        log::debug!("clipped mass {clipped:e} at t = {}", t0 + dt);
    }
    next.t = t0 + dt;
    next.clipped_mass = grid.clipped_mass + clipped;
    Ok(next)
}

pub fn step(grid: &BroadwellGrid, dt: f64) -> Result<BroadwellGrid, BroadwellError> {
    step_with(grid, dt, &StepOptions::default())
}

/// Advances to `t_end` with equal steps no larger than the CFL limit
/// (or `dt_max` when smaller).
pub fn advance(
    grid: &BroadwellGrid,
    t_end: f64,
    dt_max: Option<f64>,
    opts: &StepOptions,
) -> Result<BroadwellGrid, BroadwellError> {
    let span = t_end - grid.t;
    if span <= 0.0 {
        return Ok(grid.clone());
    }
    let cap = dt_max.map_or(grid.cfl_limit(), |d| d.min(grid.cfl_limit()));
    let n = (span / cap).ceil() as usize;
    let dt = span / n as f64;
    let mut g = grid.clone();
    for _ in 0..n {
        g = step_with(&g, dt, opts)?;
    }
    g.t = t_end;
    Ok(g)
}

/// Self-similar change of variables tau = -ln(t* - t), eta = (x - x*)/(t* - t),
/// w = (t* - t) u.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RescaleMap {
    pub t_star: f64,
    pub x_star: [f64; 2],
}

impl RescaleMap {
    pub fn tau(&self, t: f64) -> Result<f64, BroadwellError> {
        if !(t < self.t_star) {
            return Err(BroadwellError::PastBlowup { t, t_star: self.t_star });
        }
        Ok(-(self.t_star - t).ln())
    }

    pub fn time(&self, tau: f64) -> f64 {
        self.t_star - (-tau).exp()
    }
}

fn expect_frame(grid: &BroadwellGrid, frame: Frame) -> Result<(), BroadwellError> {
    if grid.frame != frame {
        return Err(BroadwellError::FrameMismatch { expected: frame, found: grid.frame });
    }
    Ok(())
}

/// Resamples an original-frame grid onto rescaled nodes `target`.
pub fn rescale(u: &BroadwellGrid, map: &RescaleMap, target: &GridSpec) -> Result<BroadwellGrid, BroadwellError> {
    expect_frame(u, Frame::Original)?;
    let tau = map.tau(u.t)?;
    let delta = map.t_star - u.t;
    let mut w = BroadwellGrid::zeros(Frame::Rescaled, *target)?;
    for k in 0..4 {
        for j in 0..target.ny {
            for i in 0..target.nx {
                let x = map.x_star[0] + delta * target.x(i);
                let y = map.x_star[1] + delta * target.y(j);
                w.w[k][j * target.nx + i] = delta * u.sample(k, x, y, Interpolation::Bilinear);
            }
        }
    }
    w.t = tau;
    Ok(w)
}

/// Inverse of [`rescale`]: resamples a rescaled grid onto original nodes.
pub fn unrescale(w: &BroadwellGrid, map: &RescaleMap, target: &GridSpec) -> Result<BroadwellGrid, BroadwellError> {
    expect_frame(w, Frame::Rescaled)?;
    let delta = (-w.t).exp();
    let mut u = BroadwellGrid::zeros(Frame::Original, *target)?;
    for k in 0..4 {
        for j in 0..target.ny {
            for i in 0..target.nx {
                let eta = (target.x(i) - map.x_star[0]) / delta;
                let zeta = (target.y(j) - map.x_star[1]) / delta;
                u.w[k][j * target.nx + i] = w.sample(k, eta, zeta, Interpolation::Bilinear) / delta;
            }
        }
    }
    u.t = map.time(w.t);
    Ok(u)
}

/// Weight rate for the decay functionals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KappaMode {
    /// Fixed kappa bounding the densities; epsilon = e^{-2 kappa}/2.
    Const { kappa: f64 },
    /// k(t) = theta ln t.
    LogT { theta: f64 },
}

impl KappaMode {
    /// The exponent k of the weights 1 - e^{2k(s-1)}/2 and 1 - e^{-2k(s+1)}/2.
    pub fn rate(&self, grid: &BroadwellGrid) -> Result<f64, BroadwellError> {
        match *self {
            KappaMode::Const { kappa } => {
                let sup = grid.sup_all();
                if !(kappa > 0.0) || kappa < sup {
                    return Err(BroadwellError::WeightInvalid(format!("kappa {kappa} below sup w = {sup}")));
                }
                Ok(kappa)
            }
            KappaMode::LogT { theta } => {
                if !(theta > 0.0 && theta < 0.25) {
                    return Err(BroadwellError::WeightInvalid(format!("theta {theta} outside (0, 1/4)")));
                }
                let k = if grid.t > 0.0 { theta * grid.t.ln() } else { f64::NEG_INFINITY };
                if k < 0.5 {
                    return Err(BroadwellError::WeightInvalid(format!(
                        "k(t) = {k} < 1/2; need t >= {}",
                        (0.5 / theta).exp()
                    )));
                }
                Ok(k)
            }
        }
    }
}

/// Pairs of interacting fields. Q14 and Q23 live on horizontal lines, Q12
/// and Q34 on vertical ones; the first field moves toward +s along the
/// line, the second toward -s.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pair {
    Q14,
    Q23,
    Q12,
    Q34,
}

impl Pair {
    pub const ALL: [Pair; 4] = [Pair::Q14, Pair::Q12, Pair::Q23, Pair::Q34];

    fn layout(self) -> (usize, usize, bool) {
        match self {
            Pair::Q14 => (0, 3, true),
            Pair::Q23 => (1, 2, true),
            Pair::Q12 => (0, 1, false),
            Pair::Q34 => (3, 2, false),
        }
    }
}

fn line_nodes(grid: &BroadwellGrid, horizontal: bool) -> usize {
    let h = if horizontal { grid.spec.dx() } else { grid.spec.dy() };
    (2.0 / h).ceil().max(2.0) as usize
}

/// Trapezoid rule over s in [lo, 1] along the line at the given height.
fn line_integral<F: Fn(f64) -> f64>(grid: &BroadwellGrid, horizontal: bool, lo: f64, f: F) -> f64 {
    let m = line_nodes(grid, horizontal);
    let h = (1.0 - lo) / m as f64;
    let terms: Vec<f64> = (0..=m)
        .map(|j| {
            let s = lo + h * j as f64;
            let w = if j == 0 || j == m { 0.5 } else { 1.0 };
            w * h * f(s)
        })
        .collect();
    pairwise_sum(&terms)
}

fn check_line(at: f64) -> Result<(), BroadwellError> {
    if !(-1.0..=1.0).contains(&at) {
        return Err(BroadwellError::InvalidGrid(format!("line {at} outside [-1, 1]")));
    }
    Ok(())
}

/// Weighted pair integral over [-1, 1] on the line at `at`.
pub fn q_line(grid: &BroadwellGrid, pair: Pair, at: f64, mode: &KappaMode) -> Result<f64, BroadwellError> {
    expect_frame(grid, Frame::Rescaled)?;
    check_line(at)?;
    let k = mode.rate(grid)?;
    Ok(q_line_with(grid, pair, at, k))
}

fn q_line_with(grid: &BroadwellGrid, pair: Pair, at: f64, k: f64) -> f64 {
    let (plus, minus, horizontal) = pair.layout();
    let point = |s: f64| if horizontal { (s, at) } else { (at, s) };
    line_integral(grid, horizontal, -1.0, |s| {
        let (x, y) = point(s);
        let wp = 1.0 - 0.5 * (2.0 * k * (s - 1.0)).exp();
        let wm = 1.0 - 0.5 * (-2.0 * k * (s + 1.0)).exp();
        wp * grid.sample(plus, x, y, Interpolation::Bilinear) + wm * grid.sample(minus, x, y, Interpolation::Bilinear)
    })
}

pub fn q14(grid: &BroadwellGrid, y_line: f64, mode: &KappaMode) -> Result<f64, BroadwellError> {
    q_line(grid, Pair::Q14, y_line, mode)
}

/// Largest pair functional over lines sampled across [-1, 1].
pub fn q_sup(grid: &BroadwellGrid, pair: Pair, mode: &KappaMode) -> Result<f64, BroadwellError> {
    expect_frame(grid, Frame::Rescaled)?;
    let k = mode.rate(grid)?;
    let horizontal = pair.layout().2;
    let m = line_nodes(grid, !horizontal);
    Ok((0..=m)
        .into_par_iter()
        .map(|j| q_line_with(grid, pair, -1.0 + 2.0 * j as f64 / m as f64, k))
        .reduce(|| 0.0, f64::max))
}

/// Unweighted line integral of field `k` over [-1, 1].
pub fn field_line_integral(grid: &BroadwellGrid, k: usize, horizontal: bool, at: f64) -> f64 {
    line_integral(grid, horizontal, -1.0, |s| {
        let (x, y) = if horizontal { (s, at) } else { (at, s) };
        grid.sample(k, x, y, Interpolation::Bilinear)
    })
}

/// Integral of field `k` over the unit square [-1, 1]^2.
pub fn cell_integral(grid: &BroadwellGrid, k: usize) -> f64 {
    let m = line_nodes(grid, false);
    let rows: Vec<f64> = (0..=m)
        .into_par_iter()
        .map(|j| {
            let wt = if j == 0 || j == m { 0.5 } else { 1.0 };
            wt * field_line_integral(grid, k, true, -1.0 + 2.0 * j as f64 / m as f64)
        })
        .collect();
    pairwise_sum(&rows) * 2.0 / m as f64
}

/// Optional diagnostic A = integral over [x_from, 1] of (w1 + w4) on the line y.
pub fn a_diagnostic(grid: &BroadwellGrid, x_from: f64, y_line: f64) -> Result<f64, BroadwellError> {
    check_line(x_from)?;
    check_line(y_line)?;
    Ok(line_integral(grid, true, x_from, |x| {
        grid.sample(0, x, y_line, Interpolation::Bilinear) + grid.sample(3, x, y_line, Interpolation::Bilinear)
    }))
}

/// Decay functionals of one rescaled snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSample {
    pub t: f64,
    pub q14_sup: f64,
    pub q12_sup: f64,
    pub q23_sup: f64,
    pub q34_sup: f64,
    /// Largest unweighted line integral of a single field.
    pub line_sup: f64,
    /// Largest integral of a single field over the unit square.
    pub cell_max: f64,
}

pub fn functionals(grid: &BroadwellGrid, mode: &KappaMode) -> Result<FunctionalSample, BroadwellError> {
    let q = |p| q_sup(grid, p, mode);
    let m = line_nodes(grid, false);
    let mut line_sup: f64 = 0.0;
    for k in 0..4 {
        let horizontal = k == 0 || k == 3;
        for j in 0..=m {
            line_sup = line_sup.max(field_line_integral(grid, k, horizontal, -1.0 + 2.0 * j as f64 / m as f64));
        }
    }
    Ok(FunctionalSample {
        t: grid.t,
        q14_sup: q(Pair::Q14)?,
        q12_sup: q(Pair::Q12)?,
        q23_sup: q(Pair::Q23)?,
        q34_sup: q(Pair::Q34)?,
        line_sup,
        cell_max: (0..4).map(|k| cell_integral(grid, k)).fold(0.0, f64::max),
    })
}

/// A0 = max{2 k(t0) t0^{1-4 theta}, 8 (1 - 3 theta)} with k(t) = theta ln t.
pub fn a0(theta: f64, t0: f64) -> f64 {
    (2.0 * theta * t0.ln() * t0.powf(1.0 - 4.0 * theta)).max(8.0 * (1.0 - 3.0 * theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    /// Q14 sup (Const) or the largest single-field line integral (LogT).
    pub line_measured: f64,
    pub line_bound: f64,
    pub cell_measured: f64,
    pub cell_bound: f64,
    /// Smallest relative margin 1 - measured / bound.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    pub all_pass: bool,
    pub a0: Option<f64>,
}

/// Compares sampled functionals against the decay bounds.
///
/// Const mode measures time from the first sample: the line bound is
/// (1/(4 kappa) + eps^2 s / 2)^{-1} and the cell bound
/// 4 (1/(4 kappa) + e^{-4 kappa} s / 8)^{-1}. LogT mode takes t0 as the
/// first sample time, bounds single-field line integrals by 2 A0 t^{4 theta - 1}
/// and cell integrals by twice that.
pub fn decay_bounds(samples: &[FunctionalSample], mode: &KappaMode, slack: f64) -> DecayReport {
    let Some(first) = samples.first() else {
        return DecayReport { rows: Vec::new(), all_pass: true, a0: None };
    };
    let t0 = first.t;
    let a0v = match *mode {
        KappaMode::LogT { theta } => Some(a0(theta, t0)),
        KappaMode::Const { .. } => None,
    };
    let rows: Vec<DecayRow> = samples
        .iter()
        .map(|s| {
            let (line_measured, line_bound, cell_bound) = match *mode {
                KappaMode::Const { kappa } => {
                    let el = s.t - t0;
                    let eps = 0.5 * (-2.0 * kappa).exp();
                    let line = 1.0 / (0.25 / kappa + 0.5 * eps * eps * el);
                    let cell = 4.0 / (0.25 / kappa + (-4.0 * kappa).exp() * el / 8.0);
                    (s.q14_sup, line, cell)
                }
                KappaMode::LogT { theta } => {
                    let line = 2.0 * a0v.unwrap_or(0.0) * s.t.powf(4.0 * theta - 1.0);
                    (s.line_sup, line, 2.0 * line)
                }
            };
            let margin = (1.0 - line_measured / line_bound).min(1.0 - s.cell_max / cell_bound);
            let pass = line_measured <= line_bound * (1.0 + slack) && s.cell_max <= cell_bound * (1.0 + slack);
            DecayRow { t: s.t, line_measured, line_bound, cell_measured: s.cell_max, cell_bound, margin, pass }
        })
        .collect();
    let all_pass = rows.iter().all(|r| r.pass);
    DecayReport { rows, all_pass, a0: a0v }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub t: f64,
    pub sup_norm: f64,
    /// sup (t* - t) / ln|ln(t* - t)|; NaN where ln|ln(t* - t)| <= 0.
    pub rate: f64,
    pub naive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub running_max: f64,
    /// Largest rate over the last quarter of defined samples.
    pub tail_limsup: f64,
    pub exceeds_quarter: bool,
    pub exceeds_fifth: bool,
}

impl RateReport {
    pub fn verdict(&self) -> &'static str {
        if self.exceeds_quarter {
            "exceeds 1/4"
        } else {
            "below 1/4: not a primary blow-up profile"
        }
    }
}

/// Blow-up rate monitor. The flags compare the tail estimate of the limsup
/// with 1/4 and 1/5.
pub fn blowup_rate_monitor(series: &[(f64, f64)], t_star: f64) -> Result<RateReport, BroadwellError> {
    let mut rows = Vec::with_capacity(series.len());
    for &(t, sup) in series {
        if !(t < t_star) {
            return Err(BroadwellError::PastBlowup { t, t_star });
        }
        let d = t_star - t;
        let ll = d.ln().abs().ln();
        let rate = if ll > 0.0 { sup * d / ll } else { f64::NAN };
        rows.push(RateRow { t, sup_norm: sup, rate, naive: sup * d });
    }
    let defined: Vec<f64> = rows.iter().map(|r| r.rate).filter(|r| r.is_finite()).collect();
    let running_max = defined.iter().copied().fold(f64::NAN, f64::max);
    let tail = &defined[defined.len() - defined.len().div_ceil(4)..];
    let tail_limsup = tail.iter().copied().fold(f64::NAN, f64::max);
    Ok(RateReport {
        rows,
        running_max,
        tail_limsup,
        exceeds_quarter: tail_limsup > 0.25,
        exceeds_fifth: tail_limsup > 0.2,
    })
}

/// Blow-up time from a linear least-squares fit of 1/sup against t over the
/// samples within the last decade of the sup norm. None unless 1/sup is
/// fitted as decreasing.
pub fn estimate_t_star(series: &[(f64, f64)]) -> Option<f64> {
    let last = series.last()?.1;
    let mut start = series.len().saturating_sub(2);
    while start > 0 && series[start - 1].1 >= last / 10.0 {
        start -= 1;
    }
    let pts = &series[start..];
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mr = pts.iter().map(|p| 1.0 / p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (1.0 / p.1 - mr)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return None;
    }
    Some(mt - mr / slope)
}

/// Snapshot read back from the binary format.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub nx: usize,
    pub ny: usize,
    pub frame: Frame,
    pub t: f64,
    pub w: [Vec<f64>; 4],
}

impl Snapshot {
    pub fn into_grid(self, bounds: [f64; 4], boundary: Boundary) -> Result<BroadwellGrid, BroadwellError> {
        let spec = GridSpec { nx: self.nx, ny: self.ny, bounds, boundary };
        let mut g = BroadwellGrid::zeros(self.frame, spec)?;
        g.w = self.w;
        g.t = self.t;
        Ok(g)
    }
}

/// "BWG1", u32 nx, u32 ny, u32 frame (0 original, 1 rescaled), f64 t, then
/// the four fields row-major, all little-endian.
pub fn write_snapshot<W: Write>(grid: &BroadwellGrid, out: &mut W) -> Result<(), BroadwellError> {
    let dim = |n: usize| u32::try_from(n).map_err(|_| BroadwellError::Snapshot("grid too large".into()));
    out.write_all(MAGIC)?;
    out.write_all(&dim(grid.spec.nx)?.to_le_bytes())?;
    out.write_all(&dim(grid.spec.ny)?.to_le_bytes())?;
    let frame: u32 = match grid.frame {
        Frame::Original => 0,
        Frame::Rescaled => 1,
    };
    out.write_all(&frame.to_le_bytes())?;
    out.write_all(&grid.t.to_le_bytes())?;
    for field in &grid.w {
        for v in field {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(input: &mut R) -> Result<Snapshot, BroadwellError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(BroadwellError::Snapshot("bad magic".into()));
    }
    let mut u4 = [0u8; 4];
    let mut read_u32 = |input: &mut R| -> Result<u32, BroadwellError> {
        input.read_exact(&mut u4)?;
        Ok(u32::from_le_bytes(u4))
    };
    let nx = read_u32(input)? as usize;
    let ny = read_u32(input)? as usize;
    let frame = match read_u32(input)? {
        0 => Frame::Original,
        1 => Frame::Rescaled,
        f => return Err(BroadwellError::Snapshot(format!("unknown frame tag {f}"))),
    };
    let mut u8b = [0u8; 8];
    input.read_exact(&mut u8b)?;
    let t = f64::from_le_bytes(u8b);
    let mut read_field = || -> Result<Vec<f64>, BroadwellError> {
        let mut bytes = vec![0u8; nx * ny * 8];
        input.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let w = [read_field()?, read_field()?, read_field()?, read_field()?];
    Ok(Snapshot { nx, ny, frame, t, w })
}

/// Smooth periodic manufactured solution on [-1, 1]^2 in the original frame,
/// w_k = 1 + A sin(pi x + a_k t + b_k) cos(pi y + d_k).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Manufactured {
    pub amplitude: f64,
    pub rates: [f64; 4],
    pub phases: [f64; 4],
    pub shifts: [f64; 4],
}

impl Default for Manufactured {
    fn default() -> Self {
        Manufactured {
            amplitude: 0.4,
            rates: [1.0, -0.7, 0.5, 1.3],
            phases: [0.0, 0.9, 2.1, -1.2],
            shifts: [0.3, -0.5, 1.1, 0.0],
        }
    }
}

impl Manufactured {
    pub fn exact(&self, t: f64, x: f64, y: f64) -> [f64; 4] {
        use std::f64::consts::PI;
        std::array::from_fn(|k| {
            1.0 + self.amplitude
                * (PI * x + self.rates[k] * t + self.phases[k]).sin()
                * (PI * y + self.shifts[k]).cos()
        })
    }

    /// Source making `exact` a solution: d_t w + c . grad w - G(w).
    pub fn forcing(&self, t: f64, x: f64, y: f64) -> [f64; 4] {
        use std::f64::consts::PI;
        let w = self.exact(t, x, y);
        let g = collision_term(w[0], w[1], w[2], w[3]);
        std::array::from_fn(|k| {
            let arg = PI * x + self.rates[k] * t + self.phases[k];
            let (sa, ca) = arg.sin_cos();
            let (sb, cb) = (PI * y + self.shifts[k]).sin_cos();
            let a = self.amplitude;
            let wt = a * self.rates[k] * ca * cb;
            let wx = a * PI * ca * cb;
            let wy = -a * PI * sa * sb;
            wt + SPEEDS[k][0] * wx + SPEEDS[k][1] * wy - g[k]
        })
    }

    /// Max-norm error at `t_end` on an n x n periodic grid, with cubic
    /// interpolation and steps at the CFL limit.
    pub fn error(&self, n: usize, t_end: f64) -> Result<f64, BroadwellError> {
        let spec = GridSpec::square(n, Boundary::Periodic);
        let g0 = BroadwellGrid::from_fn(Frame::Original, spec, |x, y| self.exact(0.0, x, y))?;
        let forcing = |t: f64, x: f64, y: f64| self.forcing(t, x, y);
        let opts = StepOptions { interp: Interpolation::Cubic, forcing: Some(&forcing) };
        let g = advance(&g0, t_end, None, &opts)?;
        let mut err: f64 = 0.0;
        for j in 0..n {
            for i in 0..n {
                let ex = self.exact(t_end, spec.x(i), spec.y(j));
                for k in 0..4 {
                    err = err.max((g.at(k, i, j) - ex[k]).abs());
                }
            }
        }
        Ok(err)
    }
}
