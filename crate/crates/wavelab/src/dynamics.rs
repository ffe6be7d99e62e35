//! Multipeakon ODE integration with a desingularizing chart for
//! peakon-antipeakon interactions.

use crate::dopri::{dense, trial_step, Trial};
use crate::peakon::{fmt17, Domain, EnergyAtom, MultipeakonState, Peakon, PeakonError};
use crate::quad::bisect;
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("peakons {0} and {1} share a position")]
    CoincidentPositions(usize, usize),
    #[error("chart angle w = {0} is outside the valid neighbourhood of pi")]
    ChartDomainExceeded(f64),
    #[error("three or more peakons meet near x = {position} at t = {time}")]
    TripleCollisionAnomaly { time: f64, position: f64 },
    #[error("step size underflow at t = {time} (h = {step})")]
    StepSizeUnderflow { time: f64, step: f64 },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("time {0} lies outside the integrated interval")]
    OutsideTrajectory(f64),
    #[error(transparent)]
    State(#[from] PeakonError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    Conservative,
    Dissipative,
}

impl CollisionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CollisionMode::Conservative => "conservative",
            CollisionMode::Dissipative => "dissipative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Gap below which a closing opposite-sign pair is handed to the chart.
    pub collision_gap: f64,
    pub strength_cap: f64,
    pub max_step: f64,
    pub mode: CollisionMode,
    /// Distance |w - pi| at which the chart is left after the interaction.
    pub chart_exit: f64,
    /// Strengths below this are dropped after a dissipative merge.
    pub prune_tol: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            collision_gap: 1e-3,
            strength_cap: 1e3,
            max_step: 0.1,
            mode: CollisionMode::Conservative,
            chart_exit: PI / 4.0,
            prune_tol: 1e-12,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let checks = [
            ("rel_tol", self.rel_tol),
            ("abs_tol", self.abs_tol),
            ("collision_gap", self.collision_gap),
            ("strength_cap", self.strength_cap),
            ("max_step", self.max_step),
            ("chart_exit", self.chart_exit),
            ("prune_tol", self.prune_tol),
        ];
        for (name, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(DynamicsError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.collision_gap >= 0.1 {
            return Err(DynamicsError::InvalidConfig("collision_gap must be small".into()));
        }
        if self.chart_exit >= PI / 2.0 {
            return Err(DynamicsError::InvalidConfig("chart_exit must be below pi/2".into()));
        }
        Ok(())
    }
}

/// Pair variables (z, w, eta, zeta) plus the peakons not taking part.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularChart {
    pub domain: Domain,
    pub time: f64,
    pub z: f64,
    pub w: f64,
    pub eta: f64,
    pub zeta: f64,
    pub background: Vec<Peakon>,
    pub collision_time: Option<f64>,
    pub collision_position: Option<f64>,
    pub concentrated_energy: Option<f64>,
}

/// Time derivative of a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartRate {
    pub dz: f64,
    pub dw: f64,
    pub deta: f64,
    pub dzeta: f64,
    pub dq: Vec<f64>,
    pub dp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionEvent {
    pub t: f64,
    pub q_bar: f64,
    pub e_tau: f64,
    pub mode: CollisionMode,
    /// Energy removed by a dissipative merge.
    pub lost_energy: Option<f64>,
}

impl CollisionEvent {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"type\": \"collision\", \"t\": {}, \"q_bar\": {}, \"e_tau\": {}, \"mode\": \"{}\"}}",
            fmt17(self.t),
            fmt17(self.q_bar),
            fmt17(self.e_tau),
            self.mode.as_str()
        )
    }
}

pub fn events_to_json(events: &[CollisionEvent]) -> String {
    let body: Vec<String> = events.iter().map(|e| e.to_json()).collect();
    format!("[{}]", body.join(", "))
}

fn coincident(domain: &Domain, d: f64) -> bool {
    if domain.is_periodic() {
        d.rem_euclid(1.0) == 0.0
    } else {
        d == 0.0
    }
}

/// Hamiltonian vector field on y = [q_1..q_N, p_1..p_N].
fn regular_field(domain: &Domain, y: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
    let n = y.len() / 2;
    let (q, p) = y.split_at(n);
    for i in 0..n {
        let mut dq = 0.0;
        let mut s = 0.0;
        for j in 0..n {
            let d = q[i] - q[j];
            if i != j {
                if coincident(domain, d) {
                    return Err(DynamicsError::CoincidentPositions(i.min(j), i.max(j)));
                }
                s += p[j] * domain.kernel_prime(d);
            }
            dq += p[j] * domain.kernel(d);
        }
        out[i] = dq;
        out[n + i] = -p[i] * s;
    }
    Ok(())
}

/// Right-hand side of the regular chart: (dq/dt, dp/dt).
pub fn rhs_regular(state: &MultipeakonState) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
    let y = regular_vector(state);
    let mut out = vec![0.0; y.len()];
    regular_field(&state.domain, &y, &mut out)?;
    let n = state.len();
    let dp = out.split_off(n);
    Ok((out, dp))
}

fn regular_vector(state: &MultipeakonState) -> Vec<f64> {
    let mut y = state.positions();
    y.extend(state.strengths());
    y
}

/// (1 - e^y + y e^y) / y^2.
fn h_fun(y: f64) -> f64 {
    if y.abs() < 0.05 {
        let c = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 8.0,
            1.0 / 30.0,
            1.0 / 144.0,
            1.0 / 840.0,
            1.0 / 5760.0,
            1.0 / 45360.0,
        ];
        c.iter().rev().fold(0.0, |acc, k| acc * y + k)
    } else {
        (1.0 - y.exp() + y * y.exp()) / (y * y)
    }
}

fn sinhc(y: f64) -> f64 {
    if y.abs() < 1e-3 {
        1.0 + y * y / 6.0 + y.powi(4) / 120.0
    } else {
        y.sinh() / y
    }
}

/// (e^y - 1) / y.
fn exprel(y: f64) -> f64 {
    if y == 0.0 {
        1.0
    } else {
        y.exp_m1() / y
    }
}

/// Terms (coef, sigma) with K(x - q) = sum coef e^{sigma (x - m)} near x = m.
fn local_terms(domain: &Domain, m: f64, q: f64) -> [(f64, f64); 2] {
    match domain {
        Domain::RealLine { .. } => {
            if q < m {
                [((q - m).exp(), -1.0), (0.0, 0.0)]
            } else {
                [((m - q).exp(), 1.0), (0.0, 0.0)]
            }
        }
        Domain::Periodic => {
            let y0 = (m - q).rem_euclid(1.0);
            [(y0.exp() / (E - 1.0), 1.0), ((1.0 - y0).exp() / (E - 1.0), -1.0)]
        }
    }
}

struct PairGeometry {
    c: f64,
    d: f64,
    sh: f64,
    ch: f64,
}

fn pair_geometry(w: f64) -> Result<PairGeometry, DynamicsError> {
    if !((w - PI).abs() < PI / 2.0) {
        return Err(DynamicsError::ChartDomainExceeded(w));
    }
    let (sh, ch) = (0.5 * w).sin_cos();
    Ok(PairGeometry { c: ch / sh, d: 0.0, sh, ch })
}

/// Chart vector field on y = [z, w, eta, zeta, q_bg.., p_bg..].
fn singular_field(domain: &Domain, y: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
    let (z, w, eta, zeta) = (y[0], y[1], y[2], y[3]);
    let mut g = pair_geometry(w)?;
    g.d = zeta * g.c * g.c;
    let (c, d) = (g.c, g.d);
    let m = 0.5 * eta;
    let terms = domain.kernel_terms();
    let mut k0 = 0.0;
    let mut kd = 0.0;
    let mut kp = 0.0;
    let mut hf = 0.0;
    for &(coef, sig) in terms {
        k0 += coef;
        kd += coef * (sig * d).exp();
        kp += coef * sig * (sig * d).exp();
        hf += coef * h_fun(sig * d);
    }
    let nb = (y.len() - 4) / 2;
    let (qb, pb) = y[4..].split_at(nb);
    let ch2 = (0.5 * d).cosh();
    let shc = sinhc(0.5 * d);
    let mut b12 = 0.0;
    let mut db = 0.0;
    let mut s12 = 0.0;
    let mut ds = 0.0;
    for j in 0..nb {
        for (coef, sig) in local_terms(domain, m, qb[j]) {
            if coef == 0.0 {
                continue;
            }
            let a = pb[j] * coef;
            b12 += a * 2.0 * ch2;
            db += a * sig * shc;
            s12 -= a * sig * 2.0 * ch2;
            ds -= a * shc;
        }
    }
    let cos2 = g.ch * g.ch;
    let sin2 = g.sh * g.sh;
    out[0] = 0.5 * z * s12 + 0.5 * zeta * c * ds;
    out[1] = -(z * z * cos2 - sin2) * kp + cos2 * z * d * ds + 0.5 * w.sin() * s12;
    out[2] = z * (k0 + kd) + b12;
    out[3] = -zeta * c * z * z * kp + zeta * zeta * c * hf + zeta * c * z * d * ds
        + zeta * s12
        + zeta * db;
    let half_zc = 0.5 * zeta * c;
    for j in 0..nb {
        let mut dq = 0.0;
        let mut s = 0.0;
        for k in 0..nb {
            let dd = qb[j] - qb[k];
            dq += pb[k] * domain.kernel(dd);
            if k != j {
                if coincident(domain, dd) {
                    return Err(DynamicsError::CoincidentPositions(j.min(k), j.max(k)));
                }
                s += pb[k] * domain.kernel_prime(dd);
            }
        }
        for (coef, sig) in local_terms(domain, m, qb[j]) {
            if coef == 0.0 {
                continue;
            }
            let inner = z * ch2 + sig * half_zc * shc;
            dq += coef * inner;
            s -= coef * sig * inner;
        }
        out[4 + j] = dq;
        out[4 + nb + j] = -pb[j] * s;
    }
    Ok(())
}

/// Energy of a chart vector, written without removable singularities.
fn singular_energy(domain: &Domain, y: &[f64]) -> f64 {
    let (z, w, eta, zeta) = (y[0], y[1], y[2], y[3]);
    let (sh, ch) = (0.5 * w).sin_cos();
    let c = ch / sh;
    let d = zeta * c * c;
    let m = 0.5 * eta;
    let mut k0 = 0.0;
    let mut kd = 0.0;
    let mut dk0 = 0.0;
    for &(coef, sig) in domain.kernel_terms() {
        k0 += coef;
        kd += coef * (sig * d).exp();
        dk0 -= coef * sig * exprel(sig * d);
    }
    let nb = (y.len() - 4) / 2;
    let (qb, pb) = y[4..].split_at(nb);
    let mut e = z * z * (k0 + kd) + zeta * dk0;
    let ch2 = (0.5 * d).cosh();
    let shc = sinhc(0.5 * d);
    for j in 0..nb {
        let mut cross = 0.0;
        for (coef, sig) in local_terms(domain, m, qb[j]) {
            cross += coef * (z * ch2 + 0.5 * zeta * c * sig * shc);
        }
        e += 4.0 * pb[j] * cross;
        for k in 0..nb {
            e += 2.0 * pb[j] * pb[k] * domain.kernel(qb[j] - qb[k]);
        }
    }
    e
}

fn regular_energy(domain: &Domain, y: &[f64]) -> f64 {
    let n = y.len() / 2;
    let (q, p) = y.split_at(n);
    let mut e = 0.0;
    for i in 0..n {
        for j in 0..n {
            e += p[i] * p[j] * domain.kernel(q[i] - q[j]);
        }
    }
    2.0 * e
}

/// Time derivative of the chart variables and of the background peakons.
pub fn rhs_singular(chart: &SingularChart) -> Result<ChartRate, DynamicsError> {
    let y = chart_vector(chart);
    let mut out = vec![0.0; y.len()];
    singular_field(&chart.domain, &y, &mut out)?;
    let nb = chart.background.len();
    Ok(ChartRate {
        dz: out[0],
        dw: out[1],
        deta: out[2],
        dzeta: out[3],
        dq: out[4..4 + nb].to_vec(),
        dp: out[4 + nb..].to_vec(),
    })
}

fn chart_vector(chart: &SingularChart) -> Vec<f64> {
    let mut y = vec![chart.z, chart.w, chart.eta, chart.zeta];
    y.extend(chart.background.iter().map(|b| b.position));
    y.extend(chart.background.iter().map(|b| b.strength));
    y
}

impl SingularChart {
    pub fn energy(&self) -> f64 {
        singular_energy(&self.domain, &chart_vector(self))
    }

    /// The two chart peakons (left, right); degenerate at w = pi.
    pub fn pair(&self) -> (Peakon, Peakon) {
        let (sh, ch) = (0.5 * self.w).sin_cos();
        let a = sh / ch;
        let d = self.zeta * (ch / sh).powi(2);
        (
            Peakon::new(0.5 * (self.z - a), 0.5 * (self.eta - d)),
            Peakon::new(0.5 * (self.z + a), 0.5 * (self.eta + d)),
        )
    }
}

/// Angle branch in (0, 2 pi) for a = p2 - p1.
fn angle_of(a: f64) -> f64 {
    let w = 2.0 * a.atan();
    if a > 0.0 {
        w
    } else {
        w + 2.0 * PI
    }
}

/// Opposite-sign adjacent pair closing in the given time direction.
fn detect_pair(
    domain: &Domain,
    y: &[f64],
    dy: &[f64],
    cfg: &IntegratorConfig,
    dir: f64,
) -> Result<Option<(usize, usize)>, DynamicsError> {
    let n = y.len() / 2;
    if n < 2 {
        return Ok(None);
    }
    let (q, p) = y.split_at(n);
    let periodic = domain.is_periodic();
    let pairs: Vec<(usize, usize)> = if periodic {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    } else {
        (0..n - 1).map(|i| (i, i + 1)).collect()
    };
    let gap = |i: usize, j: usize| if j > i { q[j] - q[i] } else { q[j] + 1.0 - q[i] };
    if n >= 3 {
        for i in 0..n {
            if !periodic && i + 2 >= n {
                break;
            }
            let (j, k) = ((i + 1) % n, (i + 2) % n);
            if gap(i, j) + gap(j, k) < cfg.collision_gap {
                return Err(DynamicsError::TripleCollisionAnomaly {
                    time: f64::NAN,
                    position: q[j],
                });
            }
        }
    }
    let closing = |i: usize, j: usize| {
        p[i] * p[j] < 0.0 && dir * (dy[j] - dy[i]) < 0.0
    };
    let mut best: Option<(usize, usize, f64)> = None;
    for &(i, j) in &pairs {
        let g = gap(i, j);
        if g < cfg.collision_gap && closing(i, j) && best.map_or(true, |b| g < b.2) {
            best = Some((i, j, g));
        }
    }
    if best.is_none() {
        let (imax, pmax) = p
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if pmax > cfg.strength_cap {
            for &(i, j) in &pairs {
                if (i == imax || j == imax) && closing(i, j) {
                    let g = gap(i, j);
                    if best.map_or(true, |b| g < b.2) {
                        best = Some((i, j, g));
                    }
                }
            }
        }
    }
    Ok(best.map(|(i, j, _)| (i, j)))
}

/// Adjacent opposite-sign pair about to collide in forward time, if any.
pub fn detect_collision(
    state: &MultipeakonState,
    cfg: &IntegratorConfig,
) -> Result<Option<(usize, usize)>, DynamicsError> {
    let y = regular_vector(state);
    let mut dy = vec![0.0; y.len()];
    regular_field(&state.domain, &y, &mut dy)?;
    detect_pair(&state.domain, &y, &dy, cfg, 1.0).map_err(|e| match e {
        DynamicsError::TripleCollisionAnomaly { position, .. } => {
            DynamicsError::TripleCollisionAnomaly { time: state.time, position }
        }
        other => other,
    })
}

fn chart_from_regular(
    domain: &Domain,
    t: f64,
    y: &[f64],
    pair: (usize, usize),
) -> SingularChart {
    let n = y.len() / 2;
    let (q, p) = y.split_at(n);
    let (i, j) = pair;
    let q1 = q[i];
    let q2 = if j > i { q[j] } else { q[j] + 1.0 };
    let (p1, p2) = (p[i], p[j]);
    let a = p2 - p1;
    let mut background = Vec::with_capacity(n.saturating_sub(2));
    for k in 0..n {
        let idx = (j + 1 + k) % n;
        if idx != i && idx != j {
            background.push(Peakon::new(p[idx], q[idx]));
        }
    }
    if !domain.is_periodic() {
        background.sort_by(|x, y| x.position.total_cmp(&y.position));
    }
    SingularChart {
        domain: *domain,
        time: t,
        z: p1 + p2,
        w: angle_of(a),
        eta: q1 + q2,
        zeta: a * a * (q2 - q1),
        background,
        collision_time: None,
        collision_position: None,
        concentrated_energy: None,
    }
}

/// Change of variables for the given adjacent pair of a regular state.
pub fn enter_chart(
    state: &MultipeakonState,
    pair: (usize, usize),
    _cfg: &IntegratorConfig,
) -> Result<SingularChart, DynamicsError> {
    let n = state.len();
    let (i, j) = pair;
    let adjacent = i < n && j < n && (j == i + 1 || (state.domain.is_periodic() && j == 0 && i == n - 1));
    if !adjacent {
        return Err(DynamicsError::InvalidConfig(format!("({i},{j}) is not an adjacent pair")));
    }
    Ok(chart_from_regular(&state.domain, state.time, &regular_vector(state), pair))
}

/// Result of leaving the chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartExit {
    pub state: MultipeakonState,
    pub lost_energy: Option<f64>,
}

/// Back to peakon coordinates (conservative) or merge at the collision
/// instant (dissipative).
pub fn exit_chart(chart: &SingularChart, cfg: &IntegratorConfig) -> Result<ChartExit, DynamicsError> {
    match cfg.mode {
        CollisionMode::Conservative => {
            pair_geometry(chart.w)?;
            if chart.w == PI {
                return Err(DynamicsError::ChartDomainExceeded(chart.w));
            }
            let (a, b) = chart.pair();
            let mut peakons = chart.background.clone();
            peakons.push(a);
            peakons.push(b);
            let state = MultipeakonState::with_atoms(chart.domain, chart.time, peakons, vec![])?;
            Ok(ChartExit { state, lost_energy: None })
        }
        CollisionMode::Dissipative => {
            if (chart.w - PI).abs() > 1e-6 {
                return Err(DynamicsError::ChartDomainExceeded(chart.w));
            }
            let before = chart.energy();
            let mut peakons = chart.background.clone();
            if chart.z.abs() > cfg.prune_tol {
                peakons.push(Peakon::new(chart.z, 0.5 * chart.eta));
            }
            let state = MultipeakonState::with_atoms(chart.domain, chart.time, peakons, vec![])?;
            let lost = before - state.energy();
            Ok(ChartExit { state, lost_energy: Some(lost) })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartKind {
    Regular,
    Singular,
}

impl ChartKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChartKind::Regular => "regular",
            ChartKind::Singular => "singular",
        }
    }
}

#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    h: f64,
    kind: ChartKind,
    rcont: Vec<f64>,
}

/// Dense record of an integration run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub domain: Domain,
    pub t_start: f64,
    pub t_end: f64,
    pub events: Vec<CollisionEvent>,
    /// (t, E) after every accepted step.
    pub energy_log: Vec<(f64, f64)>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    initial: MultipeakonState,
    segments: Vec<Segment>,
}

/// Below this |cot(w/2)| the pair is shown as merged, with an atom.
const MERGE_COT: f64 = 1e-7;

fn state_from_vector(
    domain: &Domain,
    t: f64,
    kind: ChartKind,
    y: &[f64],
) -> Result<MultipeakonState, DynamicsError> {
    match kind {
        ChartKind::Regular => {
            let n = y.len() / 2;
            let peakons = (0..n).map(|i| Peakon::new(y[n + i], y[i])).collect();
            Ok(MultipeakonState::with_atoms(*domain, t, peakons, vec![])?)
        }
        ChartKind::Singular => {
            let nb = (y.len() - 4) / 2;
            let mut peakons: Vec<Peakon> =
                (0..nb).map(|j| Peakon::new(y[4 + nb + j], y[4 + j])).collect();
            let (sh, ch) = (0.5 * y[1]).sin_cos();
            let mut atoms = vec![];
            if (ch / sh).abs() < MERGE_COT {
                peakons.push(Peakon::new(y[0], 0.5 * y[2]));
                if y[3] > 0.0 {
                    atoms.push(EnergyAtom { x: wrap(domain, 0.5 * y[2]), mass: y[3] });
                }
            } else {
                let chart = SingularChart {
                    domain: *domain,
                    time: t,
                    z: y[0],
                    w: y[1],
                    eta: y[2],
                    zeta: y[3],
                    background: vec![],
                    collision_time: None,
                    collision_position: None,
                    concentrated_energy: None,
                };
                let (a, b) = chart.pair();
                peakons.push(a);
                peakons.push(b);
            }
            Ok(MultipeakonState::with_atoms(*domain, t, peakons, atoms)?)
        }
    }
}

fn wrap(domain: &Domain, x: f64) -> f64 {
    if domain.is_periodic() {
        x.rem_euclid(1.0)
    } else {
        x
    }
}

impl Trajectory {
    fn locate(&self, t: f64) -> Option<&Segment> {
        let dir = if self.t_end >= self.t_start { 1.0 } else { -1.0 };
        let idx = self.segments.partition_point(|s| dir * (s.t0 + s.h) < dir * t);
        self.segments.get(idx)
    }

    /// State at any time of the integrated interval, from the dense output.
    pub fn state_at(&self, t: f64) -> Result<MultipeakonState, DynamicsError> {
        let (lo, hi) = if self.t_end >= self.t_start {
            (self.t_start, self.t_end)
        } else {
            (self.t_end, self.t_start)
        };
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(DynamicsError::OutsideTrajectory(t));
        }
        if t == self.t_start || self.segments.is_empty() {
            let mut s = self.initial.clone();
            s.time = t;
            return Ok(s);
        }
        let seg = self.locate(t).unwrap_or_else(|| self.segments.last().unwrap());
        let n = seg.rcont.len() / 5;
        let mut y = vec![0.0; n];
        let theta = ((t - seg.t0) / seg.h).clamp(0.0, 1.0);
        dense(&seg.rcont, theta, &mut y);
        state_from_vector(&self.domain, t, seg.kind, &y)
    }

    pub fn chart_at(&self, t: f64) -> ChartKind {
        self.locate(t).map_or(ChartKind::Regular, |s| s.kind)
    }

    pub fn final_state(&self) -> Result<MultipeakonState, DynamicsError> {
        self.state_at(self.t_end)
    }

    /// Evenly spaced samples including both ends.
    pub fn sample_uniform(&self, count: usize) -> Result<Vec<MultipeakonState>, DynamicsError> {
        let m = count.max(2) - 1;
        (0..=m)
            .map(|k| {
                let t = if k == m {
                    self.t_end
                } else {
                    self.t_start + (self.t_end - self.t_start) * k as f64 / m as f64
                };
                self.state_at(t)
            })
            .collect()
    }

    /// Largest relative deviation of the logged energy from its start value.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.initial.energy() - self.initial.atom_mass();
        let scale = e0.abs().max(f64::MIN_POSITIVE);
        let mut drift: f64 = 0.0;
        let mut base = e0;
        let mut ev = self.events.iter().peekable();
        for &(t, e) in &self.energy_log {
            while let Some(evt) = ev.peek() {
                let passed = if self.t_end >= self.t_start { evt.t <= t } else { evt.t >= t };
                if !passed {
                    break;
                }
                base -= evt.lost_energy.unwrap_or(0.0);
                ev.next();
            }
            drift = drift.max((e - base).abs() / scale);
        }
        drift
    }
}

enum Phase {
    Regular,
    Singular { crossed: bool },
}

fn validate_regular(domain: &Domain, y: &[f64]) -> bool {
    let n = y.len() / 2;
    let q = &y[..n];
    if q.iter().chain(&y[n..]).any(|v| !v.is_finite()) {
        return false;
    }
    if q.windows(2).any(|w| !(w[1] > w[0])) {
        return false;
    }
    !(domain.is_periodic() && n >= 2 && !(q[n - 1] < q[0] + 1.0))
}

enum ChartCheck {
    Ok,
    Reject,
    Triple(f64),
}

fn validate_singular(domain: &Domain, y: &[f64], gap: f64) -> ChartCheck {
    if y.iter().any(|v| !v.is_finite()) || !((y[1] - PI).abs() < PI / 2.0) || y[3] < 0.0 {
        return ChartCheck::Reject;
    }
    let nb = (y.len() - 4) / 2;
    let qb = &y[4..4 + nb];
    let m = 0.5 * y[2];
    let (sh, ch) = (0.5 * y[1]).sin_cos();
    let half = 0.5 * y[3] * (ch / sh).powi(2);
    for &q in qb {
        let off = if domain.is_periodic() {
            let r = (q - m).rem_euclid(1.0);
            r.min(1.0 - r)
        } else {
            (q - m).abs()
        };
        if off < gap {
            return ChartCheck::Triple(m);
        }
        if off <= half {
            return ChartCheck::Reject;
        }
    }
    if !domain.is_periodic() && qb.windows(2).any(|w| !(w[1] > w[0])) {
        return ChartCheck::Reject;
    }
    ChartCheck::Ok
}

fn field(
    domain: &Domain,
    kind: ChartKind,
    dir: f64,
    y: &[f64],
    out: &mut [f64],
) -> Result<(), DynamicsError> {
    match kind {
        ChartKind::Regular => regular_field(domain, y, out)?,
        ChartKind::Singular => singular_field(domain, y, out)?,
    }
    if dir < 0.0 {
        out.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(())
}

/// Adaptive RK5(4) integration from `initial.time` to `t_end` with chart
/// switching at peakon-antipeakon interactions.
pub fn simulate(
    initial: &MultipeakonState,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, DynamicsError> {
    cfg.validate()?;
    if !t_end.is_finite() {
        return Err(DynamicsError::InvalidConfig("t_end must be finite".into()));
    }
    let domain = initial.domain;
    let t0 = initial.time;
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let mut traj = Trajectory {
        domain,
        t_start: t0,
        t_end,
        events: vec![],
        energy_log: vec![],
        accepted_steps: 0,
        rejected_steps: 0,
        initial: MultipeakonState::with_atoms(domain, t0, initial.peakons.clone(), vec![])?,
        segments: vec![],
    };
    let mut kind = ChartKind::Regular;
    let mut phase = Phase::Regular;
    let mut y = regular_vector(&traj.initial);
    if !validate_regular(&domain, &y) {
        return Err(DynamicsError::CoincidentPositions(0, 0));
    }
    let mut t = t0;
    let mut k1 = vec![0.0; y.len()];
    field(&domain, kind, dir, &y, &mut k1)?;
    // k1 already carries the time direction
    if let Some(pair) = detect_pair(&domain, &y, &k1, cfg, 1.0)? {
        let chart = chart_from_regular(&domain, t, &y, pair);
        if (chart.w - PI).abs() < 3.0 * PI / 8.0 {
            y = chart_vector(&chart);
            kind = ChartKind::Singular;
            phase = Phase::Singular { crossed: false };
            k1 = vec![0.0; y.len()];
            field(&domain, kind, dir, &y, &mut k1)?;
        }
    }
    let span = (t_end - t0).abs();
    let mut h = cfg.max_step.min(1e-2).min(span.max(f64::MIN_POSITIVE));
    let min_step = 1e-14 * (1.0 + t0.abs().max(t_end.abs()));
    traj.energy_log.push((t, current_energy(&domain, kind, &y)));
    while dir * (t_end - t) > 1e-14 * (1.0 + t.abs()) {
        h = h.min(cfg.max_step).min((t_end - t).abs());
        if h < min_step {
            return Err(DynamicsError::StepSizeUnderflow { time: t, step: h });
        }
        let mut f = |_s: f64, yy: &[f64], out: &mut [f64]| field(&domain, kind, dir, yy, out);
        let trial: Trial = match trial_step(&mut f, 0.0, &y, &k1, h, cfg.abs_tol, cfg.rel_tol) {
            Ok(tr) => tr,
            Err(DynamicsError::ChartDomainExceeded(_)) | Err(DynamicsError::CoincidentPositions(..)) => {
                traj.rejected_steps += 1;
                h *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        if !(trial.err <= 1.0) {
            traj.rejected_steps += 1;
            let fac = if trial.err.is_finite() { (0.9 * trial.err.powf(-0.2)).max(0.2) } else { 0.2 };
            h *= fac.min(1.0);
            continue;
        }
        let valid = match kind {
            ChartKind::Regular => validate_regular(&domain, &trial.y1),
            ChartKind::Singular => match validate_singular(&domain, &trial.y1, cfg.collision_gap) {
                ChartCheck::Ok => true,
                ChartCheck::Reject => false,
                ChartCheck::Triple(m) => {
                    return Err(DynamicsError::TripleCollisionAnomaly {
                        time: t + dir * h,
                        position: wrap(&domain, m),
                    })
                }
            },
        };
        if !valid {
            traj.rejected_steps += 1;
            h *= 0.5;
            continue;
        }
        let grow = if trial.err > 0.0 { (0.9 * trial.err.powf(-0.2)).clamp(0.2, 5.0) } else { 5.0 };
        let t_new = if (t_end - (t + dir * h)).abs() <= 1e-14 * (1.0 + t.abs()) {
            t_end
        } else {
            t + dir * h
        };
        traj.accepted_steps += 1;
        let mut next_y = trial.y1.clone();
        let mut next_t = t_new;
        let mut next_kind = kind;
        let mut segment = Segment { t0: t, h: t_new - t, kind, rcont: trial.rcont.clone() };
        match phase {
            Phase::Regular => {
                let pair = detect_pair(&domain, &trial.y1, &trial.k7, cfg, 1.0).map_err(|e| match e {
                    DynamicsError::TripleCollisionAnomaly { position, .. } => {
                        DynamicsError::TripleCollisionAnomaly { time: t_new, position: wrap(&domain, position) }
                    }
                    other => other,
                })?;
                if let Some(pair) = pair {
                    let chart = chart_from_regular(&domain, t_new, &trial.y1, pair);
                    if (chart.w - PI).abs() < 3.0 * PI / 8.0 {
                        next_y = chart_vector(&chart);
                        next_kind = ChartKind::Singular;
                        phase = Phase::Singular { crossed: false };
                    }
                }
            }
            Phase::Singular { crossed } => {
                let w_old = y[1] - PI;
                let w_new = trial.y1[1] - PI;
                let mut now_crossed = crossed;
                if !crossed && w_old != 0.0 && w_old * w_new <= 0.0 {
                    let n = y.len();
                    let mut buf = vec![0.0; n];
                    let theta = bisect(
                        |th| {
                            dense(&trial.rcont, th, &mut buf);
                            buf[1] - PI
                        },
                        0.0,
                        1.0,
                        1e-15,
                    );
                    let h_tau = theta * h;
                    let at_tau = if h_tau > 0.0 {
                        let mut f2 =
                            |_s: f64, yy: &[f64], out: &mut [f64]| field(&domain, kind, dir, yy, out);
                        trial_step(&mut f2, 0.0, &y, &k1, h_tau, cfg.abs_tol, cfg.rel_tol)?
                    } else {
                        Trial { y1: y.clone(), k7: k1.clone(), err: 0.0, rcont: trivial_rcont(&y) }
                    };
                    let tau = t + dir * h_tau;
                    let ytau = at_tau.y1.clone();
                    let event = CollisionEvent {
                        t: tau,
                        q_bar: wrap(&domain, 0.5 * ytau[2]),
                        e_tau: ytau[3],
                        mode: cfg.mode,
                        lost_energy: None,
                    };
                    now_crossed = true;
                    if cfg.mode == CollisionMode::Dissipative {
                        let mut chart = chart_of_vector(&domain, tau, &ytau);
                        chart.w = PI;
                        let exit = exit_chart(&chart, cfg)?;
                        traj.events.push(CollisionEvent { lost_energy: exit.lost_energy, ..event });
                        segment = Segment { t0: t, h: tau - t, kind, rcont: at_tau.rcont };
                        next_y = regular_vector(&exit.state);
                        next_t = tau;
                        next_kind = ChartKind::Regular;
                        phase = Phase::Regular;
                    } else {
                        traj.events.push(event);
                        phase = Phase::Singular { crossed: true };
                    }
                }
                if next_kind == ChartKind::Singular {
                    let off = (trial.y1[1] - PI).abs();
                    let leave = (now_crossed && off >= cfg.chart_exit) || (!now_crossed && off > 7.0 * PI / 16.0);
                    if leave {
                        let st = state_from_vector(&domain, t_new, ChartKind::Singular, &trial.y1)?;
                        next_y = regular_vector(&st);
                        next_kind = ChartKind::Regular;
                        phase = Phase::Regular;
                    }
                }
            }
        }
        traj.segments.push(segment);
        let reuse = next_kind == kind && next_t == t_new && next_y == trial.y1;
        y = next_y;
        t = next_t;
        kind = next_kind;
        if reuse {
            k1 = trial.k7;
        } else {
            k1 = vec![0.0; y.len()];
            field(&domain, kind, dir, &y, &mut k1)?;
        }
        traj.energy_log.push((t, current_energy(&domain, kind, &y)));
        h *= grow;
    }
    Ok(traj)
}

fn trivial_rcont(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut r = vec![0.0; 5 * n];
    r[..n].copy_from_slice(y);
    r
}

fn chart_of_vector(domain: &Domain, t: f64, y: &[f64]) -> SingularChart {
    let nb = (y.len() - 4) / 2;
    SingularChart {
        domain: *domain,
        time: t,
        z: y[0],
        w: y[1],
        eta: y[2],
        zeta: y[3],
        background: (0..nb).map(|j| Peakon::new(y[4 + nb + j], y[4 + j])).collect(),
        collision_time: None,
        collision_position: None,
        concentrated_energy: None,
    }
}

fn current_energy(domain: &Domain, kind: ChartKind, y: &[f64]) -> f64 {
    match kind {
        ChartKind::Regular => regular_energy(domain, y),
        ChartKind::Singular => singular_energy(domain, y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> Domain {
        Domain::real_line(0.5).unwrap()
    }

    fn pair(p: f64, q: f64) -> MultipeakonState {
        MultipeakonState::new(line(), vec![Peakon::new(p, -q), Peakon::new(-p, q)]).unwrap()
    }

    #[test]
    fn traveling_peakon_rhs() {
        let s = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0)]).unwrap();
        let (dq, dp) = rhs_regular(&s).unwrap();
        assert_eq!(dq, vec![1.0]);
        assert_eq!(dp, vec![0.0]);
    }

    #[test]
    fn symmetric_pair_rhs() {
        let (p, q) = (1.3, 0.4);
        let (dq, dp) = rhs_regular(&pair(p, q)).unwrap();
        assert!((dq[0] - p * (1.0 - (-2.0 * q).exp())).abs() < 1e-14);
        assert!((dp[0] - p * p * (-2.0 * q).exp()).abs() < 1e-14);
        assert!((dq[1] + dq[0]).abs() < 1e-14);
        assert!((dp[1] + dp[0]).abs() < 1e-14);
    }

    #[test]
    fn coincident_positions_rejected() {
        let s = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0), Peakon::new(2.0, 0.0)])
            .unwrap();
        assert_eq!(rhs_regular(&s), Err(DynamicsError::CoincidentPositions(0, 1)));
    }

    #[test]
    fn chart_entry_arithmetic() {
        let s = MultipeakonState::new(
            line(),
            vec![Peakon::new(10.0, -0.001), Peakon::new(-10.0, 0.001)],
        )
        .unwrap();
        let c = enter_chart(&s, (0, 1), &IntegratorConfig::default()).unwrap();
        assert!(c.z.abs() < 1e-15);
        assert!((c.w - (2.0 * (-20f64).atan() + 2.0 * PI)).abs() < 1e-14);
        assert_eq!(c.eta, 0.0);
        assert!((c.zeta - 0.8).abs() < 1e-12);
    }

    #[test]
    fn chart_round_trip() {
        let s = MultipeakonState::new(
            line(),
            vec![Peakon::new(0.7, -2.0), Peakon::new(3.0, -0.01), Peakon::new(-2.5, 0.02)],
        )
        .unwrap();
        let c = enter_chart(&s, (1, 2), &IntegratorConfig::default()).unwrap();
        let back = exit_chart(&c, &IntegratorConfig::default()).unwrap().state;
        for (a, b) in s.peakons.iter().zip(&back.peakons) {
            assert!((a.strength - b.strength).abs() < 1e-12);
            assert!((a.position - b.position).abs() < 1e-12);
        }
        assert!((c.energy() - s.energy()).abs() < 1e-12 * s.energy());
    }

    #[test]
    fn chart_field_matches_regular_field() {
        // chain rule: d/dt of the chart variables computed from the regular rhs
        for dom in [line(), Domain::Periodic] {
            let s = MultipeakonState::new(
                dom,
                vec![Peakon::new(0.4, 0.1), Peakon::new(2.0, 0.5), Peakon::new(-1.5, 0.52), Peakon::new(0.3, 0.8)],
            )
            .unwrap();
            let (dq, dp) = rhs_regular(&s).unwrap();
            let c = enter_chart(&s, (1, 2), &IntegratorConfig::default()).unwrap();
            let r = rhs_singular(&c).unwrap();
            let a = -1.5 - 2.0;
            let d = 0.02;
            let da = dp[2] - dp[1];
            let dd = dq[2] - dq[1];
            assert!((r.dz - (dp[1] + dp[2])).abs() < 1e-10);
            assert!((r.dw - 2.0 * da / (1.0 + a * a)).abs() < 1e-10);
            assert!((r.deta - (dq[1] + dq[2])).abs() < 1e-10);
            assert!((r.dzeta - (2.0 * a * da * d + a * a * dd)).abs() < 1e-9);
            for (k, b) in c.background.iter().enumerate() {
                let idx = if b.position < 0.3 { 0 } else { 3 };
                assert!((r.dq[k] - dq[idx]).abs() < 1e-10);
                assert!((r.dp[k] - dp[idx]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn chart_limit_at_pi_matches_one_sided_regular_limit() {
        let p = 1e3;
        let q = 0.5e-6;
        let s = pair(p, q);
        let (dq, dp) = rhs_regular(&s).unwrap();
        let a = -2.0 * p;
        let dw_regular = 2.0 * (dp[1] - dp[0]) / (1.0 + a * a);
        let c = SingularChart {
            domain: line(),
            time: 0.0,
            z: 0.0,
            w: PI,
            eta: 0.0,
            zeta: a * a * 2.0 * q,
            background: vec![],
            collision_time: None,
            collision_position: None,
            concentrated_energy: None,
        };
        let r = rhs_singular(&c).unwrap();
        assert!((r.dw - dw_regular).abs() < 1e-5, "{} vs {}", r.dw, dw_regular);
        let _ = dq;
    }

    #[test]
    fn chart_domain_guard() {
        let mut c = enter_chart(&pair(10.0, 0.001), (0, 1), &IntegratorConfig::default()).unwrap();
        c.w = 0.2;
        assert!(matches!(rhs_singular(&c), Err(DynamicsError::ChartDomainExceeded(_))));
    }

    #[test]
    fn detect_rules() {
        let cfg = IntegratorConfig::default();
        let same = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0), Peakon::new(1.0, 0.0005)])
            .unwrap();
        assert_eq!(detect_collision(&same, &cfg).unwrap(), None);
        let near = pair(1.0, 0.45 * cfg.collision_gap);
        assert_eq!(detect_collision(&near, &cfg).unwrap(), Some((0, 1)));
        let one = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0)]).unwrap();
        assert_eq!(detect_collision(&one, &cfg).unwrap(), None);
        let triple = MultipeakonState::new(
            line(),
            vec![Peakon::new(1.0, 0.0), Peakon::new(-1.0, 0.0003), Peakon::new(1.0, 0.0006)],
        )
        .unwrap();
        assert!(matches!(
            detect_collision(&triple, &cfg),
            Err(DynamicsError::TripleCollisionAnomaly { .. })
        ));
    }

    #[test]
    fn single_peakon_travels() {
        let s = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0)]).unwrap();
        let tr = simulate(&s, 3.0, &IntegratorConfig::default()).unwrap();
        let f = tr.final_state().unwrap();
        assert!((f.peakons[0].position - 3.0).abs() < 1e-9);
        assert!((f.peakons[0].strength - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_collision_conserves_energy() {
        let s = pair(1.0, 1.0);
        let tr = simulate(&s, 4.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(tr.events.len(), 1);
        let e0 = s.energy();
        assert!((tr.events[0].e_tau - e0).abs() < 1e-7 * e0, "{:?}", tr.events);
        let f = tr.final_state().unwrap();
        assert!((f.energy() - e0).abs() < 1e-7 * e0);
        assert!(tr.energy_drift() < 1e-7);
    }

    #[test]
    fn dissipative_collision_annihilates() {
        let s = pair(1.0, 1.0);
        let cfg = IntegratorConfig { mode: CollisionMode::Dissipative, ..Default::default() };
        let tr = simulate(&s, 4.0, &cfg).unwrap();
        assert_eq!(tr.events.len(), 1);
        let f = tr.final_state().unwrap();
        assert!(f.is_empty());
        let lost = tr.events[0].lost_energy.unwrap();
        assert!((lost - s.energy()).abs() < 1e-6);
    }

    #[test]
    fn periodic_collision_across_the_wrap() {
        let s = MultipeakonState::new(
            Domain::Periodic,
            vec![Peakon::new(-1.0, 0.1), Peakon::new(1.0, 0.9)],
        )
        .unwrap();
        let tr = simulate(&s, 2.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(tr.events.len(), 1);
        assert!(tr.events[0].q_bar.abs() < 1e-6 || (tr.events[0].q_bar - 1.0).abs() < 1e-6);
        assert!(tr.energy_drift() < 1e-7);
    }
}
