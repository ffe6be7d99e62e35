//! Multipeakon profiles on the real line and on the unit circle.

use serde::{Deserialize, Serialize};
use std::f64::consts::E;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PeakonError {
    #[error("alpha must lie strictly inside (0,1), got {0}")]
    InvalidAlpha(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("energy atom at {x} has non-positive mass {mass}")]
    NonPositiveAtom { x: f64, mass: f64 },
    #[error("state JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    RealLine { alpha: f64 },
    Periodic,
}

impl Domain {
    pub fn real_line(alpha: f64) -> Result<Self, PeakonError> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Domain::RealLine { alpha })
        } else {
            Err(PeakonError::InvalidAlpha(alpha))
        }
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self, Domain::Periodic)
    }

    /// Kernel K(d) for d in [0,1) written as a sum of coef * exp(sigma * d).
    pub fn kernel_terms(&self) -> &'static [(f64, f64)] {
        match self {
            Domain::RealLine { .. } => &[(1.0, -1.0)],
            Domain::Periodic => &PERIODIC_TERMS,
        }
    }

    /// K(d) with K(x) = e^{-|x|} or the periodic chi.
    pub fn kernel(&self, d: f64) -> f64 {
        match self {
            Domain::RealLine { .. } => (-d.abs()).exp(),
            Domain::Periodic => chi(d),
        }
    }

    /// K'(d), zero at the origin.
    pub fn kernel_prime(&self, d: f64) -> f64 {
        match self {
            Domain::RealLine { .. } => {
                if d == 0.0 {
                    0.0
                } else {
                    -d.signum() * (-d.abs()).exp()
                }
            }
            Domain::Periodic => chi_prime(d),
        }
    }

    pub fn kernel_at_zero(&self) -> f64 {
        match self {
            Domain::RealLine { .. } => 1.0,
            Domain::Periodic => CHI0,
        }
    }
}

const EM1: f64 = E - 1.0;
const PERIODIC_TERMS: [(f64, f64); 2] = [(1.0 / EM1, 1.0), (E / EM1, -1.0)];
/// chi(0) = (1+e)/(e-1).
pub const CHI0: f64 = (1.0 + E) / EM1;

/// Periodic kernel (e^x + e^{1-x})/(e-1) on [0,1], extended with period 1.
pub fn chi(x: f64) -> f64 {
    let y = x.rem_euclid(1.0);
    (y.exp() + (1.0 - y).exp()) / EM1
}

/// Derivative of `chi`; symmetric value 0 at integers.
pub fn chi_prime(x: f64) -> f64 {
    let y = x.rem_euclid(1.0);
    if y == 0.0 {
        return 0.0;
    }
    (y.exp() - (1.0 - y).exp()) / EM1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peakon {
    #[serde(rename = "p")]
    pub strength: f64,
    #[serde(rename = "q")]
    pub position: f64,
}

impl Peakon {
    pub fn new(strength: f64, position: f64) -> Self {
        Peakon { strength, position }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyAtom {
    pub x: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipeakonState {
    pub domain: Domain,
    pub time: f64,
    pub peakons: Vec<Peakon>,
    #[serde(default)]
    pub atoms: Vec<EnergyAtom>,
}

/// One interval of a piecewise representation u = alpha e^s + beta e^{-s},
/// s = y - r, valid for y in [lo, hi].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub r: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Piece {
    pub fn s_range(&self) -> (f64, f64) {
        (self.lo - self.r, self.hi - self.r)
    }
}

/// Integral of e^{k s} over [s0, s1]; either end may be infinite.
pub(crate) fn int_exp(k: f64, s0: f64, s1: f64) -> f64 {
    if k == 0.0 {
        return s1 - s0;
    }
    if s0.is_infinite() || s1.is_infinite() {
        let hi = if s1.is_infinite() { 0.0 } else { (k * s1).exp() };
        let lo = if s0.is_infinite() { 0.0 } else { (k * s0).exp() };
        return (hi - lo) / k;
    }
    (k * s0).exp() * (k * (s1 - s0)).exp_m1() / k
}

impl MultipeakonState {
    /// Builds a validated state; zero strengths are pruned, positions sorted
    /// (and reduced to [0,1) on the circle).
    pub fn new(domain: Domain, peakons: Vec<Peakon>) -> Result<Self, PeakonError> {
        Self::with_atoms(domain, 0.0, peakons, Vec::new())
    }

    pub fn with_atoms(
        domain: Domain,
        time: f64,
        peakons: Vec<Peakon>,
        atoms: Vec<EnergyAtom>,
    ) -> Result<Self, PeakonError> {
        if let Domain::RealLine { alpha } = domain {
            Domain::real_line(alpha)?;
        }
        if !time.is_finite() {
            return Err(PeakonError::NonFinite("time"));
        }
        let mut list = Vec::with_capacity(peakons.len());
        for pk in peakons {
            if !pk.strength.is_finite() || !pk.position.is_finite() {
                return Err(PeakonError::NonFinite("peakon"));
            }
            if pk.strength == 0.0 {
                continue;
            }
            let position = if domain.is_periodic() {
                pk.position.rem_euclid(1.0)
            } else {
                pk.position
            };
            list.push(Peakon::new(pk.strength, position));
        }
        list.sort_by(|a, b| a.position.total_cmp(&b.position));
        for a in &atoms {
            if !(a.mass > 0.0) || !a.x.is_finite() {
                return Err(PeakonError::NonPositiveAtom { x: a.x, mass: a.mass });
            }
        }
        Ok(MultipeakonState { domain, time, peakons: list, atoms })
    }

    pub fn empty(domain: Domain) -> Self {
        MultipeakonState { domain, time: 0.0, peakons: Vec::new(), atoms: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.peakons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peakons.is_empty()
    }

    pub fn strengths(&self) -> Vec<f64> {
        self.peakons.iter().map(|p| p.strength).collect()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.peakons.iter().map(|p| p.position).collect()
    }

    pub fn evaluate_u(&self, x: f64) -> f64 {
        match self.domain {
            Domain::RealLine { .. } => self
                .peakons
                .iter()
                .map(|pk| pk.strength * (-(x - pk.position).abs()).exp())
                .sum(),
            Domain::Periodic => {
                let xr = x.rem_euclid(1.0);
                self.peakons.iter().map(|pk| pk.strength * chi(xr - pk.position)).sum()
            }
        }
    }

    pub fn evaluate_ux(&self, x: f64) -> f64 {
        match self.domain {
            Domain::RealLine { .. } => self
                .peakons
                .iter()
                .map(|pk| {
                    let d = x - pk.position;
                    if d == 0.0 {
                        0.0
                    } else {
                        -pk.strength * d.signum() * (-d.abs()).exp()
                    }
                })
                .sum(),
            Domain::Periodic => {
                let xr = x.rem_euclid(1.0);
                self.peakons.iter().map(|pk| pk.strength * chi_prime(xr - pk.position)).sum()
            }
        }
    }

    /// H = 1/2 sum_{i,j} p_i p_j K(q_i - q_j).
    pub fn hamiltonian(&self) -> f64 {
        let mut h = 0.0;
        for a in &self.peakons {
            for b in &self.peakons {
                h += a.strength * b.strength * self.domain.kernel(a.position - b.position);
            }
        }
        0.5 * h
    }

    /// Integral of u^2 + u_x^2 plus atom masses.
    pub fn energy(&self) -> f64 {
        4.0 * self.hamiltonian() + self.atom_mass()
    }

    pub fn atom_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    pub fn h1_norm(&self) -> f64 {
        (4.0 * self.hamiltonian()).max(0.0).sqrt()
    }

    /// Piecewise exponential form of u between the sorted breakpoints.
    pub(crate) fn pieces(&self, extra: &[f64]) -> Vec<Piece> {
        match self.domain {
            Domain::RealLine { .. } => self.pieces_line(extra),
            Domain::Periodic => self.pieces_circle(extra),
        }
    }

    fn pieces_line(&self, extra: &[f64]) -> Vec<Piece> {
        let mut pts: Vec<f64> = self.positions();
        pts.extend_from_slice(extra);
        pts.sort_by(|a, b| a.total_cmp(b));
        pts.dedup();
        let mut edges = vec![f64::NEG_INFINITY];
        edges.extend(pts);
        edges.push(f64::INFINITY);
        edges
            .windows(2)
            .map(|w| {
                let (lo, hi) = (w[0], w[1]);
                let r = if lo.is_finite() { lo } else { hi };
                let mut alpha = 0.0;
                let mut beta = 0.0;
                for pk in &self.peakons {
                    if pk.position <= lo {
                        beta += pk.strength * (pk.position - r).exp();
                    } else {
                        alpha += pk.strength * (r - pk.position).exp();
                    }
                }
                Piece { lo, hi, r, alpha, beta }
            })
            .collect()
    }

    fn pieces_circle(&self, extra: &[f64]) -> Vec<Piece> {
        let mut pts: Vec<f64> = self.positions();
        pts.extend(extra.iter().map(|x| x.rem_euclid(1.0)));
        pts.push(0.0);
        pts.sort_by(|a, b| a.total_cmp(b));
        pts.dedup();
        pts.push(1.0);
        pts.windows(2)
            .filter(|w| w[1] > w[0])
            .map(|w| {
                let (lo, hi) = (w[0], w[1]);
                let mut alpha = 0.0;
                let mut beta = 0.0;
                for pk in &self.peakons {
                    let q = pk.position;
                    if q <= lo {
                        alpha += pk.strength * (lo - q).exp() / EM1;
                        beta += pk.strength * (1.0 - lo + q).exp() / EM1;
                    } else {
                        alpha += pk.strength * (lo - q + 1.0).exp() / EM1;
                        beta += pk.strength * (q - lo).exp() / EM1;
                    }
                }
                Piece { lo, hi, r: lo, alpha, beta }
            })
            .collect()
    }

    /// P = 1/2 K * (u^2 + u_x^2/2) and its derivative, in closed form.
    pub fn convolve_p(&self, x: f64) -> (f64, f64) {
        if self.peakons.is_empty() {
            return (0.0, 0.0);
        }
        let periodic = self.domain.is_periodic();
        let xr = if periodic { x.rem_euclid(1.0) } else { x };
        let mut p = 0.0;
        let mut px = 0.0;
        for pc in self.pieces(&[xr]) {
            let left = pc.hi <= xr;
            let r = pc.r;
            let (g, d, gp, dp) = if !periodic {
                if left {
                    let g = (r - xr).exp();
                    (g, 0.0, -g, 0.0)
                } else {
                    let d = (xr - r).exp();
                    (0.0, d, 0.0, d)
                }
            } else if left {
                let g = (1.0 - xr + r).exp() / EM1;
                let d = (xr - r).exp() / EM1;
                (g, d, -g, d)
            } else {
                let g = (r - xr).exp() / EM1;
                let d = (xr - r + 1.0).exp() / EM1;
                (g, d, -g, d)
            };
            p += piece_source_integral(&pc, g, d);
            px += piece_source_integral(&pc, gp, dp);
        }
        (0.5 * p, 0.5 * px)
    }

    /// Closed-form JSON with 17 significant digits and fixed field order.
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\"domain\": ");
        match self.domain {
            Domain::RealLine { alpha } => {
                let _ = write!(s, "{{\"real_line\": {{\"alpha\": {}}}}}", fmt17(alpha));
            }
            Domain::Periodic => s.push_str("\"periodic\""),
        }
        let _ = write!(s, ", \"time\": {}, \"peakons\": [", fmt17(self.time));
        for (i, pk) in self.peakons.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            let _ = write!(s, "{{\"p\": {}, \"q\": {}}}", fmt17(pk.strength), fmt17(pk.position));
        }
        s.push_str("], \"atoms\": [");
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            let _ = write!(s, "{{\"x\": {}, \"mass\": {}}}", fmt17(a.x), fmt17(a.mass));
        }
        s.push_str("]}");
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PeakonError> {
        let raw: MultipeakonState =
            serde_json::from_str(text).map_err(|e| PeakonError::Json(e.to_string()))?;
        Self::with_atoms(raw.domain, raw.time, raw.peakons, raw.atoms)
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Integral over a piece of (u^2 + u_x^2/2)(g e^s + d e^{-s}).
fn piece_source_integral(pc: &Piece, g: f64, d: f64) -> f64 {
    let (s0, s1) = pc.s_range();
    let a2 = 1.5 * pc.alpha * pc.alpha;
    let b2 = 1.5 * pc.beta * pc.beta;
    let ab = pc.alpha * pc.beta;
    let mut acc = 0.0;
    let mut term = |c: f64, k: f64| {
        if c != 0.0 {
            acc += c * int_exp(k, s0, s1);
        }
    };
    term(a2 * g, 3.0);
    term(a2 * d + ab * g, 1.0);
    term(ab * d + b2 * g, -1.0);
    term(b2 * d, -3.0);
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::adaptive_with_breaks;

    fn line() -> Domain {
        Domain::real_line(0.5).unwrap()
    }

    #[test]
    fn single_peakon_values() {
        let s = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0)]).unwrap();
        assert_eq!(s.evaluate_u(0.0), 1.0);
        assert!((s.evaluate_u(2f64.ln()) - 0.5).abs() < 1e-15);
        assert!((s.evaluate_ux(1.0) + (-1f64).exp()).abs() < 1e-15);
        assert!((s.evaluate_ux(-1.0) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(s.evaluate_ux(0.0), 0.0);
        assert_eq!(s.hamiltonian(), 0.5);
        assert!((s.energy() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn periodic_chi_at_zero() {
        let s = MultipeakonState::new(Domain::Periodic, vec![Peakon::new(1.0, 0.0)]).unwrap();
        assert!((s.evaluate_u(0.0) - 2.163953413738653).abs() < 1e-12);
        assert_eq!(s.evaluate_u(0.25), s.evaluate_u(1.25));
    }

    #[test]
    fn pair_hamiltonian() {
        let s = MultipeakonState::new(
            line(),
            vec![Peakon::new(1.0, -1.0), Peakon::new(-1.0, 1.0)],
        )
        .unwrap();
        assert!((s.hamiltonian() - (1.0 - (-2f64).exp())).abs() < 1e-15);
        assert_eq!(MultipeakonState::empty(line()).hamiltonian(), 0.0);
    }

    #[test]
    fn atoms_only_energy() {
        let s = MultipeakonState::with_atoms(
            line(),
            0.0,
            vec![],
            vec![EnergyAtom { x: 0.0, mass: 3.5 }],
        )
        .unwrap();
        assert_eq!(s.energy(), 3.5);
    }

    #[test]
    fn convolution_matches_quadrature() {
        let s = MultipeakonState::new(line(), vec![Peakon::new(1.0, 0.0)]).unwrap();
        let (p, _) = s.convolve_p(0.0);
        let mut f = |y: f64| {
            let u = s.evaluate_u(y);
            let ux = s.evaluate_ux(y);
            0.5 * (-y.abs()).exp() * (u * u + 0.5 * ux * ux)
        };
        let q = adaptive_with_breaks(&mut f, -60.0, 60.0, &[0.0], 1e-14);
        assert!((p - q).abs() < 1e-10, "{p} vs {q}");
        let empty = MultipeakonState::empty(line());
        assert_eq!(empty.convolve_p(0.3), (0.0, 0.0));
    }

    #[test]
    fn json_round_trip() {
        let s = MultipeakonState::new(
            Domain::real_line(0.3).unwrap(),
            vec![Peakon::new(0.1, -1.0 / 3.0), Peakon::new(-2.0, 0.7)],
        )
        .unwrap();
        let text = s.to_json();
        assert!(text.starts_with("{\"domain\": {\"real_line\""));
        let back = MultipeakonState::from_json(&text).unwrap();
        assert_eq!(back, s);
    }
}
