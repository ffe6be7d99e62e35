//! JSON run configuration. The document is
//! `{"scenario": {"<name>": {...}}, "seed": 0, "output": {...}}` with exactly
//! one scenario block.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use wavelab::broadwell::{GridSpec, Interpolation, KappaMode};
use wavelab::initial_data::ApproxOptions;
use wavelab::{Domain, DistanceOptions, IntegratorConfig, MultipeakonState, Peakon, Profile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    PeakonSimulate(PeakonParams),
    PeakonCollide(CollideParams),
    MetricDistance(DistanceParams),
    MetricStability(StabilityParams),
    BroadwellRun(BroadwellParams),
    BroadwellRescaled(BroadwellParams),
    ApproximateData(ApproxParams),
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::PeakonSimulate(_) => "peakon_simulate",
            Scenario::PeakonCollide(_) => "peakon_collide",
            Scenario::MetricDistance(_) => "metric_distance",
            Scenario::MetricStability(_) => "metric_stability",
            Scenario::BroadwellRun(_) => "broadwell_run",
            Scenario::BroadwellRescaled(_) => "broadwell_rescaled",
            Scenario::ApproximateData(_) => "approximate_data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub dir: PathBuf,
    /// File name prefix; the scenario name when absent.
    pub stem: Option<String>,
    /// Write CSV/JSON outputs next to the main result.
    pub plotdata: bool,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths { dir: PathBuf::from("."), stem: None, plotdata: true }
    }
}

fn real_line() -> Domain {
    Domain::RealLine { alpha: 0.5 }
}

fn traveling_peakon() -> MultipeakonState {
    MultipeakonState::new(real_line(), vec![Peakon::new(1.0, 0.0)]).expect("valid state")
}

/// Profile slices and world-line sampling for plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotParams {
    /// Times of the u(t, x) slices; start, middle and end when empty.
    pub times: Vec<f64>,
    /// x window; peakon hull padded by 5 on the line, [0, 1] on the circle.
    pub x_range: Option<[f64; 2]>,
    pub nx: usize,
}

impl Default for PlotParams {
    fn default() -> Self {
        PlotParams { times: Vec::new(), x_range: None, nx: 401 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakonParams {
    pub state: MultipeakonState,
    pub t_end: f64,
    pub integrator: IntegratorConfig,
    /// Rows of the trajectory CSV.
    pub samples: usize,
    /// Largest tolerated relative energy drift.
    pub drift_tol: f64,
    pub plot: PlotParams,
}

impl Default for PeakonParams {
    fn default() -> Self {
        PeakonParams {
            state: traveling_peakon(),
            t_end: 3.0,
            integrator: IntegratorConfig::default(),
            samples: 61,
            drift_tol: 1e-9,
            plot: PlotParams::default(),
        }
    }
}

/// Peakon-antipeakon pair (p, -q), (-p, q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollideParams {
    pub p: f64,
    pub q: f64,
    pub domain: Domain,
    pub t_end: f64,
    pub integrator: IntegratorConfig,
    pub samples: usize,
    /// Relative tolerance on E_before = E_after + lost energy.
    pub energy_tol: f64,
    pub plot: PlotParams,
}

impl Default for CollideParams {
    fn default() -> Self {
        CollideParams {
            p: 1.0,
            q: 1.0,
            domain: real_line(),
            t_end: 4.0,
            integrator: IntegratorConfig::default(),
            samples: 81,
            energy_tol: 1e-7,
            plot: PlotParams::default(),
        }
    }
}

impl CollideParams {
    pub fn state(&self) -> Result<MultipeakonState, CliError> {
        Ok(MultipeakonState::new(self.domain, vec![Peakon::new(self.p, -self.q), Peakon::new(-self.p, self.q)])?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceParams {
    pub u: MultipeakonState,
    pub v: MultipeakonState,
    pub options: DistanceOptions,
    /// Sample points per plan segment for the weight-condition check.
    pub phi_samples: usize,
}

impl Default for DistanceParams {
    fn default() -> Self {
        DistanceParams {
            u: traveling_peakon(),
            v: traveling_peakon(),
            options: DistanceOptions::default(),
            phi_samples: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityParams {
    pub u0: MultipeakonState,
    pub v0: MultipeakonState,
    pub t_end: f64,
    /// Number of sample times including both ends.
    pub samples: usize,
    pub integrator: IntegratorConfig,
    pub options: DistanceOptions,
}

impl Default for StabilityParams {
    fn default() -> Self {
        let pair = |a: (f64, f64), b: (f64, f64)| {
            MultipeakonState::new(real_line(), vec![Peakon::new(a.0, a.1), Peakon::new(b.0, b.1)]).expect("valid state")
        };
        StabilityParams {
            u0: pair((1.0, -1.0), (0.5, 1.0)),
            v0: pair((1.02, -0.98), (0.49, 1.01)),
            t_end: 1.0,
            samples: 11,
            integrator: IntegratorConfig::default(),
            options: DistanceOptions::default(),
        }
    }
}

/// Initial densities of a Broadwell run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialField {
    Uniform { a: f64 },
    /// Independent uniform node values in [lo, hi], drawn from the run seed.
    Random { lo: f64, hi: f64 },
    /// base + amplitude exp(-|x - center|^2 / width^2) in every field.
    Gaussian { base: f64, amplitude: f64, center: [f64; 2], width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BroadwellParams {
    pub grid: GridSpec,
    pub initial: InitialField,
    pub t_end: f64,
    /// Rows of the run CSV including both ends.
    pub samples: usize,
    /// Step cap below the CFL limit.
    pub dt: Option<f64>,
    pub interpolation: Interpolation,
    /// Weights of the decay functionals; Const with kappa = initial max when absent.
    pub kappa: Option<KappaMode>,
    /// Write a snapshot at every sample instead of only the last one.
    pub snapshots: bool,
    /// Largest tolerated relative mass drift on periodic original runs.
    pub mass_tol: f64,
    /// Relative slack on the decay bounds.
    pub bound_slack: f64,
}

impl Default for BroadwellParams {
    fn default() -> Self {
        BroadwellParams {
            grid: GridSpec { nx: 64, ny: 64, bounds: [-1.0, 1.0, -1.0, 1.0], boundary: Default::default() },
            initial: InitialField::Uniform { a: 0.5 },
            t_end: 1.0,
            samples: 11,
            dt: None,
            interpolation: Interpolation::Bilinear,
            kappa: None,
            snapshots: false,
            mass_tol: 1e-9,
            bound_slack: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApproxParams {
    pub profile: Profile,
    pub n: Vec<usize>,
    pub domain: Domain,
    pub epsilon_mollify: f64,
    pub options: ApproxOptions,
}

impl Default for ApproxParams {
    fn default() -> Self {
        ApproxParams {
            profile: Profile::Gaussian { amplitude: 1.0, center: 0.0, width: 1.0 },
            n: vec![8, 16, 32, 64],
            domain: real_line(),
            epsilon_mollify: 0.0,
            options: ApproxOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn new(scenario: Scenario) -> Self {
        RunConfig { scenario, seed: 0, output: OutputPaths::default() }
    }

    /// Parses JSON, reporting the field path of the first error.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| CliError::ConfigInvalid {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |path: &str, message: &str| {
            Err(CliError::ConfigInvalid { path: format!("scenario.{}.{path}", self.scenario.name()), message: message.into() })
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let state_ok = |s: &MultipeakonState| {
            MultipeakonState::with_atoms(s.domain, s.time, s.peakons.clone(), s.atoms.clone()).map(|_| ())
        };
        match &self.scenario {
            Scenario::PeakonSimulate(p) => {
                state_ok(&p.state)?;
                p.integrator.validate()?;
                if !p.t_end.is_finite() {
                    return bad("t_end", "must be finite");
                }
                if !positive(p.drift_tol) {
                    return bad("drift_tol", "must be positive");
                }
                if p.samples < 2 {
                    return bad("samples", "need at least 2");
                }
            }
            Scenario::PeakonCollide(c) => {
                c.state()?;
                c.integrator.validate()?;
                if !positive(c.q) {
                    return bad("q", "must be positive");
                }
                if !positive(c.t_end) {
                    return bad("t_end", "must be positive");
                }
                if !positive(c.energy_tol) {
                    return bad("energy_tol", "must be positive");
                }
                if c.samples < 2 {
                    return bad("samples", "need at least 2");
                }
            }
            Scenario::MetricDistance(d) => {
                state_ok(&d.u)?;
                state_ok(&d.v)?;
                if !positive(d.options.quad_tol) || !positive(d.options.search_tol) || !positive(d.options.rel_tol) {
                    return bad("options", "tolerances must be positive");
                }
            }
            Scenario::MetricStability(s) => {
                state_ok(&s.u0)?;
                state_ok(&s.v0)?;
                s.integrator.validate()?;
                if !positive(s.t_end) {
                    return bad("t_end", "must be positive");
                }
                if s.samples < 2 {
                    return bad("samples", "need at least 2");
                }
            }
            Scenario::BroadwellRun(b) | Scenario::BroadwellRescaled(b) => {
                b.grid.validate()?;
                if !positive(b.t_end) {
                    return bad("t_end", "must be positive");
                }
                if b.samples < 2 {
                    return bad("samples", "need at least 2");
                }
                if b.dt.is_some_and(|d| !positive(d)) {
                    return bad("dt", "must be positive");
                }
                if !positive(b.mass_tol) || !(b.bound_slack >= 0.0) {
                    return bad("mass_tol", "tolerances must be positive");
                }
                match b.initial {
                    InitialField::Uniform { a } if !(a >= 0.0) => return bad("initial.a", "must be >= 0"),
                    InitialField::Random { lo, hi } if !(lo >= 0.0 && hi >= lo) => {
                        return bad("initial", "need 0 <= lo <= hi")
                    }
                    InitialField::Gaussian { base, amplitude, width, .. }
                        if !(base >= 0.0 && amplitude >= 0.0 && width > 0.0) =>
                    {
                        return bad("initial", "need base, amplitude >= 0 and width > 0")
                    }
                    _ => {}
                }
            }
            Scenario::ApproximateData(a) => {
                a.profile.validate()?;
                if a.n.is_empty() || a.n.contains(&0) {
                    return bad("n", "need positive cell counts");
                }
                if !positive(a.options.tail_tol) {
                    return bad("options.tail_tol", "must be positive");
                }
            }
        }
        Ok(())
    }
}
