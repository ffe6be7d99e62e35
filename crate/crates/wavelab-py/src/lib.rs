//! Python module `pywavelab`: multipeakon states and flows, the transport
//! metric, multipeakon approximation of initial data and the Broadwell
//! solver.

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::fmt::Display;
use wavelab::broadwell::{
    self, collision_term as bw_collision_term, functionals, read_snapshot, write_snapshot, Boundary,
    BroadwellGrid, Frame, GridSpec, Interpolation, KappaMode, StepOptions,
};
use wavelab::dynamics::CollisionMode;
use wavelab::initial_data::{approximate_with, h1_distance as wl_h1_distance, ApproxOptions};
use wavelab::metric::{self, DistanceOptions};
use wavelab::{Domain, IntegratorConfig, MultipeakonState, Peakon, Profile};

create_exception!(pywavelab, WavelabError, PyValueError);

fn err(e: impl Display) -> PyErr {
    WavelabError::new_err(e.to_string())
}

fn domain_from(name: &str, alpha: f64) -> PyResult<Domain> {
    match name {
        "real_line" | "line" => Domain::real_line(alpha).map_err(err),
        "periodic" | "circle" => Ok(Domain::Periodic),
        other => Err(err(format!("unknown domain `{other}`; use real_line or periodic"))),
    }
}

/// JSON text of a dict (via the `json` module) or a string passed through.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.extract::<String>() {
        return Ok(s);
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn from_py_json<T: serde::de::DeserializeOwned>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<Option<T>> {
    obj.map(|o| serde_json::from_str(&json_text(o)?).map_err(err)).transpose()
}

/// Multipeakon state u = sum p_i G(x - q_i), plus energy atoms after a
/// conservative collision.
#[pyclass(name = "State", module = "pywavelab", skip_from_py_object)]
#[derive(Clone)]
struct PyState {
    inner: MultipeakonState,
}

#[pymethods]
impl PyState {
    #[new]
    #[pyo3(signature = (peakons, domain = "real_line", alpha = 0.5, time = 0.0))]
    fn new(peakons: Vec<(f64, f64)>, domain: &str, alpha: f64, time: f64) -> PyResult<Self> {
        let d = domain_from(domain, alpha)?;
        let pk = peakons.into_iter().map(|(p, q)| Peakon::new(p, q)).collect();
        let inner = MultipeakonState::with_atoms(d, time, pk, vec![]).map_err(err)?;
        Ok(PyState { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyState { inner: MultipeakonState::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// (p, q) pairs.
    #[getter]
    fn peakons(&self) -> Vec<(f64, f64)> {
        self.inner.peakons.iter().map(|p| (p.strength, p.position)).collect()
    }

    /// (x, mass) pairs.
    #[getter]
    fn atoms(&self) -> Vec<(f64, f64)> {
        self.inner.atoms.iter().map(|a| (a.x, a.mass)).collect()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time
    }

    #[getter]
    fn domain(&self) -> &'static str {
        match self.inner.domain {
            Domain::RealLine { .. } => "real_line",
            Domain::Periodic => "periodic",
        }
    }

    fn u(&self, x: f64) -> f64 {
        self.inner.evaluate_u(x)
    }

    fn ux(&self, x: f64) -> f64 {
        self.inner.evaluate_ux(x)
    }

    fn profile(&self, xs: Vec<f64>) -> Vec<f64> {
        xs.into_iter().map(|x| self.inner.evaluate_u(x)).collect()
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    fn hamiltonian(&self) -> f64 {
        self.inner.hamiltonian()
    }

    fn h1_norm(&self) -> f64 {
        self.inner.h1_norm()
    }

    fn atom_mass(&self) -> f64 {
        self.inner.atom_mass()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("State(domain={}, t={}, n={}, E={:.6})", self.domain(), self.inner.time, self.inner.len(), self.energy())
    }
}

#[pyclass(name = "Trajectory", module = "pywavelab")]
struct PyTrajectory {
    inner: wavelab::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    fn state_at(&self, t: f64) -> PyResult<PyState> {
        Ok(PyState { inner: self.inner.state_at(t).map_err(err)? })
    }

    fn final_state(&self) -> PyResult<PyState> {
        Ok(PyState { inner: self.inner.final_state().map_err(err)? })
    }

    /// `count` states at equally spaced times.
    fn sample(&self, count: usize) -> PyResult<Vec<PyState>> {
        let s = self.inner.sample_uniform(count).map_err(err)?;
        Ok(s.into_iter().map(|inner| PyState { inner }).collect())
    }

    fn energy_drift(&self) -> f64 {
        self.inner.energy_drift()
    }

    #[getter]
    fn events<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .events
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("t", e.t)?;
                d.set_item("q_bar", e.q_bar)?;
                d.set_item("e_tau", e.e_tau)?;
                d.set_item("mode", e.mode.as_str())?;
                d.set_item("lost_energy", e.lost_energy)?;
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn t_start(&self) -> f64 {
        self.inner.t_start
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end
    }
}

/// Integrate a state to `t_end`; `config` is a dict of integrator options.
#[pyfunction]
#[pyo3(signature = (state, t_end, mode = "conservative", config = None))]
fn simulate(state: &PyState, t_end: f64, mode: &str, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyTrajectory> {
    let mut cfg: IntegratorConfig = from_py_json(config)?.unwrap_or_default();
    cfg.mode = match mode {
        "conservative" => CollisionMode::Conservative,
        "dissipative" => CollisionMode::Dissipative,
        other => return Err(err(format!("unknown mode `{other}`"))),
    };
    let inner = wavelab::simulate(&state.inner, t_end, &cfg).map_err(err)?;
    Ok(PyTrajectory { inner })
}

/// Optimal-transport distance; returns (J, plan knots as (x, psi) pairs).
#[pyfunction]
#[pyo3(signature = (u, v, knots = None, options = None))]
fn distance(
    u: &PyState,
    v: &PyState,
    knots: Option<usize>,
    options: Option<&Bound<'_, PyAny>>,
) -> PyResult<(f64, Vec<(f64, f64)>)> {
    let mut opts: DistanceOptions = from_py_json(options)?.unwrap_or_default();
    if knots.is_some() {
        opts.knots = knots;
    }
    let rep = metric::distance(&u.inner, &v.inner, &opts).map_err(err)?;
    Ok((rep.j, rep.plan.knots.iter().map(|k| (k[0], k[1])).collect()))
}

/// Multipeakon approximation of a profile given as a dict, e.g.
/// `{"kind": "gaussian", "width": 1.0}`.
#[pyfunction]
#[pyo3(signature = (profile, n, domain = "real_line", alpha = 0.5, epsilon_mollify = 0.0, radius = None))]
fn approximate(
    profile: &Bound<'_, PyAny>,
    n: usize,
    domain: &str,
    alpha: f64,
    epsilon_mollify: f64,
    radius: Option<f64>,
) -> PyResult<PyState> {
    let f: Profile = serde_json::from_str(&json_text(profile)?).map_err(err)?;
    let opts = ApproxOptions { radius, ..Default::default() };
    let inner = approximate_with(&f, n, domain_from(domain, alpha)?, epsilon_mollify, &opts).map_err(err)?;
    Ok(PyState { inner })
}

#[pyfunction]
fn h1_distance(profile: &Bound<'_, PyAny>, state: &PyState) -> PyResult<f64> {
    let f: Profile = serde_json::from_str(&json_text(profile)?).map_err(err)?;
    Ok(wl_h1_distance(&f, &state.inner))
}

#[pyfunction]
fn collision_term(w1: f64, w2: f64, w3: f64, w4: f64) -> [f64; 4] {
    bw_collision_term(w1, w2, w3, w4)
}

fn interp_from(cubic: bool) -> Interpolation {
    if cubic {
        Interpolation::Cubic
    } else {
        Interpolation::Bilinear
    }
}

/// Four Broadwell densities on a node grid, in the original or the
/// rescaled frame. Fields are row-major lists of length nx * ny.
#[pyclass(name = "BroadwellGrid", module = "pywavelab", skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: BroadwellGrid,
}

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (nx, ny = None, frame = "original", boundary = "outflow", bounds = None, value = 0.0))]
    fn new(
        nx: usize,
        ny: Option<usize>,
        frame: &str,
        boundary: &str,
        bounds: Option<[f64; 4]>,
        value: f64,
    ) -> PyResult<Self> {
        let frame = match frame {
            "original" => Frame::Original,
            "rescaled" => Frame::Rescaled,
            other => return Err(err(format!("unknown frame `{other}`"))),
        };
        let boundary = match boundary {
            "outflow" => Boundary::Outflow,
            "periodic" => Boundary::Periodic,
            other => return Err(err(format!("unknown boundary `{other}`"))),
        };
        let mut spec = GridSpec::square(nx, boundary);
        spec.ny = ny.unwrap_or(nx);
        if let Some(b) = bounds {
            spec.bounds = b;
        }
        Ok(PyGrid { inner: BroadwellGrid::uniform(frame, spec, value).map_err(err)? })
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.spec.nx, self.inner.spec.ny)
    }

    #[getter]
    fn t(&self) -> f64 {
        self.inner.t
    }

    #[getter]
    fn clipped_mass(&self) -> f64 {
        self.inner.clipped_mass
    }

    fn x(&self) -> Vec<f64> {
        (0..self.inner.spec.nx).map(|i| self.inner.spec.x(i)).collect()
    }

    fn y(&self) -> Vec<f64> {
        (0..self.inner.spec.ny).map(|j| self.inner.spec.y(j)).collect()
    }

    /// Field k in 0..4 (w1..w4).
    fn field(&self, k: usize) -> PyResult<Vec<f64>> {
        self.inner.w.get(k).cloned().ok_or_else(|| err(format!("field index {k} not in 0..4")))
    }

    fn set_field(&mut self, k: usize, values: Vec<f64>) -> PyResult<()> {
        let n = self.inner.spec.nx * self.inner.spec.ny;
        if k >= 4 || values.len() != n {
            return Err(err(format!("need k < 4 and {n} values, got k = {k} and {}", values.len())));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(err("densities must be finite and nonnegative"));
        }
        self.inner.w[k] = values;
        Ok(())
    }

    #[pyo3(signature = (k, x, y, cubic = false))]
    fn sample(&self, k: usize, x: f64, y: f64, cubic: bool) -> PyResult<f64> {
        if k >= 4 {
            return Err(err(format!("field index {k} not in 0..4")));
        }
        Ok(self.inner.sample(k, x, y, interp_from(cubic)))
    }

    fn mass(&self) -> f64 {
        self.inner.mass()
    }

    fn sup(&self) -> f64 {
        self.inner.sup_all()
    }

    fn cfl_limit(&self) -> f64 {
        self.inner.cfl_limit()
    }

    #[pyo3(signature = (dt, cubic = false))]
    fn step(&self, dt: f64, cubic: bool) -> PyResult<PyGrid> {
        let opts = StepOptions { interp: interp_from(cubic), forcing: None };
        Ok(PyGrid { inner: broadwell::step_with(&self.inner, dt, &opts).map_err(err)? })
    }

    #[pyo3(signature = (t_end, dt_max = None, cubic = false))]
    fn advance(&self, t_end: f64, dt_max: Option<f64>, cubic: bool) -> PyResult<PyGrid> {
        let opts = StepOptions { interp: interp_from(cubic), forcing: None };
        Ok(PyGrid { inner: broadwell::advance(&self.inner, t_end, dt_max, &opts).map_err(err)? })
    }

    /// Sup of the pair functionals with constant `kappa` (default: sup w)
    /// or logarithmic rate `theta`.
    #[pyo3(signature = (kappa = None, theta = None))]
    fn functionals<'py>(&self, py: Python<'py>, kappa: Option<f64>, theta: Option<f64>) -> PyResult<Bound<'py, PyDict>> {
        let mode = match (kappa, theta) {
            (_, Some(theta)) => KappaMode::LogT { theta },
            (k, None) => KappaMode::Const { kappa: k.unwrap_or_else(|| self.inner.sup_all()) },
        };
        let s = functionals(&self.inner, &mode).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("t", s.t)?;
        d.set_item("Q14", s.q14_sup)?;
        d.set_item("Q12", s.q12_sup)?;
        d.set_item("Q23", s.q23_sup)?;
        d.set_item("Q34", s.q34_sup)?;
        d.set_item("line_sup", s.line_sup)?;
        d.set_item("cell_max", s.cell_max)?;
        Ok(d)
    }

    fn write_snapshot(&self, path: &str) -> PyResult<()> {
        let mut f = std::fs::File::create(path).map_err(err)?;
        write_snapshot(&self.inner, &mut f).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, boundary = "outflow", bounds = [-1.0, 1.0, -1.0, 1.0]))]
    fn read_snapshot(path: &str, boundary: &str, bounds: [f64; 4]) -> PyResult<PyGrid> {
        let boundary = if boundary == "periodic" { Boundary::Periodic } else { Boundary::Outflow };
        let mut f = std::fs::File::open(path).map_err(err)?;
        let snap = read_snapshot(&mut f).map_err(err)?;
        Ok(PyGrid { inner: snap.into_grid(bounds, boundary).map_err(err)? })
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.spec;
        format!("BroadwellGrid({:?}, {}x{}, t={}, mass={:.6})", self.inner.frame, s.nx, s.ny, self.inner.t, self.mass())
    }
}

#[pymodule]
fn pywavelab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WavelabError", m.py().get_type::<WavelabError>())?;
    m.add_class::<PyState>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyGrid>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(distance, m)?)?;
    m.add_function(wrap_pyfunction!(approximate, m)?)?;
    m.add_function(wrap_pyfunction!(h1_distance, m)?)?;
    m.add_function(wrap_pyfunction!(collision_term, m)?)?;
    Ok(())
}
