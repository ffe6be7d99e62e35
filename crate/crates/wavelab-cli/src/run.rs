use crate::config::*;
use crate::error::CliError;
use crate::output::{num, Outputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use wavelab::broadwell::{
    self, decay_bounds, functionals, write_snapshot, BroadwellGrid, Frame, FunctionalSample, KappaMode, StepOptions,
};
use wavelab::dynamics::{events_to_json, Trajectory};
use wavelab::initial_data::{approximate_with, h1_distance};
use wavelab::metric::{self, fit_growth, phi_violations};
use wavelab::{simulate, Domain, MultipeakonState};

/// Outcome of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: &'static str,
    pub summary: String,
    /// Monitors that failed; any entry gives exit code 2.
    pub violations: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.violations.is_empty() {
            0
        } else {
            2
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let stem = cfg.output.stem.clone().unwrap_or_else(|| cfg.scenario.name().to_string());
    let mut out = Outputs::create(&cfg.output.dir, &stem)?;
    let plot = cfg.output.plotdata;
    let (summary, violations) = match &cfg.scenario {
        Scenario::PeakonSimulate(p) => peakon_simulate(p, plot, &mut out)?,
        Scenario::PeakonCollide(c) => peakon_collide(c, plot, &mut out)?,
        Scenario::MetricDistance(d) => metric_distance(d, plot, &mut out)?,
        Scenario::MetricStability(s) => metric_stability(s, &mut out)?,
        Scenario::BroadwellRun(b) => broadwell_run(b, Frame::Original, cfg.seed, plot, &mut out)?,
        Scenario::BroadwellRescaled(b) => broadwell_run(b, Frame::Rescaled, cfg.seed, plot, &mut out)?,
        Scenario::ApproximateData(a) => approximate(a, plot, &mut out)?,
    };
    Ok(RunReport { scenario: cfg.scenario.name(), summary, violations, files: out.written })
}

fn trajectory_csv(traj: &Trajectory, samples: usize, out: &mut Outputs) -> Result<Vec<MultipeakonState>, CliError> {
    let states = traj.sample_uniform(samples)?;
    let n = states.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["t", "E", "H", "n_peakons", "chart"].iter().map(|s| s.to_string()).collect();
    for i in 1..=n {
        header.push(format!("p{i}"));
        header.push(format!("q{i}"));
    }
    let rows: Vec<Vec<String>> = states
        .iter()
        .map(|s| {
            let mut r = vec![
                num(s.time),
                num(s.energy()),
                num(s.hamiltonian()),
                s.len().to_string(),
                traj.chart_at(s.time).as_str().to_string(),
            ];
            for i in 0..n {
                match s.peakons.get(i) {
                    Some(pk) => {
                        r.push(num(pk.strength));
                        r.push(num(pk.position));
                    }
                    None => {
                        r.push(String::new());
                        r.push(String::new());
                    }
                }
            }
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    out.csv(".csv", &header, &rows)?;
    Ok(states)
}

fn x_window(state: &MultipeakonState, plot: &PlotParams) -> [f64; 2] {
    if let Some(r) = plot.x_range {
        return r;
    }
    match state.domain {
        Domain::Periodic => [0.0, 1.0],
        Domain::RealLine { .. } => {
            let q = state.positions();
            let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() {
                [lo - 5.0, hi + 5.0]
            } else {
                [-5.0, 5.0]
            }
        }
    }
}

/// Profile slices u(t, x), world-lines and functional series of a peakon run.
pub fn emit_plotdata(
    traj: &Trajectory,
    states: &[MultipeakonState],
    plot: &PlotParams,
    out: &mut Outputs,
) -> Result<(), CliError> {
    let initial = traj.state_at(traj.t_start)?;
    let mut times = plot.times.clone();
    if times.is_empty() {
        times.push(traj.t_start);
        times.extend(traj.events.iter().map(|e| e.t));
        if traj.events.is_empty() {
            times.push(0.5 * (traj.t_start + traj.t_end));
        }
        times.push(traj.t_end);
    }
    let [a, b] = x_window(&initial, plot);
    let nx = plot.nx.max(2);
    let mut profiles = Vec::new();
    for &t in &times {
        let s = traj.state_at(t)?;
        if s.is_empty() && s.atoms.is_empty() {
            continue;
        }
        for k in 0..nx {
            let x = a + (b - a) * k as f64 / (nx - 1) as f64;
            profiles.push(vec![num(t), num(x), num(s.evaluate_u(x))]);
        }
    }
    out.csv("_profiles.csv", &["t", "x", "u"], &profiles)?;

    let mut lines = Vec::new();
    for s in states {
        for (i, pk) in s.peakons.iter().enumerate() {
            lines.push(vec![num(s.time), (i + 1).to_string(), num(pk.position), num(pk.strength)]);
        }
    }
    out.csv("_worldlines.csv", &["t", "index", "q", "p"], &lines)?;

    let series: Vec<Vec<String>> = states
        .iter()
        .map(|s| vec![num(s.time), num(s.energy()), num(s.atom_mass()), num(s.h1_norm())])
        .collect();
    out.csv("_functionals.csv", &["t", "E", "atom_mass", "h1_norm"], &series)?;
    Ok(())
}

fn peakon_simulate(p: &PeakonParams, plot: bool, out: &mut Outputs) -> Result<(String, Vec<String>), CliError> {
    let traj = simulate(&p.state, p.t_end, &p.integrator)?;
    let states = trajectory_csv(&traj, p.samples, out)?;
    out.text("_events.json", &events_to_json(&traj.events))?;
    out.text("_final.json", &traj.final_state()?.to_json())?;
    if plot {
        emit_plotdata(&traj, &states, &p.plot, out)?;
    }
    let drift = traj.energy_drift();
    let mut violations = Vec::new();
    if drift > p.drift_tol {
        violations.push(format!("energy drift {drift:.3e} > {:.3e}", p.drift_tol));
    }
    let summary = format!("drift={drift:.3e} events={} violations={}", traj.events.len(), violations.len());
    Ok((summary, violations))
}

fn peakon_collide(c: &CollideParams, plot: bool, out: &mut Outputs) -> Result<(String, Vec<String>), CliError> {
    let state = c.state()?;
    let traj = simulate(&state, c.t_end, &c.integrator)?;
    let states = trajectory_csv(&traj, c.samples, out)?;
    out.text("_events.json", &events_to_json(&traj.events))?;
    out.text("_final.json", &traj.final_state()?.to_json())?;
    if plot {
        emit_plotdata(&traj, &states, &c.plot, out)?;
    }
    let mut violations = Vec::new();
    let e0 = state.energy();
    let fin = traj.final_state()?;
    let lost = traj.events.iter().filter_map(|e| e.lost_energy).fold(0.0, |a, b| a + b);
    let balance = (fin.energy() + lost - e0).abs() / e0.max(f64::MIN_POSITIVE);
    if traj.events.is_empty() {
        violations.push("no collision before t_end".to_string());
    }
    if balance > c.energy_tol {
        violations.push(format!("energy balance {balance:.3e} > {:.3e}", c.energy_tol));
    }
    let tau = traj.events.first().map_or(f64::NAN, |e| e.t);
    let summary = format!(
        "events={} tau={tau:.6} energy_balance={balance:.3e} lost={lost:.6e} violations={}",
        traj.events.len(),
        violations.len()
    );
    Ok((summary, violations))
}

fn metric_distance(d: &DistanceParams, plot: bool, out: &mut Outputs) -> Result<(String, Vec<String>), CliError> {
    let rep = metric::distance(&d.u, &d.v, &d.options)?;
    let viol = phi_violations(&d.u, &d.v, &rep.plan, d.phi_samples)?;
    out.text(".json", &rep.to_json(viol))?;
    if plot {
        let knots: Vec<Vec<String>> = rep.plan.knots.iter().map(|k| vec![num(k[0]), num(k[1])]).collect();
        out.csv("_plan.csv", &["x", "psi"], &knots)?;
        let hist: Vec<Vec<String>> =
            rep.history.iter().enumerate().map(|(i, j)| vec![i.to_string(), num(*j)]).collect();
        out.csv("_history.csv", &["sweep", "J"], &hist)?;
    }
    let mut violations = Vec::new();
    if viol > 0 {
        violations.push(format!("{viol} weight-condition violations on the plan"));
    }
    Ok((format!("J={:.9e} iterations={} phi_violations={viol}", rep.j, rep.iterations), violations))
}

fn metric_stability(s: &StabilityParams, out: &mut Outputs) -> Result<(String, Vec<String>), CliError> {
    let tu = simulate(&s.u0, s.t_end, &s.integrator)?;
    let tv = simulate(&s.v0, s.t_end, &s.integrator)?;
    for traj in [&tu, &tv] {
        if let Some(e) = traj.events.first() {
            return Err(metric::MetricError::CollisionInWindow { time: e.t }.into());
        }
    }
    let us = tu.sample_uniform(s.samples)?;
    let vs = tv.sample_uniform(s.samples)?;
    let mut series = Vec::with_capacity(us.len());
    for (u, v) in us.iter().zip(&vs) {
        series.push((u.time, metric::distance(u, v, &s.options)?.j));
    }
    let j0 = series[0].1;
    let rows: Vec<Vec<String>> =
        series.iter().map(|&(t, j)| vec![num(t), num(j), num((j / j0).ln())]).collect();
    out.csv(".csv", &["t", "J", "log_ratio"], &rows)?;
    let fit = fit_growth(&series);
    out.text(
        "_fit.json",
        &serde_json::json!({
            "c2": fit.c2,
            "ls_slope": fit.ls_slope,
            "residual": fit.residual,
            "sup_ratio": fit.sup_ratio,
        })
        .to_string(),
    )?;
    let mut violations = Vec::new();
    if !fit.sup_ratio.is_finite() {
        violations.push("distance growth ratio is not finite".to_string());
    }
    let summary = format!(
        "J0={j0:.6e} c2={:.4} ls_slope={:.4} residual={:.2e} sup_ratio={:.4}",
        fit.c2, fit.ls_slope, fit.residual, fit.sup_ratio
    );
    Ok((summary, violations))
}

fn initial_grid(b: &BroadwellParams, frame: Frame, seed: u64) -> Result<BroadwellGrid, CliError> {
    let mut g = match &b.initial {
        InitialField::Uniform { a } => BroadwellGrid::uniform(frame, b.grid, *a)?,
        InitialField::Gaussian { base, amplitude, center, width } => BroadwellGrid::from_fn(frame, b.grid, |x, y| {
            let r2 = (x - center[0]).powi(2) + (y - center[1]).powi(2);
            [base + amplitude * (-r2 / (width * width)).exp(); 4]
        })?,
        InitialField::Random { lo, hi } => {
            let mut g = BroadwellGrid::zeros(frame, b.grid)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for field in g.w.iter_mut() {
                for v in field.iter_mut() {
                    *v = if hi > lo { rng.gen_range(*lo..*hi) } else { *lo };
                }
            }
            g
        }
    };
    g.t = 0.0;
    Ok(g)
}

const BROADWELL_HEADER: [&str; 11] = [
    "t", "mass", "sup_w1", "sup_w2", "sup_w3", "sup_w4", "Q14_sup", "Q12_sup", "Q23_sup", "Q34_sup", "bound_margin",
];

fn broadwell_run(
    b: &BroadwellParams,
    frame: Frame,
    seed: u64,
    plot: bool,
    out: &mut Outputs,
) -> Result<(String, Vec<String>), CliError> {
    let mut g = initial_grid(b, frame, seed)?;
    let mode = b.kappa.unwrap_or(KappaMode::Const { kappa: g.sup_all().max(f64::MIN_POSITIVE) });
    let opts = StepOptions { interp: b.interpolation, forcing: None };
    let m0 = g.mass();
    let periodic_original = frame == Frame::Original && b.grid.boundary == broadwell::Boundary::Periodic;
    let mut grids_t = Vec::with_capacity(b.samples);
    let mut samples: Vec<Option<FunctionalSample>> = Vec::with_capacity(b.samples);
    let mut masses = Vec::with_capacity(b.samples);
    let mut sups = Vec::with_capacity(b.samples);
    let m = b.samples - 1;
    for k in 0..=m {
        if k > 0 {
            g = broadwell::advance(&g, b.t_end * k as f64 / m as f64, b.dt, &opts)?;
        }
        grids_t.push(g.t);
        masses.push(g.mass());
        sups.push([g.sup(0), g.sup(1), g.sup(2), g.sup(3)]);
        samples.push(match frame {
            Frame::Rescaled => Some(functionals(&g, &mode)?),
            Frame::Original => None,
        });
        if b.snapshots {
            let mut buf = Vec::new();
            write_snapshot(&g, &mut buf)?;
            out.bytes(&format!("_{k:04}.bwg"), &buf)?;
        }
    }
    let mut buf = Vec::new();
    write_snapshot(&g, &mut buf)?;
    out.bytes("_final.bwg", &buf)?;

    let decay = match frame {
        Frame::Rescaled => {
            let s: Vec<FunctionalSample> = samples.iter().flatten().copied().collect();
            Some(decay_bounds(&s, &mode, b.bound_slack))
        }
        Frame::Original => None,
    };
    let mut violations = Vec::new();
    let mut max_drift: f64 = 0.0;
    let rows: Vec<Vec<String>> = (0..=m)
        .map(|k| {
            let mut r = vec![num(grids_t[k]), num(masses[k])];
            r.extend(sups[k].iter().map(|v| num(*v)));
            match &samples[k] {
                Some(s) => r.extend([s.q14_sup, s.q12_sup, s.q23_sup, s.q34_sup].iter().map(|v| num(*v))),
                None => r.extend(std::iter::repeat_n(String::new(), 4)),
            }
            let margin = match &decay {
                Some(d) => d.rows[k].margin,
                None if periodic_original && m0 > 0.0 => {
                    let drift = (masses[k] - m0).abs() / m0;
                    max_drift = max_drift.max(drift);
                    1.0 - drift / b.mass_tol
                }
                None => f64::NAN,
            };
            r.push(num(margin));
            r
        })
        .collect();
    out.csv(".csv", &BROADWELL_HEADER, &rows)?;

    if let Some(d) = &decay {
        if plot {
            let drows: Vec<Vec<String>> = d
                .rows
                .iter()
                .map(|r| {
                    vec![
                        num(r.t),
                        num(r.line_measured),
                        num(r.line_bound),
                        num(r.cell_measured),
                        num(r.cell_bound),
                        num(r.margin),
                        r.pass.to_string(),
                    ]
                })
                .collect();
            out.csv(
                "_decay.csv",
                &["t", "line_measured", "line_bound", "cell_measured", "cell_bound", "margin", "pass"],
                &drows,
            )?;
        }
        let failed = d.rows.iter().filter(|r| !r.pass).count();
        if failed > 0 {
            violations.push(format!("decay bound violated at {failed} samples"));
        }
    }
    if periodic_original && max_drift > b.mass_tol {
        violations.push(format!("mass drift {max_drift:.3e} > {:.3e}", b.mass_tol));
    }
    let summary = format!(
        "t={:.6} mass={:.9e} sup={:.6e} clipped={:.3e} violations={}",
        g.t,
        g.mass(),
        g.sup_all(),
        g.clipped_mass,
        violations.len()
    );
    Ok((summary, violations))
}

fn approximate(a: &ApproxParams, plot: bool, out: &mut Outputs) -> Result<(String, Vec<String>), CliError> {
    let mut rows = Vec::new();
    let mut states = Vec::new();
    let mut errs = Vec::new();
    for &n in &a.n {
        let s = approximate_with(&a.profile, n, a.domain, a.epsilon_mollify, &a.options)?;
        let e = h1_distance(&a.profile, &s);
        errs.push(e);
        rows.push(vec![n.to_string(), num(e), num(s.energy())]);
        states.push(s);
    }
    out.csv(".csv", &["n", "h1_error", "E"], &rows)?;
    let body: Vec<String> = states.iter().map(|s| s.to_json()).collect();
    out.text("_states.json", &format!("[{}]", body.join(", ")))?;
    if plot {
        let mut prof = Vec::new();
        for (n, s) in a.n.iter().zip(&states) {
            let [lo, hi] = x_window(s, &PlotParams::default());
            for k in 0..401 {
                let x = lo + (hi - lo) * k as f64 / 400.0;
                prof.push(vec![n.to_string(), num(x), num(a.profile.value(x)), num(s.evaluate_u(x))]);
            }
        }
        out.csv("_profiles.csv", &["n", "x", "f", "u"], &prof)?;
    }
    let list: Vec<String> = a.n.iter().zip(&errs).map(|(n, e)| format!("{n}:{e:.3e}")).collect();
    Ok((format!("h1_errors {}", list.join(" ")), Vec::new()))
}
