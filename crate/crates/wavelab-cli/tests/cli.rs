use std::fs;
use std::path::Path;
use wavelab::broadwell::read_snapshot;
use wavelab_cli::config::*;
use wavelab_cli::{main_from, run};

fn cfg_in(dir: &Path, scenario: Scenario) -> RunConfig {
    let mut c = RunConfig::new(scenario);
    c.output.dir = dir.to_path_buf();
    c
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn single_peakon_run_has_tiny_drift_and_straight_worldline() {
    let dir = tempfile::tempdir().unwrap();
    let rep = run(&cfg_in(dir.path(), Scenario::PeakonSimulate(PeakonParams::default()))).unwrap();
    assert_eq!(rep.exit_code(), 0);
    let (header, rows) = read_csv(&dir.path().join("peakon_simulate.csv"));
    assert_eq!(header, ["t", "E", "H", "n_peakons", "chart", "p1", "q1"]);
    assert_eq!(rows.len(), 61);
    let e0 = f(&rows[0][1]);
    for r in &rows {
        assert!((f(&r[1]) - e0).abs() < 1e-9 * e0);
    }
    let (_, lines) = read_csv(&dir.path().join("peakon_simulate_worldlines.csv"));
    for l in &lines {
        // slope p = 1 from q(0) = 0
        assert!((f(&l[2]) - f(&l[0])).abs() < 1e-9, "{l:?}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("peakon_simulate_events.json")).unwrap(), "[]");
}

#[test]
fn empty_run_writes_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = PeakonParams::default();
    p.state.peakons.clear();
    p.t_end = 1.0;
    let rep = run(&cfg_in(dir.path(), Scenario::PeakonSimulate(p))).unwrap();
    assert_eq!(rep.exit_code(), 0);
    assert_eq!(fs::read_to_string(dir.path().join("peakon_simulate_worldlines.csv")).unwrap(), "t,index,q,p\n");
    assert_eq!(fs::read_to_string(dir.path().join("peakon_simulate_profiles.csv")).unwrap(), "t,x,u\n");
}

#[test]
fn collision_worldlines_meet_once_and_match_golden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_json(
        r#"{"scenario": {"peakon_collide": {"samples": 21, "plot": {"nx": 81}}}, "output": {"stem": "collide"}}"#,
    )
    .unwrap();
    let mut cfg = cfg;
    cfg.output.dir = dir.path().to_path_buf();
    let rep = run(&cfg).unwrap();
    assert_eq!(rep.exit_code(), 0, "{:?}", rep.violations);
    let (_, got) = read_csv(&dir.path().join("collide_worldlines.csv"));
    let (_, gold) = read_csv(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/collide_worldlines.csv")));
    assert_eq!(got.len(), gold.len());
    for (a, b) in got.iter().zip(&gold) {
        assert_eq!(a[1], b[1]);
        for k in [0, 2, 3] {
            assert!((f(&a[k]) - f(&b[k])).abs() < 1e-9 * f(&b[k]).abs().max(1.0), "{a:?} {b:?}");
        }
    }
    // gap between the two world-lines closes only at the collision time
    let gaps: Vec<(f64, f64)> = got.chunks(2).map(|c| (f(&c[0][0]), (f(&c[1][2]) - f(&c[0][2])).abs())).collect();
    let events = fs::read_to_string(dir.path().join("collide_events.json")).unwrap();
    let ev: serde_json::Value = serde_json::from_str(&events).unwrap();
    assert_eq!(ev.as_array().unwrap().len(), 1);
    assert_eq!(ev[0]["type"], "collision");
    let tau = ev[0]["t"].as_f64().unwrap();
    assert!(gaps.iter().all(|&(_, g)| g > 0.0));
    let (before, after): (Vec<(f64, f64)>, Vec<(f64, f64)>) = gaps.iter().partition(|(t, _)| *t < tau);
    assert!(before.windows(2).all(|w| w[1].1 < w[0].1));
    assert!(after.windows(2).all(|w| w[1].1 > w[0].1));
    // profile at tau vanishes: all energy sits in the atom
    let (_, prof) = read_csv(&dir.path().join("collide_profiles.csv"));
    let at_tau: Vec<&Vec<String>> = prof.iter().filter(|r| (f(&r[0]) - tau).abs() < 1e-12).collect();
    assert_eq!(at_tau.len(), 81);
    assert!(at_tau.iter().all(|r| f(&r[2]).abs() < 1e-6));
}

#[test]
fn metric_distance_of_identical_states_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let rep = run(&cfg_in(dir.path(), Scenario::MetricDistance(DistanceParams::default()))).unwrap();
    assert_eq!(rep.exit_code(), 0);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("metric_distance.json")).unwrap()).unwrap();
    assert!(v["J"].as_f64().unwrap() < 1e-9);
    assert_eq!(v["phi_violations"], 0);
    assert!(v["plan"].as_array().unwrap().len() >= 2);
}

#[test]
fn rescaled_uniform_run_decays() {
    let dir = tempfile::tempdir().unwrap();
    let a = 0.6;
    let p = BroadwellParams {
        initial: InitialField::Uniform { a },
        t_end: 1.5,
        samples: 4,
        grid: wavelab::GridSpec::square(48, Default::default()),
        ..Default::default()
    };
    let rep = run(&cfg_in(dir.path(), Scenario::BroadwellRescaled(p))).unwrap();
    assert_eq!(rep.exit_code(), 0, "{:?}", rep.violations);
    let (header, rows) = read_csv(&dir.path().join("broadwell_rescaled.csv"));
    assert_eq!(
        header,
        ["t", "mass", "sup_w1", "sup_w2", "sup_w3", "sup_w4", "Q14_sup", "Q12_sup", "Q23_sup", "Q34_sup", "bound_margin"]
    );
    let last = rows.last().unwrap();
    for k in 2..6 {
        assert!(f(&last[k]) < (-1.5f64).exp() * a * 1.01);
    }
    assert!(f(&last[10]) > 0.0);
    let snap = read_snapshot(&mut fs::File::open(dir.path().join("broadwell_rescaled_final.bwg")).unwrap()).unwrap();
    assert_eq!((snap.nx, snap.ny, snap.t), (48, 48, 1.5));
}

#[test]
fn periodic_original_run_reports_mass_margin() {
    let dir = tempfile::tempdir().unwrap();
    let p = BroadwellParams {
        initial: InitialField::Random { lo: 0.1, hi: 0.9 },
        grid: wavelab::GridSpec::square(32, wavelab::broadwell::Boundary::Periodic),
        t_end: 0.5,
        samples: 3,
        ..Default::default()
    };
    let rep = run(&cfg_in(dir.path(), Scenario::BroadwellRun(p))).unwrap();
    assert_eq!(rep.exit_code(), 0, "{:?}", rep.violations);
    let (_, rows) = read_csv(&dir.path().join("broadwell_run.csv"));
    assert!(rows.iter().all(|r| r[6].is_empty() && f(&r[10]) > 0.9));
}

#[test]
fn monitor_violation_gives_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let c = CollideParams { t_end: 1.0, ..Default::default() };
    let rep = run(&cfg_in(dir.path(), Scenario::PeakonCollide(c))).unwrap();
    assert_eq!(rep.exit_code(), 2);
    assert!(rep.violations[0].contains("no collision"));
}

#[test]
fn config_round_trip_and_errors() {
    let scenarios = [
        Scenario::PeakonSimulate(Default::default()),
        Scenario::PeakonCollide(Default::default()),
        Scenario::MetricDistance(Default::default()),
        Scenario::MetricStability(Default::default()),
        Scenario::BroadwellRun(Default::default()),
        Scenario::BroadwellRescaled(BroadwellParams { kappa: Some(wavelab::broadwell::KappaMode::LogT { theta: 0.2 }), ..Default::default() }),
        Scenario::ApproximateData(Default::default()),
    ];
    for s in scenarios {
        let mut c = RunConfig::new(s);
        c.seed = 17;
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
    let err = RunConfig::from_json(r#"{"scenario": {"peakon_simulate": {"t_end": "soon"}}}"#).unwrap_err();
    assert!(err.to_string().contains("scenario.peakon_simulate.t_end"), "{err}");
    let err = RunConfig::from_json(r#"{"scenario": {"peakon_simulate": {"t_ned": 1}}}"#).unwrap_err();
    assert!(err.to_string().contains("t_ned"), "{err}");
    let err = RunConfig::from_json(r#"{"scenario": {"broadwell_run": {"t_end": -1}}}"#).unwrap_err();
    assert!(err.to_string().contains("scenario.broadwell_run.t_end"), "{err}");
    assert!(RunConfig::from_json(r#"{"seed": 3}"#).is_err());
}

#[test]
fn command_line_entry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.csv");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"scenario": {"broadwell_rescaled": {"grid": {"nx": 16, "ny": 16}, "t_end": 0.2, "samples": 2}}}"#)
        .unwrap();
    let code = main_from(["wavelab", "broadwell", "run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(code, 0);
    assert!(out.exists());
    assert!(dir.path().join("run_final.bwg").exists());
    let code = main_from(["wavelab", "peakon", "run", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(code, 1);
    assert_eq!(main_from(["wavelab", "nonsense"]), 1);

    let u = dir.path().join("u.json");
    fs::write(&u, r#"{"domain": "periodic", "time": 0, "peakons": [{"p": 0.5, "q": 0.2}], "atoms": []}"#).unwrap();
    let code = main_from([
        "wavelab", "metric", "distance", "--u", u.to_str().unwrap(), "--v", u.to_str().unwrap(), "--knots", "6",
        "--out", dir.path().to_str().unwrap(), "--quiet",
    ]);
    assert_eq!(code, 0);
    assert!(dir.path().join("metric_distance.json").exists());
}

#[test]
fn identical_config_and_seed_give_identical_bytes() {
    let cfg = |dir: &Path| {
        let mut c = cfg_in(
            dir,
            Scenario::BroadwellRescaled(BroadwellParams {
                initial: InitialField::Random { lo: 0.0, hi: 0.8 },
                grid: wavelab::GridSpec::square(24, Default::default()),
                t_end: 0.3,
                samples: 3,
                snapshots: true,
                ..Default::default()
            }),
        );
        c.seed = 99;
        c
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(&cfg(a.path())).unwrap();
    let rb = run(&cfg(b.path())).unwrap();
    assert_eq!(ra.files.len(), rb.files.len());
    for (x, y) in ra.files.iter().zip(&rb.files) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?}");
    }
    let mut other = cfg(b.path());
    other.seed = 100;
    run(&other).unwrap();
    assert_ne!(fs::read(&ra.files[0]).unwrap(), fs::read(&rb.files[0]).unwrap());
}
