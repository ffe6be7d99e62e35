"""Smoke test for the pywavelab extension module.

Build and install first, e.g. `maturin develop --release -m crates/wavelab-py/Cargo.toml`.
"""

import math
import os
import tempfile

import pywavelab as wl


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b} (tol {tol})"


def peakons():
    s = wl.State([(1.0, 0.0)])
    close(s.energy(), 2.0, 1e-14)
    close(s.u(0.0), 1.0, 1e-15)
    traj = wl.simulate(s, 3.0)
    (p, q), = traj.final_state().peakons
    close(q, 3.0, 1e-9)
    close(p, 1.0, 1e-12)

    pair = wl.State([(1.0, -1.0), (-1.0, 1.0)])
    traj = wl.simulate(pair, 4.0)
    assert len(traj.events) == 1
    close(traj.final_state().energy(), pair.energy(), 1e-7 * pair.energy())

    lost = wl.simulate(pair, 4.0, mode="dissipative").events[0]["lost_energy"]
    close(lost, pair.energy(), 1e-6)
    assert wl.State.from_json(pair.to_json()).peakons == pair.peakons


def metric():
    u = wl.State([(0.5, 0.2), (-0.3, 0.6)], domain="periodic")
    j, plan = wl.distance(u, u)
    assert j < 1e-9 and len(plan) >= 2
    v = wl.State([(0.5, 0.25), (-0.3, 0.6)], domain="periodic")
    j_uv, _ = wl.distance(u, v)
    j_vu, _ = wl.distance(v, u)
    assert j_uv > 0
    close(j_uv, j_vu, 1e-5)


def approximation():
    gauss = {"kind": "gaussian"}
    errs = [wl.h1_distance(gauss, wl.approximate(gauss, n)) for n in (8, 16, 32)]
    assert errs[0] > errs[1] > errs[2]


def broadwell():
    assert wl.collision_term(1.0, 0.0, 1.0, 0.0) == [-1.0, 1.0, -1.0, 1.0]
    g = wl.BroadwellGrid(32, frame="rescaled", value=0.5)
    out = g.advance(1.0)
    close(out.t, 1.0, 1e-12)
    for k in range(4):
        assert max(abs(w - 0.5 * math.exp(-1.0)) for w in out.field(k)) < 1e-3
    f = out.functionals()
    assert f["Q14"] > 0 and f["cell_max"] > 0

    p = wl.BroadwellGrid(24, boundary="periodic", value=0.3)
    p.set_field(0, [0.3 + 0.1 * math.sin(2 * math.pi * x) for x in p.x() for _ in p.y()])
    m0 = p.mass()
    for _ in range(20):
        p = p.step(p.cfl_limit())
    close(p.mass(), m0, 1e-12 * m0)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "g.bwg")
        out.write_snapshot(path)
        back = wl.BroadwellGrid.read_snapshot(path)
        assert back.field(2) == out.field(2) and back.t == out.t

    try:
        wl.BroadwellGrid(16, frame="rescaled", boundary="periodic")
    except wl.WavelabError:
        pass
    else:
        raise AssertionError("rescaled periodic grid accepted")


if __name__ == "__main__":
    for check in (peakons, metric, approximation, broadwell):
        check()
        print(f"{check.__name__}: ok")
