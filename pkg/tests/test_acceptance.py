"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one line ``[criterion N] ...: PASS|FAIL (details)`` to the
terminal, even under output capture.  The full module takes several minutes.
"""

import json
import math
import time

import numpy as np
import pytest

from wireguide.cli import main
from wireguide.constants import GAUSS
from wireguide.dynamics import IntegratorConfig, axial_angular_momentum, circular_orbit_speed, propagate, total_energy
from wireguide.ensemble import MotParams, SequenceSpec, loading_efficiency, run_sequence
from wireguide.experiments import analyze, load_preset, simulate
from wireguide.fields import BiasFieldSpec, FieldConfig, Seeker, WireSpec, field_magnitude, force, lithium7, potential
from wireguide.imaging import Profile, double_gaussian, fit_double_gaussian


def record(capsys, n, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {n}] {title}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


def run_preset(name, **overrides):
    data = {}
    for key, val in overrides.items():
        sec, _, k = key.partition("__")
        data.setdefault(sec, {})[k] = val
    out = []
    for cfg in load_preset(name, data or None):
        results = simulate(cfg)
        out.append((cfg, results, analyze(cfg, results)))
    return out


@pytest.fixture(scope="module")
def kepler_default():
    """10^4 atoms, 20 ms guide, dt = 1 us: the fig2 Kepler preset, timed."""
    t0 = time.perf_counter()
    (cfg, results, report), = run_preset("fig2-kepler")
    return cfg, results, report, time.perf_counter() - t0


def test_1_design_point(tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["trap", "--current", "0.5", "--bias-G", "10", "--out", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    trap = json.loads((tmp_path / "trap.json").read_text())["trap"]
    r_err = abs(trap["r_s_um"] / 100.0 - 1)
    g_err = abs(trap["gradient_G_per_cm"] / 1000.0 - 1)
    ok = code == 0 and r_err <= 1e-3 and g_err <= 1e-2 and elapsed < 1.0
    detail = (f"r_s {trap['r_s_um']:.4f} um, gradient {trap['gradient_G_per_cm']:.2f} G/cm, "
              f"runtime {elapsed * 1e3:.1f} ms")
    record(capsys, 1, "design point", ok, detail)


def test_2_scaling_laws(capsys):
    (cfg, results, report), = run_preset("fig5")
    pos = report.summary["position"]
    slope_err = abs(pos["slope_ratio"] - 1)
    ok = pos["r_squared"] > 0.999 and slope_err <= 0.02
    detail = (f"slope {pos['slope'] * 1e6:.2f} um/A vs {pos['expected_slope_m_per_A'] * 1e6:.2f}, "
              f"R^2 {pos['r_squared']:.6f}, {cfg.get('mot', 'atom_count')} atoms per current")
    record(capsys, 2, "side-guide position scaling", ok, detail)


def _random_bound_orbits(rng, n, atom, wire, min_perihelion=0.2e-3):
    k = -atom.coupling * 2e-7 * wire.current  # V = -k / r
    pos, vel = [], []
    while len(pos) < n:
        r = rng.uniform(0.5e-3, 2e-3)
        phi = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0.6, 1.35) * circular_orbit_speed(r, atom, wire)
        tilt = rng.uniform(-0.5, 0.5)
        er = np.array([0.0, math.cos(phi), math.sin(phi)])
        et = np.array([0.0, -math.sin(phi), math.cos(phi)])
        v = speed * (math.cos(tilt) * et + math.sin(tilt) * er)
        v[0] = rng.uniform(-0.2, 0.2)
        e = 0.5 * atom.mass * (v[1] ** 2 + v[2] ** 2) - k / r
        ell = atom.mass * r * speed * math.cos(tilt)
        if e >= 0:
            continue
        disc = max(k * k + 2 * e * ell * ell / atom.mass, 0.0)
        peri = (-k + math.sqrt(disc)) / (2 * e)
        if peri < min_perihelion:
            continue
        pos.append(r * er)
        vel.append(v)
    return np.array(pos), np.array(vel)


def _drifts(pos, vel, atom, cfg, dt):
    icfg = IntegratorConfig(dt=dt, max_time=20e-3, domain_radius=0.05)
    steps = range(0, icfg.n_steps + 1, icfg.n_steps // 200)
    res = propagate(pos, vel, atom.mass, atom.coupling, atom.mu_eff, cfg, icfg, record_steps=steps)
    e = np.array([total_energy(x, v, atom, cfg) for _, x, v, _ in res.records])
    lz = np.array([axial_angular_momentum(x, v, atom.mass, cfg.wire) for _, x, v, _ in res.records])
    de = np.max(np.abs(e - e[0]), axis=0) / np.abs(e[0])
    dl = np.max(np.abs(lz - lz[0]), axis=0) / np.abs(lz[0])
    return de, dl, res.kind


def test_3_conservation(capsys):
    atom = lithium7(Seeker.HIGH_FIELD)
    cfg = FieldConfig(WireSpec(1.0), gravity_on=False)
    pos, vel = _random_bound_orbits(np.random.default_rng(2024), 100, atom, cfg.wire)
    de1, dl1, kind = _drifts(pos, vel, atom, cfg, 1e-6)
    de2, _, _ = _drifts(pos, vel, atom, cfg, 0.5e-6)
    ratio = float(np.median(de1 / de2))
    ok = np.all(kind == 0) and de1.max() < 1e-5 and dl1.max() < 1e-8 and 3 <= ratio <= 5
    detail = (f"max energy drift {de1.max():.2e}, max Lz drift {dl1.max():.2e}, "
              f"dt-halving ratio {ratio:.3f} (median over orbits, perihelion >= 0.2 mm)")
    record(capsys, 3, "conservation", ok, detail)


def test_4_force_oracle(capsys):
    rng = np.random.default_rng(7)
    worst, n = 0.0, 0
    h = 1e-8
    while n < 100:
        bias = rng.choice([0.0, 5.0, 10.0, 20.0])
        wire = WireSpec(rng.uniform(0.1, 2.0))
        cfg = FieldConfig(wire, BiasFieldSpec(bias * GAUSS), gravity_on=bool(rng.integers(2)))
        atom = lithium7(Seeker.HIGH_FIELD if rng.integers(2) else Seeker.LOW_FIELD)
        r, phi = rng.uniform(0.1e-3, 5e-3), rng.uniform(0, 2 * math.pi)
        p = np.array([rng.uniform(-0.05, 0.05), r * math.cos(phi), r * math.sin(phi)])
        if field_magnitude(p, cfg) < 1e-6:  # the potential has a kink on field zeros
            continue
        f = force(p, atom, cfg)
        fd = np.array([-(potential(p + d, atom, cfg) - potential(p - d, atom, cfg)) / (2 * h) for d in h * np.eye(3)])
        worst = max(worst, float(np.linalg.norm(f - fd) / np.linalg.norm(f)))
        n += 1
    record(capsys, 4, "force vs finite differences", worst <= 1e-6, f"max relative error {worst:.2e} on 100 points")


def test_5_loading_efficiencies(kepler_default, capsys):
    _, _, report, _ = kepler_default
    kep = report.summary["runs"]["I1A"]["efficiency"]
    side = run_preset("fig2-side")[0][2].summary["runs"]
    zero = FieldConfig(WireSpec(0.0))
    ctrl = run_sequence(MotParams(atom_count=10_000), SequenceSpec(zero, 20e-3, master_seed=0))
    control = [loading_efficiency(ctrl, c, zero).fraction for c in ("energy", "survival")]
    k = kep["energy"]
    side_eff = {label: run["efficiency"]["survival"] for label, run in side.items()}
    ok = (0.05 <= k["fraction"] <= 0.20 and 0.05 <= kep["survival"]["fraction"] <= 0.20
          and all(0.01 <= e["fraction"] <= 0.08 for e in side_eff.values()) and control == [0.0, 0.0])
    parts = [f"Kepler energy {k['fraction']:.2%} +- {k['stderr']:.2%}",
             f"survival {kep['survival']['fraction']:.2%} +- {kep['survival']['stderr']:.2%}"]
    parts += [f"side {lab} {e['fraction']:.2%} +- {e['stderr']:.2%}" for lab, e in side_eff.items()]
    parts.append(f"I=0 control {control[0]:.0%}/{control[1]:.0%}")
    record(capsys, 5, "loading efficiencies", ok, ", ".join(parts))


def test_6_expansion_signatures(capsys):
    verdicts = {"kepler": [], "side": []}
    measures = {"kepler": [], "side": []}
    for seed in range(5):
        for _, _, report in run_preset("fig6", run__seed=seed):
            for e in report.summary["expansion"].values():
                verdicts[e["guide"]].append(e["verdict"])
                measures[e["guide"]].append(round(e["ring_measure"], 3))
    ok = verdicts["kepler"] == ["ring"] * 5 and verdicts["side"] == ["unimodal"] * 5
    detail = f"Kepler {verdicts['kepler']} {measures['kepler']}, side {verdicts['side']} {measures['side']}"
    record(capsys, 6, "expansion signatures over 5 seeds", ok, detail)


def test_7_trapped_peak(capsys):
    (_, _, report), = run_preset("fig3")
    diff = report.summary["profile"]["difference"]
    x = np.arange(-200, 201) * 50e-6  # 20 mm window, as in the presets
    truth = np.array([3000.0, 0.2e-3, 0.3e-3, 1000.0, 0.0, 3e-3, 50.0])
    noisy_err = 0.0
    for seed in range(5):
        y = np.random.default_rng(seed).poisson(double_gaussian(x, truth)).astype(float)
        fit = fit_double_gaussian(Profile(x, y))
        noisy_err = max(noisy_err, abs(fit.a1 / 3000 - 1), abs(fit.a2 / 1000 - 1))
    clean = fit_double_gaussian(Profile(x, double_gaussian(x, truth)))
    clean_err = max(abs(clean.a1 / 3000 - 1), abs(clean.a2 / 1000 - 1))
    ok = diff["peak_in_dip"] and diff["center_value"] > 0 and noisy_err <= 0.05 and clean_err <= 1e-6
    detail = (f"difference centre {diff['center_value']:.0f}, dips {diff['left_dip']:.0f}/{diff['right_dip']:.0f}; "
              f"synthetic amplitude error noisy {noisy_err:.2%}, noiseless {clean_err:.1e}")
    record(capsys, 7, "trapped peak in dip and fit recovery", ok, detail)


def test_8_detection_decay(capsys):
    (_, _, report), = run_preset("fig4")
    d = report.summary["detection"]
    frac = np.array(d["fraction"])
    ok = d["monotone_decreasing"] and frac[-1] < frac[0] and d["max_deviation_in_stderr"] <= 3.0
    detail = (f"fraction {frac[0]:.4f} -> {frac[-1]:.4f} over {len(frac)} times, "
              f"max |sim - model| {d['max_deviation_in_stderr']:.2f} stderr")
    record(capsys, 8, "detected-fraction decay", ok, detail)


def test_9_determinism(tmp_path, capsys):
    small = tmp_path / "small.ini"
    small.write_text("[mot]\natom_count = 2000\n")
    trees = []
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        argv = ["--preset", "fig3", "--config", str(small), "--threads", str(threads), "--seed", "11", "--out", str(out)]
        assert main(["simulate", *argv]) == 0
        main(["analyze", str(out)])
        trees.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    ok = trees[0] == trees[1] == trees[2]
    nbytes = sum(len(b) for b in trees[0].values())
    record(capsys, 9, "byte-identical across 1/4/8 workers", ok, f"{len(trees[0])} files, {nbytes} bytes")


def test_10_performance(kepler_default, capsys):
    cfg, _, _, seconds = kepler_default
    icfg = cfg.integrator_config()
    n = cfg.get("mot", "atom_count")
    ok = n == 10_000 and icfg.dt == 1e-6 and icfg.max_time == 20e-3 and seconds < 300
    record(capsys, 10, "desk-scale performance", ok, f"{n} atoms x {icfg.n_steps} steps in {seconds:.1f} s")
