"""Command line front end.

Exit codes: 0 ok, 1 usage, 2 validation, 3 analysis degraded, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_ini
from .constants import GAUSS, MU_B, energy_to_microkelvin, gradient_to_gauss_per_cm
from .ensemble import EnsembleSnapshot, ballistic_expand
from .errors import ConfigError, IntegrationError, WireGuideError
from .experiments import RunResult, analyze, efficiencies, load_preset, outcome_counts, preset_names, simulate
from .fields import (
    AtomSpecies,
    BiasFieldSpec,
    Seeker,
    WireSpec,
    field_magnitude,
    potential_energy,
    side_trap_center,
    side_trap_depth,
    side_trap_gradient,
)
from .imaging import image_axes
from .io import (
    read_json,
    read_snapshot_csv,
    snapshot_filename,
    write_image,
    write_json,
    write_profile_csv,
    write_snapshot_csv,
    write_table_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DEGRADED, EXIT_NUMERICAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="run configuration file")
    p.add_argument("--preset", metavar="NAME", default=d, help="named preset (see 'wireguide simulate --list-presets')")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="master seed")
    p.add_argument("--threads", type=int, metavar="N", default=d, help="worker threads")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wireguide", description="Cold atoms guided by a current-carrying wire.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser)

    p = sub.add_parser("field", help="|B| and potential on a transverse grid")
    _global_flags(p, suppress=True)
    p.add_argument("--extent-mm", type=float, default=2.0, help="half-width of the square grid")
    p.add_argument("--points", type=int, default=81, help="grid points per axis")
    p.add_argument("--current", type=float, help="override wire current in A")
    p.add_argument("--bias-G", type=float, dest="bias_G", help="override bias field in gauss")

    p = sub.add_parser("trap", help="side-guide design report")
    _global_flags(p, suppress=True)
    p.add_argument("--current", type=float, required=True, help="wire current in A")
    p.add_argument("--bias-G", type=float, dest="bias_G", required=True, help="bias field in gauss")
    p.add_argument("--mu-eff-muB", type=float, dest="mu_eff", default=1.0, help="magnetic moment in Bohr magnetons")
    p.add_argument("--radius-um", type=float, dest="radius_um", default=25.0, help="wire radius")

    p = sub.add_parser("simulate", help="run the guide sequence and write snapshots")
    _global_flags(p, suppress=True)
    p.add_argument("--list-presets", action="store_true", help="print preset names and exit")

    p = sub.add_parser("analyze", help="images, profiles and statistics from simulate output")
    _global_flags(p, suppress=True)
    p.add_argument("run_dir", nargs="?", help="directory written by simulate (default: --out)")

    p = sub.add_parser("expand", help="ballistic expansion of a snapshot file")
    _global_flags(p, suppress=True)
    p.add_argument("snapshot", help="snapshot CSV")
    p.add_argument("--time-ms", type=float, required=True, dest="time_ms")
    p.add_argument("--no-gravity", action="store_true")
    return parser


# --------------------------------------------------------------------------
# configuration


def resolve_configs(args) -> list[RunConfig]:
    overrides: dict = {}
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = args.seed
    if args.threads is not None:
        overrides.setdefault("run", {})["threads"] = args.threads
    if args.out is not None:
        overrides.setdefault("run", {})["out"] = args.out
    if args.preset:
        base = load_preset(args.preset)
    else:
        base = [RunConfig.from_dict({})]
    configs = []
    for cfg in base:
        if args.config:
            text = Path(args.config).read_text(encoding="utf-8")
            cfg = parse_ini(text, base=cfg.to_dict(canonical=False))
        if overrides:
            cfg = RunConfig.from_dict(overrides, base=cfg.to_dict(canonical=False))
        configs.append(cfg)
    return configs


def _single(args) -> RunConfig:
    configs = resolve_configs(args)
    if len(configs) != 1:
        raise UsageError("this command needs a single configuration, not a composite preset")
    return configs[0]


def _out_dirs(configs: list[RunConfig]) -> list[Path]:
    if len(configs) == 1:
        return [configs[0].out]
    return [cfg.out / cfg.name for cfg in configs]


# --------------------------------------------------------------------------
# verbs


def cmd_field(args) -> int:
    cfg = _single(args)
    field = cfg.field_config()
    if args.current is not None:
        field = field.replace(wire=field.wire.with_current(args.current))
    if args.bias_G is not None:
        field = field.replace(bias=BiasFieldSpec(args.bias_G * GAUSS, field.bias.direction))
    if not (args.points >= 2 and args.extent_mm > 0):
        raise ConfigError("grid needs --points >= 2 and --extent-mm > 0")
    _, horiz, up = image_axes(field.wire, field.gravity_direction)
    ticks = np.linspace(-args.extent_mm, args.extent_mm, args.points) * 1e-3
    hh, vv = np.meshgrid(ticks, ticks)
    pts = np.asarray(field.wire.axis_point) + hh.reshape(-1, 1) * horiz + vv.reshape(-1, 1) * up
    mass = cfg.get("species", "mass_kg")
    mu = cfg.get("species", "mu_eff_muB") * MU_B
    bmag = field_magnitude(pts, field)
    v_hi = potential_energy(pts, -mu, mass, field)
    v_lo = potential_energy(pts, mu, mass, field)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    rows = zip(hh.ravel(), vv.ravel(), bmag, v_hi, v_lo)
    write_table_csv(out / "field.csv", ("h_m", "v_m", "B_T", "V_high_J", "V_low_J"), rows, cfg.master_seed,
                    current_A=field.wire.current, bias_G=field.bias.magnitude / GAUSS)
    k = int(np.argmin(v_lo))
    print(f"wrote {out / 'field.csv'}; low-field minimum at h={hh.ravel()[k]*1e6:.1f} um, "
          f"v={vv.ravel()[k]*1e6:.1f} um, |B|={bmag[k] / GAUSS:.4g} G")
    return EXIT_OK


def trap_report(current: float, bias_G: float, mu_eff_muB: float = 1.0, radius_um: float = 25.0) -> dict:
    wire = WireSpec(current, radius=radius_um * 1e-6)
    bias = BiasFieldSpec(bias_G * GAUSS)
    line = side_trap_center(wire, bias)
    grad = side_trap_gradient(wire, bias)
    depth = side_trap_depth(AtomSpecies(mu_eff=mu_eff_muB * MU_B, seeker=Seeker.LOW_FIELD), bias)
    return {
        "current_A": current,
        "bias_G": bias_G,
        "r_s_m": line.distance,
        "r_s_um": line.distance * 1e6,
        "direction": list(line.direction),
        "gradient_T_per_m": grad,
        "gradient_G_per_cm": gradient_to_gauss_per_cm(grad),
        "depth_J": depth,
        "depth_uK": energy_to_microkelvin(depth),
    }


def cmd_trap(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = trap_report(args.current, args.bias_G, args.mu_eff, args.radius_um)
    print(f"side trap at {report['r_s_um']:.4g} um from the wire axis, "
          f"gradient {report['gradient_G_per_cm']:.4g} G/cm, depth {report['depth_uK']:.4g} uK")
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "trap.json", {"trap": report}, seed)
    return EXIT_OK


def write_run(cfg: RunConfig, results: list[RunResult], out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.master_seed
    runs = {}
    for r in results:
        files = []
        for snap in r.snapshots:
            name = snapshot_filename(r.label, snap)
            write_snapshot_csv(out / name, snap, seed, r.label, r.current)
            files.append(name)
        runs[r.label] = {
            "current_A": r.current,
            "snapshots": files,
            "efficiency": efficiencies(cfg, r),
            "outcomes": outcome_counts(r.final_guide),
        }
    icfg = cfg.integrator_config()
    summary = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "runs": runs,
        "timing": {"dt_s": icfg.dt, "guide_time_s": icfg.max_time, "steps": icfg.n_steps},
        "seeker_fractions": list(cfg.mot_params(cfg.currents[0]).seeker_fractions),
    }
    write_json(out / "summary.json", summary, seed)
    return summary


def cmd_simulate(args) -> int:
    if getattr(args, "list_presets", False):
        print("\n".join(preset_names()))
        return EXIT_OK
    configs = resolve_configs(args)
    for cfg, out in zip(configs, _out_dirs(configs)):
        results = simulate(cfg)
        summary = write_run(cfg, results, out)
        for label, run in summary["runs"].items():
            effs = ", ".join(f"{k} {v['fraction']:.4f} +- {v['stderr']:.4f}" for k, v in run["efficiency"].items())
            print(f"{cfg.name} {label}: {effs}")
        print(f"wrote {out}")
    return EXIT_OK


def load_run(run_dir: Path) -> tuple[RunConfig, list[RunResult]]:
    summary = read_json(run_dir / "summary.json")
    cfg = RunConfig.from_dict(summary["config"])
    results = []
    for label, run in summary["runs"].items():
        snaps: list[EnsembleSnapshot] = [read_snapshot_csv(run_dir / f)[0] for f in run["snapshots"]]
        current = float(run["current_A"])
        results.append(RunResult(label, current, cfg.field_config(current), snaps))
    return cfg, results


def _run_dirs(root: Path) -> list[Path]:
    if (root / "summary.json").is_file():
        return [root]
    found = sorted(p.parent for p in root.glob("*/summary.json"))
    if not found:
        raise ConfigError(f"no summary.json under {root}")
    return found


def write_report(cfg: RunConfig, report, out: Path) -> None:
    seed = cfg.master_seed
    for name, prof in report.profiles.items():
        write_profile_csv(out / f"profile_{name}.csv", prof, seed, run=cfg.name)
    for name, img in report.images.items():
        write_image(out / f"image_{name}.pgm", img, seed, run=cfg.name)
    for name, (cols, rows) in report.tables.items():
        write_table_csv(out / f"{name}.csv", cols, rows, seed, run=cfg.name)
    write_json(out / "analysis.json", {**report.summary, "degraded": report.degraded}, seed)


def cmd_analyze(args) -> int:
    root = Path(args.run_dir or args.out or "out")
    degraded = False
    for run_dir in _run_dirs(root):
        cfg, results = load_run(run_dir)
        report = analyze(cfg, results)
        write_report(cfg, report, run_dir)
        degraded |= report.degraded
        _print_analysis(report.summary)
        print(f"wrote {run_dir / 'analysis.json'}")
    return EXIT_DEGRADED if degraded else EXIT_OK


def _print_analysis(s: dict) -> None:
    if "profile" in s:
        fit = s["profile"]["fit"]
        print(f"{s['name']}: trapped atoms {fit['trapped_atoms']:.1f} (converged={fit['converged']})")
        if "difference" in s["profile"]:
            print(f"{s['name']}: peak in dip = {s['profile']['difference']['peak_in_dip']}")
    if "detection" in s:
        d = s["detection"]
        print(f"{s['name']}: detected fraction {d['fraction'][0]:.4f} -> {d['fraction'][-1]:.4f}, "
              f"max deviation from model {d['max_deviation_in_stderr']:.2f} stderr")
    if "position" in s and "slope" in s["position"]:
        p = s["position"]
        print(f"{s['name']}: slope {p['slope']:.4e} m/A (expected {p['expected_slope_m_per_A']:.4e}), "
              f"R^2 {p['r_squared']:.6f}")
    if "expansion" in s:
        for label, e in s["expansion"].items():
            print(f"{s['name']} {label}: {e['guide']} guide ring measure {e['ring_measure']:.3f} -> {e['verdict']}")


def cmd_expand(args) -> int:
    snap, meta = read_snapshot_csv(args.snapshot)
    cfg = _single(args)
    field = cfg.field_config(float(meta["current_A"]))
    if args.no_gravity:
        field = field.replace(gravity_on=False)
    if args.time_ms < 0:
        raise ConfigError("--time-ms must be >= 0")
    expanded = ballistic_expand(snap, args.time_ms * 1e-3, field)
    out = Path(args.out) if args.out else Path(args.snapshot).parent
    out.mkdir(parents=True, exist_ok=True)
    seed = int(meta["seed"])
    path = out / snapshot_filename(meta["run"], expanded)
    write_snapshot_csv(path, expanded, seed, meta["run"], float(meta["current_A"]))
    print(f"wrote {path}")
    return EXIT_OK


VERBS = {"field": cmd_field, "trap": cmd_trap, "simulate": cmd_simulate, "analyze": cmd_analyze, "expand": cmd_expand}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("missing command (field, trap, simulate, analyze, expand)")
        return VERBS[args.verb](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (WireGuideError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
