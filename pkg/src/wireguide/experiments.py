"""Run pipelines shared by the command line and the acceptance suite."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .config import RunConfig, parse_ini
from .constants import MU0_OVER_2PI
from .dynamics import OutcomeKind
from .ensemble import EnsembleSnapshot, kepler_bound_mask, loading_efficiency, run_sequence
from .ensemble import guided_mask as ensemble_guided_mask
from .errors import ConfigError
from .fields import FieldConfig, perpendicular_offset, side_trap_center
from .imaging import (
    CcdImage,
    Profile,
    central_cut,
    detected_fraction,
    difference_profile,
    fit_double_gaussian,
    fit_rs_vs_current,
    peak_in_dip,
    project_positions,
    project_profile,
    render_ccd,
    ring_statistic,
)

# --------------------------------------------------------------------------
# presets


def preset_names() -> list[str]:
    files = resources.files("wireguide.presets").iterdir()
    return sorted(f.name[:-4] for f in files if f.name.endswith(".ini"))


def _preset_text(name: str) -> str:
    res = resources.files("wireguide.presets").joinpath(f"{name}.ini")
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return res.read_text(encoding="utf-8")


def load_preset(name: str, overrides: dict | None = None) -> list[RunConfig]:
    """Configurations of a preset; composite presets list their members."""
    text = _preset_text(name)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.read_string(text)
    if parser.has_section("preset"):
        members = [m.strip() for m in parser.get("preset", "members").split(",") if m.strip()]
        return [cfg for m in members for cfg in load_preset(m, overrides)]
    cfg = parse_ini(text)
    if overrides:
        cfg = RunConfig.from_dict(overrides, base=cfg.to_dict(canonical=False))
    return [cfg]


# --------------------------------------------------------------------------
# simulation


@dataclass
class RunResult:
    label: str
    current: float
    field: FieldConfig
    snapshots: list[EnsembleSnapshot]

    @property
    def guide_snapshots(self) -> list[EnsembleSnapshot]:
        return [s for s in self.snapshots if s.phase == "guide"]

    @property
    def final_guide(self) -> EnsembleSnapshot:
        return self.guide_snapshots[-1]


def run_label(current: float, reference: bool = False) -> str:
    return ("ref_" if reference else "") + f"I{current:g}A"


def simulate(cfg: RunConfig, workers: int | None = None) -> list[RunResult]:
    """Run every current of the configuration, then the reference run if any."""
    workers = cfg.threads if workers is None else workers
    icfg = cfg.integrator_config()
    out = []
    for current in cfg.currents:
        spec = cfg.sequence_spec(current)
        snaps = run_sequence(cfg.mot_params(current), spec, icfg, workers)
        out.append(RunResult(run_label(current), current, spec.guide, snaps))
    ref = cfg.analysis().reference_current
    if ref is not None:
        # same atoms as the first run, released into the reference field
        spec = cfg.sequence_spec(ref)
        snaps = run_sequence(cfg.mot_params(cfg.currents[0]), spec, icfg, workers)
        out.append(RunResult(run_label(ref, True), ref, spec.guide, snaps))
    return out


# --------------------------------------------------------------------------
# analysis


@dataclass
class AnalysisReport:
    summary: dict
    profiles: dict = field(default_factory=dict)  # name -> Profile
    images: dict = field(default_factory=dict)  # name -> CcdImage
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    degraded: bool = False


def efficiencies(cfg: RunConfig, result: RunResult) -> dict:
    capture = cfg.analysis().capture_radius
    out = {}
    for criterion in ("energy", "survival"):
        eff = loading_efficiency(result.guide_snapshots, criterion, result.field, capture)
        if eff is not None:
            out[criterion] = eff.as_dict()
    return out


def outcome_counts(snapshot: EnsembleSnapshot) -> dict:
    return {k.label: int(np.count_nonzero(snapshot.outcomes == k)) for k in OutcomeKind}


def imaged(snapshot: EnsembleSnapshot, select=None) -> np.ndarray:
    """Positions of atoms that are still free to fluoresce (no wire hit, not left)."""
    mask = snapshot.outcomes < OutcomeKind.HIT_WIRE
    if select is not None:
        mask = mask & select
    return snapshot.positions[mask]


def analyze(cfg: RunConfig, results: list[RunResult]) -> AnalysisReport:
    opts = cfg.analysis()
    runs = {}
    for r in results:
        runs[r.label] = {
            "current_A": r.current,
            "efficiency": efficiencies(cfg, r),
            "outcomes": outcome_counts(r.final_guide),
        }
    report = AnalysisReport({"name": cfg.name, "analysis": opts.kind, "runs": runs})
    handler = _HANDLERS.get(opts.kind)
    if handler is not None:
        handler(cfg, results, report)
    return report


def _profile_analysis(cfg, results, report):
    """Projected top-view profile with and without current, their difference and a fit."""
    opts = cfg.analysis()
    main = results[0]
    ref = next((r for r in results if r.label.startswith("ref_")), None)
    img = render_ccd(imaged(main.final_guide), opts.view, main.field, opts.fov, opts.pixel_size)
    prof = project_profile(img)
    report.images[f"{main.label}_{opts.view}"] = img
    report.profiles[main.label] = prof
    fit = fit_double_gaussian(prof, peak_center=0.0)
    out = {"fit": fit.as_dict()}
    report.degraded |= not fit.converged
    if ref is not None:
        rimg = render_ccd(imaged(ref.final_guide), opts.view, ref.field, opts.fov, opts.pixel_size)
        rprof = project_profile(rimg)
        diff = difference_profile(prof, rprof)
        report.images[f"{ref.label}_{opts.view}"] = rimg
        report.profiles[ref.label] = rprof
        report.profiles["difference"] = diff
        out["difference"] = peak_in_dip(diff, 0.0)
        out["difference"]["total"] = diff.total
    report.summary["profile"] = out


def guided_mask(cfg: RunConfig, result: RunResult) -> np.ndarray:
    """Atoms bound to the guide: energy criterion for the wire-only guide, else survival."""
    if result.field.kepler_mode:
        return kepler_bound_mask(result.guide_snapshots[0], result.field)
    return ensemble_guided_mask(result.final_guide, result.field, cfg.analysis().capture_radius)


def _detection_analysis(cfg, results, report):
    opts = cfg.analysis()
    main = results[0]
    mot = cfg.mot_params(main.current)
    mask = guided_mask(cfg, main)
    df = detected_fraction(
        main.guide_snapshots, main.field, mask, mot.sigma_position, mot.sigma_velocity, opts.fov_length
    )
    rows = df.as_rows()
    report.tables["detected_fraction"] = (("time_s", "fraction", "stderr", "model"), rows)
    z = np.abs(df.fraction - df.model) / np.maximum(df.stderr, 1e-300)
    report.summary["detection"] = {
        "times_s": df.times.tolist(),
        "fraction": df.fraction.tolist(),
        "stderr": df.stderr.tolist(),
        "model": df.model.tolist(),
        "max_deviation_in_stderr": float(np.max(np.where(df.stderr > 0, z, 0.0))),
        "monotone_decreasing": bool(np.all(np.diff(df.fraction) <= 0)),
    }


def guided_position(cfg: RunConfig, result: RunResult) -> dict:
    """Distance of the guided low-field seekers from the wire, along the trap direction.

    ``crossing`` averages where guided atoms passed through the field-zero
    region (where the spin-flip flag latched).  ``density_peak`` is the mode of
    the guided atoms' final distance histogram.
    """
    line = side_trap_center(result.field.wire, result.field.bias)
    u = np.asarray(line.direction)
    snap = result.final_guide
    sel = ensemble_guided_mask(snap, result.field, cfg.analysis().capture_radius)
    flags = snap.flag_positions[sel]
    flags = flags[~np.isnan(flags[:, 0])]
    d_flag = perpendicular_offset(flags, result.field.wire) @ u
    d_all = perpendicular_offset(snap.positions[sel], result.field.wire) @ u
    bins = np.arange(0.0, 4.0 * line.distance, line.distance / 20.0)
    hist, edges = np.histogram(d_all, bins=bins)
    k = int(np.argmax(hist))
    return {
        "current_A": result.current,
        "analytic_m": line.distance,
        "crossing_m": float(d_flag.mean()) if d_flag.size else math.nan,
        "crossing_stderr_m": float(d_flag.std(ddof=1) / math.sqrt(d_flag.size)) if d_flag.size > 1 else math.nan,
        "crossings": int(d_flag.size),
        "density_peak_m": float(0.5 * (edges[k] + edges[k + 1])),
        "guided": int(np.count_nonzero(sel)),
    }


def _position_analysis(cfg, results, report):
    rows = [guided_position(cfg, r) for r in results if not r.label.startswith("ref_")]
    pts = [(p["current_A"], p["crossing_m"]) for p in rows if math.isfinite(p["crossing_m"])]
    b_b = results[0].field.bias.magnitude
    expected = MU0_OVER_2PI / b_b
    out = {"points": rows, "expected_slope_m_per_A": expected}
    if len(pts) >= 3:
        line = fit_rs_vs_current(pts)
        out.update(line.as_dict())
        out["slope_ratio"] = line.slope / expected
    else:
        report.degraded = True
    report.summary["position"] = out
    keys = ("current_A", "analytic_m", "crossing_m", "crossing_stderr_m", "crossings", "density_peak_m", "guided")
    report.tables["position"] = (keys, [tuple(p[k] for k in keys) for p in rows])


def expansion_cut(cfg: RunConfig, result: RunResult) -> tuple[CcdImage, Profile]:
    """Top-view image of the guided atoms after free flight, and the cut through its centroid.

    Only the seeker state the guide is built for is imaged; far-side orbiting
    high-field seekers would form a second cloud.
    """
    opts = cfg.analysis()
    expanded = result.snapshots[-1]
    if expanded.phase != "expansion":
        raise ConfigError("expansion analysis needs sequence.free_expansion_time_ms > 0")
    final = result.final_guide
    sel = ensemble_guided_mask(final, result.field, opts.capture_radius)
    pos = imaged(expanded, sel)
    hv = project_positions(pos, "top", result.field)
    center = tuple(hv.mean(axis=0)) if len(hv) else (0.0, 0.0)
    img = render_ccd(pos, "top", result.field, opts.fov, opts.pixel_size, center=center)
    return img, central_cut(img, "horizontal", opts.cut_half_width, center)


def _expansion_analysis(cfg, results, report):
    out = {}
    for r in results:
        img, cut = expansion_cut(cfg, r)
        measure, verdict = ring_statistic(cut)
        report.images[f"{r.label}_expanded_top"] = img
        report.profiles[f"{r.label}_cut"] = cut
        out[r.label] = {"guide": "kepler" if r.field.kepler_mode else "side", "ring_measure": measure,
                        "verdict": verdict, "atoms_imaged": img.total}
    report.summary["expansion"] = out


_HANDLERS = {
    "profile": _profile_analysis,
    "detection": _detection_analysis,
    "position": _position_analysis,
    "expansion": _expansion_analysis,
}
