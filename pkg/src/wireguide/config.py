"""Declarative run configuration: sectioned key = value text with units in key names.

Example::

    [wire]
    current_A = 1.0

    [bias]
    magnitude_G = 10

    [mot]
    temperature_uK = 200
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

from .constants import GAUSS, G_EARTH, LI7_MASS, MU_B
from .dynamics import IntegratorConfig
from .ensemble import MotParams, SequenceSpec
from .errors import ConfigError, NoSideTrapError
from .fields import BiasFieldSpec, FieldConfig, WireSpec, side_trap_center


def _vec(n):
    def parse(text):
        parts = list(text) if isinstance(text, (list, tuple)) else [p for p in str(text).split(",") if p.strip()]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)

    return parse


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(p) for p in text)
    return tuple(float(p) for p in str(text).split(",") if p.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text):
    f = float(text)
    if f != int(f):
        raise ValueError(f"not an integer: {text!r}")
    return int(f)


def _optional_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


def _choice(*options):
    def parse(text):
        s = str(text).strip()
        if s not in options:
            raise ValueError(f"must be one of {options}")
        return s

    return parse


ANALYSES = ("efficiency", "profile", "detection", "position", "expansion")

# (section, key) -> (parser, default)
SCHEMA = {
    ("wire", "current_A"): (float, 1.0),
    ("wire", "radius_um"): (float, 25.0),
    ("wire", "length_cm"): (float, 10.0),
    ("wire", "sweep_A"): (_floats, ()),
    ("bias", "magnitude_G"): (float, 0.0),
    ("bias", "direction"): (_vec(3), (0.0, 0.0, 1.0)),
    ("gravity", "enabled"): (_bool, True),
    ("gravity", "g_m_s2"): (float, G_EARTH),
    ("gravity", "direction"): (_vec(3), (0.0, 0.0, -1.0)),
    ("species", "mass_kg"): (float, LI7_MASS),
    ("species", "mu_eff_muB"): (float, 1.0),
    ("mot", "center"): (_choice("wire", "trap"), "wire"),
    ("mot", "offset_mm"): (_vec(3), (0.0, 0.0, 1.0)),
    ("mot", "fwhm_mm"): (float, 1.6),
    ("mot", "temperature_uK"): (float, 200.0),
    ("mot", "atom_count"): (_int, 10_000),
    ("mot", "high_field_fraction"): (float, 0.5),
    ("sequence", "guide_time_ms"): (float, 20.0),
    ("sequence", "snapshot_times_ms"): (_floats, ()),
    ("sequence", "free_expansion_time_ms"): (float, 0.0),
    ("integrator", "dt_us"): (float, 1.0),
    ("integrator", "domain_radius_mm"): (float, 20.0),
    ("integrator", "wire_collision"): (_bool, True),
    ("integrator", "adiabaticity_threshold"): (float, 0.1),
    ("analysis", "kind"): (_choice(*ANALYSES), "efficiency"),
    ("analysis", "capture_radius_mm"): (float, 5.0),
    ("analysis", "view"): (_choice("top", "side"), "top"),
    ("analysis", "pixel_um"): (float, 50.0),
    ("analysis", "fov_mm"): (_vec(2), (10.0, 10.0)),
    ("analysis", "fov_length_mm"): (float, 20.0),
    ("analysis", "cut_half_width"): (_int, 1),
    ("analysis", "reference_current_A"): (_optional_float, None),
    ("run", "name"): (str, "run"),
    ("run", "seed"): (_int, 0),
    ("run", "threads"): (_int, 1),
    ("run", "out"): (str, "out"),
}

# not part of the canonical echo: they change where and how fast, not what
NON_CANONICAL = {("run", "threads"), ("run", "out")}


@dataclass(frozen=True)
class AnalysisOptions:
    kind: str
    capture_radius: float
    view: str
    pixel_size: float
    fov: tuple[float, float]
    fov_length: float
    cut_half_width: int
    reference_current: float | None


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one run; construct via :func:`load_config` or :meth:`from_dict`."""

    values: tuple  # sorted ((section, key), value) pairs

    def __getitem__(self, sk):
        return dict(self.values)[sk]

    def get(self, section: str, key: str):
        return dict(self.values)[(section, key)]

    # -- derived objects

    @property
    def name(self) -> str:
        return self.get("run", "name")

    @property
    def master_seed(self) -> int:
        return self.get("run", "seed")

    @property
    def threads(self) -> int:
        return self.get("run", "threads")

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    @property
    def currents(self) -> tuple[float, ...]:
        """Currents to simulate: the sweep if given, else the single current."""
        return self.get("wire", "sweep_A") or (self.get("wire", "current_A"),)

    def field_config(self, current: float | None = None) -> FieldConfig:
        g = self.get
        wire = WireSpec(
            g("wire", "current_A") if current is None else current,
            radius=g("wire", "radius_um") * 1e-6,
            length=g("wire", "length_cm") * 1e-2,
        )
        bias = BiasFieldSpec(g("bias", "magnitude_G") * GAUSS, g("bias", "direction"))
        return FieldConfig(
            wire,
            bias,
            gravity_direction=g("gravity", "direction"),
            gravity_on=g("gravity", "enabled"),
            g=g("gravity", "g_m_s2"),
        )

    def mot_params(self, current: float | None = None) -> MotParams:
        g = self.get
        offset = tuple(c * 1e-3 for c in g("mot", "offset_mm"))
        if g("mot", "center") == "trap":
            cfg = self.field_config(current)
            line = side_trap_center(cfg.wire, cfg.bias)
            offset = tuple(p + o for p, o in zip(line.point, offset))
        hf = g("mot", "high_field_fraction")
        return MotParams(
            center_offset=offset,
            fwhm=g("mot", "fwhm_mm") * 1e-3,
            temperature=g("mot", "temperature_uK") * 1e-6,
            atom_count=g("mot", "atom_count"),
            seeker_fractions=(hf, 1.0 - hf),
            mass=g("species", "mass_kg"),
            mu_eff=g("species", "mu_eff_muB") * MU_B,
        )

    def sequence_spec(self, current: float | None = None) -> SequenceSpec:
        g = self.get
        return SequenceSpec(
            self.field_config(current),
            guide_time=g("sequence", "guide_time_ms") * 1e-3,
            snapshot_times=tuple(t * 1e-3 for t in g("sequence", "snapshot_times_ms")),
            free_expansion_time=g("sequence", "free_expansion_time_ms") * 1e-3,
            master_seed=self.master_seed,
        )

    def integrator_config(self) -> IntegratorConfig:
        g = self.get
        return IntegratorConfig(
            dt=g("integrator", "dt_us") * 1e-6,
            max_time=g("sequence", "guide_time_ms") * 1e-3,
            wire_collision_on=g("integrator", "wire_collision"),
            domain_radius=g("integrator", "domain_radius_mm") * 1e-3,
            adiabaticity_threshold=g("integrator", "adiabaticity_threshold"),
        )

    def analysis(self) -> AnalysisOptions:
        g = self.get
        ref = g("analysis", "reference_current_A")
        return AnalysisOptions(
            kind=g("analysis", "kind"),
            capture_radius=g("analysis", "capture_radius_mm") * 1e-3,
            view=g("analysis", "view"),
            pixel_size=g("analysis", "pixel_um") * 1e-6,
            fov=tuple(c * 1e-3 for c in g("analysis", "fov_mm")),
            fov_length=g("analysis", "fov_length_mm") * 1e-3,
            cut_half_width=g("analysis", "cut_half_width"),
            reference_current=ref,
        )

    # -- serialization

    def to_dict(self, canonical: bool = True) -> dict:
        out: dict = {}
        for (sec, key), val in self.values:
            if canonical and (sec, key) in NON_CANONICAL:
                continue
            out.setdefault(sec, {})[key] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, data: dict, base: dict | None = None) -> "RunConfig":
        merged = {}
        for source in (base or {}), data:
            for sec, items in source.items():
                if not isinstance(items, dict):
                    raise ConfigError(f"section [{sec}] must be a mapping")
                for key, val in items.items():
                    merged[(sec, key)] = val
        return _build(merged)

    def to_ini(self) -> str:
        lines = []
        current = None
        for (sec, key), val in self.values:
            if sec != current:
                lines.append(f"\n[{sec}]" if lines else f"[{sec}]")
                current = sec
            if isinstance(val, tuple):
                text = ", ".join(repr(v) for v in val)
            elif val is None:
                text = "none"
            else:
                text = str(val) if not isinstance(val, float) else repr(val)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"

    def with_values(self, **changes) -> "RunConfig":
        """Override keys given as ``section__key=value``."""
        data = {}
        for name, val in changes.items():
            sec, _, key = name.partition("__")
            data.setdefault(sec, {})[key] = val
        return RunConfig.from_dict(data, base=self.to_dict(canonical=False))


def _build(raw: dict) -> RunConfig:
    unknown = sorted(f"{s}.{k}" for s, k in raw if (s, k) not in SCHEMA)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    values = {}
    for sk, (parse, default) in SCHEMA.items():
        if sk in raw:
            try:
                values[sk] = parse(raw[sk])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{sk[0]}.{sk[1]}: {exc}") from None
        else:
            values[sk] = default
    cfg = RunConfig(tuple(sorted(values.items(), key=lambda kv: kv[0])))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    for (sec, key), val in cfg.values:
        items = val if isinstance(val, tuple) else (val,)
        for v in items:
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{sec}.{key} must be finite")
    if cfg.get("mot", "atom_count") < 1:
        raise ConfigError("mot.atom_count must be >= 1")
    if cfg.threads < 1:
        raise ConfigError("run.threads must be >= 1")
    if not 0.0 <= cfg.get("mot", "high_field_fraction") <= 1.0:
        raise ConfigError("mot.high_field_fraction must lie in [0, 1]")
    if cfg.get("analysis", "kind") == "position" and len(cfg.currents) < 3:
        raise ConfigError("position analysis needs wire.sweep_A with at least 3 currents")
    try:
        for current in cfg.currents:
            cfg.mot_params(current)
            cfg.sequence_spec(current)
            cfg.integrator_config().validate_for(cfg.field_config(current).wire)
        if cfg.get("analysis", "reference_current_A") is not None:
            cfg.field_config(cfg.get("analysis", "reference_current_A"))
        opts = cfg.analysis()
        if not (opts.pixel_size > 0 and opts.capture_radius > 0 and opts.fov_length > 0):
            raise ValueError("analysis sizes must be positive")
        if min(opts.fov) <= 0:
            raise ValueError("analysis.fov_mm must be positive")
    except NoSideTrapError as exc:
        raise ConfigError(f"mot.center = trap: {exc}") from None
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_ini(text: str, base: dict | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep unit suffixes case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    data = {sec: dict(parser.items(sec)) for sec in parser.sections()}
    return RunConfig.from_dict(data, base=base)


def load_config(path, base: dict | None = None) -> RunConfig:
    return parse_ini(Path(path).read_text(encoding="utf-8"), base=base)


def default_config() -> RunConfig:
    return RunConfig.from_dict({})
