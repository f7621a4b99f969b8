"""Wire + bias magnetic field, adiabatic Zeeman potential and side-guide design formulas.

Every field function accepts positions of shape ``(3,)`` or ``(..., 3)`` and is
vectorized over the leading axes.  Only elementwise arithmetic is used so that
results for one atom never depend on which other atoms share the batch.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .constants import G_EARTH, LI7_MASS, MU0_OVER_2PI, MU_B
from .errors import NoSideTrapError, TrapInsideWireError

Vector = tuple[float, float, float]


class Seeker(enum.Enum):
    HIGH_FIELD = "high"
    LOW_FIELD = "low"

    @property
    def sign(self) -> float:
        """-1 for high-field seekers (attracted to strong field), +1 otherwise."""
        return -1.0 if self is Seeker.HIGH_FIELD else 1.0


def _unit(v, name: str, tol: float = 1e-12) -> Vector:
    v = tuple(float(c) for c in v)
    if len(v) != 3 or not all(math.isfinite(c) for c in v):
        raise ValueError(f"{name} must be a finite 3-vector")
    norm = math.sqrt(v[0] ** 2 + v[1] ** 2 + v[2] ** 2)
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{name} must have unit norm (got {norm!r})")
    return v


@dataclass(frozen=True)
class WireSpec:
    """Infinite straight wire; ``length`` is only used for the imaging field of view."""

    current: float
    radius: float = 25e-6
    axis: Vector = (1.0, 0.0, 0.0)
    axis_point: Vector = (0.0, 0.0, 0.0)
    length: float = 0.10

    def __post_init__(self):
        if not math.isfinite(self.current):
            raise ValueError("wire current must be finite")
        if not self.radius > 0:
            raise ValueError("wire radius must be positive")
        object.__setattr__(self, "axis", _unit(self.axis, "wire axis"))
        object.__setattr__(self, "axis_point", tuple(float(c) for c in self.axis_point))
        if not self.length > 0:
            raise ValueError("wire length must be positive")

    def with_current(self, current: float) -> "WireSpec":
        return WireSpec(current, self.radius, self.axis, self.axis_point, self.length)


@dataclass(frozen=True)
class BiasFieldSpec:
    magnitude: float = 0.0
    direction: Vector = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not (math.isfinite(self.magnitude) and self.magnitude >= 0):
            raise ValueError("bias magnitude must be finite and >= 0")
        object.__setattr__(self, "direction", _unit(self.direction, "bias direction"))

    @property
    def vector(self) -> np.ndarray:
        return self.magnitude * np.asarray(self.direction)


@dataclass(frozen=True)
class AtomSpecies:
    mass: float = LI7_MASS
    mu_eff: float = MU_B
    seeker: Seeker = Seeker.HIGH_FIELD

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if not self.mu_eff >= 0:
            raise ValueError("mu_eff must be >= 0")
        object.__setattr__(self, "seeker", Seeker(self.seeker))

    @property
    def coupling(self) -> float:
        """Signed prefactor of |B| in the potential."""
        return self.seeker.sign * self.mu_eff

    def with_seeker(self, seeker: Seeker) -> "AtomSpecies":
        return AtomSpecies(self.mass, self.mu_eff, seeker)


def lithium7(seeker: Seeker = Seeker.HIGH_FIELD, mu_eff: float = MU_B) -> AtomSpecies:
    return AtomSpecies(LI7_MASS, mu_eff, seeker)


@dataclass(frozen=True)
class FieldConfig:
    wire: WireSpec
    bias: BiasFieldSpec = field(default_factory=BiasFieldSpec)
    gravity_direction: Vector = (0.0, 0.0, -1.0)
    gravity_on: bool = True
    g: float = G_EARTH

    def __post_init__(self):
        if self.bias is None:
            object.__setattr__(self, "bias", BiasFieldSpec())
        object.__setattr__(
            self, "gravity_direction", _unit(self.gravity_direction, "gravity direction")
        )
        dot = sum(a * b for a, b in zip(self.wire.axis, self.bias.direction))
        if abs(dot) > 1e-9:
            raise ValueError("bias field must be perpendicular to the wire axis")

    @property
    def kepler_mode(self) -> bool:
        return self.bias.magnitude == 0.0

    def replace(self, **changes) -> "FieldConfig":
        kw = dict(
            wire=self.wire,
            bias=self.bias,
            gravity_direction=self.gravity_direction,
            gravity_on=self.gravity_on,
            g=self.g,
        )
        kw.update(changes)
        return FieldConfig(**kw)


# --------------------------------------------------------------------------
# elementwise vector helpers


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _cross_const(c, v):
    """c x v for a constant 3-tuple ``c`` and vectors ``v`` of shape (..., 3)."""
    x = c[1] * v[..., 2] - c[2] * v[..., 1]
    y = c[2] * v[..., 0] - c[0] * v[..., 2]
    z = c[0] * v[..., 1] - c[1] * v[..., 0]
    return np.stack((x, y, z), axis=-1)


def perpendicular_offset(p, wire: WireSpec) -> np.ndarray:
    """Vector from the nearest point on the wire axis to ``p``."""
    p = np.asarray(p, dtype=float)
    d = p - np.asarray(wire.axis_point)
    a = np.asarray(wire.axis)
    along = _dot(d, a)
    return d - along[..., None] * a


def axial_coordinate(p, wire: WireSpec) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    d = p - np.asarray(wire.axis_point)
    return _dot(d, np.asarray(wire.axis))


def radial_distance(p, wire: WireSpec) -> np.ndarray:
    rho = perpendicular_offset(p, wire)
    return np.sqrt(_dot(rho, rho))


def wire_field(p, wire: WireSpec) -> np.ndarray:
    """Azimuthal field of the wire; uniform current density inside the conductor."""
    rho = perpendicular_offset(p, wire)
    rho2 = _dot(rho, rho)
    a2 = wire.radius * wire.radius
    denom = np.maximum(rho2, a2)
    scale = MU0_OVER_2PI * wire.current / denom
    return scale[..., None] * _cross_const(wire.axis, rho)


def total_field(p, cfg: FieldConfig) -> np.ndarray:
    b = wire_field(p, cfg.wire)
    if cfg.bias.magnitude:
        b = b + cfg.bias.vector
    return b


def field_magnitude(p, cfg: FieldConfig) -> np.ndarray:
    b = total_field(p, cfg)
    return np.sqrt(_dot(b, b))


def field_magnitude_gradient(p, cfg: FieldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(|B|, grad |B|)``; the gradient is set to zero where ``|B| == 0``."""
    wire = cfg.wire
    rho = perpendicular_offset(p, wire)
    rho2 = _dot(rho, rho)
    a2 = wire.radius * wire.radius
    outside = rho2 >= a2
    with np.errstate(divide="ignore", invalid="ignore"):
        return _magnitude_gradient(cfg, rho, rho2, a2, outside)


def _magnitude_gradient(cfg, rho, rho2, a2, outside):
    wire = cfg.wire
    c = MU0_OVER_2PI * wire.current
    denom = np.where(outside, rho2, a2)

    bw = (c / denom)[..., None] * _cross_const(wire.axis, rho)
    bb = cfg.bias.vector
    btot = bw + bb
    bmag2 = _dot(btot, btot)
    bmag = np.sqrt(bmag2)

    # grad |B_w|^2
    g_w2 = np.where(outside, -2.0 * c * c / (rho2 * denom), 2.0 * c * c / (a2 * a2))
    grad2 = g_w2[..., None] * rho
    if cfg.bias.magnitude:
        # grad (2 B_w . B_b), with q = B_b x axis
        q = np.cross(bb, np.asarray(wire.axis))
        rq = _dot(rho, q)
        grad2 = grad2 + 2.0 * c * (
            q / denom[..., None]
            - np.where(outside, 2.0 * rq / (rho2 * rho2), 0.0)[..., None] * rho
        )
    safe = np.where(bmag > 0, bmag, 1.0)
    grad = np.where((bmag > 0)[..., None], grad2 / (2.0 * safe[..., None]), 0.0)
    return bmag, grad


def _height(p, cfg: FieldConfig):
    return -_dot(np.asarray(p, dtype=float), np.asarray(cfg.gravity_direction))


def potential_energy(p, coupling, mass, cfg: FieldConfig) -> np.ndarray:
    """Batched potential with per-atom ``coupling`` (signed mu_eff) and ``mass``."""
    v = coupling * field_magnitude(p, cfg)
    if cfg.gravity_on:
        v = v + mass * cfg.g * _height(p, cfg)
    return v


def force_batch(p, coupling, mass, cfg: FieldConfig) -> np.ndarray:
    _, grad = field_magnitude_gradient(p, cfg)
    f = -np.asarray(coupling)[..., None] * grad
    if cfg.gravity_on:
        f = f + (np.asarray(mass) * cfg.g)[..., None] * np.asarray(cfg.gravity_direction)
    return f


def potential(p, atom: AtomSpecies, cfg: FieldConfig):
    """Adiabatic Zeeman potential ``s * mu_eff * |B|`` plus gravity, in joules."""
    return potential_energy(p, atom.coupling, atom.mass, cfg)


def force(p, atom: AtomSpecies, cfg: FieldConfig) -> np.ndarray:
    """Analytic ``-grad V``.  Zero magnetic force on exact field zeros."""
    return force_batch(p, atom.coupling, atom.mass, cfg)


# --------------------------------------------------------------------------
# side guide design


@dataclass(frozen=True)
class SideTrapLine:
    distance: float
    direction: Vector
    point: Vector


def _check_side_trap(wire: WireSpec, bias: BiasFieldSpec) -> float:
    if bias.magnitude <= 0 or wire.current == 0:
        raise NoSideTrapError("no side trap exists (needs nonzero current and bias)")
    return MU0_OVER_2PI * abs(wire.current) / bias.magnitude


def side_trap_center(wire: WireSpec, bias: BiasFieldSpec) -> SideTrapLine:
    """Distance of the zero-field line from the wire axis and its location."""
    r_s = _check_side_trap(wire, bias)
    if r_s <= wire.radius:
        raise TrapInsideWireError(f"trap inside wire: r_s={r_s:.3e} m <= radius")
    u = np.cross(np.asarray(wire.axis), np.asarray(bias.direction))
    if wire.current < 0:
        u = -u
    u = u / np.sqrt(_dot(u, u))
    point = np.asarray(wire.axis_point) + r_s * u
    return SideTrapLine(r_s, tuple(u.tolist()), tuple(point.tolist()))


def side_trap_gradient(wire: WireSpec, bias: BiasFieldSpec) -> float:
    """Linearized |B| gradient at the zero line, ``B_b / r_s`` in T/m."""
    r_s = _check_side_trap(wire, bias)
    if r_s <= wire.radius:
        raise TrapInsideWireError(f"trap inside wire: r_s={r_s:.3e} m <= radius")
    return bias.magnitude * bias.magnitude / (MU0_OVER_2PI * abs(wire.current))


def side_trap_depth(atom: AtomSpecies, bias: BiasFieldSpec) -> float:
    if atom.seeker is not Seeker.LOW_FIELD:
        raise NoSideTrapError("no side trap for high-field seekers")
    return atom.mu_eff * bias.magnitude
