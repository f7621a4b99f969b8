"""Velocity-Verlet trajectories in the adiabatic guide potential.

The heavy lifting happens in :func:`propagate`, which integrates every atom of
a batch independently in compiled code, so the result for an atom is
bit-for-bit the same no matter how the ensemble is split into batches.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernel
from .constants import HBAR, MU0_OVER_2PI
from .errors import IntegrationError
from .fields import AtomSpecies, FieldConfig, Seeker, WireSpec, potential_energy


class OutcomeKind(enum.IntEnum):
    # ordered: a tag may only move to a larger value
    GUIDED = 0
    SPIN_FLIP_FLAGGED = 1
    HIT_WIRE = 2
    LEFT_DOMAIN = 3

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "OutcomeKind":
        return {v: k for k, v in _LABELS.items()}[label]


_LABELS = {
    OutcomeKind.GUIDED: "guided",
    OutcomeKind.SPIN_FLIP_FLAGGED: "spin_flip_flagged",
    OutcomeKind.HIT_WIRE: "hit_wire",
    OutcomeKind.LEFT_DOMAIN: "left_domain",
}


@dataclass(frozen=True)
class AtomState:
    species: AtomSpecies
    position: np.ndarray
    velocity: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        for name in ("position", "velocity"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (3,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be a finite 3-vector")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if not (math.isfinite(self.time) and self.time >= 0):
            raise ValueError("time must be finite and >= 0")

    def kinetic_energy(self) -> float:
        v = self.velocity
        return 0.5 * self.species.mass * float(v @ v)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-6
    max_time: float = 20e-3
    wire_collision_on: bool = True
    domain_radius: float = 0.02
    adiabaticity_threshold: float = 0.1
    stride: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.max_time >= 0:
            raise ValueError("max_time must be >= 0")
        if not self.domain_radius > 0:
            raise ValueError("domain_radius must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.max_time / self.dt))

    def validate_for(self, wire: WireSpec) -> None:
        if not self.domain_radius > wire.radius:
            raise ValueError("domain_radius must exceed the wire radius")


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    exit_time: float
    spin_flip_flagged: bool = False
    flag_time: float | None = None


@dataclass
class Trajectory:
    samples: list[AtomState]
    outcome: Outcome
    energy: np.ndarray = field(repr=False)
    angular_momentum: np.ndarray = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.samples])

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.samples])

    @property
    def velocities(self) -> np.ndarray:
        return np.array([s.velocity for s in self.samples])


# --------------------------------------------------------------------------
# batched kernel


class _Kernel:
    """Field, acceleration and adiabaticity for atoms stored as ``(3, N)`` arrays."""

    def __init__(self, cfg: FieldConfig):
        w = cfg.wire
        self.cfg = cfg
        self.a = w.axis
        self.p0 = w.axis_point
        self.c = MU0_OVER_2PI * w.current
        self.a2 = w.radius * w.radius
        self.bias = tuple(float(b) for b in cfg.bias.vector)
        self.has_bias = cfg.bias.magnitude != 0.0
        bx, by, bz = self.bias
        ax, ay, az = self.a
        self.q = (by * az - bz * ay, bz * ax - bx * az, bx * ay - by * ax)
        if cfg.gravity_on:
            self.gvec = tuple(cfg.g * gd for gd in cfg.gravity_direction)
        else:
            self.gvec = None

    def geometry(self, x):
        a = self.a
        d0 = x[0] - self.p0[0]
        d1 = x[1] - self.p0[1]
        d2 = x[2] - self.p0[2]
        along = d0 * a[0] + d1 * a[1] + d2 * a[2]
        r = (d0 - along * a[0], d1 - along * a[1], d2 - along * a[2])
        rho2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
        return r, rho2

    def evaluate(self, x, coupling_over_m):
        """Return ``(terms, acceleration)``; ``terms`` feeds :meth:`adiabaticity`."""
        a, c, a2 = self.a, self.c, self.a2
        r, rho2 = self.geometry(x)
        outside = rho2 >= a2
        denom = np.where(outside, rho2, a2)
        k = c / denom
        axr = (
            a[1] * r[2] - a[2] * r[1],
            a[2] * r[0] - a[0] * r[2],
            a[0] * r[1] - a[1] * r[0],
        )
        b = [k * axr[i] for i in range(3)]
        if self.has_bias:
            b = [b[i] + self.bias[i] for i in range(3)]
        bmag2 = b[0] * b[0] + b[1] * b[1] + b[2] * b[2]
        bmag = np.sqrt(bmag2)
        nonzero = bmag > 0

        with np.errstate(divide="ignore", invalid="ignore"):
            gw = np.where(outside, -2.0 * c * c / (rho2 * rho2), 2.0 * c * c / (a2 * a2))
            grad2 = [gw * r[i] for i in range(3)]
            if self.has_bias:
                q = self.q
                rq = r[0] * q[0] + r[1] * q[1] + r[2] * q[2]
                t = np.where(outside, 2.0 * rq / (rho2 * rho2), 0.0)
                grad2 = [grad2[i] + 2.0 * c * (q[i] / denom - t * r[i]) for i in range(3)]
            # grad|B| = grad|B|^2 / (2|B|), defined as zero on field zeros
            scale = np.where(nonzero, -0.5 * coupling_over_m / bmag, 0.0)
        acc = [scale * grad2[i] for i in range(3)]
        if self.gvec is not None:
            acc = [acc[i] + self.gvec[i] for i in range(3)]
        terms = (r, rho2, outside, k, axr, b, bmag2, nonzero)
        return terms, np.stack(acc)

    def adiabaticity(self, terms, v, mu_eff):
        """omega_B / omega_L along velocity ``v``; +inf on field zeros."""
        a = self.a
        r, rho2, outside, k, axr, b, bmag2, nonzero = terms
        axv = (
            a[1] * v[2] - a[2] * v[1],
            a[2] * v[0] - a[0] * v[2],
            a[0] * v[1] - a[1] * v[0],
        )
        rv = r[0] * v[0] + r[1] * v[1] + r[2] * v[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(outside, 2.0 * k * rv / rho2, 0.0)
            db = [k * axv[i] - s * axr[i] for i in range(3)]
            bdb = b[0] * db[0] + b[1] * db[1] + b[2] * db[2]
            proj = np.where(nonzero, bdb / bmag2, 0.0)
            perp = [db[i] - proj * b[i] for i in range(3)]
            perp_mag = np.sqrt(perp[0] * perp[0] + perp[1] * perp[1] + perp[2] * perp[2])
            eps = np.where(perp_mag == 0.0, 0.0, HBAR * perp_mag / (mu_eff * bmag2))
        return np.where(nonzero, eps, np.inf)


@dataclass
class BatchResult:
    """Outcome of :func:`propagate` for N atoms."""

    position: np.ndarray  # (N, 3), state at exit or at the final time
    velocity: np.ndarray
    kind: np.ndarray  # OutcomeKind codes, int8
    exit_time: np.ndarray
    flagged: np.ndarray
    flag_time: np.ndarray  # nan when never flagged
    flag_position: np.ndarray  # (N, 3) position where the flag latched, nan otherwise
    records: list  # one (time, pos (N,3), vel (N,3), kind codes) per requested step


def propagate(
    position,
    velocity,
    mass,
    coupling,
    mu_eff,
    cfg: FieldConfig,
    icfg: IntegratorConfig,
    record_steps=(),
    check_initial_wire: bool = True,
) -> BatchResult:
    """Advance ``N`` atoms with velocity Verlet until ``icfg.max_time``.

    ``coupling`` is the signed magnetic moment (``-mu`` for high-field seekers).
    Atoms stop at the step on which an event fires; their last state is kept.
    ``record_steps`` lists step indices at which a snapshot of all atoms is taken.
    """
    x = np.ascontiguousarray(position, dtype=float).reshape(-1, 3)
    v = np.ascontiguousarray(velocity, dtype=float).reshape(-1, 3)
    n = x.shape[0]
    mass = np.broadcast_to(np.asarray(mass, dtype=float), (n,))
    coupling = np.broadcast_to(np.asarray(coupling, dtype=float), (n,))
    mu_eff = np.ascontiguousarray(np.broadcast_to(np.asarray(mu_eff, dtype=float), (n,)))
    com = np.ascontiguousarray(coupling / mass)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        bad = int(np.argmin(np.isfinite(x).all(1) & np.isfinite(v).all(1)))
        raise IntegrationError("non-finite initial state", 0.0, bad)

    dt = icfg.dt
    n_steps = icfg.n_steps
    rec = np.array(sorted(set(int(s) for s in record_steps)), dtype=np.int64)
    if rec.size and (rec[0] < 0 or rec[-1] > n_steps):
        raise ValueError("record step outside the integration window")

    geo, has_bias, has_grav = _kernel.geometry_vector(cfg)
    rec_x = np.empty((rec.size, n, 3))
    rec_v = np.empty((rec.size, n, 3))
    rec_kind = np.empty((rec.size, n), dtype=np.int8)
    kind = np.zeros(n, dtype=np.int8)
    exit_step = np.zeros(n, dtype=np.int64)
    flag_step = np.full(n, -1, dtype=np.int64)
    flag_pos = np.full((n, 3), np.nan)
    final_x = np.empty((n, 3))
    final_v = np.empty((n, 3))
    status = np.zeros(n, dtype=np.int8)
    _kernel.run_atoms(
        x, v, com, mu_eff, geo, has_bias, has_grav, HBAR,
        dt, n_steps, icfg.domain_radius**2, icfg.adiabaticity_threshold,
        icfg.wire_collision_on, check_initial_wire, rec,
        rec_x, rec_v, rec_kind, kind, exit_step, flag_step, flag_pos, final_x, final_v, status,
    )
    if status.any():
        i = int(np.flatnonzero(status)[0])
        t = exit_step[i] * dt
        raise IntegrationError(f"non-finite state after t={t:.6g} s", t, i)

    flagged = flag_step >= 0
    flag_time = np.where(flagged, flag_step * dt, np.nan)
    kind[flagged & (kind == 0)] = OutcomeKind.SPIN_FLIP_FLAGGED
    records = [(int(st) * dt, rec_x[k], rec_v[k], rec_kind[k]) for k, st in enumerate(rec)]
    return BatchResult(final_x, final_v, kind, exit_step * dt, flagged, flag_time, flag_pos, records)


# --------------------------------------------------------------------------
# single-atom API


def _acceleration(position, species: AtomSpecies, cfg: FieldConfig) -> np.ndarray:
    _, acc = _Kernel(cfg).evaluate(np.asarray(position, dtype=float)[:, None], species.coupling / species.mass)
    return acc[:, 0]


def step(state: AtomState, cfg: FieldConfig, dt: float, force_fn=None) -> AtomState:
    """One velocity-Verlet step.  ``force_fn(position) -> force`` overrides the guide force."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    m = state.species.mass
    if force_fn is None:
        accel = lambda p: _acceleration(p, state.species, cfg)  # noqa: E731
    else:
        accel = lambda p: np.asarray(force_fn(p), dtype=float) / m  # noqa: E731
    v_half = state.velocity + 0.5 * dt * accel(state.position)
    x_new = state.position + dt * v_half
    v_new = v_half + 0.5 * dt * accel(x_new)
    return AtomState(state.species, x_new, v_new, state.time + dt)


def total_energy(positions, velocities, species: AtomSpecies, cfg: FieldConfig) -> np.ndarray:
    v = np.asarray(velocities, dtype=float)
    kinetic = 0.5 * species.mass * np.sum(v * v, axis=-1)
    return kinetic + potential_energy(positions, species.coupling, species.mass, cfg)


def axial_angular_momentum(positions, velocities, mass, wire: WireSpec) -> np.ndarray:
    """``m (rho x v) . axis`` about the wire axis."""
    from .fields import perpendicular_offset

    rho = perpendicular_offset(positions, wire)
    lvec = np.cross(rho, np.asarray(velocities, dtype=float))
    a = wire.axis
    return mass * (lvec[..., 0] * a[0] + lvec[..., 1] * a[1] + lvec[..., 2] * a[2])


def integrate(initial: AtomState, cfg: FieldConfig, icfg: IntegratorConfig) -> Trajectory:
    """Integrate one atom, sampling every ``icfg.stride`` steps.

    Raises :class:`IntegrationError` if the state becomes non-finite.
    """
    icfg.validate_for(cfg.wire)
    from .fields import radial_distance

    if radial_distance(initial.position, cfg.wire) <= cfg.wire.radius:
        raise ValueError("initial position lies inside the wire")
    sp = initial.species
    n_steps = icfg.n_steps
    rec = list(range(0, n_steps + 1, icfg.stride))
    try:
        res = propagate(
            initial.position[None],
            initial.velocity[None],
            sp.mass,
            sp.coupling,
            sp.mu_eff,
            cfg,
            icfg,
            record_steps=rec,
        )
    except IntegrationError as exc:
        raise IntegrationError(str(exc), initial.time + exc.last_valid_time) from None

    kind = OutcomeKind(int(res.kind[0]))
    exit_t = float(res.exit_time[0])
    samples = []
    for t, px, pv, _ in res.records:
        if t > exit_t:
            break
        samples.append(AtomState(sp, px[0], pv[0], initial.time + t))
    if kind >= OutcomeKind.HIT_WIRE and (not samples or samples[-1].time < initial.time + exit_t):
        samples.append(AtomState(sp, res.position[0], res.velocity[0], initial.time + exit_t))
    samples[0] = initial

    pos = np.array([s.position for s in samples])
    vel = np.array([s.velocity for s in samples])
    flag_t = float(res.flag_time[0])
    outcome = Outcome(
        kind,
        initial.time + exit_t,
        bool(res.flagged[0]),
        None if math.isnan(flag_t) else initial.time + flag_t,
    )
    return Trajectory(
        samples,
        outcome,
        total_energy(pos, vel, sp, cfg),
        axial_angular_momentum(pos, vel, sp.mass, cfg.wire),
    )


def kepler_strength(atom: AtomSpecies, wire: WireSpec) -> float:
    """``k`` in ``V = -k / r`` for a high-field seeker (J m)."""
    return MU0_OVER_2PI * atom.mu_eff * abs(wire.current)


def circular_orbit_speed(r: float, atom: AtomSpecies, wire: WireSpec) -> float:
    if atom.seeker is not Seeker.HIGH_FIELD:
        raise ValueError("circular orbits exist only for high-field seekers")
    if not r > wire.radius:
        raise ValueError("orbit radius must exceed the wire radius")
    return math.sqrt(kepler_strength(atom, wire) / (atom.mass * r))


def adiabaticity(state: AtomState, cfg: FieldConfig) -> float:
    """Ratio of field-direction rotation rate to Larmor frequency at ``state``."""
    kernel = _Kernel(cfg)
    sp = state.species
    terms, _ = kernel.evaluate(state.position[:, None], sp.coupling / sp.mass)
    eps = kernel.adiabaticity(terms, state.velocity[:, None], np.array([sp.mu_eff]))
    return float(eps[0])
