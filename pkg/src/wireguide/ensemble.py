"""MOT-like initial ensembles, the release/guide/image sequence, and loading efficiencies."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .constants import K_B, LI7_MASS, MU_B
from .dynamics import AtomState, IntegratorConfig, OutcomeKind, kepler_strength, propagate
from .errors import IntegrationError
from .fields import AtomSpecies, FieldConfig, Seeker, field_magnitude, perpendicular_offset

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

SEEKER_CODES = (Seeker.HIGH_FIELD, Seeker.LOW_FIELD)


@dataclass(frozen=True)
class MotParams:
    center_offset: tuple[float, float, float] = (0.0, 0.0, 1e-3)
    fwhm: float = 1.6e-3
    temperature: float = 200e-6
    atom_count: int = 10_000
    seeker_fractions: tuple[float, float] = (0.5, 0.5)  # (high field, low field)
    mass: float = LI7_MASS
    mu_eff: float = MU_B

    def __post_init__(self):
        object.__setattr__(self, "center_offset", tuple(float(c) for c in self.center_offset))
        object.__setattr__(self, "seeker_fractions", tuple(float(w) for w in self.seeker_fractions))
        if len(self.center_offset) != 3:
            raise ValueError("center_offset must be a 3-vector")
        if not self.fwhm > 0:
            raise ValueError("fwhm must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if int(self.atom_count) != self.atom_count or self.atom_count < 1:
            raise ValueError("atom_count must be a positive integer")
        w = self.seeker_fractions
        if len(w) != 2 or min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("seeker_fractions must be two weights >= 0 summing to 1")
        if not (self.mass > 0 and self.mu_eff >= 0):
            raise ValueError("invalid species parameters")

    @property
    def sigma_position(self) -> float:
        return self.fwhm * FWHM_TO_SIGMA

    @property
    def sigma_velocity(self) -> float:
        """Per-axis thermal velocity spread sqrt(kB T / m)."""
        return math.sqrt(K_B * self.temperature / self.mass)

    def species(self, seeker: Seeker) -> AtomSpecies:
        return AtomSpecies(self.mass, self.mu_eff, seeker)


@dataclass(frozen=True)
class SequenceSpec:
    guide: FieldConfig
    guide_time: float = 20e-3
    snapshot_times: tuple[float, ...] = ()
    free_expansion_time: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        times = tuple(float(t) for t in self.snapshot_times)
        object.__setattr__(self, "snapshot_times", times)
        if not self.guide_time >= 0:
            raise ValueError("guide_time must be >= 0")
        if list(times) != sorted(times) or any(t < 0 or t > self.guide_time for t in times):
            raise ValueError("snapshot_times must be sorted and within [0, guide_time]")
        if not self.free_expansion_time >= 0:
            raise ValueError("free_expansion_time must be >= 0")
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")


@dataclass
class EnsembleSnapshot:
    """All launched atoms at one instant, in launch order."""

    time: float
    positions: np.ndarray  # (N, 3)
    velocities: np.ndarray  # (N, 3)
    seekers: np.ndarray  # 0 = high field, 1 = low field
    outcomes: np.ndarray  # OutcomeKind codes so far
    mass: float = LI7_MASS
    mu_eff: float = MU_B
    phase: str = "guide"  # or "expansion"
    flag_positions: np.ndarray | None = None  # where spin-flip flags latched so far (nan: none)

    def __len__(self) -> int:
        return len(self.outcomes)

    @property
    def states(self) -> list[AtomState]:
        sp = [AtomSpecies(self.mass, self.mu_eff, s) for s in SEEKER_CODES]
        return [
            AtomState(sp[int(s)], p, v, self.time)
            for p, v, s in zip(self.positions, self.velocities, self.seekers)
        ]

    def alive(self, count_flagged: bool = True) -> np.ndarray:
        limit = OutcomeKind.SPIN_FLIP_FLAGGED if count_flagged else OutcomeKind.GUIDED
        return self.outcomes <= limit

    def couplings(self) -> np.ndarray:
        return np.where(self.seekers == 0, -self.mu_eff, self.mu_eff)


def atom_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for one atom, derived from (master_seed, index) only."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(index),)))


def _sample_arrays(params: MotParams, seed: int, start: int = 0, stop: int | None = None):
    stop = params.atom_count if stop is None else stop
    n = stop - start
    pos = np.empty((n, 3))
    vel = np.empty((n, 3))
    seekers = np.empty(n, dtype=np.int8)
    sx, sv = params.sigma_position, params.sigma_velocity
    c = np.asarray(params.center_offset)
    w_high = params.seeker_fractions[0]
    for j, i in enumerate(range(start, stop)):
        rng = atom_rng(seed, i)
        draws = rng.standard_normal(6)
        pos[j] = c + sx * draws[:3]
        vel[j] = sv * draws[3:]
        seekers[j] = 0 if rng.random() < w_high else 1
    return pos, vel, seekers


def sample_mot(params: MotParams, seed: int) -> list[AtomState]:
    """Gaussian cloud with Maxwell-Boltzmann velocities; deterministic in ``seed``."""
    pos, vel, seekers = _sample_arrays(params, seed)
    sp = [params.species(s) for s in SEEKER_CODES]
    return [AtomState(sp[int(s)], p, v) for p, v, s in zip(pos, vel, seekers)]


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(int(workers), n)) if n else 1
    edges = np.linspace(0, n, workers + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_chunk(params, spec, icfg, start, stop, steps):
    pos, vel, seekers = _sample_arrays(params, spec.master_seed, start, stop)
    coupling = np.where(seekers == 0, -params.mu_eff, params.mu_eff)
    try:
        res = propagate(pos, vel, params.mass, coupling, params.mu_eff, spec.guide, icfg, steps)
    except IntegrationError as exc:
        idx = None if exc.atom_index is None else start + exc.atom_index
        raise IntegrationError(f"atom {idx}: {exc}", exc.last_valid_time, idx) from None
    return seekers, res


def run_sequence(
    params: MotParams,
    spec: SequenceSpec,
    icfg: IntegratorConfig | None = None,
    workers: int = 1,
) -> list[EnsembleSnapshot]:
    """Release the sampled cloud into the guide and record snapshots.

    Snapshots are taken at t = 0, at every requested time and at ``guide_time``.
    A ballistic-expansion snapshot is appended when ``free_expansion_time > 0``.
    Results do not depend on ``workers``.
    """
    icfg = replace(icfg or IntegratorConfig(), max_time=spec.guide_time)
    icfg.validate_for(spec.guide.wire)
    times = sorted({0.0, *spec.snapshot_times, spec.guide_time})
    steps = [int(round(t / icfg.dt)) for t in times]
    slot = {st: k for k, st in enumerate(sorted(set(steps)))}

    chunks = _chunks(params.atom_count, workers)
    if len(chunks) == 1:
        results = [_run_chunk(params, spec, icfg, *chunks[0], steps)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [pool.submit(_run_chunk, params, spec, icfg, a, b, steps) for a, b in chunks]
            results = [f.result() for f in futures]

    seekers = np.concatenate([r[0] for r in results])
    flag_time = np.concatenate([r[1].flag_time for r in results])
    flag_pos = np.concatenate([r[1].flag_position for r in results])
    snapshots = []
    for t, st in zip(times, steps):
        k = slot[st]
        snapshots.append(
            EnsembleSnapshot(
                t,
                np.concatenate([r[1].records[k][1] for r in results]),
                np.concatenate([r[1].records[k][2] for r in results]),
                seekers,
                np.concatenate([r[1].records[k][3] for r in results]),
                params.mass,
                params.mu_eff,
                flag_positions=np.where((flag_time <= t)[:, None], flag_pos, np.nan),
            )
        )
    if spec.free_expansion_time > 0:
        snapshots.append(ballistic_expand(snapshots[-1], spec.free_expansion_time, spec.guide))
    return snapshots


def ballistic_expand(snapshot: EnsembleSnapshot, t: float, cfg: FieldConfig | None = None) -> EnsembleSnapshot:
    """Free flight with fields off.  Gravity applies if ``cfg`` has it on.

    Atoms stuck on the wire or outside the domain are not moved.
    """
    if not t >= 0:
        raise ValueError("expansion time must be >= 0")
    moving = (snapshot.outcomes < OutcomeKind.HIT_WIRE)[:, None]
    pos = snapshot.positions + np.where(moving, snapshot.velocities * t, 0.0)
    vel = snapshot.velocities.copy()
    if cfg is not None and cfg.gravity_on:
        gvec = cfg.g * np.asarray(cfg.gravity_direction)
        pos = pos + np.where(moving, 0.5 * t * t * gvec, 0.0)
        vel = vel + np.where(moving, t * gvec, 0.0)
    return EnsembleSnapshot(
        snapshot.time + t,
        pos,
        vel,
        snapshot.seekers,
        snapshot.outcomes.copy(),
        snapshot.mass,
        snapshot.mu_eff,
        phase="expansion",
        flag_positions=snapshot.flag_positions,
    )


# --------------------------------------------------------------------------
# loading efficiency


@dataclass(frozen=True)
class Efficiency:
    criterion: str
    fraction: float
    stderr: float
    selected: int
    total: int

    def as_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "fraction": self.fraction,
            "stderr": self.stderr,
            "selected": self.selected,
            "total": self.total,
        }


def _efficiency(criterion: str, mask: np.ndarray) -> Efficiency:
    n = mask.size
    k = int(np.count_nonzero(mask))
    f = k / n
    return Efficiency(criterion, f, math.sqrt(f * (1.0 - f) / n), k, n)


def kepler_bound_mask(snapshot: EnsembleSnapshot, cfg: FieldConfig) -> np.ndarray:
    """High-field seekers with negative transverse energy and perihelion outside the wire.

    Uses the conserved (energy, axial angular momentum) pair of the pure 1/r
    potential, so gravity is ignored.
    """
    wire = cfg.wire
    m = snapshot.mass
    k = kepler_strength(AtomSpecies(m, snapshot.mu_eff), wire)
    rho = perpendicular_offset(snapshot.positions, wire)
    r = np.sqrt(np.sum(rho * rho, axis=1))
    a = np.asarray(wire.axis)
    v = snapshot.velocities
    v_perp = v - np.outer(v @ a, a)
    energy = 0.5 * m * np.sum(v_perp * v_perp, axis=1) - k / r
    ang = m * (np.cross(rho, v) @ a)
    disc = np.maximum(k * k + 2.0 * energy * ang * ang / m, 0.0)
    perihelion = ang * ang / (m * (k + np.sqrt(disc)))
    return (
        (snapshot.seekers == 0)
        & (energy < 0)
        & (perihelion > wire.radius)
        & (snapshot.outcomes < OutcomeKind.HIT_WIRE)
    )


def binding_energy(snapshot: EnsembleSnapshot, cfg: FieldConfig) -> np.ndarray:
    """Transverse energy relative to the guide's escape threshold (negative = bound).

    The threshold is the potential far from the wire, ``coupling * B_b``;
    gravity is left out.
    """
    a = np.asarray(cfg.wire.axis)
    v = snapshot.velocities
    v_perp = v - np.outer(v @ a, a)
    coupling = snapshot.couplings()
    bmag = field_magnitude(snapshot.positions, cfg)
    kinetic = 0.5 * snapshot.mass * np.sum(v_perp * v_perp, axis=1)
    return kinetic + coupling * (bmag - cfg.bias.magnitude)


def survival_mask(
    snapshot: EnsembleSnapshot, cfg: FieldConfig, capture_radius: float = 5e-3, count_flagged: bool = True
) -> np.ndarray:
    """Atoms without a loss event, within ``capture_radius`` of the wire and still bound."""
    rho = perpendicular_offset(snapshot.positions, cfg.wire)
    r = np.sqrt(np.sum(rho * rho, axis=1))
    return snapshot.alive(count_flagged) & (r <= capture_radius) & (binding_energy(snapshot, cfg) < 0)


def guide_seeker(cfg: FieldConfig) -> int:
    """Seeker code held by the guide: high-field seekers orbit the bare wire, low-field seekers sit in the side trap."""
    return SEEKER_CODES.index(Seeker.HIGH_FIELD if cfg.kepler_mode else Seeker.LOW_FIELD)


def guided_mask(
    snapshot: EnsembleSnapshot, cfg: FieldConfig, capture_radius: float = 5e-3, count_flagged: bool = True
) -> np.ndarray:
    """Surviving atoms of the seeker state the guide is built for.

    With a bias field, high-field seekers can stay bound by orbiting the wire
    on the side opposite the trap; they are not in the side guide.
    """
    return survival_mask(snapshot, cfg, capture_radius, count_flagged) & (snapshot.seekers == guide_seeker(cfg))


def loading_efficiency(
    snapshots: list[EnsembleSnapshot],
    criterion: str,
    cfg: FieldConfig,
    capture_radius: float = 5e-3,
    count_flagged: bool = True,
) -> Efficiency | None:
    """Fraction of launched atoms loaded into the guide.

    ``criterion`` is ``"energy"`` (Kepler guide only, evaluated on the t=0
    snapshot; returns None for a side guide) or ``"survival"`` (no loss event,
    within ``capture_radius`` of the wire and bound at the end of the guide
    stage, counting only the seeker state the guide holds).
    """
    guide = [s for s in snapshots if s.phase == "guide"]
    if not guide or len(guide[0]) == 0:
        raise ValueError("empty ensemble")
    if criterion == "energy":
        if not cfg.kepler_mode:
            return None
        if guide[0].time != 0.0:
            raise ValueError("energy criterion needs the t=0 snapshot")
        return _efficiency("energy", kepler_bound_mask(guide[0], cfg))
    if criterion == "survival":
        return _efficiency("survival", guided_mask(guide[-1], cfg, capture_radius, count_flagged))
    raise ValueError(f"unknown criterion {criterion!r}")
