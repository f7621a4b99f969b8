"""CSV, JSON and graymap output.  Every file carries the package version and master seed."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import OutcomeKind
from .ensemble import SEEKER_CODES, EnsembleSnapshot
from .imaging import CcdImage, Profile, write_pgm

SNAPSHOT_COLUMNS = ("atom_id", "x_m", "y_m", "z_m", "vx_m_s", "vy_m_s", "vz_m_s", "seeker", "outcome",
                    "flag_x_m", "flag_y_m", "flag_z_m")


def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def header_line(seed: int, **meta) -> str:
    parts = [f"wireguide version={__version__}", f"seed={int(seed)}"]
    parts += [f"{k}={v}" for k, v in meta.items()]
    return "# " + " ".join(parts) + "\n"


def parse_header(line: str) -> dict:
    if not line.startswith("# wireguide"):
        raise ValueError("missing wireguide header line")
    out = {}
    for token in line[2:].split()[1:]:
        key, _, val = token.partition("=")
        out[key] = val
    return out


def snapshot_filename(label: str, snapshot: EnsembleSnapshot) -> str:
    return f"{label}_t{snapshot.time * 1e3:08.3f}ms_{snapshot.phase}.csv"


def write_snapshot_csv(path, snapshot: EnsembleSnapshot, seed: int, label: str, current: float) -> None:
    flags = snapshot.flag_positions
    if flags is None:
        flags = np.full_like(snapshot.positions, np.nan)
    lines = [
        header_line(
            seed,
            run=label,
            current_A=repr(float(current)),
            time_s=repr(float(snapshot.time)),
            phase=snapshot.phase,
            mass_kg=repr(float(snapshot.mass)),
            mu_eff_J_T=repr(float(snapshot.mu_eff)),
        ),
        ",".join(SNAPSHOT_COLUMNS) + "\n",
    ]
    seekers = [s.value for s in SEEKER_CODES]
    labels = [k.label for k in OutcomeKind]
    for i in range(len(snapshot)):
        p, v, f = snapshot.positions[i], snapshot.velocities[i], flags[i]
        row = [str(i), *(_num(c) for c in p), *(_num(c) for c in v), seekers[int(snapshot.seekers[i])],
               labels[int(snapshot.outcomes[i])], *(_num(c) for c in f)]
        lines.append(",".join(row) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_snapshot_csv(path) -> tuple[EnsembleSnapshot, dict]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    meta = parse_header(text[0])
    if tuple(text[1].split(",")) != SNAPSHOT_COLUMNS:
        raise ValueError(f"{path}: unexpected columns")
    rows = [line.split(",") for line in text[2:] if line]
    n = len(rows)

    def col(j):
        return np.array([float(r[j]) if r[j] else np.nan for r in rows]).reshape(n)

    pos = np.column_stack([col(j) for j in (1, 2, 3)]) if n else np.zeros((0, 3))
    vel = np.column_stack([col(j) for j in (4, 5, 6)]) if n else np.zeros((0, 3))
    flags = np.column_stack([col(j) for j in (9, 10, 11)]) if n else np.zeros((0, 3))
    seeker_index = {s.value: k for k, s in enumerate(SEEKER_CODES)}
    seekers = np.array([seeker_index[r[7]] for r in rows], dtype=np.int8)
    outcomes = np.array([OutcomeKind.from_label(r[8]) for r in rows], dtype=np.int8)
    snap = EnsembleSnapshot(
        float(meta["time_s"]),
        pos,
        vel,
        seekers,
        outcomes,
        float(meta["mass_kg"]),
        float(meta["mu_eff_J_T"]),
        phase=meta["phase"],
        flag_positions=flags,
    )
    return snap, meta


def write_profile_csv(path, profile: Profile, seed: int, **meta) -> None:
    lines = [header_line(seed, **meta), "coordinate_m,value\n"]
    lines += [f"{_num(x)},{_num(y)}\n" for x, y in zip(profile.coordinates, profile.values)]
    Path(path).write_text("".join(lines), encoding="utf-8")


def write_table_csv(path, columns, rows, seed: int, **meta) -> None:
    def cell(v):
        if isinstance(v, (bool, np.bool_)):
            return str(bool(v)).lower()
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return _num(v)
        return str(v)

    lines = [header_line(seed, **meta), ",".join(columns) + "\n"]
    lines += [",".join(cell(v) for v in row) + "\n" for row in rows]
    Path(path).write_text("".join(lines), encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, data: dict, seed: int) -> None:
    body = {"wireguide_version": __version__, "master_seed": int(seed), **data}
    Path(path).write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_image(path, image: CcdImage, seed: int, **meta) -> None:
    write_pgm(path, image, {"wireguide_version": __version__, "seed": int(seed), **meta})
