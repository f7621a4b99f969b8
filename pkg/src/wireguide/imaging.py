"""Virtual CCD images of an ensemble and the profile analyses built on them.

Images are ideal position histograms.  Two views exist: ``top`` looks along
the wire (image axes: transverse horizontal, vertical) and ``side`` looks onto
the wire (image axes: along the wire, vertical).  All coordinates are measured
from the wire's reference point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.special import erf

from .fields import FieldConfig, WireSpec

VIEWS = ("top", "side")
DEFAULT_FOV = {"top": (0.01, 0.01), "side": (0.02, 0.01)}
DEFAULT_PIXEL = 50e-6


def image_axes(wire: WireSpec, gravity_direction=(0.0, 0.0, -1.0)):
    """Unit vectors (along-wire, transverse-horizontal, vertical) of the lab frame."""
    a = np.asarray(wire.axis)
    up = -np.asarray(gravity_direction, dtype=float)
    up = up - (up @ a) * a
    n = np.linalg.norm(up)
    if n < 1e-12:
        # gravity along the wire: pick any perpendicular direction as "up"
        up = np.cross(a, [1.0, 0.0, 0.0] if abs(a[0]) < 0.9 else [0.0, 1.0, 0.0])
        n = np.linalg.norm(up)
    up = up / n
    horiz = np.cross(up, a)
    return a, horiz, up


def project_positions(positions, view: str, cfg: FieldConfig) -> np.ndarray:
    """Map 3D positions to 2D image-plane coordinates ``(h, v)``."""
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}")
    along, horiz, up = image_axes(cfg.wire, cfg.gravity_direction)
    d = np.asarray(positions, dtype=float) - np.asarray(cfg.wire.axis_point)
    first = along if view == "side" else horiz
    return np.stack((d @ first, d @ up), axis=-1)


@dataclass
class CcdImage:
    view: str
    counts: np.ndarray  # (rows, cols); row index runs along the vertical image axis
    pixel_size: float
    fov: tuple[float, float]  # (width, height)
    origin: tuple[float, float]  # image-plane coordinate of the lower corner of pixel (0, 0)

    @property
    def shape(self):
        return self.counts.shape

    def h_centers(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.counts.shape[1]) + 0.5) * self.pixel_size

    def v_centers(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.counts.shape[0]) + 0.5) * self.pixel_size

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def render_ccd(
    positions,
    view: str,
    cfg: FieldConfig,
    fov: tuple[float, float] | None = None,
    pixel_size: float = DEFAULT_PIXEL,
    center: tuple[float, float] = (0.0, 0.0),
) -> CcdImage:
    """Histogram ``positions`` (N, 3) into an image; atoms outside the fov are dropped."""
    if not pixel_size > 0:
        raise ValueError("pixel_size must be positive")
    fov = DEFAULT_FOV[view] if fov is None else (float(fov[0]), float(fov[1]))
    ncols = max(1, int(round(fov[0] / pixel_size)))
    nrows = max(1, int(round(fov[1] / pixel_size)))
    origin = (center[0] - 0.5 * ncols * pixel_size, center[1] - 0.5 * nrows * pixel_size)
    hv = project_positions(np.reshape(positions, (-1, 3)), view, cfg)
    j = np.floor((hv[:, 0] - origin[0]) / pixel_size)
    i = np.floor((hv[:, 1] - origin[1]) / pixel_size)
    ok = (j >= 0) & (j < ncols) & (i >= 0) & (i < nrows)
    flat = i[ok].astype(np.int64) * ncols + j[ok].astype(np.int64)
    counts = np.bincount(flat, minlength=nrows * ncols).reshape(nrows, ncols)
    return CcdImage(view, counts.astype(np.int64), pixel_size, (ncols * pixel_size, nrows * pixel_size), origin)


def poisson_resample(image: CcdImage, seed: int) -> CcdImage:
    """Replace every pixel by a Poisson draw with the pixel count as mean."""
    rng = np.random.default_rng(seed)
    return CcdImage(image.view, rng.poisson(image.counts), image.pixel_size, image.fov, image.origin)


# --------------------------------------------------------------------------
# profiles


@dataclass
class Profile:
    coordinates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.coordinates = np.asarray(self.coordinates, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.coordinates.shape != self.values.shape or self.coordinates.ndim != 1:
            raise ValueError("coordinates and values must be 1D arrays of equal length")
        if np.any(np.diff(self.coordinates) <= 0):
            raise ValueError("profile coordinates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def bin_width(self) -> float:
        return float(np.mean(np.diff(self.coordinates))) if len(self) > 1 else 0.0

    @property
    def total(self) -> float:
        return float(self.values.sum())


def project_profile(image: CcdImage, axis: str = "horizontal") -> Profile:
    """Integrate the image onto one of its axes (column sums for ``horizontal``)."""
    if axis == "horizontal":
        return Profile(image.h_centers(), image.counts.sum(axis=0))
    if axis == "vertical":
        return Profile(image.v_centers(), image.counts.sum(axis=1))
    raise ValueError("axis must be 'horizontal' or 'vertical'")


def central_cut(image: CcdImage, axis: str = "horizontal", half_width: int = 1, center=None) -> Profile:
    """Band of ``2*half_width+1`` pixel rows (or columns) through ``center``.

    ``center`` defaults to the image-plane centroid of the counts.
    """
    counts = image.counts
    if counts.sum() == 0:
        raise ValueError("empty image")
    if center is None:
        w = counts / counts.sum()
        center = (float((w.sum(0) * image.h_centers()).sum()), float((w.sum(1) * image.v_centers()).sum()))
    if axis == "horizontal":
        i0 = int(np.clip(np.floor((center[1] - image.origin[1]) / image.pixel_size), 0, counts.shape[0] - 1))
        band = counts[max(0, i0 - half_width) : i0 + half_width + 1]
        return Profile(image.h_centers(), band.sum(axis=0))
    j0 = int(np.clip(np.floor((center[0] - image.origin[0]) / image.pixel_size), 0, counts.shape[1] - 1))
    band = counts[:, max(0, j0 - half_width) : j0 + half_width + 1]
    return Profile(image.v_centers(), band.sum(axis=1))


def difference_profile(with_current: Profile, without_current: Profile) -> Profile:
    if with_current.coordinates.shape != without_current.coordinates.shape or not np.allclose(
        with_current.coordinates, without_current.coordinates, rtol=0, atol=1e-12
    ):
        raise ValueError("profiles are on different coordinate grids")
    return Profile(with_current.coordinates, with_current.values - without_current.values)


def peak_in_dip(diff: Profile, center: float = 0.0, peak_halfwidth: float | None = None) -> dict:
    """Describe a difference profile: positive value at ``center`` flanked by negative shoulders."""
    x, y = diff.coordinates, diff.values
    k = int(np.argmin(np.abs(x - center)))
    if peak_halfwidth is None:
        peak_halfwidth = 3 * diff.bin_width
    near = np.abs(x - center) <= peak_halfwidth
    peak = float(y[near].max())
    left = float(y[x < center - peak_halfwidth].min(initial=0.0))
    right = float(y[x > center + peak_halfwidth].min(initial=0.0))
    return {
        "center_value": float(y[k]),
        "peak": peak,
        "left_dip": left,
        "right_dip": right,
        "peak_in_dip": peak > 0 and left < 0 and right < 0,
    }


# --------------------------------------------------------------------------
# double Gaussian fit


@dataclass
class DoubleGaussianFit:
    """``a1 exp(-(x-mu1)^2/2 s1^2) + a2 exp(-(x-mu2)^2/2 s2^2) + offset``; 1 is the narrow part."""

    a1: float
    mu1: float
    sigma1: float
    a2: float
    mu2: float
    sigma2: float
    offset: float
    residual_norm: float
    converged: bool
    degenerate: bool
    iterations: int
    bin_width: float

    @property
    def params(self) -> np.ndarray:
        return np.array([self.a1, self.mu1, self.sigma1, self.a2, self.mu2, self.sigma2, self.offset])

    @property
    def trapped_atoms(self) -> float:
        return self.a1 * self.sigma1 * math.sqrt(2.0 * math.pi) / self.bin_width

    @property
    def background_atoms(self) -> float:
        return self.a2 * self.sigma2 * math.sqrt(2.0 * math.pi) / self.bin_width

    @property
    def trapped_fraction(self) -> float:
        tot = self.trapped_atoms + self.background_atoms
        return self.trapped_atoms / tot if tot else 0.0

    def evaluate(self, x) -> np.ndarray:
        return double_gaussian(np.asarray(x, dtype=float), self.params)

    def as_dict(self) -> dict:
        return {
            "a1": self.a1,
            "mu1": self.mu1,
            "sigma1": self.sigma1,
            "a2": self.a2,
            "mu2": self.mu2,
            "sigma2": self.sigma2,
            "offset": self.offset,
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "trapped_atoms": self.trapped_atoms,
            "trapped_fraction": self.trapped_fraction,
        }


def double_gaussian(x, p):
    a1, m1, s1, a2, m2, s2, c = p
    return a1 * np.exp(-0.5 * ((x - m1) / s1) ** 2) + a2 * np.exp(-0.5 * ((x - m2) / s2) ** 2) + c


def _jacobian(x, p):
    a1, m1, s1, a2, m2, s2, _ = p
    u1 = (x - m1) / s1
    u2 = (x - m2) / s2
    e1 = np.exp(-0.5 * u1 * u1)
    e2 = np.exp(-0.5 * u2 * u2)
    return np.column_stack(
        (e1, a1 * e1 * u1 / s1, a1 * e1 * u1 * u1 / s1, e2, a2 * e2 * u2 / s2, a2 * e2 * u2 * u2 / s2, np.ones_like(x))
    )


def initial_guess(profile: Profile, peak_center: float | None = None) -> np.ndarray:
    """Wide component from the profile moments, narrow one from the residual peak.

    ``peak_center`` is where the narrow peak is expected (the wire position);
    when omitted the maximum of the residual is used.
    """
    x, y = profile.coordinates, profile.values
    dx = profile.bin_width
    n_edge = max(1, len(x) // 10)
    offset = float(min(np.mean(y[:n_edge]), np.mean(y[-n_edge:])))
    w = np.clip(y - offset, 0.0, None)
    if w.sum() <= 0:
        w = np.ones_like(y)
    mu2 = float((w * x).sum() / w.sum())
    s2 = float(math.sqrt(max((w * (x - mu2) ** 2).sum() / w.sum(), dx * dx)))
    a2 = float(w.sum() * dx / (s2 * math.sqrt(2.0 * math.pi)))
    resid = (y - offset) - a2 * np.exp(-0.5 * ((x - mu2) / s2) ** 2)
    k = int(np.argmax(resid)) if peak_center is None else int(np.argmin(np.abs(x - peak_center)))
    mu1 = float(x[k])
    a1 = float(resid[k])
    if a1 <= 0.01 * a2:
        a1 = 0.01 * max(a2, 1e-300)
        s1 = 2 * dx
    else:
        # half width at half maximum of the residual peak
        lo = k
        while lo > 0 and resid[lo] > 0.5 * a1:
            lo -= 1
        hi = k
        while hi < len(x) - 1 and resid[hi] > 0.5 * a1:
            hi += 1
        s1 = max((x[hi] - x[lo]) / 2.3548, dx)
    s1 = min(s1, 0.5 * s2)
    return np.array([a1, mu1, s1, a2, mu2, s2, offset])


def _polish(u, v, q, steps: int = 4):
    """Gauss-Newton steps from the LM solution.

    The background amplitude and the offset are strongly correlated, so LM
    stops wherever rounding noise flattens the cost.  Solving the linearized
    problem directly pins the minimum much more tightly, which makes refits
    from a converged solution reproduce it.
    """
    r = double_gaussian(u, q) - v
    cost = r @ r
    for _ in range(steps):
        dq = np.linalg.lstsq(_jacobian(u, q), -r, rcond=None)[0]
        trial = q + dq
        rt = double_gaussian(u, trial) - v
        if not (np.all(np.isfinite(trial)) and rt @ rt <= cost * (1 + 1e-12)):
            break
        q, r, cost = trial, rt, rt @ rt
        if np.all(np.abs(dq) <= 1e-15 * np.maximum(np.abs(q), 1.0)):
            break
    return q


def fit_double_gaussian(profile: Profile, init=None, peak_center: float | None = None, max_iter: int = 500) -> DoubleGaussianFit:
    """Least-squares fit of two Gaussians plus a constant.

    Non-convergence is reported through ``converged``; this never raises for
    well-formed input.
    """
    if len(profile) < 7:
        raise ValueError("need at least 7 profile points")
    x, y = profile.coordinates, profile.values
    p0 = np.asarray(init, dtype=float) if init is not None else initial_guess(profile, peak_center)

    # work in units where coordinates and values are O(1)
    xc = 0.5 * (x[0] + x[-1])
    xs = 0.5 * (x[-1] - x[0]) or 1.0
    ys = float(np.max(np.abs(y))) or 1.0
    u = (x - xc) / xs
    v = y / ys
    q0 = np.array([p0[0] / ys, (p0[1] - xc) / xs, p0[2] / xs, p0[3] / ys, (p0[4] - xc) / xs, p0[5] / xs, p0[6] / ys])
    q0[2] = abs(q0[2]) or 1e-3
    q0[5] = abs(q0[5]) or 1e-3

    res = least_squares(
        lambda q: double_gaussian(u, q) - v,
        q0,
        jac=lambda q: _jacobian(u, q),
        method="lm",
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=max_iter * 8,
    )
    q = _polish(u, v, res.x)
    p = np.array([q[0] * ys, q[1] * xs + xc, abs(q[2]) * xs, q[3] * ys, q[4] * xs + xc, abs(q[5]) * xs, q[6] * ys])
    if p[2] > p[5]:
        p = p[[3, 4, 5, 0, 1, 2, 6]]
    resid = double_gaussian(x, p) - y
    converged = bool(res.status > 0 and np.all(np.isfinite(p)))
    degenerate = abs(p[2] - p[5]) <= 0.01 * max(p[2], p[5])
    return DoubleGaussianFit(
        *(float(c) for c in p),
        residual_norm=float(np.linalg.norm(resid)),
        converged=converged,
        degenerate=bool(degenerate),
        iterations=int(res.nfev),
        bin_width=profile.bin_width,
    )


# --------------------------------------------------------------------------
# detected fraction, expansion shape, position scaling


@dataclass
class DetectedFraction:
    times: np.ndarray
    fraction: np.ndarray
    stderr: np.ndarray
    model: np.ndarray  # closed-form free axial expansion of the guided atoms

    def as_rows(self):
        return list(zip(self.times, self.fraction, self.stderr, self.model))


def axial_survival_probability(t, sigma_x: float, sigma_v: float, fov_length: float, g_axial: float = 0.0):
    """Probability that a freely expanding Gaussian cloud lies within the fov along the wire.

    ``g_axial`` is the gravity component along the wire; the cloud center
    falls by ``g_axial t^2 / 2``.
    """
    t = np.asarray(t, dtype=float)
    s = math.sqrt(2.0) * np.sqrt(sigma_x**2 + (sigma_v * t) ** 2)
    sag = 0.5 * g_axial * t * t
    half = 0.5 * fov_length
    return 0.5 * (erf((half + sag) / s) + erf((half - sag) / s))


def detected_fraction(
    snapshots,
    cfg: FieldConfig,
    guided_mask,
    sigma_x: float,
    sigma_v: float,
    fov_length: float = 0.02,
    fov_center: float = 0.0,
) -> DetectedFraction:
    """Fraction of launched atoms that are guided and inside the illuminated section.

    ``guided_mask`` selects the atoms bound to the guide; an atom counts at a
    snapshot while it has no loss event and its axial coordinate lies in the fov.
    The model curve is ``f0 * P(|x| < L/2)`` for free axial expansion with
    axial gravity sag, ``f0`` being the guided fraction at t = 0.  The cloud
    is assumed to start centred on the fov.
    """
    from .fields import axial_coordinate

    guided_mask = np.asarray(guided_mask, dtype=bool)
    times, frac, err = [], [], []
    n = guided_mask.size
    for s in snapshots:
        x = axial_coordinate(s.positions, cfg.wire)
        inside = np.abs(x - fov_center) <= 0.5 * fov_length
        k = np.count_nonzero(guided_mask & inside & s.alive())
        f = k / n
        times.append(s.time)
        frac.append(f)
        err.append(math.sqrt(f * (1 - f) / n))
    times = np.array(times)
    f0 = np.count_nonzero(guided_mask) / n
    g_axial = cfg.g * float(np.dot(cfg.gravity_direction, cfg.wire.axis)) if cfg.gravity_on else 0.0
    model = f0 * axial_survival_probability(times, sigma_x, sigma_v, fov_length, g_axial)
    return DetectedFraction(times, np.array(frac), np.array(err), model)


def ring_statistic(profile: Profile) -> tuple[float, str]:
    """Central dip depth ``1 - center/max`` of a 3-bin smoothed cut, and a verdict.

    Verdicts: ``ring`` above 0.3, ``unimodal`` below 0.1, otherwise ``ambiguous``.
    The center is the count-weighted centroid of the cut.
    """
    y = np.asarray(profile.values, dtype=float)
    if y.size == 0 or y.sum() <= 0:
        raise ValueError("empty profile")
    smooth = np.convolve(y, np.ones(3) / 3.0, mode="same")
    xc = float((profile.coordinates * y).sum() / y.sum())
    k = int(np.argmin(np.abs(profile.coordinates - xc)))
    peak = smooth.max()
    measure = float(1.0 - smooth[k] / peak)
    if measure > 0.3:
        verdict = "ring"
    elif measure < 0.1:
        verdict = "unimodal"
    else:
        verdict = "ambiguous"
    return measure, verdict


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    r_squared: float

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared}


def fit_rs_vs_current(points) -> LineFit:
    """Ordinary least squares of side-trap distance against wire current."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 (current, distance) points")
    x, y = pts[:, 0], pts[:, 1]
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise ValueError("currents must not all be equal")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_res = ((y - (slope * x + intercept)) ** 2).sum()
    ss_tot = ((y - ym) ** 2).sum()
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LineFit(float(slope), float(intercept), float(r2))


# --------------------------------------------------------------------------
# graymap output


def write_pgm(path, image: CcdImage, metadata: dict | None = None) -> None:
    """Binary 16-bit portable graymap, row 0 at the top (largest vertical coordinate).

    View, fov, pixel size and origin go into header comments together with any
    extra ``metadata``.  Counts above 65535 are clipped.
    """
    rows, cols = image.counts.shape
    meta = {
        "view": image.view,
        "fov_m": f"{image.fov[0]:.9g}x{image.fov[1]:.9g}",
        "pixel_m": f"{image.pixel_size:.9g}",
        "origin_m": f"{image.origin[0]:.9g},{image.origin[1]:.9g}",
        "row_order": "top_is_max_vertical",
    }
    meta.update(metadata or {})
    header = "P5\n" + "".join(f"# {k}={v}\n" for k, v in meta.items()) + f"{cols} {rows}\n65535\n"
    data = np.clip(image.counts[::-1], 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> tuple[CcdImage, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0
    tokens, meta = [], {}
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key] = val
        else:
            tokens.extend(line.split())
    if tokens[0] != "P5" or int(tokens[3]) != 65535:
        raise ValueError("not a 16-bit binary graymap")
    cols, rows = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos : pos + 2 * rows * cols], dtype=">u2").reshape(rows, cols)
    fw, fh_ = (float(s) for s in meta["fov_m"].split("x"))
    ox, oy = (float(s) for s in meta["origin_m"].split(","))
    img = CcdImage(meta["view"], data[::-1].astype(np.int64), float(meta["pixel_m"]), (fw, fh_), (ox, oy))
    return img, meta
