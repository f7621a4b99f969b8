import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wireguide.constants import GAUSS
from wireguide.ensemble import EnsembleSnapshot
from wireguide.fields import FieldConfig, WireSpec
from wireguide.imaging import (
    CcdImage,
    Profile,
    axial_survival_probability,
    central_cut,
    detected_fraction,
    difference_profile,
    double_gaussian,
    fit_double_gaussian,
    fit_rs_vs_current,
    image_axes,
    peak_in_dip,
    poisson_resample,
    project_positions,
    project_profile,
    read_pgm,
    render_ccd,
    ring_statistic,
    write_pgm,
)

CFG = FieldConfig(WireSpec(1.0))  # wire along x, gravity along -z
X = np.arange(-100, 101) * 50e-6


def truth(a1=300.0, s1=0.3e-3, a2=100.0, s2=3e-3, mu1=0.0, mu2=0.0, c=0.0):
    return np.array([a1, mu1, s1, a2, mu2, s2, c])


# ---- geometry and rendering


def test_image_axes_default_and_vertical_wire():
    along, horiz, up = image_axes(WireSpec(1.0), (0, 0, -1))
    assert np.allclose(along, [1, 0, 0]) and np.allclose(up, [0, 0, 1]) and np.allclose(horiz, [0, 1, 0])
    along, horiz, up = image_axes(WireSpec(1.0), (-1, 0, 0))
    assert abs(up @ along) < 1e-15 and abs(horiz @ along) < 1e-15 and abs(horiz @ up) < 1e-15


def test_project_positions_views():
    hv = project_positions([[3e-3, 1e-3, 2e-3]], "top", CFG)
    assert np.allclose(hv, [[1e-3, 2e-3]])
    hv = project_positions([[3e-3, 1e-3, 2e-3]], "side", CFG)
    assert np.allclose(hv, [[3e-3, 2e-3]])
    with pytest.raises(ValueError):
        project_positions([[0, 0, 0]], "front", CFG)


def test_single_atom_lands_in_central_pixel():
    img = render_ccd([[0.0, 0.0, 0.0]], "top", CFG, fov=(1.05e-3, 1.05e-3), pixel_size=50e-6)
    assert img.shape == (21, 21)
    assert img.counts[10, 10] == 1 and img.total == 1


def test_atoms_outside_fov_are_dropped():
    pts = [[0, 0, 0], [0, 0.1, 0], [0, 0, -0.1]]
    img = render_ccd(pts, "top", CFG)
    assert img.total == 1
    assert img.fov == pytest.approx((0.01, 0.01))


def test_render_rejects_bad_pixel():
    with pytest.raises(ValueError):
        render_ccd([[0, 0, 0]], "top", CFG, pixel_size=0.0)


def test_uniform_cloud_gives_uniform_pixels():
    rng = np.random.default_rng(0)
    n = 400_000
    pts = np.column_stack([np.zeros(n), rng.uniform(-5e-3, 5e-3, n), rng.uniform(-5e-3, 5e-3, n)])
    img = render_ccd(pts, "top", CFG, pixel_size=500e-6)
    mean = n / img.counts.size
    assert img.total == n
    assert np.all(np.abs(img.counts - mean) < 5 * math.sqrt(mean))


@settings(max_examples=30)
@given(st.integers(0, 2000), st.sampled_from(["top", "side"]), st.floats(20e-6, 1e-3))
def test_projection_conserves_counts(n, view, pixel):
    rng = np.random.default_rng(n)
    pts = rng.normal(0, 3e-3, (n, 3))
    img = render_ccd(pts, view, CFG, pixel_size=pixel)
    assert project_profile(img, "horizontal").total == img.total
    assert project_profile(img, "vertical").total == img.total
    assert img.total <= n


def test_poisson_resample_is_seeded():
    img = render_ccd(np.random.default_rng(1).normal(0, 1e-3, (5000, 3)), "top", CFG, pixel_size=250e-6)
    a, b = poisson_resample(img, 3), poisson_resample(img, 3)
    assert np.array_equal(a.counts, b.counts)
    assert abs(a.total - img.total) < 5 * math.sqrt(img.total)


def test_pgm_round_trip(tmp_path):
    counts = np.arange(12, dtype=np.int64).reshape(3, 4) * 1000
    img = CcdImage("side", counts, 1e-4, (4e-4, 3e-4), (-2e-4, -1.5e-4))
    path = tmp_path / "img.pgm"
    write_pgm(path, img, {"seed": 7})
    back, meta = read_pgm(path)
    assert np.array_equal(back.counts, counts)
    assert back.view == "side" and back.pixel_size == pytest.approx(1e-4)
    assert back.origin == pytest.approx(img.origin) and meta["seed"] == "7"
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n")
    # row 0 of the file is the top of the image: the largest counts
    body = raw[-24:]
    assert int.from_bytes(body[:2], "big") == counts[2, 0]


# ---- profiles


def test_profile_validation():
    with pytest.raises(ValueError):
        Profile([0.0, 0.0, 1.0], [1, 2, 3])
    with pytest.raises(ValueError):
        Profile([0.0, 1.0], [1.0])


def test_symmetric_image_gives_symmetric_profile():
    counts = np.zeros((5, 7), dtype=np.int64)
    counts[2] = [1, 2, 3, 4, 3, 2, 1]
    img = CcdImage("top", counts, 1.0, (7.0, 5.0), (-3.5, -2.5))
    prof = project_profile(img)
    assert np.array_equal(prof.values, prof.values[::-1])
    assert np.allclose(prof.coordinates, np.arange(-3, 4))


def test_central_cut_selects_band():
    counts = np.zeros((7, 5), dtype=np.int64)
    counts[3] = 10
    counts[0] = 99
    img = CcdImage("top", counts, 1.0, (5.0, 7.0), (-2.5, -3.5))
    cut = central_cut(img, "horizontal", 1, center=(0.0, 0.0))
    assert np.all(cut.values == 10)
    with pytest.raises(ValueError):
        central_cut(CcdImage("top", np.zeros((3, 3), np.int64), 1.0, (3.0, 3.0), (0, 0)))


def test_difference_profile():
    a = Profile(X, np.exp(-X**2 / 1e-6))
    assert np.all(difference_profile(a, a).values == 0)
    with pytest.raises(ValueError):
        difference_profile(a, Profile(X[:-1], a.values[:-1]))
    b = Profile(X, a.values[::-1].copy())
    assert difference_profile(a, b).total == pytest.approx(0.0, abs=1e-12)


def test_peak_in_dip_oracle():
    narrow = 50 * np.exp(-0.5 * (X / 0.3e-3) ** 2)
    dip = -30 * np.exp(-0.5 * (X / 2e-3) ** 2)
    res = peak_in_dip(Profile(X, narrow + dip), 0.0)
    assert res["peak_in_dip"] and res["center_value"] == pytest.approx(20.0)
    assert not peak_in_dip(Profile(X, narrow), 0.0)["peak_in_dip"]


# ---- double Gaussian fit


def test_noiseless_recovery():
    p = truth()
    fit = fit_double_gaussian(Profile(X, double_gaussian(X, p)))
    assert fit.converged and not fit.degenerate
    got = fit.params
    for k in (0, 2, 3, 5):
        assert got[k] == pytest.approx(p[k], rel=1e-6)
    assert abs(got[1]) < 1e-9 and abs(got[4]) < 1e-9
    assert fit.trapped_atoms == pytest.approx(300 * 0.3e-3 * math.sqrt(2 * math.pi) / 50e-6, rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_noisy_recovery(seed):
    # Poisson counts over a 20 mm window; a narrower one leaves a2 and the offset degenerate
    p = truth(a1=3000, a2=1000, mu1=0.2e-3, c=50.0)
    x = np.arange(-200, 201) * 50e-6
    rng = np.random.default_rng(seed)
    y = rng.poisson(double_gaussian(x, p)).astype(float)
    fit = fit_double_gaussian(Profile(x, y))
    assert fit.converged
    assert fit.a1 == pytest.approx(3000, rel=0.05)
    assert fit.a2 == pytest.approx(1000, rel=0.05)


def test_single_gaussian_has_no_trapped_component():
    y = 500 * np.exp(-0.5 * (X / 2e-3) ** 2)
    fit = fit_double_gaussian(Profile(X, y))
    total = fit.trapped_atoms + fit.background_atoms
    assert abs(fit.trapped_atoms) <= 0.01 * total


def test_refit_is_idempotent():
    rng = np.random.default_rng(1)
    y = rng.poisson(double_gaussian(X, truth(c=3.0))).astype(float)
    prof = Profile(X, y)
    first = fit_double_gaussian(prof)
    again = fit_double_gaussian(prof, init=first.params)
    # centers are compared on the scale of the profile extent
    scale = np.maximum(np.abs(first.params), [0, 5e-3, 0, 0, 5e-3, 0, 0])
    assert np.all(np.abs(again.params - first.params) <= 1e-10 * scale)


def test_fit_needs_seven_points_and_never_raises_on_budget():
    with pytest.raises(ValueError):
        fit_double_gaussian(Profile(X[:6], np.ones(6)))
    fit = fit_double_gaussian(Profile(X, double_gaussian(X, truth())), init=truth(a1=1, s1=1e-3), max_iter=1)
    assert isinstance(fit.converged, bool)


def test_degenerate_flag():
    p = truth(s1=1e-3, s2=1.005e-3)
    fit = fit_double_gaussian(Profile(X, double_gaussian(X, p)), init=p)
    assert fit.degenerate


# ---- detected fraction


def test_axial_model():
    assert axial_survival_probability(0.0, 1e-4, 0.5, 0.02) == pytest.approx(1.0)
    t = np.linspace(0, 0.05, 30)
    p = axial_survival_probability(t, 0.68e-3, 0.487, 0.02)
    assert np.all(np.diff(p) <= 0) and p[-1] < 0.5
    # decay time of order half-length / sigma_v
    assert 0.3 < axial_survival_probability(0.01 / 0.487, 0.68e-3, 0.487, 0.02) < 0.8
    sag = axial_survival_probability(0.03, 0.68e-3, 0.487, 0.02, g_axial=-9.8)
    assert sag < axial_survival_probability(0.03, 0.68e-3, 0.487, 0.02)


def test_detected_fraction_counts():
    pos = np.array([[0.0, 0, 1e-3], [0.015, 0, 1e-3], [0.0, 0, 1e-3], [0.0, 0, 1e-3]])
    snap = EnsembleSnapshot(0.0, pos, np.zeros((4, 3)), np.zeros(4, np.int8), np.array([0, 0, 2, 0], np.int8))
    df = detected_fraction([snap], CFG, np.array([True, True, True, False]), 1e-3, 0.5)
    assert df.fraction[0] == pytest.approx(0.25)
    assert df.model[0] == pytest.approx(0.75)


# ---- expansion shape and regression


def _cut(values):
    return Profile(np.arange(len(values), dtype=float), np.asarray(values, dtype=float))


def test_ring_statistic_oracles():
    x = np.linspace(-5, 5, 101)
    ring = np.exp(-0.5 * ((np.abs(x) - 3) / 0.5) ** 2)
    m, verdict = ring_statistic(Profile(x, ring))
    assert m > 0.95 and verdict == "ring"
    m, verdict = ring_statistic(Profile(x, np.exp(-0.5 * x**2)))
    assert m < 0.01 and verdict == "unimodal"
    assert ring_statistic(_cut([4, 4, 3, 3, 3, 4, 4]))[1] == "ambiguous"
    with pytest.raises(ValueError):
        ring_statistic(_cut([]))
    with pytest.raises(ValueError):
        ring_statistic(_cut([0, 0, 0]))


def test_line_fit_exact():
    pts = [(i, 2e-4 * i) for i in (0.25, 0.5, 0.75, 1.0)]
    fit = fit_rs_vs_current(pts)
    assert fit.r_squared == pytest.approx(1.0)
    assert abs(fit.intercept) < 1e-18
    assert abs(fit.slope - 2e-7 / (10 * GAUSS)) / fit.slope < 1e-12
    fit20 = fit_rs_vs_current([(i, 2e-7 * i / (20 * GAUSS)) for i in (0.25, 0.5, 0.75, 1.0)])
    assert fit20.slope == pytest.approx(fit.slope / 2, rel=1e-12)
    with pytest.raises(ValueError):
        fit_rs_vs_current(pts[:2])
