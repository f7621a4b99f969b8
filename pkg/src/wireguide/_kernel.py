"""Compiled per-atom velocity-Verlet loop used by :func:`wireguide.dynamics.propagate`.

Each atom is integrated on its own from start to finish, so its result does
not depend on which other atoms are in the call.  The loop releases the GIL.
"""

import math

import numba
import numpy as np

# layout of the ``geo`` parameter vector
AX, P0, C, A2, BIAS, Q, GRAV = 0, 3, 6, 7, 8, 11, 14
GEO_SIZE = 17

# status codes
OK, NONFINITE = 0, 1


@numba.njit(cache=True, nogil=True, inline="always")
def _field(x0, x1, x2, geo, has_bias):
    ax, ay, az = geo[AX], geo[AX + 1], geo[AX + 2]
    d0 = x0 - geo[P0]
    d1 = x1 - geo[P0 + 1]
    d2 = x2 - geo[P0 + 2]
    along = d0 * ax + d1 * ay + d2 * az
    r0 = d0 - along * ax
    r1 = d1 - along * ay
    r2 = d2 - along * az
    rho2 = r0 * r0 + r1 * r1 + r2 * r2
    a2 = geo[A2]
    outside = rho2 >= a2
    inv = 1.0 / (rho2 if outside else a2)
    k = geo[C] * inv
    axr0 = ay * r2 - az * r1
    axr1 = az * r0 - ax * r2
    axr2 = ax * r1 - ay * r0
    b0 = k * axr0
    b1 = k * axr1
    b2 = k * axr2
    if has_bias:
        b0 += geo[BIAS]
        b1 += geo[BIAS + 1]
        b2 += geo[BIAS + 2]
    return r0, r1, r2, rho2, outside, inv, k, axr0, axr1, axr2, b0, b1, b2


@numba.njit(cache=True, nogil=True, inline="always")
def _step_terms(x0, x1, x2, v0, v1, v2, com, mu, geo, has_bias, has_grav, hbar2, thresh2):
    """Acceleration and rho^2 at x, plus the field terms for the flag test."""
    fld = _field(x0, x1, x2, geo, has_bias)
    r0, r1, r2, rho2, outside, inv, k, _, _, _, b0, b1, b2 = fld
    c = geo[C]
    bmag2 = b0 * b0 + b1 * b1 + b2 * b2
    if outside:
        gw = -2.0 * k * k
    else:
        gw = 2.0 * k * k
    g0 = gw * r0
    g1 = gw * r1
    g2 = gw * r2
    if has_bias:
        q0, q1, q2 = geo[Q], geo[Q + 1], geo[Q + 2]
        t = 0.0
        if outside:
            t = 2.0 * (r0 * q0 + r1 * q1 + r2 * q2) * inv * inv
        g0 += 2.0 * c * (q0 * inv - t * r0)
        g1 += 2.0 * c * (q1 * inv - t * r1)
        g2 += 2.0 * c * (q2 * inv - t * r2)
    # grad|B| = grad|B|^2 / (2|B|), zero on field zeros
    scale = -0.5 * com / math.sqrt(bmag2) if bmag2 > 0.0 else 0.0
    acc0 = scale * g0
    acc1 = scale * g1
    acc2 = scale * g2
    if has_grav:
        acc0 += geo[GRAV]
        acc1 += geo[GRAV + 1]
        acc2 += geo[GRAV + 2]
    return acc0, acc1, acc2, rho2, fld


@numba.njit(cache=True, nogil=True, inline="always")
def _flag(x0, x1, x2, v0, v1, v2, mu, geo, has_bias, hbar2, thresh2):
    """True when hbar |dB_perp/dt| / (mu |B|^2) exceeds the threshold (always on field zeros)."""
    r0, r1, r2, rho2, outside, inv, k, axr0, axr1, axr2, b0, b1, b2 = _field(x0, x1, x2, geo, has_bias)
    return _flag_terms(r0, r1, r2, outside, inv, k, axr0, axr1, axr2, b0, b1, b2, v0, v1, v2, mu, geo,
                       hbar2, thresh2)


@numba.njit(cache=True, nogil=True, inline="always")
def _flag_terms(r0, r1, r2, outside, inv, k, axr0, axr1, axr2, b0, b1, b2, v0, v1, v2, mu, geo, hbar2, thresh2):
    """Flag test from precomputed field terms, compared in squared, division-free form."""
    bmag2 = b0 * b0 + b1 * b1 + b2 * b2
    if not bmag2 > 0.0:
        return True
    ax, ay, az = geo[AX], geo[AX + 1], geo[AX + 2]
    axv0 = ay * v2 - az * v1
    axv1 = az * v0 - ax * v2
    axv2 = ax * v1 - ay * v0
    s = 0.0
    if outside:
        s = 2.0 * k * (r0 * v0 + r1 * v1 + r2 * v2) * inv
    db0 = k * axv0 - s * axr0
    db1 = k * axv1 - s * axr1
    db2 = k * axv2 - s * axr2
    bdb = b0 * db0 + b1 * db1 + b2 * db2
    # |dB_perp|^2 |B|^2 = |dB|^2 |B|^2 - (B.dB)^2
    perp2_b2 = (db0 * db0 + db1 * db1 + db2 * db2) * bmag2 - bdb * bdb
    lim = mu * bmag2
    return hbar2 * perp2_b2 > thresh2 * lim * lim * bmag2


@numba.njit(cache=True, nogil=True)
def run_atoms(
    x_in, v_in, com, mu, geo, has_bias, has_grav, hbar,
    dt, n_steps, dom2, thresh, collide, check_initial, rec_steps,
    rec_x, rec_v, rec_kind, kind, exit_step, flag_step, flag_pos, final_x, final_v, status,
):
    """Integrate every atom; outputs are written into the preallocated arrays.

    Atoms are processed in blocks, stepping the whole block together, but no
    arithmetic mixes atoms.  ``kind`` codes: 0 guided, 2 hit wire, 3 left
    domain (1 is applied by the caller from ``flag_step``).  ``status[i]`` is
    nonzero if atom ``i`` became non-finite; ``exit_step[i]`` then holds its
    last valid step.
    """
    n = x_in.shape[0]
    n_rec = rec_steps.shape[0]
    half = 0.5 * dt
    hbar2 = hbar * hbar
    thresh2 = thresh * thresh
    a2 = geo[A2]
    block = 64
    x = np.empty((block, 3))
    v = np.empty((block, 3))
    acc = np.empty((block, 3))
    live = np.empty(block, dtype=np.bool_)
    for b0 in range(0, n, block):
        b1 = min(n, b0 + block)
        nb = b1 - b0
        n_live = 0
        for j in range(nb):
            i = b0 + j
            x[j, 0], x[j, 1], x[j, 2] = x_in[i, 0], x_in[i, 1], x_in[i, 2]
            v[j, 0], v[j, 1], v[j, 2] = v_in[i, 0], v_in[i, 1], v_in[i, 2]
            a0_, a1_, a2_, rho2, _ = _step_terms(x[j, 0], x[j, 1], x[j, 2], v[j, 0], v[j, 1], v[j, 2],
                                              com[i], mu[i], geo, has_bias, has_grav, hbar2, thresh2)
            acc[j, 0], acc[j, 1], acc[j, 2] = a0_, a1_, a2_
            kind[i] = 0
            exit_step[i] = n_steps
            flag_step[i] = -1
            live[j] = True
            if check_initial and collide and rho2 <= a2:
                kind[i] = 2
                exit_step[i] = 0
                live[j] = False
            elif _flag(x[j, 0], x[j, 1], x[j, 2], v[j, 0], v[j, 1], v[j, 2], mu[i], geo, has_bias, hbar2, thresh2):
                flag_step[i] = 0
                flag_pos[i, 0], flag_pos[i, 1], flag_pos[i, 2] = x[j, 0], x[j, 1], x[j, 2]
            if live[j]:
                n_live += 1
        r = 0
        while r < n_rec and rec_steps[r] == 0:
            for j in range(nb):
                _record(r, b0 + j, x[j], v[j], kind, flag_step, rec_x, rec_v, rec_kind)
            r += 1
        step = 0
        while step < n_steps and n_live > 0:
            step += 1
            for j in range(nb):
                if not live[j]:
                    continue
                i = b0 + j
                v0 = v[j, 0] + half * acc[j, 0]
                v1 = v[j, 1] + half * acc[j, 1]
                v2 = v[j, 2] + half * acc[j, 2]
                x0 = x[j, 0] + dt * v0
                x1 = x[j, 1] + dt * v1
                x2 = x[j, 2] + dt * v2
                a0_, a1_, a2_, rho2, fld = _step_terms(x0, x1, x2, v0, v1, v2, com[i], mu[i], geo, has_bias,
                                                       has_grav, hbar2, thresh2)
                v0 += half * a0_
                v1 += half * a1_
                v2 += half * a2_
                if not (math.isfinite(x0) and math.isfinite(x1) and math.isfinite(x2)
                        and math.isfinite(v0) and math.isfinite(v1) and math.isfinite(v2)):
                    status[i] = NONFINITE
                    exit_step[i] = step - 1
                    live[j] = False
                    n_live -= 1
                    continue
                x[j, 0], x[j, 1], x[j, 2] = x0, x1, x2
                v[j, 0], v[j, 1], v[j, 2] = v0, v1, v2
                acc[j, 0], acc[j, 1], acc[j, 2] = a0_, a1_, a2_
                if flag_step[i] < 0 and _flag_terms(fld[0], fld[1], fld[2], fld[4], fld[5], fld[6], fld[7], fld[8],
                                                    fld[9], fld[10], fld[11], fld[12], v0, v1, v2, mu[i], geo,
                                                    hbar2, thresh2):
                    flag_step[i] = step
                    flag_pos[i, 0], flag_pos[i, 1], flag_pos[i, 2] = x0, x1, x2
                if collide and rho2 <= a2:
                    kind[i] = 2
                elif rho2 >= dom2:
                    kind[i] = 3
                if kind[i]:
                    exit_step[i] = step
                    live[j] = False
                    n_live -= 1
            while r < n_rec and rec_steps[r] == step:
                for j in range(nb):
                    _record(r, b0 + j, x[j], v[j], kind, flag_step, rec_x, rec_v, rec_kind)
                r += 1
        # frozen states for the remaining records
        while r < n_rec:
            for j in range(nb):
                _record(r, b0 + j, x[j], v[j], kind, flag_step, rec_x, rec_v, rec_kind)
            r += 1
        for j in range(nb):
            i = b0 + j
            final_x[i, 0], final_x[i, 1], final_x[i, 2] = x[j, 0], x[j, 1], x[j, 2]
            final_v[i, 0], final_v[i, 1], final_v[i, 2] = v[j, 0], v[j, 1], v[j, 2]


@numba.njit(cache=True, nogil=True, inline="always")
def _record(r, i, xj, vj, kind, flag_step, rec_x, rec_v, rec_kind):
    rec_x[r, i, 0], rec_x[r, i, 1], rec_x[r, i, 2] = xj[0], xj[1], xj[2]
    rec_v[r, i, 0], rec_v[r, i, 1], rec_v[r, i, 2] = vj[0], vj[1], vj[2]
    if kind[i]:
        rec_kind[r, i] = kind[i]
    else:
        rec_kind[r, i] = 1 if flag_step[i] >= 0 else 0


def geometry_vector(cfg) -> tuple[np.ndarray, bool, bool]:
    from .constants import MU0_OVER_2PI

    w = cfg.wire
    geo = np.zeros(GEO_SIZE)
    geo[AX:AX + 3] = w.axis
    geo[P0:P0 + 3] = w.axis_point
    geo[C] = MU0_OVER_2PI * w.current
    geo[A2] = w.radius * w.radius
    bias = np.asarray(cfg.bias.vector, dtype=float)
    geo[BIAS:BIAS + 3] = bias
    bx, by, bz = bias
    ax, ay, az = w.axis
    geo[Q:Q + 3] = (by * az - bz * ay, bz * ax - bx * az, bx * ay - by * ax)
    if cfg.gravity_on:
        geo[GRAV:GRAV + 3] = [cfg.g * g for g in cfg.gravity_direction]
    return geo, bool(cfg.bias.magnitude != 0.0), bool(cfg.gravity_on)
