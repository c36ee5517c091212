"""Batched Dormand-Prince 5(4) integrator with per-trajectory PI step control.

Many independent trajectories of an autonomous system are advanced together;
each keeps its own step size, direction and stopping state.  This is what
makes seed sweeps and ray-traced symbol tables affordable in numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Butcher tableau (Dormand & Prince 1980)
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th minus embedded 4th order weights
E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

SAFETY = 0.9
ALPHA = 0.7 / 5.0
BETA = 0.4 / 5.0
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0

COMPLETE = "complete"
MAX_STEPS = "max-steps"
STOPPED = "stopped"


@dataclass
class BatchResult:
    s: np.ndarray
    y: np.ndarray
    status: np.ndarray
    steps: np.ndarray


def hermite(s0, y0, f0, s1, y1, f1, s):
    """Cubic Hermite interpolant between two accepted steps (rowwise)."""
    h = (s1 - s0)[:, None]
    t = ((s - s0) / (s1 - s0))[:, None]
    h00 = 2 * t**3 - 3 * t**2 + 1
    h10 = t**3 - 2 * t**2 + t
    h01 = -2 * t**3 + 3 * t**2
    h11 = t**3 - t**2
    return h00 * y0 + h10 * h * f0 + h01 * y1 + h11 * h * f1


def _error_norm(err, y, ynew, tol):
    sc = tol + tol * np.maximum(np.abs(y), np.abs(ynew))
    return np.sqrt(np.mean((err / sc) ** 2, axis=1))


def _initial_step(f, y, f0, tol, span):
    sc = tol + tol * np.abs(y)
    d0 = np.sqrt(np.mean((y / sc) ** 2, axis=1))
    d1 = np.sqrt(np.mean((f0 / sc) ** 2, axis=1))
    h = np.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / np.maximum(d1, 1e-300))
    h = np.minimum(h, np.abs(span))
    return np.maximum(h, 1e-12)


def integrate_batch(f, y0, s_end, tol=1e-10, max_steps=1_000_000, on_step=None,
                    stop=None, h_max=None):
    """Integrate y' = f(y) for each row of ``y0`` from s = 0 to ``s_end[i]``.

    Parameters
    ----------
    f : callable
        Vectorized right-hand side, rows in -> rows out.
    y0 : (m, d) array
    s_end : (m,) array or scalar
        Signed end times; negative values integrate backward.
    on_step : callable, optional
        ``on_step(idx, s0, y0, f0, s1, y1, f1)`` after every accepted step;
        ``idx`` are the global row indices of the rows that stepped.
    stop : callable, optional
        ``stop(idx, s, y) -> bool mask``; rows returning True are frozen with
        status ``"stopped"``.
    h_max : float, optional
        Upper bound on |h|.
    """
    y = np.array(y0, dtype=float, copy=True)
    m, d = y.shape
    s_end = np.broadcast_to(np.asarray(s_end, dtype=float), (m,)).copy()
    s = np.zeros(m)
    status = np.full(m, COMPLETE, dtype=object)
    steps = np.zeros(m, dtype=np.int64)

    active = np.flatnonzero(s_end != 0.0)
    if active.size == 0:
        return BatchResult(s, y, status, steps)

    direction = np.sign(s_end)
    ya = y[active]
    fa = f(ya)
    h = _initial_step(f, ya, fa, tol, s_end[active])
    if h_max is not None:
        h = np.minimum(h, h_max)
    err_prev = np.full(active.size, 1e-4)
    sa = s[active]

    while active.size:
        dirs = direction[active]
        span = s_end[active] - sa
        hs = dirs * np.minimum(h, np.abs(span))
        k = [fa]
        for i in range(1, 7):
            acc = ya.copy()
            for j, a in enumerate(A[i]):
                if a != 0.0:
                    acc += (hs * a)[:, None] * k[j]
            k.append(f(acc))
        ynew = ya.copy()
        for j in range(6):
            if B5[j] != 0.0:
                ynew += (hs * B5[j])[:, None] * k[j]
        err = np.zeros_like(ya)
        for j in range(7):
            if E[j] != 0.0:
                err += (hs * E[j])[:, None] * k[j]
        en = _error_norm(err, ya, ynew, tol)
        finite = np.all(np.isfinite(ynew), axis=1) & np.isfinite(en)
        en = np.where(finite, en, np.inf)
        ok = en <= 1.0

        if ok.any():
            idx = active[ok]
            snew = sa[ok] + hs[ok]
            # land exactly on the end point when the step was clipped to it
            last = np.abs(span[ok]) <= np.abs(hs[ok])
            snew = np.where(last, s_end[idx], snew)
            if on_step is not None:
                on_step(idx, sa[ok], ya[ok], fa[ok], snew, ynew[ok], k[6][ok])
            sa = sa.copy()
            sa[ok] = snew
            ya = ya.copy()
            ya[ok] = ynew[ok]
            fa = fa.copy()
            fa[ok] = k[6][ok]
            steps[idx] += 1

        with np.errstate(divide="ignore"):
            fac_ok = SAFETY * np.maximum(en, 1e-10) ** (-ALPHA) * err_prev ** BETA
            fac_bad = SAFETY * np.where(np.isfinite(en), np.maximum(en, 1e-10), 1e10) ** (-0.2)
        fac = np.where(ok, np.clip(fac_ok, MIN_FACTOR, MAX_FACTOR), np.clip(fac_bad, MIN_FACTOR, 1.0))
        h = np.abs(hs) * fac
        if h_max is not None:
            h = np.minimum(h, h_max)
        err_prev = np.where(ok, np.maximum(en, 1e-4), err_prev)

        done = np.abs(s_end[active] - sa) <= 0.0
        if stop is not None and ok.any():
            halt = np.zeros(active.size, dtype=bool)
            halt[ok] = stop(active[ok], sa[ok], ya[ok])
            status[active[halt]] = STOPPED
            done |= halt
        over = steps[active] >= max_steps
        status[active[over & ~done]] = MAX_STEPS
        done |= over
        tiny = h < 1e-14 * np.maximum(1.0, np.abs(sa))
        status[active[tiny & ~done]] = MAX_STEPS
        done |= tiny
        if done.any():
            s[active[done]] = sa[done]
            y[active[done]] = ya[done]
            keep = ~done
            active, sa, ya, fa, h, err_prev = (
                active[keep], sa[keep], ya[keep], fa[keep], h[keep], err_prev[keep])

    return BatchResult(s, y, status, steps)
