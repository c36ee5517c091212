"""Bicharacteristic flow of h2(x, xi) = A(x) xi . xi and its diagnostics.

The flow is

    dX/ds = 2 A(X) Xi,        dXi/ds = -grad_x (A(X) Xi . Xi),

integrated in batches with the Dormand-Prince pair of :mod:`integrate`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import integrate as spi

from .coeffields import CoefficientField
from .integrate import COMPLETE, MAX_STEPS, STOPPED, hermite, integrate_batch

DEFAULT_TOL = 1e-10
DEFAULT_MAX_STEPS = 1_000_000
LEFT_DOMAIN = "left-domain"


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "xi", np.atleast_1d(np.asarray(self.xi, dtype=float)))
        if self.x.shape != self.xi.shape:
            raise ValueError("x and xi must have the same dimension")

    def require_seed(self):
        if not np.linalg.norm(self.xi) > 0:
            raise ValueError("flow seeds need xi != 0")


def h2(field: CoefficientField, x, xi):
    """Vectorized principal symbol sum_jk a_jk(x) xi_j xi_k."""
    a = field(np.asarray(x, dtype=float))
    xi = np.asarray(xi, dtype=float)
    return np.einsum("...jk,...j,...k->...", a, xi, xi)


def hamiltonian(field: CoefficientField, p: PhasePoint) -> float:
    return float(h2(field, p.x, p.xi))


def flow_rhs(field: CoefficientField, integrands=()):
    """Right-hand side on rows [X, Xi, extra...]; extras are d/ds of g(X, Xi)."""
    n = field.dim

    def f(y):
        X = y[:, :n]
        Xi = y[:, n:2 * n]
        a = field(X)
        g = field.grad(X)
        dX = 2.0 * np.matmul(a, Xi[:, :, None])[:, :, 0]
        q = np.matmul(g, Xi[:, None, :, None])[..., 0]
        dXi = -np.matmul(q, Xi[:, :, None])[:, :, 0]
        parts = [dX, dXi]
        for fn in integrands:
            parts.append(np.asarray(fn(X, Xi), dtype=float).reshape(len(y), -1))
        return np.concatenate(parts, axis=1)

    return f


@dataclass
class RayTrajectory:
    """Sampled bicharacteristic with the derivative at every sample.

    Samples are ordered by increasing s and include s = 0.
    """

    s: np.ndarray
    X: np.ndarray
    Xi: np.ndarray
    dX: np.ndarray
    dXi: np.ndarray
    h2_values: np.ndarray
    field_ref: str
    seed: PhasePoint
    tol: float
    status: str = COMPLETE
    extras: dict = dc_field(default_factory=dict)

    @property
    def samples(self):
        return [(float(s), X.copy(), Xi.copy()) for s, X, Xi in zip(self.s, self.X, self.Xi)]

    @property
    def dim(self):
        return self.X.shape[1]

    def h2_drift(self) -> float:
        """max |h2 - h2(0)| / max(|h2(0)|, |xi0|^2).

        Null covectors of indefinite fields have h2(0) = 0, so the reference
        scale falls back to |xi0|^2.
        """
        ref = max(abs(self.h2_values[self.i0]), float(self.seed.xi @ self.seed.xi))
        return float(np.max(np.abs(self.h2_values - self.h2_values[self.i0])) / ref)

    @property
    def i0(self) -> int:
        return int(np.flatnonzero(self.s == 0.0)[0])

    def state_at(self, s):
        """Hermite interpolation of (X, Xi) at times inside the sampled span."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if s.min() < self.s[0] or s.max() > self.s[-1]:
            raise ValueError("requested time outside the trajectory span")
        j = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        if len(self.s) == 1:
            return self.X[[0] * len(s)], self.Xi[[0] * len(s)]
        y = np.concatenate([self.X, self.Xi], axis=1)
        f = np.concatenate([self.dX, self.dXi], axis=1)
        out = hermite(self.s[j], y[j], f[j], self.s[j + 1], y[j + 1], f[j + 1], s)
        n = self.dim
        return out[:, :n], out[:, n:]

    def to_csv(self, path):
        n = self.dim
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s"] + [f"X{i + 1}" for i in range(n)] + [f"Xi{i + 1}" for i in range(n)] + ["h2"])
            for k in range(len(self.s)):
                w.writerow([repr(float(self.s[k]))] + [repr(float(v)) for v in self.X[k]]
                           + [repr(float(v)) for v in self.Xi[k]] + [repr(float(self.h2_values[k]))])


class _Recorder:
    def __init__(self):
        self.chunks = []

    def __call__(self, idx, s0, y0, f0, s1, y1, f1):
        self.chunks.append((idx.copy(), s1.copy(), y1.copy(), f1.copy()))

    def split(self, m, width):
        if not self.chunks:
            return [(np.empty(0), np.empty((0, width)), np.empty((0, width)))] * m
        idx = np.concatenate([c[0] for c in self.chunks])
        s = np.concatenate([c[1] for c in self.chunks])
        y = np.concatenate([c[2] for c in self.chunks])
        f = np.concatenate([c[3] for c in self.chunks])
        order = np.argsort(idx, kind="stable")
        idx, s, y, f = idx[order], s[order], y[order], f[order]
        bounds = np.searchsorted(idx, np.arange(m + 1))
        return [(s[bounds[i]:bounds[i + 1]], y[bounds[i]:bounds[i + 1]], f[bounds[i]:bounds[i + 1]])
                for i in range(m)]


def integrate_rays(field, x0, xi0, s_end, tol=DEFAULT_TOL, max_steps=DEFAULT_MAX_STEPS,
                   integrands=(), stop_radius=None, record=False, h_max=None):
    """Advance a batch of rays; returns (BatchResult, per-ray samples or None).

    ``stop_radius`` freezes rays once |X| exceeds it (status ``"stopped"``).
    Extra integrands start at 0 and are appended after [X, Xi].
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    m = len(x0)
    extra0 = np.zeros((m, sum(_width(g, field) for g in integrands)))
    y0 = np.concatenate([x0, xi0, extra0], axis=1)
    f = flow_rhs(field, integrands)
    n = field.dim
    stop = None
    if stop_radius is not None:
        def stop(idx, s, y):
            return np.linalg.norm(y[:, :n], axis=1) >= stop_radius
    rec = _Recorder() if record else None
    res = integrate_batch(f, y0, s_end, tol=tol, max_steps=max_steps, on_step=rec,
                          stop=stop, h_max=h_max)
    pieces = rec.split(m, y0.shape[1]) if record else None
    return res, pieces, f, y0


def _width(g, field):
    probe = g(np.zeros((1, field.dim)), np.ones((1, field.dim)))
    return int(np.asarray(probe).reshape(1, -1).shape[1])


def trace_rays(field, seeds, s_span, tol=DEFAULT_TOL, max_steps=DEFAULT_MAX_STEPS,
               domain_radius=None, integrands=()):
    """Trace several seeds over a common span; returns a list of RayTrajectory."""
    s_min, s_max = map(float, s_span)
    if not s_min <= 0.0 <= s_max:
        raise ValueError("s_span must contain 0")
    seeds = list(seeds)
    for p in seeds:
        p.require_seed()
    m = len(seeds)
    x0 = np.array([p.x for p in seeds])
    xi0 = np.array([p.xi for p in seeds])
    # rows 0..m-1 forward, m..2m-1 backward
    res, pieces, f, y0 = integrate_rays(
        field, np.concatenate([x0, x0]), np.concatenate([xi0, xi0]),
        np.concatenate([np.full(m, s_max), np.full(m, s_min)]),
        tol=tol, max_steps=max_steps, integrands=integrands,
        stop_radius=domain_radius, record=True)
    n = field.dim
    out = []
    f0 = f(y0[:m])
    for i, p in enumerate(seeds):
        sf, yf, ff = pieces[i]
        sb, yb, fb = pieces[m + i]
        s = np.concatenate([sb[::-1], [0.0], sf])
        y = np.concatenate([yb[::-1], y0[i:i + 1], yf])
        fy = np.concatenate([fb[::-1], f0[i:i + 1], ff])
        stats = [res.status[i], res.status[m + i]]
        status = COMPLETE
        if MAX_STEPS in stats:
            status = MAX_STEPS
        elif STOPPED in stats:
            status = LEFT_DOMAIN
        X, Xi = y[:, :n], y[:, n:2 * n]
        extras = {"integrals": y[:, 2 * n:]} if integrands else {}
        out.append(RayTrajectory(s, X, Xi, fy[:, :n], fy[:, n:2 * n], h2(field, X, Xi),
                                 field.name, p, tol, status, extras))
    return out


def trace_ray(field: CoefficientField, seed: PhasePoint, s_span=(0.0, 10.0), tol=DEFAULT_TOL,
              max_steps=DEFAULT_MAX_STEPS, domain_radius=None) -> RayTrajectory:
    """Adaptive solution of the flow through ``seed`` over ``s_span``."""
    return trace_rays(field, [seed], s_span, tol, max_steps, domain_radius)[0]


def flow_endpoints(field, x0, xi0, s, tol=DEFAULT_TOL, max_steps=DEFAULT_MAX_STEPS):
    """(X(s), Xi(s)) for a batch of seeds and signed times, without sampling."""
    res, _, _, _ = integrate_rays(field, x0, xi0, s, tol=tol, max_steps=max_steps)
    n = field.dim
    return res.y[:, :n], res.y[:, n:2 * n]


def homogeneity_check(field, seed: PhasePoint, t: float, s: float, tol=DEFAULT_TOL):
    """(|X(s;x,t xi) - X(ts;x,xi)|, |Xi(s;x,t xi) - t Xi(ts;x,xi)|)."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.array([seed.x, seed.x])
    xi = np.array([t * seed.xi, seed.xi])
    X, Xi = flow_endpoints(field, x, xi, np.array([s, t * s]), tol)
    return float(np.linalg.norm(X[0] - X[1])), float(np.linalg.norm(Xi[0] - t * Xi[1]))


def along_flow_derivative(field, phi, p: PhasePoint, h: float = 1e-3, tol=DEFAULT_TOL):
    """Central difference of phi along the flow, [phi(flow(h)) - phi(flow(-h))] / 2h."""
    x = np.array([p.x, p.x])
    xi = np.array([p.xi, p.xi])
    X, Xi = flow_endpoints(field, x, xi, np.array([h, -h]), tol)
    vals = np.asarray(phi(X, Xi))
    return (vals[0] - vals[1]) / (2.0 * h)


# ---------------------------------------------------------------- escape

def radial_rate(field, X, Xi):
    """d/ds |X|^2 = 4 <X, A(X) Xi>."""
    a = field(X)
    return 4.0 * np.einsum("...j,...jk,...k->...", X, a, Xi)


def escape_time(traj: RayTrajectory, M1: float, field: CoefficientField | None = None):
    """Earliest s >= 0 with |X(s)| >= M1 and d/ds|X|^2 >= 0, or None.

    ``field`` must be the field that generated ``traj``; when omitted the
    velocity stored with the samples is used (dX/ds = 2 A Xi gives the same
    rate 2 <X, dX/ds>).
    """
    fwd = traj.s >= 0.0
    s = traj.s[fwd]
    X, Xi, dX = traj.X[fwd], traj.Xi[fwd], traj.dX[fwd]

    def ok_at(Xv, Xiv, dXv):
        r = np.linalg.norm(Xv, axis=-1)
        rate = radial_rate(field, Xv, Xiv) if field is not None else 2.0 * np.sum(Xv * dXv, axis=-1)
        return (r >= M1) & (rate >= 0.0)

    good = ok_at(X, Xi, dX)
    hits = np.flatnonzero(good)
    if hits.size == 0:
        return None
    i = int(hits[0])
    if i == 0:
        return 0.0
    lo, hi = s[i - 1], s[i]
    while hi - lo > traj.tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        Xm, Xim = traj.state_at(mid)
        dXm = 2.0 * np.einsum("mjk,mk->mj", field(Xm), Xim) if field is not None else None
        if dXm is None:
            # velocity from the interpolant derivative is not stored; use
            # a symmetric difference of the interpolant
            eps = 1e-6 * (hi - lo)
            Xp, _ = traj.state_at(min(mid + eps, traj.s[-1]))
            Xn, _ = traj.state_at(max(mid - eps, traj.s[0]))
            dXm = (Xp - Xn) / (2 * eps)
        if ok_at(Xm, Xim, dXm)[0]:
            hi = mid
        else:
            lo = mid
    return float(hi)


def fit_escape_constant(traj: RayTrajectory, M1: float, s0: float) -> float:
    """Largest c2 with |X(s)|^2 >= c2 (s - s0)^2 + M1^2 on the samples beyond s0."""
    sel = traj.s > s0 + 1e-9 * max(1.0, s0)
    if not sel.any():
        return math.nan
    r2 = np.sum(traj.X[sel] ** 2, axis=1)
    return float(np.min((r2 - M1**2) / (traj.s[sel] - s0) ** 2))


def xi_bounds(traj: RayTrajectory):
    """(min |Xi|, max |Xi|) over samples."""
    r = np.linalg.norm(traj.Xi, axis=1)
    return float(r.min()), float(r.max())


def dyadic_occupation(traj: RayTrajectory, s0: float, k_max: int | None = None,
                      resolution: int = 64):
    """Measure of I_k = {s in [0, s0] : 2^k <= |X(s)| <= 2^(k+1)} for k >= 1.

    Each accepted step is resampled at ``resolution`` points; |X| is taken
    piecewise linear between them, which is exact for straight rays.
    """
    if s0 <= 0:
        return {}
    knots = traj.s[(traj.s > 0) & (traj.s < s0)]
    edges = np.concatenate([[0.0], knots, [s0]])
    t = np.concatenate([np.linspace(a, b, resolution, endpoint=False) for a, b in zip(edges[:-1], edges[1:])] + [[s0]])
    X, _ = traj.state_at(t)
    r = np.linalg.norm(X, axis=1)
    top = int(np.floor(np.log2(max(r.max(), 2.0))))
    if k_max is not None:
        top = min(top, k_max)
    out = {}
    for k in range(1, top + 1):
        lo, hi = 2.0**k, 2.0 ** (k + 1)
        out[k] = float(_linear_measure(t, r, lo, hi))
    return out


def _linear_measure(t, r, lo, hi):
    """Measure of {lo <= r <= hi} for r piecewise linear on knots t."""
    r0, r1 = r[:-1], r[1:]
    dt = np.diff(t)
    a = np.minimum(r0, r1)
    b = np.maximum(r0, r1)
    span = b - a
    flat = span <= 1e-15 * np.maximum(1.0, b)
    overlap = np.clip(np.minimum(b, hi) - np.maximum(a, lo), 0.0, None)
    frac = np.where(flat, ((a >= lo) & (a <= hi)).astype(float), overlap / np.where(flat, 1.0, span))
    return float(np.sum(frac * dt))


def dyadic_ratios(occupation: dict):
    return {k: v / 2.0**k for k, v in occupation.items()}


def nontrapping_probe(field, seeds, mu: float, s_max: float, tol=DEFAULT_TOL,
                      max_steps=DEFAULT_MAX_STEPS):
    """Per seed: first s with |X(s)| >= mu (bisection refined), or undetermined.

    Returns a list of dicts ``{"verdict": "escaped"|"undetermined"|"error",
    "s": float|None, "status": str}``.
    """
    seeds = list(seeds)
    m = len(seeds)
    x0 = np.array([p.x for p in seeds], dtype=float)
    xi0 = np.array([p.xi for p in seeds], dtype=float)
    n = field.dim
    verdicts = [None] * m
    r0 = np.linalg.norm(x0, axis=1)
    for i in np.flatnonzero(r0 >= mu):
        verdicts[i] = {"verdict": "escaped", "s": 0.0, "status": COMPLETE}
    todo = np.array([i for i in range(m) if verdicts[i] is None], dtype=int)
    if todo.size:
        last = {}

        def on_step(idx, s0, y0, f0, s1, y1, f1):
            for name, arr in (("s0", s0), ("y0", y0), ("f0", f0), ("s1", s1), ("y1", y1), ("f1", f1)):
                buf = last.setdefault(name, np.zeros((len(todo),) + arr.shape[1:]))
                buf[idx] = arr

        def stop(idx, s, y):
            return np.linalg.norm(y[:, :n], axis=1) >= mu

        y0 = np.concatenate([x0[todo], xi0[todo]], axis=1)
        res = integrate_batch(flow_rhs(field), y0, s_max, tol=tol, max_steps=max_steps,
                              on_step=on_step, stop=stop)
        for j, i in enumerate(todo):
            st = res.status[j]
            if st == STOPPED:
                lo, hi = last["s0"][j], last["s1"][j]
                args = [last[k][j:j + 1] for k in ("s0", "y0", "f0", "s1", "y1", "f1")]
                while hi - lo > tol * max(1.0, hi):
                    mid = 0.5 * (lo + hi)
                    y = hermite(*args, np.array([mid]))
                    if np.linalg.norm(y[0, :n]) >= mu:
                        hi = mid
                    else:
                        lo = mid
                verdicts[i] = {"verdict": "escaped", "s": float(hi), "status": COMPLETE}
            elif st == MAX_STEPS:
                verdicts[i] = {"verdict": "error", "s": None, "status": MAX_STEPS}
            else:
                verdicts[i] = {"verdict": "undetermined", "s": None, "status": COMPLETE}
    return verdicts


def seed_grid(n: int, positions_per_axis: int = 4, extent: float = 3.0, directions: int = 16):
    """Deterministic seeds: a cube of positions times unit directions."""
    from .coeffields import fibonacci_directions

    axes = [np.linspace(-extent, extent, positions_per_axis)] * n
    pos = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    dirs = fibonacci_directions(n, directions)
    return [PhasePoint(x, d) for x in pos for d in dirs]


# ---------------------------------------------------------------- variational flow

def _variational_rhs(field: CoefficientField):
    n = field.dim

    def f(y):
        m = len(y)
        X = y[:, :n]
        Xi = y[:, n:2 * n]
        J = y[:, 2 * n:].reshape(m, 2 * n, 2 * n)
        a = field(X)
        g = field.grad(X)
        hess = field.hessian(X)
        dX = 2.0 * np.matmul(a, Xi[:, :, None])[:, :, 0]
        q = np.matmul(g, Xi[:, None, :, None])[..., 0]
        dXi = -np.matmul(q, Xi[:, :, None])[:, :, 0]
        dx, dxi = J[:, :n, :], J[:, n:, :]
        # d(dX) = 2 (d_l A dx_l) Xi + 2 A dxi
        ddx = 2.0 * np.einsum("mljk,mlc,mk->mjc", g, dx, Xi) + 2.0 * np.einsum("mjk,mkc->mjc", a, dxi)
        # d(dXi)_l = -d_q d_l a_jk dx_q Xi_j Xi_k - 2 d_l a_jk Xi_j dxi_k
        ddxi = (-np.einsum("mqljk,mqc,mj,mk->mlc", hess, dx, Xi, Xi)
                - 2.0 * np.einsum("mljk,mj,mkc->mlc", g, Xi, dxi))
        dJ = np.concatenate([ddx, ddxi], axis=1).reshape(m, -1)
        return np.concatenate([dX, dXi, dJ], axis=1)

    return f


def flow_jacobians(field, x0, xi0, s, tol=DEFAULT_TOL, max_steps=DEFAULT_MAX_STEPS):
    """Batched d(X, Xi)/d(x0, xi0) at signed times ``s``; shape (m, 2n, 2n)."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xi0 = np.atleast_2d(np.asarray(xi0, dtype=float))
    m, n = x0.shape
    eye = np.broadcast_to(np.eye(2 * n).reshape(1, -1), (m, 4 * n * n))
    y0 = np.concatenate([x0, xi0, eye], axis=1)
    res = integrate_batch(_variational_rhs(field), y0, s, tol=tol, max_steps=max_steps)
    return res.y[:, 2 * n:].reshape(m, 2 * n, 2 * n)


def flow_jacobian(field, seed: PhasePoint, s: float, tol=DEFAULT_TOL):
    """Jacobian of (X, Xi) at time s with respect to (x0, xi0)."""
    return flow_jacobians(field, seed.x[None], seed.xi[None], np.array([s]), tol)[0]


def jacobian_growth_report(field, R: float, seeds, s_grid, tol=DEFAULT_TOL, mu: float = 1.0):
    """Max Jacobian entry over seeds per s against c (|s| + (|x| + R)^mu).

    Returns ``{"rows": [(s, max_entry, bound_ratio)], "c": fitted c,
    "superlinear": bool}``.  Growth is flagged superlinear when
    max_entry / s at the last time exceeds 1.5 times its value at the
    middle time.
    """
    seeds = list(seeds)
    s_grid = [float(v) for v in s_grid]
    x0 = np.array([p.x for p in seeds])
    xi0 = np.array([p.xi for p in seeds])
    m = len(seeds)
    X0 = np.repeat(x0, len(s_grid), axis=0)
    XI0 = np.repeat(xi0, len(s_grid), axis=0)
    S = np.tile(np.array(s_grid), m)
    J = flow_jacobians(field, X0, XI0, S, tol).reshape(m, len(s_grid), -1)
    xr = np.linalg.norm(x0, axis=1)
    rows = []
    cs = []
    for j, s in enumerate(s_grid):
        entries = np.max(np.abs(J[:, j, :]), axis=1)
        ratio = entries / (abs(s) + (xr + R) ** mu)
        rows.append((s, float(entries.max()), float(ratio.max())))
        cs.append(float(ratio.max()))
    positive = [(s, e) for s, e, _ in rows if s > 0]
    superlinear = False
    if len(positive) >= 2:
        mid = positive[len(positive) // 2]
        end = positive[-1]
        superlinear = (end[1] / end[0]) > 1.5 * (mid[1] / mid[0])
    return {"rows": rows, "c": max(cs), "superlinear": bool(superlinear)}


def line_integral_bound(field, seeds, s_max: float, tau: float, tol=1e-8):
    """sup over seeds of int_0^s_max <X(r)>^(-tau) dr."""
    seeds = list(seeds)
    x0 = np.array([p.x for p in seeds])
    xi0 = np.array([p.xi for p in seeds])

    def g(X, Xi):
        return (1.0 + np.sum(X * X, axis=1)) ** (-tau / 2.0)

    res, _, _, _ = integrate_rays(field, x0, xi0, s_max, tol=tol, integrands=(g,))
    return float(np.max(res.y[:, 2 * field.dim]))


# ---------------------------------------------------------------- Mizohata

@dataclass
class MizohataResult:
    value: float
    diverged: bool
    converged: bool
    tail_estimate: float
    r_reached: float


def mizohata_integral(b_im, x, omega, r_max: float = 1e7, tol: float = 1e-10,
                      threshold: float = 1e6) -> MizohataResult:
    """int_0^r_max Im b1(x + r omega) . omega dr by octaves with a tail check.

    Divergence is declared once |partial sum| > ``threshold`` while the last
    octave still contributes more than 1% of the total.
    """
    x = np.asarray(x, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if abs(np.linalg.norm(omega) - 1.0) > 1e-12:
        raise ValueError("omega must be a unit vector")

    def integrand(r):
        return float(np.dot(np.asarray(b_im(x + r * omega), dtype=float), omega))

    total = 0.0
    a, b = 0.0, 1.0
    last = math.inf
    quiet = 0
    while a < r_max:
        b = min(b, r_max)
        piece, _ = spi.quad(integrand, a, b, epsabs=tol * 0.1, epsrel=1e-12, limit=200)
        total += piece
        last = piece
        if abs(total) > threshold and abs(piece) > 0.01 * abs(total):
            return MizohataResult(total, True, False, abs(piece), b)
        quiet = quiet + 1 if abs(piece) <= tol * max(1.0, abs(total)) else 0
        if quiet >= 3:
            return MizohataResult(total, False, True, abs(piece), b)
        a, b = b, 2.0 * b
    return MizohataResult(total, False, abs(last) <= tol * max(1.0, abs(total)), abs(last), a)
