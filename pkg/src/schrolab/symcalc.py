"""Phase-space symbols: projected classes, the escape symbol and integrating factors.

Brackets use the convention {p, q} = grad_xi p . grad_x q - grad_x p . grad_xi q,
so {h2, q} is the derivative of q along the bicharacteristic flow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .coeffields import CoefficientField
from .cutoffs import CHI, CutoffProfile, smooth_step, smooth_step_prime
from .hamflow import flow_rhs, h2 as h2_values
from .integrate import STOPPED, integrate_batch
from .quantize import BoxGrid
from .symbols import Symbol, as_symbol

__all__ = [
    "Symbol", "SymbolTable", "projection", "make_projected_symbol", "seminorm_estimate",
    "poisson_bracket", "hamiltonian_bracket", "doi_symbol", "verify_escape_inequality",
    "integrating_factor", "verify_cancellation", "decompose_projected", "tabulate",
    "TrappingSuspected", "hamiltonian_symbol", "light_cone_amplitude", "gaussian_amplitude",
]


class TrappingSuspected(RuntimeError):
    def __init__(self, x, xi, budget):
        self.x = np.asarray(x)
        self.xi = np.asarray(xi)
        super().__init__(f"ray from x={self.x.tolist()}, xi={self.xi.tolist()} "
                         f"did not leave the cutoff support within s={budget:g}")


def _jap(v):
    return np.sqrt(1.0 + np.sum(np.asarray(v) ** 2, axis=-1))


def hamiltonian_symbol(field: CoefficientField) -> Symbol:
    return Symbol(field.dim, lambda x, xi: h2_values(field, x, xi).astype(complex),
                  order_m=2.0, parity="even", metadata={"name": "h2", "field": field.name})


# ---------------------------------------------------------------- projection

def projection(y, z):
    """P(y, z) = y - (y.z) z / |z|^2, vectorized over leading axes."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    zz = np.sum(z * z, axis=-1)
    if np.any(zz == 0):
        raise ValueError("projection direction must be non-zero")
    return y - (np.sum(y * z, axis=-1) / zz)[..., None] * z


def make_projected_symbol(a, A0, chi: CutoffProfile = CHI, variant: str = "hyperbolic",
                          order_m: float = 0.0, parity: str = "none") -> Symbol:
    """chi(|xi|) a(P(x, A0 xi); x, xi).

    ``a(s, x, xi)`` takes the projected point ``s`` first.  Where
    chi(|xi|) = 0 the closure is not evaluated.
    """
    if variant not in ("elliptic", "hyperbolic"):
        raise ValueError("variant must be 'elliptic' or 'hyperbolic'")
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    n = A0.shape[0]

    def ev(x, xi):
        x, xi = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(xi, dtype=float))
        r = np.linalg.norm(xi, axis=-1)
        c = chi(r)
        out = np.zeros(r.shape, dtype=complex)
        on = c > 0
        if np.any(on):
            z = xi[on] @ A0.T
            s = projection(x[on], z)
            out[on] = c[on] * a(s, x[on], xi[on])
        return out

    return Symbol(n, ev, order_m, parity, "projected",
                  {"variant": variant, "A0": A0.tolist()})


def light_cone_amplitude(m: float = 0.0):
    """a(s; x, xi) = phi(s) <xi>^m with phi = 1 on |s| <= 1/4, 0 on |s| >= 1/2."""
    phi = CutoffProfile(0.25, 0.5, "bump")

    def a(s, x, xi):
        return phi.radial(s) * _jap(xi) ** m

    return a


def gaussian_amplitude(m: float = 0.0, width: float = 1.0):
    """a(s; x, xi) = exp(-|s|^2 / (2 width^2)) <xi>^m, Schwartz in s."""
    def a(s, x, xi):
        return np.exp(-np.sum(s * s, axis=-1) / (2.0 * width**2)) * _jap(xi) ** m

    return a


# ---------------------------------------------------------------- finite differences

def _steps(x, xi, scale=1e-4):
    hx = scale * (1.0 + np.linalg.norm(x, axis=-1))
    hxi = scale * (1.0 + np.linalg.norm(xi, axis=-1))
    return hx, hxi


def _gradients(p, x, xi, hx, hxi):
    """Central-difference gradients of p in x and xi at points (m, n)."""
    m, n = x.shape
    xs, xis = [], []
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        for sgn in (1.0, -1.0):
            xs.append(x + sgn * hx[:, None] * e)
            xis.append(xi)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        for sgn in (1.0, -1.0):
            xs.append(x)
            xis.append(xi + sgn * hxi[:, None] * e)
    vals = np.asarray(p(np.concatenate(xs), np.concatenate(xis))).reshape(4 * n, m)
    gx = np.stack([(vals[2 * j] - vals[2 * j + 1]) / (2 * hx) for j in range(n)], axis=-1)
    gxi = np.stack([(vals[2 * n + 2 * j] - vals[2 * n + 2 * j + 1]) / (2 * hxi) for j in range(n)], axis=-1)
    return gx, gxi


def poisson_bracket(p, q, at, h=None):
    """{p, q} at phase points by central differences.

    ``at`` is a PhasePoint or a pair of (m, n) arrays.  ``h`` fixes both
    steps; by default h = 1e-4 (1 + |x|) in x and 1e-4 (1 + |xi|) in xi.
    """
    x, xi = _points(at)
    hx, hxi = _steps(x, xi) if h is None else (np.full(len(x), h), np.full(len(x), h))
    px, pxi = _gradients(p, x, xi, hx, hxi)
    qx, qxi = _gradients(q, x, xi, hx, hxi)
    out = np.sum(pxi * qx - px * qxi, axis=-1)
    return out[0] if _single(at) else out


def hamiltonian_bracket(field: CoefficientField, q, x, xi, h=None):
    """{h2, q} with exact derivatives of h2 and central differences of q."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    hx, hxi = _steps(x, xi) if h is None else (np.full(len(x), h), np.full(len(x), h))
    qx, qxi = _gradients(q, x, xi, hx, hxi)
    a = field(x)
    g = field.grad(x)
    dxi_h = 2.0 * np.einsum("mjk,mk->mj", a, xi)
    dx_h = np.einsum("mljk,mj,mk->ml", g, xi, xi)
    return np.sum(dxi_h * qx - dx_h * qxi, axis=-1)


def _points(at):
    if hasattr(at, "x") and hasattr(at, "xi"):
        return np.atleast_2d(at.x), np.atleast_2d(at.xi)
    x, xi = at
    return np.atleast_2d(np.asarray(x, dtype=float)), np.atleast_2d(np.asarray(xi, dtype=float))


def _single(at):
    return hasattr(at, "x") or np.ndim(at[0]) == 1


_STENCIL = {0: ([0], [1.0]), 1: ([-1, 1], [-0.5, 0.5]), 2: ([-1, 0, 1], [1.0, -2.0, 1.0]),
            3: ([-2, -1, 1, 2], [-0.5, 1.0, -1.0, 0.5]), 4: ([-2, -1, 0, 1, 2], [1.0, -4.0, 6.0, -4.0, 1.0])}


def _mixed_derivative(p, x, xi, ax, axi, hx, hxi):
    """d_x^ax d_xi^axi p by tensor central differences at points (m, n)."""
    n = x.shape[1]
    orders = list(ax) + list(axi)
    st = [_STENCIL[o] for o in orders]
    xs, xis, ws = [], [], []
    for combo in product(*[range(len(s[0])) for s in st]):
        w = np.ones(len(x))
        dx = np.zeros_like(x)
        dxi = np.zeros_like(xi)
        for k, idx in enumerate(combo):
            off, c = st[k][0][idx], st[k][1][idx]
            if k < n:
                w = w * c / hx ** orders[k]
                dx[:, k] = off * hx
            else:
                w = w * c / hxi ** orders[k]
                dxi[:, k - n] = off * hxi
        xs.append(x + dx)
        xis.append(xi + dxi)
        ws.append(w)
    vals = np.asarray(p(np.concatenate(xs), np.concatenate(xis))).reshape(len(ws), len(x))
    return np.sum(np.array(ws) * vals, axis=0)


def seminorm_estimate(p, j: int, m: float, probe_grid, x_weight: bool = False, h: float = 1e-2):
    """max over probes of <xi>^(-m+|a|) |d_xi^a d_x^b p| for |a + b| <= j.

    With ``x_weight`` the x-growth <x>^(-|a|) of the projected classes is
    divided out as well.
    """
    if j > 4:
        raise ValueError("derivative order capped at 4")
    x, xi = probe_grid
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    n = x.shape[1]
    sym = as_symbol(p, n)
    hx = h * (1.0 + np.linalg.norm(x, axis=1))
    hxi = h * (1.0 + np.linalg.norm(xi, axis=1))
    best = 0.0
    for total in range(j + 1):
        for combo in product(range(total + 1), repeat=2 * n):
            if sum(combo) != total:
                continue
            bx, a = combo[:n], combo[n:]
            if total == 0:
                d = np.asarray(sym(x, xi))
            else:
                d = _mixed_derivative(sym, x, xi, bx, a, hx, hxi)
            w = _jap(xi) ** (-m + sum(a))
            if x_weight:
                w = w * _jap(x) ** (-sum(a))
            best = max(best, float(np.max(np.abs(d) * w)))
    return best


# ---------------------------------------------------------------- ray integrals

def _ray_integrals(field, x, xi, s_end, integrand, stop, tol, max_steps, h_max=None):
    """Integrate ``integrand(X, Xi)`` along rays; returns (values, status, final y)."""
    n = field.dim
    y0 = np.concatenate([x, xi, np.zeros((len(x), 1))], axis=1)

    def g(X, Xi):
        return integrand(X, Xi)

    res = integrate_batch(flow_rhs(field, (g,)), y0, s_end, tol=tol, max_steps=max_steps,
                          stop=stop, h_max=h_max)
    return res.y[:, 2 * n], res.status, res.y


def _outgoing(field, X, Xi, direction):
    return direction * np.einsum("mj,mjk,mk->m", X, field(X), Xi) >= 0.0


# ---------------------------------------------------------------- Doi symbol

@dataclass
class DoiProfiles:
    """psi on |x|^2, phi1 on |x| and phi2 on |xi|."""

    M: float
    phi1: CutoffProfile
    phi2: CutoffProfile = CHI

    def psi(self, t):
        return smooth_step((t - self.M**2) / ((self.M + 1) ** 2 - self.M**2))

    def psi_prime(self, t):
        w = (self.M + 1) ** 2 - self.M**2
        return smooth_step_prime((t - self.M**2) / w) / w


def default_doi_profiles(M: float) -> DoiProfiles:
    return DoiProfiles(M, CutoffProfile(M + 1.0, M + 2.0, "bump"))


def doi_symbol(field: CoefficientField, M: float = 3.0, c2: float = 1.0,
               profiles: DoiProfiles | None = None, ray_budget: float = 1e3,
               tol: float = 1e-11, max_steps: int = 100_000) -> Symbol:
    """p4 = c2 p1 + p3 with p1 = <xi>^-1 psi(|x|^2) 4 x.A(x)xi and p3 = phi1 phi2 p2.

    p2 uses the unit-speed ray and homogeneity:
    p2(x, xi) = -|xi|^-1 int_0^inf phi1(X(s; x, w)) <|xi| Xi(s; x, w)> ds.
    """
    prof = profiles or default_doi_profiles(M)
    n = field.dim
    r_out = prof.phi1.outer_radius

    def p1(x, xi):
        x, xi = np.broadcast_arrays(np.asarray(x, float), np.asarray(xi, float))
        a = field(x)
        rate = 4.0 * np.einsum("...j,...jk,...k->...", x, a, xi)
        return prof.psi(np.sum(x * x, axis=-1)) * rate / _jap(xi)

    def ray_weights(x, w, lams):
        """I_k = int_0^inf phi1(X) <lam_k Xi> ds along the unit-speed ray from (x, w)."""
        lams = np.atleast_2d(lams)
        K = lams.shape[1]
        y0 = np.concatenate([x, w, lams, np.zeros((len(x), K))], axis=1)
        base = flow_rhs(field)

        def f(y):
            core = base(y[:, :2 * n])
            X, Xi, L = y[:, :n], y[:, n:2 * n], y[:, 2 * n:2 * n + K]
            val = prof.phi1.radial(X)[:, None] * np.sqrt(1.0 + L**2 * np.sum(Xi * Xi, axis=1)[:, None])
            return np.concatenate([core, np.zeros((len(y), K)), val], axis=1)

        def stop(idx, s, y):
            X, Xi = y[:, :n], y[:, n:2 * n]
            return (np.linalg.norm(X, axis=1) >= r_out) & _outgoing(field, X, Xi, 1.0)

        res = integrate_batch(f, y0, ray_budget, tol=tol, max_steps=max_steps, stop=stop)
        bad = res.status != STOPPED
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise TrappingSuspected(x[i], w[i], ray_budget)
        return res.y[:, 2 * n + K:]

    def p2_flat(x, xi):
        r = np.linalg.norm(xi, axis=1)
        return -ray_weights(x, xi / r[:, None], r[:, None])[:, 0] / r

    def p3(x, xi):
        x, xi = np.broadcast_arrays(np.asarray(x, float), np.asarray(xi, float))
        shape = x.shape[:-1]
        xf, xif = x.reshape(-1, n), xi.reshape(-1, n)
        c = prof.phi1.radial(xf) * prof.phi2.radial(xif)
        out = np.zeros(len(xf))
        on = c > 0
        if np.any(on):
            out[on] = c[on] * p2_flat(xf[on], xif[on])
        return out.reshape(shape)

    def p4(x, xi):
        return (c2 * p1(x, xi) + p3(x, xi)).astype(complex)

    meta = {"M": M, "c2": c2, "parts": {"p1": p1, "p3": p3, "ray_weights": ray_weights},
            "profiles": prof, "field": field.name,
            "ray_budget": ray_budget, "tol": tol}
    return Symbol(n, p4, 0.0, "none", "doi", meta)


def _escape_grid(n, x_max, x_pts, xi_max, directions, xi_min=2.0):
    from .coeffields import fibonacci_directions

    axes = [np.linspace(-x_max, x_max, x_pts)] * n
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    mags = xi_min * 2.0 ** np.arange(int(math.floor(math.log2(xi_max / xi_min))) + 1)
    return X, fibonacci_directions(n, directions), mags


def _bracket_p3_flow(p4: Symbol, field: CoefficientField, X, dirs, mags):
    """{h2, p3} on X x dirs x mags, shape (P, D, K).

    Uses {h2, p2} = phi1 <xi> (p2 integrates phi1 <Xi> over the forward
    ray), so only p2 itself needs rays; cutoff brackets are closed form.
    """
    n = field.dim
    prof = p4.metadata["profiles"]
    weights = p4.metadata["parts"]["ray_weights"]
    P, D, K = len(X), len(dirs), len(mags)
    out = np.zeros((P, D, K))
    phi1 = prof.phi1.radial(X)
    live = np.flatnonzero(phi1 > 0)
    if live.size == 0:
        return out
    x = np.repeat(X[live], D, axis=0)
    w = np.tile(dirs, (live.size, 1))
    I = weights(x, w, np.broadcast_to(mags, (len(x), K)))
    p2 = -I / mags
    a = field(x)
    g = field.grad(x)
    ph1 = phi1[live].repeat(D)[:, None]
    gphi1 = prof.phi1.radial_grad(x)
    for k, lam in enumerate(mags):
        xi = lam * w
        ph2 = prof.phi2.radial(xi)
        h_phi1 = 2.0 * np.einsum("mjk,mk,mj->m", a, xi, gphi1)
        dx_h = np.einsum("mljk,mj,mk->ml", g, xi, xi)
        h_phi2 = -np.sum(dx_h * prof.phi2.radial_grad(xi), axis=1)
        jap = np.sqrt(1.0 + lam**2)
        val = ph2 * (ph1[:, 0] ** 2 * jap + p2[:, k] * h_phi1) + ph1[:, 0] * p2[:, k] * h_phi2
        out[live, :, k] = val.reshape(live.size, D)
    return out


def verify_escape_inequality(p4: Symbol, field: CoefficientField, N_weight: float = 2.0,
                             grid=None, auto_scale: bool = True, c2_max: float = 2.0**20,
                             x_max: float = 8.0, x_pts: int = 64, xi_max: float = 32.0,
                             directions: int = 16, method: str = "flow"):
    """Check {h2, p4} >= <x>^-N |xi| - c on a phase-space grid.

    ``grid`` is (X, directions, magnitudes); by default 64 x 64 positions in
    [-x_max, x_max]^n times dyadic |xi| in [2, xi_max].  The p1 part is
    bracketed by central differences.  For p3, ``method="flow"`` uses the
    transport identity of p2 and ``method="fd"`` differentiates p3 itself.
    With ``auto_scale`` the weight c2 of p1 is doubled while the worst slack
    is negative and improving.  Returns min slack, worst point, c and c2.
    """
    if method not in ("flow", "fd"):
        raise ValueError("method must be 'flow' or 'fd'")
    X, dirs, mags = grid if grid is not None else _escape_grid(field.dim, x_max, x_pts, xi_max,
                                                                 directions)
    n = field.dim
    P, D, K = len(X), len(dirs), len(mags)
    XI = (mags[None, :, None] * dirs[:, None, :]).reshape(-1, n)
    Xr = np.repeat(X, D * K, axis=0)
    XIr = np.tile(XI, (P, 1))
    parts = p4.metadata["parts"]
    H1 = hamiltonian_bracket(field, parts["p1"], Xr, XIr)
    if method == "flow":
        H3 = _bracket_p3_flow(p4, field, X, dirs, mags).reshape(-1)
    else:
        H3 = np.zeros(len(Xr))
        r_out = p4.metadata["profiles"].phi1.outer_radius
        near = np.linalg.norm(Xr, axis=1) < r_out * (1 + 1e-3) + 1e-3
        if np.any(near):
            H3[near] = hamiltonian_bracket(field, parts["p3"], Xr[near], XIr[near])
    lam = _jap(Xr) ** (-N_weight) * np.linalg.norm(XIr, axis=1)

    def slack(c2):
        return c2 * H1 + H3 - lam

    c2 = p4.metadata["c2"]
    s = slack(c2)
    if auto_scale:
        # double c2 while the worst slack is negative and still improving
        while s.min() < 0 and c2 < c2_max:
            s_new = slack(2 * c2)
            if s_new.min() <= s.min():
                break
            c2, s = 2 * c2, s_new
    i = int(np.argmin(s))
    return {"min_slack": float(s[i]), "worst_x": Xr[i].tolist(), "worst_xi": XIr[i].tolist(),
            "c": float(max(0.0, -s[i])), "c2": float(c2), "points": int(len(s)), "method": method}


# ---------------------------------------------------------------- integrating factors

@dataclass
class IntegratingFactorFamily:
    b: Symbol
    p: Symbol
    p_e: Symbol
    k: Symbol
    k_tilde: Symbol
    field: CoefficientField
    s_param: float
    R: float
    warnings: list = dc_field(default_factory=list)

    half_integrals: object = None
    homogeneous: bool = False

    def as_tuple(self):
        return self.b, self.p, self.p_e, self.k, self.k_tilde

    def table(self, grid: BoxGrid, which: str = "k", angles: int = 64) -> "SymbolTable":
        """Tabulate p_e, k or k_tilde on ``grid``.

        For n = 2 and b^R homogeneous of degree 1 in xi, p_e(x, xi) is
        chi(|xi|/2) q(x, xi/|xi|); q is traced on ``angles`` directions per
        node and interpolated by a periodic cubic spline in the angle.
        """
        if which not in ("p_e", "k", "k_tilde"):
            raise ValueError("which must be 'p_e', 'k' or 'k_tilde'")
        n = grid.dim
        X = grid.nodes.reshape(-1, n)
        k = np.arange(-grid.N // 2, grid.N // 2) * grid.dxi
        XI = np.stack(np.meshgrid(*([k] * n), indexing="ij"), axis=-1).reshape(-1, n)
        if self.homogeneous and n == 2 and self.half_integrals is not None:
            from scipy.interpolate import CubicSpline

            th = 2.0 * np.pi * np.arange(angles) / angles
            W = np.stack([np.cos(th), np.sin(th)], axis=-1)
            xr = np.repeat(X, angles, axis=0)
            wr = np.tile(W, (len(X), 1))
            q = 0.5 * (-self.half_integrals(xr, wr, -1.0) - self.half_integrals(xr, wr, 1.0))
            q = q.reshape(len(X), angles)
            spline = CubicSpline(np.append(th, 2 * np.pi), np.concatenate([q, q[:, :1]], axis=1),
                                 axis=1, bc_type="periodic")
            ang = np.mod(np.arctan2(XI[:, 1], XI[:, 0]), 2 * np.pi)
            pe = spline(ang) * CHI(np.linalg.norm(XI, axis=1) / 2.0)[None, :]
        else:
            pe = np.stack([np.real(self.p_e(np.broadcast_to(x, XI.shape), XI)) for x in X])
        vals = {"p_e": pe, "k": np.exp(pe), "k_tilde": np.exp(-pe)}[which]
        return SymbolTable(grid, vals, source=f"{which}^R", parity="even",
                           metadata={"angles": angles, "homogeneous": self.homogeneous})


def _b_symbol(field: CoefficientField, b1: Symbol | None, s_param: float) -> Symbol:
    n = field.dim

    def ev(x, xi):
        x, xi = np.broadcast_arrays(np.asarray(x, float), np.asarray(xi, float))
        out = np.zeros(x.shape[:-1])
        if s_param != 0:
            g = field.grad(x)
            # sum_jk d_j a_jk xi_j xi_k, times sum_l xi_l, over <xi>^2
            div = np.einsum("...jjk,...j,...k->...", g, xi, xi)
            out = out + s_param * div * np.sum(xi, axis=-1) / (1.0 + np.sum(xi * xi, axis=-1))
        if b1 is not None:
            out = out - np.real(b1(x, xi))
        return out

    return Symbol(n, ev, 1.0, "odd", "integrating-factor", {"name": "b^R", "s_param": s_param})


def integrating_factor(field_R: CoefficientField, b1: Symbol | None, s_param: float = 0.0,
                       chi: CutoffProfile = CHI, tail_tol: float = 1e-8, ray_budget: float = 1e3,
                       tol: float = 1e-11, free_radius: float | None = None,
                       max_steps: int = 200_000) -> IntegratingFactorFamily:
    """The family (b^R, p^R, p_e^R, k^R, k~^R).

    p^R = chi(|xi|/2) int_{-inf}^0 b^R(flow(sigma)) d sigma.  Because b^R is
    odd in xi and the flow is time-reversible,
    p_e^R = chi(|xi|/2)/2 (int_{-inf}^0 - int_0^inf) b^R(flow) d sigma,
    so one bidirectional ray gives p_e^R.  Each half-ray stops once it is
    outgoing beyond ``free_radius`` with |b^R| < tail_tol.
    """
    n = field_R.dim
    bsym = _b_symbol(field_R, b1, s_param)
    R = float(field_R.metadata.get("truncation_radius", math.inf))
    if free_radius is None:
        free_radius = 2.0 * R if math.isfinite(R) else 10.0
    warnings: list = []
    trivial = b1 is None and s_param == 0

    def half_integrals(x, xi, direction):
        """int_0^{direction*inf} b(flow) ds for flat point arrays."""
        if len(x) == 0:
            return np.zeros(0)

        def integrand(X, Xi):
            return bsym(X, Xi)

        def stop(idx, s, y):
            X, Xi = y[:, :n], y[:, n:2 * n]
            far = np.linalg.norm(X, axis=1) >= free_radius
            return far & _outgoing(field_R, X, Xi, direction) & (np.abs(bsym(X, Xi)) < tail_tol)

        vals, status, _ = _ray_integrals(field_R, x, xi, direction * ray_budget, integrand, stop,
                                         tol, max_steps)
        unfinished = int(np.sum(status != STOPPED))
        if unfinished:
            warnings.append({"truncation-warning": unfinished, "direction": direction})
        return vals

    def core(x, xi, which):
        x, xi = np.broadcast_arrays(np.asarray(x, float), np.asarray(xi, float))
        shape = x.shape[:-1]
        xf, xif = x.reshape(-1, n), xi.reshape(-1, n)
        out = np.zeros(len(xf))
        if trivial:
            return out.reshape(shape)
        c = chi(np.linalg.norm(xif, axis=1) / 2.0)
        on = c > 0
        if np.any(on):
            back = half_integrals(xf[on], xif[on], -1.0)
            # int_{-inf}^0 = -(integral accumulated with negative steps)
            back = -back
            if which == "p":
                out[on] = c[on] * back
            else:
                fwd = half_integrals(xf[on], xif[on], 1.0)
                out[on] = 0.5 * c[on] * (back - fwd)
        return out.reshape(shape)

    psym = Symbol(n, lambda x, xi: core(x, xi, "p").astype(complex), 0.0, "none",
                  "integrating-factor", {"name": "p^R"})
    pe = Symbol(n, lambda x, xi: core(x, xi, "pe").astype(complex), 0.0, "even",
                "integrating-factor", {"name": "p_e^R"})
    k = Symbol(n, lambda x, xi: np.exp(core(x, xi, "pe")).astype(complex), 0.0, "even",
               "integrating-factor", {"name": "k^R"})
    kt = Symbol(n, lambda x, xi: np.exp(-core(x, xi, "pe")).astype(complex), 0.0, "even",
                "integrating-factor", {"name": "k~^R"})
    if trivial:
        zero = Symbol.constant(n, 0.0, class_tag="integrating-factor")
        one = Symbol.constant(n, 1.0, class_tag="integrating-factor")
        psym, pe, k, kt = zero, zero, one, one
    homogeneous = not trivial and s_param == 0 and b1.metadata.get("homogeneous_degree") == 1
    return IntegratingFactorFamily(bsym, psym, pe, k, kt, field_R, s_param, R, warnings,
                                   half_integrals, homogeneous)


def verify_cancellation(family: IntegratingFactorFamily, field_R: CoefficientField | None = None,
                        grid=None, h=None, xi_octaves=(4.0, 8.0, 16.0, 32.0), directions: int = 8,
                        x_max: float = 3.0, x_pts: int = 7, per_octave: int = 3):
    """Per-octave max of |{h2, p_e} - b| and |{h2, k} - k b|.

    Returns ``{"octaves": [(lo, hi, res_pe, res_k, scale_b)], "reciprocal": max |{h2, k k~}|}``.
    """
    field_R = field_R or family.field
    n = field_R.dim
    if grid is None:
        from .coeffields import fibonacci_directions

        axes = [np.linspace(-x_max, x_max, x_pts)] * n
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        dirs = fibonacci_directions(n, directions)
    else:
        X, dirs = grid
    rows = []
    recip = 0.0
    for lo, hi in zip(xi_octaves[:-1], xi_octaves[1:]):
        mags = lo * (hi / lo) ** (np.arange(per_octave) / per_octave)
        XI = np.concatenate([m * dirs for m in mags])
        Xr = np.repeat(X, len(XI), axis=0)
        XIr = np.tile(XI, (len(X), 1))
        b = np.real(family.b(Xr, XIr))
        pe_vals = np.real(family.p_e(Xr, XIr))
        hpe = np.real(hamiltonian_bracket(field_R, lambda a, c: np.real(family.p_e(a, c)), Xr, XIr, h))
        hk = np.real(hamiltonian_bracket(field_R, lambda a, c: np.real(family.k(a, c)), Xr, XIr, h))
        kv = np.exp(pe_vals)
        one = hamiltonian_bracket(
            field_R, lambda a, c: np.real(family.k(a, c) * family.k_tilde(a, c)), Xr[:1], XIr[:1], h)
        recip = max(recip, float(np.max(np.abs(one))))
        rows.append((float(lo), float(hi), float(np.max(np.abs(hpe - b))),
                     float(np.max(np.abs(hk - kv * b))), float(np.max(np.abs(b)))))
    return {"octaves": rows, "reciprocal": recip}


def decompose_projected(family: IntegratingFactorFamily, j_range, probe=None,
                        A_h=None, tolerance: float = 1e-8):
    """k^R = a^R(P(x, A_h xi); x, xi) + exp(q(x, xi)) with dyadic pieces a_j^R.

    The dyadic pieces are
    a_j^R = [chi(|x| / (10 2^j)) - chi(|x| / (10 2^(j+1)))] [k^R - exp(q)]
    with q = p_e^R restricted to |x| <= 10 2^j0.  The first piece drops its
    inner cutoff because k^R - exp(q) already vanishes there, so the sum is
    exact for |x| <= 10 2^(j_last+1).  Reports the reconstruction residual
    on ``probe``.
    """
    field = family.field
    n = field.dim
    A_h = field.asymptotic if A_h is None else np.asarray(A_h, float)
    j_range = list(j_range)
    j0 = j_range[0]
    scale0 = 10.0 * 2.0**j0

    def q(x, xi):
        x = np.asarray(x, float)
        inner = CutoffProfile(1.0, 2.0, "bump").radial(x / scale0)
        return inner * np.real(family.p_e(x, xi))

    def piece(j):
        def a_j(x, xi):
            x = np.asarray(x, float)
            # k^R - exp(q) already vanishes for |x| <= 10 2^j0
            lo = 1.0 if j == j0 else CHI.radial(x / (10.0 * 2.0**j))
            hi = CHI.radial(x / (10.0 * 2.0 ** (j + 1)))
            return (lo - hi) * (np.real(family.k(x, xi)) - np.exp(q(x, xi)))
        return a_j

    pieces = {j: piece(j) for j in j_range}

    def a_total(x, xi):
        return sum(p(x, xi) for p in pieces.values())

    report = {"j_range": j_range, "pieces": pieces, "q": q, "a": a_total}
    if probe is not None:
        x, xi = probe
        x = np.atleast_2d(np.asarray(x, float))
        xi = np.atleast_2d(np.asarray(xi, float))
        k = np.real(family.k(x, xi))
        recon = a_total(x, xi) + np.exp(q(x, xi))
        covered = np.linalg.norm(x, axis=1) <= 10.0 * 2.0 ** (j_range[-1] + 1)
        resid = np.abs(k - recon)[covered]
        report["residual"] = float(resid.max()) if resid.size else 0.0
        report["projected_points"] = projection(x, xi @ A_h.T)
    return report


# ---------------------------------------------------------------- tables

class SymbolTable:
    """Symbol values on (box nodes) x (frequency lattice).

    ``values`` has shape (N^n, N^n): rows follow the row-major node order and
    columns the lattice in natural order k = -N/2 .. N/2 - 1 per axis.
    """

    def __init__(self, grid: BoxGrid, values, source: str = "", interpolation: str = "multilinear",
                 parity: str = "none", metadata: dict | None = None):
        if interpolation not in ("nearest", "multilinear"):
            raise ValueError("interpolation must be 'nearest' or 'multilinear'")
        values = np.asarray(values, dtype=complex)
        M = grid.N**grid.dim
        if values.shape != (M, M):
            raise ValueError("table shape does not match grid")
        if not np.all(np.isfinite(values)):
            raise ValueError("table values must be finite")
        self.grid = grid
        self.values = values
        self.source = source
        self.interpolation = interpolation
        self.parity = parity
        self.metadata = dict(metadata or {})
        self._interp = None

    @property
    def dim(self):
        return self.grid.dim

    def kernel_values(self, grid: BoxGrid):
        if grid != self.grid:
            raise ValueError("table grid differs from the quantization grid")
        n = grid.dim
        shape = grid.shape * 2
        v = self.values.reshape(shape)
        v = np.fft.ifftshift(v, axes=tuple(range(n, 2 * n)))
        return v.reshape(self.values.shape)

    def _interpolator(self):
        if self._interp is None:
            g = self.grid
            n = g.dim
            k = np.arange(-g.N // 2, g.N // 2) * g.dxi
            # periodic closure in x: append the first node at +L
            ax = np.append(g.axis, g.L)
            v = self.values.reshape(g.shape * 2)
            for d in range(n):
                v = np.concatenate([v, np.take(v, [0], axis=d)], axis=d)
            method = "linear" if self.interpolation == "multilinear" else "nearest"
            pts = tuple([ax] * n + [k] * n)
            self._interp = (RegularGridInterpolator(pts, v.real, method=method, bounds_error=False,
                                                    fill_value=None),
                            RegularGridInterpolator(pts, v.imag, method=method, bounds_error=False,
                                                    fill_value=None))
        return self._interp

    def __call__(self, x, xi):
        x, xi = np.broadcast_arrays(np.asarray(x, float), np.asarray(xi, float))
        shape = x.shape[:-1]
        L = self.grid.L
        xw = (x + L) % (2 * L) - L
        pts = np.concatenate([xw, xi], axis=-1).reshape(-1, 2 * self.dim)
        re, im = self._interpolator()
        return (re(pts) + 1j * im(pts)).reshape(shape)

    evaluate = __call__

    def save(self, path):
        """``<path>.bin`` little-endian complex128 interleaved plus ``<path>.json``."""
        path = Path(path)
        path.with_suffix(".bin").write_bytes(np.ascontiguousarray(self.values, dtype="<c16").tobytes())
        meta = {"grid": self.grid.spec(), "source": self.source, "interpolation": self.interpolation,
                "parity": self.parity, "layout": "row-major x nodes then xi lattice (k=-N/2..N/2-1)",
                "metadata": _jsonable(self.metadata)}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        g = meta["grid"]
        grid = BoxGrid(g["dim"], g["L"], g["N"])
        M = grid.N**grid.dim
        raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<c16").reshape(M, M)
        return cls(grid, raw.astype(complex), meta["source"], meta["interpolation"], meta["parity"],
                   meta.get("metadata"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items() if not callable(v)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj if isinstance(obj, (str, int, float, bool, type(None))) else repr(obj)


def tabulate(p, grid: BoxGrid, interpolation: str = "multilinear", probes: int = 1000,
             seed: int = 0, x_grid=None) -> SymbolTable:
    """Sample ``p`` on nodes x lattice and estimate the off-grid x-interpolation error.

    Probes are random x points with xi drawn from the lattice, so the
    estimate isolates interpolation in x.
    """
    sym = as_symbol(p, grid.dim)
    n = grid.dim
    X = grid.nodes.reshape(-1, n)
    k = np.arange(-grid.N // 2, grid.N // 2) * grid.dxi
    XI = np.stack(np.meshgrid(*([k] * n), indexing="ij"), axis=-1).reshape(-1, n)
    vals = np.empty((len(X), len(XI)), dtype=complex)
    step = max(1, (1 << 20) // len(XI))
    for a in range(0, len(X), step):
        block = np.asarray(sym(X[a:a + step, None, :], XI[None, :, :]))
        if not np.all(np.isfinite(block)):
            i, j = np.argwhere(~np.isfinite(block))[0]
            raise FloatingPointError(f"symbol not finite at x={X[a + i].tolist()}, xi={XI[j].tolist()}")
        vals[a:a + step] = block
    table = SymbolTable(grid, vals, source=str(sym.metadata.get("name", sym.class_tag)),
                        interpolation=interpolation, parity=sym.parity)
    if probes:
        rng = np.random.default_rng(seed)
        px = rng.uniform(-grid.L * 0.9, grid.L * 0.9, size=(probes, n))
        pxi = XI[rng.integers(0, len(XI), probes)]
        exact = np.asarray(sym(px, pxi))
        table.metadata["probe_error"] = float(np.max(np.abs(table(px, pxi) - exact)))
    return table
