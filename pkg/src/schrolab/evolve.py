"""Linear Schrodinger-type evolution and its smoothing diagnostics.

The model is

    d_t u = i sigma L u + Psi_b1 u + b2(x) . grad(conj u) + Psi_c1 u + Psi_c2 conj(u) + f

with L u = sum_jk d_j (a_jk d_k u) and sigma = +1 (sigma = -1 is the
conjugated equation).  Time stepping is classical RK4 on the
pseudo-spectral semi-discretization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import nnls

from .coeffields import CoefficientField
from .quantize import (BoxGrid, GridField, boundary_mass_fraction, bessel, japanese_x, load_field,
                       operator, save_field, sobolev_norm, weighted_norm)
from .symbols import Symbol

__all__ = [
    "LinearOperatorSpec", "EvolutionTrace", "EvolveConfig", "BlowUp", "evolve_linear",
    "dt_max", "smoothing_functional", "k_transform_energy", "error_operator_check",
    "mizohata_blowup_demo", "gain_exponent_probe", "weighted_growth_check", "wave_packet",
    "knapp_packet",
]

BLOWUP_FACTOR = 1e8


class BlowUp(RuntimeError):
    """Raised when the L2 norm exceeds 1e8 ||u0|| (1e8 if u0 = 0) or becomes non-finite."""

    def __init__(self, trace: "EvolutionTrace", t: float):
        self.trace = trace
        self.t = t
        super().__init__(f"blow-up detected at t={t:.6g}")


@dataclass
class LinearOperatorSpec:
    field: CoefficientField
    b1: Symbol | None = None
    b2: Callable | None = None
    c1: Symbol | None = None
    c2: Symbol | None = None
    forcing: Callable | None = None
    sigma: int = 1
    name: str = "linear"

    def conjugated(self) -> "LinearOperatorSpec":
        """The equation solved by conj(u)."""
        def flip(p):
            if p is None:
                return None
            return Symbol(p.dim, lambda x, xi: np.conj(p(x, -np.asarray(xi))), p.order_m, p.parity,
                          p.class_tag, dict(p.metadata))
        b2 = None if self.b2 is None else (lambda x: np.conj(self.b2(x)))
        f = None if self.forcing is None else (lambda t: np.conj(_forcing_values(self.forcing, t)))
        return replace(self, b1=flip(self.b1), b2=b2, c1=flip(self.c1), c2=flip(self.c2),
                       forcing=f, sigma=-self.sigma, name=self.name + "*")

    def fingerprint(self) -> dict:
        return {"name": self.name, "field": self.field.name, "sigma": self.sigma,
                "b1": self.b1 is not None, "b2": self.b2 is not None,
                "c1": self.c1 is not None, "c2": self.c2 is not None,
                "forcing": self.forcing is not None}


def _forcing_values(forcing, t):
    f = forcing(t)
    return f.values if isinstance(f, GridField) else np.asarray(f, dtype=complex)


@dataclass
class EvolveConfig:
    dt: float | None = None
    stride: int = 1
    cfl: float = 2.5
    sobolev: tuple = (1.0,)
    N_weight: float = 0.0


@dataclass
class EvolutionTrace:
    snapshots: list
    dt: float
    scheme: str = "rk4"
    norm_history: list = dc_field(default_factory=list)
    diagnostics: dict = dc_field(default_factory=dict)
    spec: LinearOperatorSpec | None = None

    @property
    def times(self):
        return np.array([t for t, _ in self.snapshots])

    @property
    def grid(self) -> BoxGrid:
        return self.snapshots[0][1].grid

    def final(self) -> GridField:
        return self.snapshots[-1][1]

    def save(self, directory):
        """Snapshot binaries plus ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for i, (t, u) in enumerate(self.snapshots):
            save_field(d / f"snap_{i:05d}", u, t)
            files.append(f"snap_{i:05d}")
        manifest = {"scheme": self.scheme, "dt": self.dt, "snapshots": files,
                    "times": self.times.tolist(), "norm_history": self.norm_history,
                    "spec": None if self.spec is None else self.spec.fingerprint(),
                    "diagnostics": {k: v for k, v in self.diagnostics.items()
                                    if isinstance(v, (int, float, str, list, dict, bool))}}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d / "manifest.json"

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        snaps = []
        for name, t in zip(m["snapshots"], m["times"]):
            u, _ = load_field(d / name)
            snaps.append((t, u))
        return cls(snaps, m["dt"], m["scheme"], m["norm_history"], m.get("diagnostics", {}))


# ---------------------------------------------------------------- generator

class _Generator:
    """Right-hand side of the semi-discrete system on raw value arrays."""

    def __init__(self, spec: LinearOperatorSpec, grid: BoxGrid):
        self.spec = spec
        self.grid = grid
        n = grid.dim
        self.axes = tuple(range(n))
        mask = grid.nyquist_mask
        self.ik = [1j * grid.freqs[..., j] * mask for j in range(n)]
        a = spec.field(grid.nodes)
        self.a = [[np.ascontiguousarray(a[..., j, k]) for k in range(n)] for j in range(n)]
        self.const_a = bool(spec.field.metadata.get("constant", False))
        if self.const_a:
            a0 = spec.field.asymptotic
            self.h2 = np.einsum("...j,jk,...k->...", grid.freqs, a0, grid.freqs)
        self.b1 = None if spec.b1 is None else operator(spec.b1, grid)
        self.b1_grad = None
        if self.b1 is not None and not self.const_a and hasattr(self.b1, "terms"):
            self.b1_grad = self._gradient_terms(self.b1.terms)
        self.c1 = None if spec.c1 is None else operator(spec.c1, grid)
        self.c2 = None if spec.c2 is None else operator(spec.c2, grid)
        self.b2 = None
        if spec.b2 is not None:
            b = np.asarray(spec.b2(grid.nodes), dtype=complex)
            self.b2 = [np.broadcast_to(b[..., j], grid.shape) for j in range(n)]

    def _gradient_terms(self, terms):
        """Coefficients c_k when every separable term is a(x) * (i xi_k); else None."""
        coeffs = [np.zeros(self.grid.shape, dtype=complex) for _ in self.ik]
        for av, mv in terms:
            hit = [k for k, ik in enumerate(self.ik) if np.allclose(mv, ik, rtol=0, atol=1e-12)]
            if not hit:
                return None
            coeffs[hit[0]] += 1.0 if av is None else av
        return coeffs

    def gradient(self, uh):
        return [np.fft.ifftn(ik * uh, axes=self.axes) for ik in self.ik]

    def laplace_type(self, uh, g=None):
        """L u from its raw FFT (``g``: the spectral gradient, if already known)."""
        if self.const_a:
            return np.fft.ifftn(-self.h2 * uh, axes=self.axes)
        n = self.grid.dim
        g = self.gradient(uh) if g is None else g
        out_h = np.zeros_like(uh)
        for j in range(n):
            w = sum(self.a[j][k] * g[k] for k in range(n))
            out_h += self.ik[j] * np.fft.fftn(w, axes=self.axes)
        return np.fft.ifftn(out_h, axes=self.axes)

    def __call__(self, t, u):
        uh = np.fft.fftn(u, axes=self.axes)
        g = None if self.const_a else self.gradient(uh)
        out = (1j * self.spec.sigma) * self.laplace_type(uh, g)
        grid = self.grid
        if self.b1_grad is not None:
            for c, gk in zip(self.b1_grad, g):
                out += c * gk
        if (self.b1 is not None and self.b1_grad is None) or self.c1 is not None:
            U = GridField(grid, u)
            if self.b1 is not None and self.b1_grad is None:
                out += self.b1.apply(U).values
            if self.c1 is not None:
                out += self.c1.apply(U).values
        if self.b2 is not None:
            vh = np.fft.fftn(np.conj(u), axes=self.axes)
            for j, bj in enumerate(self.b2):
                out += bj * np.fft.ifftn(self.ik[j] * vh, axes=self.axes)
        if self.c2 is not None:
            out += self.c2.apply(GridField(grid, np.conj(u))).values
        if self.spec.forcing is not None:
            out += _forcing_values(self.spec.forcing, t)
        return out


def _sup_samples(p: Symbol, grid: BoxGrid, order: float, count: int = 4096, seed: int = 1):
    rng = np.random.default_rng(seed)
    n = grid.dim
    x = rng.uniform(-grid.L, grid.L, size=(count, n))
    xi = rng.uniform(-1, 1, size=(count, n)) * grid.xi_max
    v = np.abs(p(x, xi)) / (1.0 + np.sum(xi * xi, axis=-1)) ** (order / 2.0)
    return float(np.max(v))


def dt_max(spec: LinearOperatorSpec, grid: BoxGrid, cfl: float = 2.5) -> float:
    """cfl / (nu xi_max^2 + B1 xi_max + C0) with xi_max = pi N / L."""
    xi_max = math.pi * grid.N / grid.L
    B1 = 0.0
    if spec.b1 is not None:
        B1 += _sup_samples(spec.b1, grid, 1.0)
    if spec.b2 is not None:
        B1 += float(np.max(np.abs(spec.b2(grid.nodes))))
    C0 = 0.0
    for c in (spec.c1, spec.c2):
        if c is not None:
            C0 += _sup_samples(c, grid, 0.0)
    return cfl / (spec.field.nu * xi_max**2 + B1 * xi_max + C0)


def _norm_record(t, u: GridField, cfg: EvolveConfig):
    rec = {"t": float(t), "l2": u.norm()}
    rec["hs"] = {str(s): sobolev_norm(u, s) for s in cfg.sobolev}
    if cfg.N_weight:
        rec["weighted"] = weighted_norm(u, 0.0, cfg.N_weight)
    return rec


def evolve_linear(u0: GridField, spec: LinearOperatorSpec, T: float,
                  cfg: EvolveConfig | None = None) -> EvolutionTrace:
    """RK4 from t = 0 to T with snapshots every ``cfg.stride`` steps.

    Raises ``BlowUp`` (carrying the trace up to the last finite snapshot)
    when ||u|| exceeds 1e8 ||u0|| or a value becomes non-finite.
    """
    cfg = cfg or EvolveConfig()
    grid = u0.grid
    limit = dt_max(spec, grid, cfg.cfl)
    if cfg.dt is None:
        steps = max(1, math.ceil(T / limit - 1e-12))
    else:
        if cfg.dt > limit * (1 + 1e-12):
            raise ValueError(f"dt={cfg.dt:g} exceeds the stability bound {limit:g}")
        steps = max(1, round(T / cfg.dt))
    dt = T / steps
    rhs = _Generator(spec, grid)
    u = np.array(u0.values, dtype=complex)
    n0 = u0.norm()
    # forced runs from zero data are measured on an absolute scale
    ref = n0 if n0 > 0 else 1.0
    trace = EvolutionTrace([(0.0, u0)], dt, "rk4", [_norm_record(0.0, u0, cfg)], spec=spec)
    trace.diagnostics["dt_max"] = limit
    t = 0.0
    for step in range(1, steps + 1):
        k1 = rhs(t, u)
        k2 = rhs(t + dt / 2, u + dt / 2 * k1)
        k3 = rhs(t + dt / 2, u + dt / 2 * k2)
        k4 = rhs(t + dt, u + dt * k3)
        u_new = u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = step * dt
        nrm = math.sqrt(float(np.sum(np.abs(u_new) ** 2)) * grid.cell_volume)
        if not math.isfinite(nrm) or nrm > BLOWUP_FACTOR * ref:
            trace.diagnostics["blowup_time"] = t
            raise BlowUp(trace, t)
        u = u_new
        if step % cfg.stride == 0 or step == steps:
            U = GridField(grid, u)
            trace.snapshots.append((t, U))
            trace.norm_history.append(_norm_record(t, U, cfg))
    trace.diagnostics["boundary_mass"] = boundary_mass_fraction(trace.final())
    return trace


# ---------------------------------------------------------------- packets

def wave_packet(grid: BoxGrid, lam: float, direction=None, center=None) -> GridField:
    """exp(i lam e.x) exp(-|x - c|^2 / 2), unit L2 norm."""
    n = grid.dim
    e = np.eye(n)[0] if direction is None else np.asarray(direction, float)
    c = np.zeros(n) if center is None else np.asarray(center, float)
    x = grid.nodes
    v = np.exp(1j * lam * (x @ e)) * np.exp(-np.sum((x - c) ** 2, axis=-1) / 2.0)
    u = GridField(grid, v)
    return u * (1.0 / u.norm())


def knapp_packet(grid: BoxGrid, lam: float) -> GridField:
    """exp(i lam x1) exp(-x1^2/2 - x2^2/(2 lam)): frequency width lam^(-1/2) across e1."""
    x = grid.nodes
    v = np.exp(1j * lam * x[..., 0] - x[..., 0] ** 2 / 2.0)
    for j in range(1, grid.dim):
        v = v * np.exp(-x[..., j] ** 2 / (2.0 * lam))
    u = GridField(grid, v)
    return u * (1.0 / u.norm())


# ---------------------------------------------------------------- functionals

def _trapezoid(t, y):
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(t)))


def smoothing_functional(trace: EvolutionTrace, s: float = 0.0, N_weight: float = 2.0) -> dict:
    """LHS = int_0^T || <x>^(-N/2) J^(s+1/2) u ||^2 dt against (1 + T) sup ||u||_{H^s}^2.

    Both forcing variants are reported: int ||f||^2 dt and
    int || <x>^(N/2) J^(s-1/2) f ||^2 dt.
    """
    if len(trace.snapshots) < 3:
        raise ValueError("smoothing functional needs at least three snapshots")
    t = trace.times
    T = float(t[-1] - t[0])
    lhs = _trapezoid(t, [weighted_norm(u, s + 0.5, -N_weight / 2.0) ** 2 for _, u in trace.snapshots])
    sup = max(sobolev_norm(u, s) ** 2 for _, u in trace.snapshots)
    rhs_sup = (1.0 + T) * sup
    f_l2 = f_w = 0.0
    spec = trace.spec
    if spec is not None and spec.forcing is not None:
        g = trace.grid
        fs = [GridField(g, _forcing_values(spec.forcing, ti)) for ti in t]
        f_l2 = _trapezoid(t, [f.norm() ** 2 for f in fs])
        f_w = _trapezoid(t, [weighted_norm(f, s - 0.5, N_weight / 2.0) ** 2 for f in fs])
    rhs = rhs_sup + f_l2
    degenerate = rhs == 0.0
    return {"lhs": lhs, "rhs_sup": rhs_sup, "rhs_forcing_l2": f_l2, "rhs_forcing_weighted": f_w,
            "ratio": float("nan") if degenerate else lhs / rhs,
            "ratio_weighted": float("nan") if rhs_sup + f_w == 0 else lhs / (rhs_sup + f_w),
            "degenerate": degenerate, "T": T, "s": s, "N_weight": N_weight}


def _linear_rate(t, y):
    if len(t) < 2:
        return 0.0
    return float(np.polyfit(np.asarray(t, float), np.asarray(y, float), 1)[0])


def k_transform_energy(trace: EvolutionTrace, family, table=None, angles: int = 64) -> dict:
    """History of ||(K^R)^* u(t)|| next to the raw ||u(t)||."""
    grid = trace.grid
    tab = table if table is not None else family.table(grid, "k", angles=angles)
    op = operator(tab, grid)
    t = trace.times
    raw = np.array([u.norm() for _, u in trace.snapshots])
    transformed = np.array([op.adjoint(u).norm() for _, u in trace.snapshots])
    return {"t": t.tolist(), "raw": raw.tolist(), "transformed": transformed.tolist(),
            "raw_rate": _linear_rate(t, raw), "transformed_rate": _linear_rate(t, transformed)}


def error_operator_check(family, probe_fields, freqs=(8.0, 16.0, 32.0), tables=None,
                         angles: int = 64) -> dict:
    """||E u|| / ||u|| with E = I - K~ K^*, plus a modulated-probe sweep of K~ K - I."""
    grid = probe_fields[0].grid
    if tables is None:
        tables = (family.table(grid, "k", angles=angles), family.table(grid, "k_tilde", angles=angles))
    K = operator(tables[0], grid)
    Kt = operator(tables[1], grid)
    ratios = []
    for u in probe_fields:
        Eu = u - Kt.apply(K.adjoint(u))
        ratios.append(Eu.norm() / u.norm())
    sweep = []
    base = probe_fields[0]
    for lam in freqs:
        if lam >= grid.xi_max:
            raise ValueError(f"probe frequency {lam} beyond the grid band {grid.xi_max:g}")
        e = np.zeros(grid.dim)
        e[0] = lam
        u = base * np.exp(1j * (grid.nodes @ e))
        r = Kt.apply(K.apply(u)) - u
        sweep.append((float(lam), r.norm() / u.norm()))
    return {"ratios": ratios, "sweep": sweep}


# ---------------------------------------------------------------- analytic demos

def mizohata_blowup_demo(lambda_freq: float, T: float, grid: BoxGrid, times=None,
                         width: float = 1.0, imaginary: bool = True) -> dict:
    """Exact solution of d_t u = i Lap u + b . grad u with b = (i, 0, ..) or (1, 0, ..).

    The packet is centered at frequency -lambda e1, where the multiplier
    exp(-t(i|xi|^2 + xi_1)) grows like exp(lambda t).
    """
    if lambda_freq + 6.0 / width >= grid.xi_max:
        raise ValueError("packet frequency too close to the grid band edge")
    times = np.linspace(0.0, T, 11) if times is None else np.asarray(times, float)
    x = grid.nodes
    u0 = GridField(grid, np.exp(-1j * lambda_freq * x[..., 0] - np.sum(x * x, -1) / (2 * width**2)))
    xi = grid.freqs
    h = np.sum(xi * xi, axis=-1)
    lin = xi[..., 0] if imaginary else -1j * xi[..., 0]
    n0 = u0.spectral_norm()
    rows = []
    for t in times:
        mult = np.exp(-t * (1j * h + lin))
        g = math.sqrt(float(np.sum(np.abs(mult * u0.spectrum) ** 2)) * grid.frequency_cell_volume) / n0
        ref = math.exp(lambda_freq * t) if imaginary else 1.0
        rows.append({"t": float(t), "growth": g, "reference": ref, "rel_error": abs(g - ref) / ref})
    return {"lambda": lambda_freq, "rows": rows, "imaginary": imaginary}


_VARIANTS = {
    "ultrahyperbolic": np.array([[0.0, 0.5], [0.5, 0.0]]),
    "elliptic": np.eye(2),
}


def _pair_propagator(p, q, r, t):
    """exp(t [[p, q], [r, -p]]) entries via cosh/sinh of mu = sqrt(p^2 + q r)."""
    mu = np.sqrt(p * p + q * r + 0j)
    small = np.abs(mu * t) < 1e-8
    c = np.cosh(mu * t)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, t, np.sinh(mu * t) / np.where(small, 1.0, mu))
    return c + s * p, s * q, s * r, c - s * p


def gain_exponent_probe(variant: str, freqs=(4.0, 8.0, 16.0, 32.0), T: float = 0.5,
                        grid: BoxGrid | None = None, exponents=(0.25, 0.5), N_weight: float = 2.0,
                        b2=(1j, 0.0), steps: int = 40, packet: str = "knapp") -> dict:
    """Smoothing ratios at several derivative exponents for constant-coefficient models.

    The equation d_t u = i sigma L u + b2 . grad(conj u) decouples into
    2 x 2 systems for (u^(xi), conj u^(-xi)), solved exactly.  ``variant``
    is "ultrahyperbolic" (h = xi1 xi2) or "elliptic" (h = |xi|^2).  The
    ratio at exponent a is int_0^T ||<x>^(-N/2) J^a u||^2 dt / ((1+T) sup ||u||^2).
    """
    if variant not in _VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    grid = grid or BoxGrid(2, 40.0, 1024)
    A0 = _VARIANTS[variant]
    xi = grid.freqs
    h = np.einsum("...j,jk,...k->...", xi, A0, xi)
    b2 = np.asarray(b2, dtype=complex)
    beta = 1j * (xi @ b2)
    neg = np.ix_(*[(-grid.k_axis) % grid.N] * grid.dim)
    # d/dt u^(xi) = -i h u^(xi) + beta(xi) v(xi),  v(xi) = conj u^(-xi)
    p = -1j * h
    q = beta
    r = np.conj(-beta)
    w = japanese_x(grid) ** (-N_weight / 2.0)
    jap = 1.0 + np.sum(xi * xi, axis=-1)
    times = np.linspace(0.0, T, steps + 1)
    rows = []
    for lam in freqs:
        u0 = knapp_packet(grid, lam) if packet == "knapp" else wave_packet(grid, lam)
        uh0 = u0.spectrum
        v0 = np.conj(uh0[neg])
        lhs = {a: [] for a in exponents}
        l2 = []
        for t in times:
            m11, m12, _, _ = _pair_propagator(p, q, r, t)
            uh = m11 * uh0 + m12 * v0
            l2.append(math.sqrt(float(np.sum(np.abs(uh) ** 2)) * grid.frequency_cell_volume))
            for a in exponents:
                ua = GridField.from_spectrum(grid, jap ** (a / 2.0) * uh)
                lhs[a].append(float(np.sum(np.abs(w * ua.values) ** 2)) * grid.cell_volume)
        sup = max(l2) ** 2
        row = {"lambda": float(lam)}
        for a in exponents:
            row[f"ratio_{a:g}"] = _trapezoid(times, lhs[a]) / ((1.0 + T) * sup)
        rows.append(row)
    verdict = {}
    for a in exponents:
        vals = [r_[f"ratio_{a:g}"] for r_ in rows]
        verdict[f"{a:g}"] = {
            "spread": max(vals) / min(vals),
            "increasing": all(b > c for b, c in zip(vals[1:], vals[:-1])),
            "growth": vals[-1] / vals[0],
            "bounded": max(vals) / min(vals) <= 2.0,
        }
    return {"variant": variant, "rows": rows, "verdict": verdict, "T": T, "packet": packet}


def weighted_growth_check(u0: GridField, spec: LinearOperatorSpec, T: float, N_weight: int = 1,
                          s: float = 0.0, cfg: EvolveConfig | None = None) -> dict:
    """Fit ||<x>^(2N) u(t)||_{H^s}^2 <= sum_j c_j t^j ||<x>^(2N-j) u0||_{H^(s+j)}^2 at t in {T/4, T/2, T}.

    c_0 = 1 (the t = 0 identity); c_1 .. c_2N >= 0 by non-negative least
    squares on the excess.
    """
    grid = u0.grid
    J = 2 * N_weight
    terms = np.array([weighted_norm(bessel(s + j, u0), 0.0, J - j) ** 2 for j in range(J + 1)])
    lhs0 = weighted_norm(bessel(s, u0), 0.0, J) ** 2
    if u0.norm() == 0:
        return {"t": [0.0], "lhs": [0.0], "c": [0.0] * (J + 1), "zero": True}
    cfg = cfg or EvolveConfig()
    times = [T / 4, T / 2, T]
    lhs = [lhs0]
    u = u0
    t_prev = 0.0
    for t in times:
        tr = evolve_linear(u, spec, t - t_prev, cfg)
        u = tr.final()
        t_prev = t
        lhs.append(weighted_norm(bessel(s, u), 0.0, J) ** 2)
    excess = np.maximum(np.array(lhs[1:]) - terms[0], 0.0)
    Amat = np.array([[t**j * terms[j] for j in range(1, J + 1)] for t in times])
    c, _ = nnls(Amat, excess)
    return {"t": [0.0] + times, "lhs": lhs, "c": [1.0] + c.tolist(), "terms": terms.tolist(),
            "boundary_mass": boundary_mass_fraction(u)}
