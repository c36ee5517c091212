"""Periodic-box discretization and Fourier quadrature of pseudo-differential operators.

Conventions
-----------
Nodes ``x_j = -L + 2 L j / N`` per axis and frequencies ``xi_k = pi k / L``
for ``k in [-N/2, N/2)``.  The discrete transform approximates the unitary
continuous one,

    u_hat(xi_k) = (2 pi)^(-n/2) sum_j exp(-i x_j . xi_k) u(x_j) dx^n,

and ``Psi_p u(x_j) = (2 pi)^(-n/2) sum_k exp(i x_j . xi_k) p(x_j, xi_k) u_hat(xi_k) dxi^n``.
Arrays over frequencies are stored in numpy FFT order.  The unpaired
Nyquist frequency ``k = -N/2`` is zeroed in every symbol application unless
the symbol is declared even.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from pathlib import Path

import numpy as np

from .symbols import Symbol, as_symbol

DEFAULT_CHUNK = 1 << 22  # symbol evaluations per block in the dense path


class BoundaryMassWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BoxGrid:
    dim: int
    L: float = 20.0
    N: int = 64

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError("supported dimensions are n in {1, 2, 3}")
        if self.N % 2 or self.N < 2:
            raise ValueError("points_per_axis must be a positive even integer")
        if not self.L > 0:
            raise ValueError("half_length must be positive")

    @property
    def shape(self):
        return (self.N,) * self.dim

    @property
    def dx(self):
        return 2.0 * self.L / self.N

    @property
    def dxi(self):
        return math.pi / self.L

    @property
    def cell_volume(self):
        return self.dx**self.dim

    @property
    def frequency_cell_volume(self):
        return self.dxi**self.dim

    @property
    def xi_max(self):
        return math.pi * self.N / (2.0 * self.L)

    @cached_property
    def axis(self):
        return -self.L + self.dx * np.arange(self.N)

    @cached_property
    def k_axis(self):
        """Integer frequency indices in FFT order."""
        return np.fft.fftfreq(self.N, d=1.0 / self.N).round().astype(int)

    @cached_property
    def xi_axis(self):
        return self.dxi * self.k_axis

    @cached_property
    def nodes(self):
        """(N, ..., N, n) node coordinates."""
        return np.stack(np.meshgrid(*([self.axis] * self.dim), indexing="ij"), axis=-1)

    @cached_property
    def freqs(self):
        """(N, ..., N, n) frequencies in FFT order."""
        return np.stack(np.meshgrid(*([self.xi_axis] * self.dim), indexing="ij"), axis=-1)

    @cached_property
    def sign(self):
        """(-1)^(k_1 + ... + k_n) = exp(i L sum xi_k) in FFT order."""
        s = (-1.0) ** np.abs(self.k_axis)
        out = s
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, s)
        return out

    @cached_property
    def nyquist_mask(self):
        """1 except where any frequency index equals -N/2."""
        keep = (self.k_axis != -self.N // 2).astype(float)
        out = keep
        for _ in range(self.dim - 1):
            out = np.multiply.outer(out, keep)
        return out

    def radius(self):
        return np.linalg.norm(self.nodes, axis=-1)

    def spec(self):
        return {"dim": self.dim, "L": self.L, "N": self.N}


def forward(grid: BoxGrid, values):
    c = (grid.dx / math.sqrt(2.0 * math.pi)) ** grid.dim
    return c * grid.sign * np.fft.fftn(values, axes=tuple(range(-grid.dim, 0)))


def inverse(grid: BoxGrid, spectrum):
    c = (grid.dxi / math.sqrt(2.0 * math.pi)) ** grid.dim * grid.N**grid.dim
    return c * np.fft.ifftn(grid.sign * spectrum, axes=tuple(range(-grid.dim, 0)))


class GridField:
    """Complex samples on a BoxGrid with a lazily cached spectrum."""

    __slots__ = ("grid", "values", "_spectrum")

    def __init__(self, grid: BoxGrid, values, spectrum=None):
        values = np.array(values, dtype=complex)
        if values.shape != grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {grid.shape}")
        self.grid = grid
        self.values = values
        self.values.setflags(write=False)
        self._spectrum = spectrum

    @classmethod
    def from_function(cls, grid, fn):
        return cls(grid, fn(grid.nodes))

    @classmethod
    def from_spectrum(cls, grid, spectrum):
        spectrum = np.asarray(spectrum, dtype=complex)
        return cls(grid, inverse(grid, spectrum), spectrum)

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape, dtype=complex))

    @property
    def spectrum(self):
        if self._spectrum is None:
            self._spectrum = forward(self.grid, self.values)
            self._spectrum.setflags(write=False)
        return self._spectrum

    @property
    def has_spectrum(self):
        return self._spectrum is not None

    def norm(self):
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.cell_volume))

    def spectral_norm(self):
        return float(np.sqrt(np.sum(np.abs(self.spectrum) ** 2) * self.grid.frequency_cell_volume))

    def inner(self, other: "GridField"):
        return complex(np.sum(self.values * np.conj(other.values)) * self.grid.cell_volume)

    def conj(self):
        return GridField(self.grid, np.conj(self.values))

    def __add__(self, other):
        return GridField(self.grid, self.values + _vals(other))

    def __sub__(self, other):
        return GridField(self.grid, self.values - _vals(other))

    def __mul__(self, c):
        return GridField(self.grid, self.values * _vals(c))

    __rmul__ = __mul__

    def __neg__(self):
        return GridField(self.grid, -self.values)

    def copy(self):
        return GridField(self.grid, self.values.copy())


def _vals(v):
    return v.values if isinstance(v, GridField) else v


def boundary_mass_fraction(u: GridField, shell: float = 0.1) -> float:
    """Share of |u|^2 in the outer ``shell`` fraction of the box."""
    g = u.grid
    outer = np.any(np.abs(g.nodes) > (1.0 - shell) * g.L, axis=-1)
    total = np.sum(np.abs(u.values) ** 2)
    if total == 0:
        return 0.0
    return float(np.sum(np.abs(u.values[outer]) ** 2) / total)


# ---------------------------------------------------------------- symbols on grids

def _keeps_nyquist(p) -> bool:
    return isinstance(p, Symbol) and p.parity == "even"


def sample_symbol(p, grid: BoxGrid, x_shift=None, xi_shift=None, rows=None):
    """p(x_j + x_shift, xi_k + xi_shift) as an (M, N^n) array, xi in FFT order.

    ``rows`` selects flattened node indices (default all nodes).
    """
    if hasattr(p, "kernel_values"):
        vals = p.kernel_values(grid)
        return vals if rows is None else vals[rows]
    p = as_symbol(p, grid.dim)
    n = grid.dim
    X = grid.nodes.reshape(-1, n)
    if rows is not None:
        X = X[rows]
    XI = grid.freqs.reshape(-1, n)
    if x_shift is not None:
        X = X + np.asarray(x_shift, dtype=float)
    if xi_shift is not None:
        XI = XI + np.asarray(xi_shift, dtype=float)
    out = np.empty((len(X), len(XI)), dtype=complex)
    step = max(1, DEFAULT_CHUNK // len(XI))
    for a in range(0, len(X), step):
        out[a:a + step] = p(X[a:a + step, None, :], XI[None, :, :])
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise FloatingPointError(f"symbol not finite at node {bad[0]}, frequency {bad[1]}")
    return out


class KernelOperator:
    """Dense discrete PDO built from sampled symbol values.

    ``values[j, k] = p(x_j, xi_k)``; the Nyquist column is zeroed unless
    ``keep_nyquist``.
    """

    def __init__(self, grid: BoxGrid, values, keep_nyquist=False):
        self.grid = grid
        n = grid.dim
        X = grid.nodes.reshape(-1, n)
        XI = grid.freqs.reshape(-1, n)
        cxi = (grid.dxi / math.sqrt(2.0 * math.pi)) ** n
        mask = np.ones(len(XI)) if keep_nyquist else grid.nyquist_mask.reshape(-1)
        self.kernel = cxi * np.exp(1j * (X @ XI.T)) * values * mask[None, :]
        self.cx = (grid.dx / math.sqrt(2.0 * math.pi)) ** n

    def apply(self, u: GridField) -> GridField:
        v = self.kernel @ u.spectrum.reshape(-1)
        return GridField(self.grid, v.reshape(self.grid.shape))

    def adjoint(self, w: GridField) -> GridField:
        g = (self.cx / ((self.grid.dxi / math.sqrt(2.0 * math.pi)) ** self.grid.dim)) * (
            self.kernel.conj().T @ w.values.reshape(-1))
        return GridField.from_spectrum(self.grid, g.reshape(self.grid.shape))


class SeparableOperator:
    """sum_i a_i(x) * multiplier m_i(xi), applied with FFTs."""

    def __init__(self, grid: BoxGrid, terms, keep_nyquist=False):
        self.grid = grid
        self.terms = []
        mask = np.ones(grid.shape) if keep_nyquist else grid.nyquist_mask
        for a, m in terms:
            av = None if a is None else np.broadcast_to(np.asarray(a(grid.nodes), dtype=complex), grid.shape)
            mv = mask if m is None else np.asarray(m(grid.freqs), dtype=complex) * mask
            self.terms.append((av, mv))

    def apply(self, u: GridField) -> GridField:
        out = np.zeros(self.grid.shape, dtype=complex)
        uh = u.spectrum
        for av, mv in self.terms:
            w = inverse(self.grid, mv * uh)
            out += w if av is None else av * w
        return GridField(self.grid, out)

    def adjoint(self, w: GridField) -> GridField:
        spec = np.zeros(self.grid.shape, dtype=complex)
        for av, mv in self.terms:
            f = w.values if av is None else np.conj(av) * w.values
            spec += np.conj(mv) * forward(self.grid, f)
        return GridField.from_spectrum(self.grid, spec)


class ChunkedOperator:
    """Dense PDO without storing the kernel; parallel-friendly row blocks."""

    def __init__(self, grid: BoxGrid, p, keep_nyquist=False):
        self.grid = grid
        self.p = p
        self.keep = keep_nyquist

    def _blocks(self):
        total = self.grid.N**self.grid.dim
        step = max(1, DEFAULT_CHUNK // total)
        for a in range(0, total, step):
            rows = np.arange(a, min(total, a + step))
            yield rows, KernelOperator._from_rows(self.grid, self.p, rows, self.keep)

    def apply(self, u: GridField) -> GridField:
        out = np.empty(self.grid.N**self.grid.dim, dtype=complex)
        uh = u.spectrum.reshape(-1)
        for rows, K in self._blocks():
            out[rows] = K @ uh
        return GridField(self.grid, out.reshape(self.grid.shape))

    def adjoint(self, w: GridField) -> GridField:
        g = np.zeros(self.grid.N**self.grid.dim, dtype=complex)
        wv = w.values.reshape(-1)
        n = self.grid.dim
        ratio = (self.grid.dx / self.grid.dxi) ** n
        for rows, K in self._blocks():
            g += K.conj().T @ wv[rows]
        return GridField.from_spectrum(self.grid, (ratio * g).reshape(self.grid.shape))


def _kernel_rows(grid, p, rows, keep):
    n = grid.dim
    X = grid.nodes.reshape(-1, n)[rows]
    XI = grid.freqs.reshape(-1, n)
    cxi = (grid.dxi / math.sqrt(2.0 * math.pi)) ** n
    mask = np.ones(len(XI)) if keep else grid.nyquist_mask.reshape(-1)
    vals = sample_symbol(p, grid, rows=rows)
    return cxi * np.exp(1j * (X @ XI.T)) * vals * mask[None, :]


KernelOperator._from_rows = staticmethod(_kernel_rows)

# dense kernels up to this many entries are stored (complex128: 16 bytes each)
DENSE_LIMIT = 64**4


def operator(p, grid: BoxGrid):
    """Pick the cheapest exact realization of Psi_p on ``grid``."""
    if isinstance(p, (KernelOperator, SeparableOperator, ChunkedOperator)):
        return p
    keep = _keeps_nyquist(p)
    if isinstance(p, Symbol) and p.separable is not None:
        return SeparableOperator(grid, p.separable, keep)
    if hasattr(p, "kernel_values"):
        return KernelOperator(grid, p.kernel_values(grid), getattr(p, "parity", "none") == "even")
    if (grid.N**grid.dim) ** 2 <= DENSE_LIMIT:
        return KernelOperator(grid, sample_symbol(p, grid), keep)
    return ChunkedOperator(grid, p, keep)


def apply_pdo(p, u: GridField) -> GridField:
    """Psi_p u by direct Fourier quadrature (fast path for separable symbols)."""
    return operator(p, u.grid).apply(u)


def adjoint_apply(p, u: GridField) -> GridField:
    """Exact conjugate transpose of the discrete ``apply_pdo`` matrix."""
    return operator(p, u.grid).adjoint(u)


def pdo_at_points(p, u: GridField, points, keep_nyquist=None):
    """Psi_p u evaluated at arbitrary points (m, n) inside the box chart."""
    grid = u.grid
    n = grid.dim
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    XI = grid.freqs.reshape(-1, n)
    keep = _keeps_nyquist(p) if keep_nyquist is None else keep_nyquist
    mask = np.ones(len(XI)) if keep else grid.nyquist_mask.reshape(-1)
    uh = u.spectrum.reshape(-1) * mask
    cxi = (grid.dxi / math.sqrt(2.0 * math.pi)) ** n
    sym = as_symbol(p, n)
    out = np.empty(len(pts), dtype=complex)
    nz = np.flatnonzero(uh != 0)
    XIz, uhz = XI[nz], uh[nz]
    step = max(1, DEFAULT_CHUNK // max(1, len(nz)))
    for a in range(0, len(pts), step):
        P = pts[a:a + step]
        vals = sym(P[:, None, :], XIz[None, :, :])
        out[a:a + step] = cxi * (np.exp(1j * (P @ XIz.T)) * vals) @ uhz
    return out


def bessel(s: float, u: GridField) -> GridField:
    """J^s u = multiplier <xi>^s."""
    if s == 0:
        return u
    g = u.grid
    m = (1.0 + np.sum(g.freqs**2, axis=-1)) ** (s / 2.0)
    return GridField.from_spectrum(g, m * u.spectrum)


def derivative(u: GridField, alpha) -> GridField:
    """Spectral d^alpha u (Nyquist zeroed for odd total order)."""
    g = u.grid
    alpha = tuple(int(a) for a in alpha)
    if not any(alpha):
        return u
    m = np.ones(g.shape, dtype=complex)
    for j, a in enumerate(alpha):
        m = m * (1j * g.freqs[..., j]) ** a
    if sum(alpha) % 2:
        m = m * g.nyquist_mask
    return GridField.from_spectrum(g, m * u.spectrum)


def japanese_x(grid: BoxGrid):
    return np.sqrt(1.0 + np.sum(grid.nodes**2, axis=-1))


def weighted_norm(u: GridField, s: float = 0.0, N_weight: float = 0.0) -> float:
    """|| <x>^N_weight J^s u ||_{L^2} with <x> on the box chart."""
    v = bessel(s, u).values
    w = japanese_x(u.grid) ** N_weight
    return float(np.sqrt(np.sum(np.abs(w * v) ** 2) * u.grid.cell_volume))


def sobolev_norm(u: GridField, s: float = 0.0) -> float:
    m = (1.0 + np.sum(u.grid.freqs**2, axis=-1)) ** (s / 2.0)
    return float(np.sqrt(np.sum(np.abs(m * u.spectrum) ** 2) * u.grid.frequency_cell_volume))


# ---------------------------------------------------------------- operator norms

@dataclass
class NormEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def operator_norm_estimate(p, grid: BoxGrid, iters: int = 100, seed: int = 0,
                           order_m: float = 0.0, rtol: float = 1e-10) -> NormEstimate:
    """sqrt of the top eigenvalue of (Psi_p J^-m)^* (Psi_p J^-m) by power iteration."""
    if iters < 10:
        raise ValueError("iters must be at least 10")
    op = operator(p, grid)
    rng = np.random.default_rng(seed)
    v = GridField(grid, rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape))
    v = v * (1.0 / v.norm())
    lam = 0.0
    for it in range(1, iters + 1):
        w = op.adjoint(op.apply(bessel(-order_m, v)))
        w = bessel(-order_m, w)
        new = float(np.real(w.inner(v)))
        nw = w.norm()
        if nw == 0:
            return NormEstimate(0.0, True, it)
        v = w * (1.0 / nw)
        if it > 1 and abs(new - lam) <= rtol * max(abs(new), 1e-300):
            return NormEstimate(math.sqrt(max(new, 0.0)), True, it)
        lam = new
    return NormEstimate(math.sqrt(max(lam, 0.0)), False, iters)


# ---------------------------------------------------------------- finite-difference symbols

_STENCILS = {
    0: ([0], [1.0]),
    1: ([-1, 1], [-0.5, 0.5]),
    2: ([-1, 0, 1], [1.0, -2.0, 1.0]),
    3: ([-2, -1, 1, 2], [-0.5, 1.0, -1.0, 0.5]),
    4: ([-2, -1, 0, 1, 2], [1.0, -4.0, 6.0, -4.0, 1.0]),
}


def fd_symbol_values(p, grid: BoxGrid, beta_x, beta_xi, hx=1e-2, hxi=1e-2, rows=None):
    """Central-difference d_x^beta_x d_xi^beta_xi p sampled on (nodes, lattice)."""
    n = grid.dim
    orders = list(beta_x) + list(beta_xi)
    if any(o > 4 for o in orders):
        raise ValueError("derivative orders above 4 are not supported")
    steps = [hx] * n + [hxi] * n
    total = None
    stencils = [_STENCILS[o] for o in orders]
    for combo in product(*[range(len(s[0])) for s in stencils]):
        weight = 1.0
        shift = np.zeros(2 * n)
        for ax, idx in enumerate(combo):
            off, w = stencils[ax][0][idx], stencils[ax][1][idx]
            weight *= w / steps[ax] ** orders[ax]
            shift[ax] = off * steps[ax]
        vals = sample_symbol(p, grid, shift[:n], shift[n:], rows=rows)
        total = weight * vals if total is None else total + weight * vals
    return total


def multi_indices(n, max_order, min_order=0):
    out = []
    for order in range(min_order, max_order + 1):
        for a in product(range(order + 1), repeat=n):
            if sum(a) == order:
                out.append(tuple(a))
    return out


def _factorial(alpha):
    return math.prod(math.factorial(a) for a in alpha)


def _binom(alpha, beta):
    return math.prod(math.comb(a, b) for a, b in zip(alpha, beta))


def _leq(beta, alpha):
    return all(b <= a for a, b in zip(alpha, beta))


def _monomial_derivative(alpha, beta, XI):
    """d_xi^beta [(i xi)^alpha] on an array of frequencies (..., n)."""
    if not _leq(beta, alpha):
        return np.zeros(XI.shape[:-1], dtype=complex)
    out = np.ones(XI.shape[:-1], dtype=complex)
    for j, (a, b) in enumerate(zip(alpha, beta)):
        coef = math.factorial(a) / math.factorial(a - b)
        out = out * coef * (1j) ** a * XI[..., j] ** (a - b)
    return out


def composition_residual(phi, alpha, b, N_order: int, u, variant: str = "E1",
                         b2=None, hx=1e-2, hxi=1e-2, dphi=None):
    """Relative L^2 remainder of the truncated composition expansions.

    variant
        ``"E1"``: phi d^alpha Psi_b - Psi_c1;
        ``"E2"``: Psi_b phi d^alpha - Psi_c2;
        ``"adjoint"``: phi (Psi_b^* - Psi_c) with the adjoint expansion;
        ``"product"``: phi (Psi_b Psi_b2^* - Psi_c) with the product expansion.

    Terms use |beta| < N_order.  ``phi`` is an x-closure; ``dphi(beta)``
    may supply its exact derivatives (central differences otherwise).
    ``u`` may be a list of fields sharing one grid; the expansion kernel is
    then assembled once and a list of residuals is returned.
    """
    if not isinstance(u, GridField):
        fields = list(u)
        return _composition_residuals(phi, alpha, b, N_order, fields, variant, b2, hx, hxi, dphi)
    return _composition_residuals(phi, alpha, b, N_order, [u], variant, b2, hx, hxi, dphi)[0]


def _composition_residuals(phi, alpha, b, N_order, fields, variant, b2, hx, hxi, dphi):
    grid = fields[0].grid
    n = grid.dim
    alpha = tuple(int(a) for a in alpha)
    if sum(alpha) > 2 or N_order > 3 or N_order < 1:
        raise ValueError("supported: |alpha| <= 2 and 1 <= N_order <= 3")
    X = grid.nodes
    XIf = grid.freqs.reshape(-1, n)
    phiv = np.asarray(phi(X), dtype=complex)
    betas = multi_indices(n, N_order - 1)
    keep = _keeps_nyquist(b)
    B = operator(b, grid)
    size = grid.N**n
    c = np.zeros((size, size), dtype=complex)
    if variant == "E1":
        for beta in betas:
            coef = (1j) ** (-sum(beta)) / _factorial(beta)
            mono = _monomial_derivative(alpha, beta, XIf)
            if np.any(mono):
                c += coef * mono[None, :] * fd_symbol_values(b, grid, beta, (0,) * n, hx, hxi)
        c *= phiv.reshape(-1, 1)
        K = KernelOperator(grid, c, keep)

        def residual(u):
            return derivative(B.apply(u), alpha) * phiv - K.apply(u)
    elif variant == "E2":
        mono = _monomial_derivative(alpha, (0,) * n, XIf)
        for beta in betas:
            coef = (1j) ** (-sum(beta)) / _factorial(beta)
            dp = _phi_derivative(phi, dphi, beta, X, hx).reshape(-1, 1)
            c += coef * dp * fd_symbol_values(b, grid, (0,) * n, beta, hx, hxi)
        c *= mono[None, :]
        K = KernelOperator(grid, c, keep)

        def residual(u):
            return B.apply(derivative(u, alpha) * phiv) - K.apply(u)
    elif variant == "adjoint":
        for beta in betas:
            coef = (1j) ** (-sum(beta)) / _factorial(beta)
            c += coef * np.conj(fd_symbol_values(b, grid, beta, beta, hx, hxi))
        K = KernelOperator(grid, c, keep)

        def residual(u):
            return (B.adjoint(u) - K.apply(u)) * phiv
    elif variant == "product":
        if b2 is None:
            raise ValueError("product variant needs b2")
        c = _product_symbol(b, b2, grid, betas, hx, hxi)
        K = KernelOperator(grid, c, keep and _keeps_nyquist(b2))
        B2 = operator(b2, grid)

        def residual(u):
            return (B.apply(B2.adjoint(u)) - K.apply(u)) * phiv
    else:
        raise ValueError(f"unknown variant {variant!r}")
    out = []
    for u in fields:
        unorm = u.norm()
        out.append(0.0 if unorm == 0 else residual(u).norm() / unorm)
    return out


def _phi_derivative(phi, dphi, beta, X, h):
    if dphi is not None:
        return np.asarray(dphi(beta, X), dtype=complex)
    if not any(beta):
        return np.asarray(phi(X), dtype=complex)
    n = X.shape[-1]
    total = 0.0
    stencils = [_STENCILS[o] for o in beta]
    for combo in product(*[range(len(s[0])) for s in stencils]):
        w = 1.0
        shift = np.zeros(n)
        for ax, idx in enumerate(combo):
            w *= stencils[ax][1][idx] / h ** beta[ax]
            shift[ax] = stencils[ax][0][idx] * h
        total = total + w * np.asarray(phi(X + shift), dtype=complex)
    return total


def _product_symbol(b1, b2, grid, betas, hx, hxi):
    """sum_{|a|<N} i^-|a|/a! d_xi^a [b1 d_x^a conj(b2)] via the Leibniz rule in xi."""
    n = grid.dim
    c = np.zeros((grid.N**n, grid.N**n), dtype=complex)
    for a in betas:
        coef = (1j) ** (-sum(a)) / _factorial(a)
        for g in multi_indices(n, sum(a)):
            if not _leq(g, a):
                continue
            rest = tuple(ai - gi for ai, gi in zip(a, g))
            d1 = fd_symbol_values(b1, grid, (0,) * n, g, hx, hxi)
            d2 = np.conj(fd_symbol_values(b2, grid, a, rest, hx, hxi))
            c += coef * _binom(a, g) * d1 * d2
    return c


def weight_commutator_residual(p, alpha, u: GridField, h: float) -> float:
    """|| x^a Psi_p u - Psi_p[x^a u] - sum_{0<b<=a} C(a,b) Psi_{i^|b| d_xi^b p}[x^(a-b) u] ||.

    Finite differences of p in xi use step h.
    """
    grid = u.grid
    n = grid.dim
    alpha = tuple(int(a) for a in alpha)
    X = grid.nodes

    def xpow(beta):
        out = np.ones(grid.shape)
        for j, b in enumerate(beta):
            out = out * X[..., j] ** b
        return out

    lhs = apply_pdo(p, u) * xpow(alpha) - apply_pdo(p, u * xpow(alpha))
    rhs = GridField.zeros(grid)
    sym = as_symbol(p, n)
    for beta in multi_indices(n, sum(alpha), 1):
        if not _leq(beta, alpha):
            continue
        dsym = _fd_xi_symbol(sym, beta, h).scaled((1j) ** sum(beta))
        rest = tuple(a - b for a, b in zip(alpha, beta))
        rhs = rhs + apply_pdo(dsym, u * xpow(rest)) * _binom(alpha, beta)
    return (lhs - rhs).norm()


def _fd_xi_symbol(sym: Symbol, beta, h) -> Symbol:
    """Symbol whose values are central differences of ``sym`` in xi."""
    n = sym.dim
    stencils = [_STENCILS[o] for o in beta]
    shifts = []
    for combo in product(*[range(len(s[0])) for s in stencils]):
        w = 1.0
        shift = np.zeros(n)
        for ax, idx in enumerate(combo):
            w *= stencils[ax][1][idx] / h ** beta[ax]
            shift[ax] = stencils[ax][0][idx] * h
        shifts.append((w, shift))

    def ev(x, xi):
        return sum(w * sym(x, xi + s) for w, s in shifts)

    sep = None
    if sym.separable is not None:
        sep = tuple((a, (lambda xi, m=m: sum(w * (1.0 if m is None else m(xi + s)) for w, s in shifts)))
                    for a, m in sym.separable)
    return Symbol(n, ev, sym.order_m - sum(beta), "none", sym.class_tag, {"fd_xi": beta}, sep)


# ---------------------------------------------------------------- decay probes

def decay_probe(v, direction_set, radii, floor: float = 1e-13):
    """|v| sampled along rays r * omega with a fitted decay exponent per direction.

    ``v`` is a GridField (evaluated by trigonometric interpolation) or a
    callable on (m, n) points.  Returns ``{"rows": [(direction, r, |v|)],
    "exponents": [...]}``; exponents fit log|v| = c - k log r over samples
    above ``floor`` times the largest sample, and are ``inf`` when
    everything beyond the first radius sits below it.
    """
    dirs = np.atleast_2d(np.asarray(direction_set, dtype=float))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.asarray(radii, dtype=float)
    rows = []
    exps = []
    for d in dirs:
        pts = radii[:, None] * d[None, :]
        if isinstance(v, GridField):
            vals = np.abs(pdo_at_points(Symbol.constant(v.grid.dim), v, pts))
        else:
            vals = np.abs(np.asarray(v(pts)))
        rows.extend((tuple(d), float(r), float(a)) for r, a in zip(radii, vals))
        exps.append(fit_decay_exponent(radii, vals, floor))
    return {"rows": rows, "exponents": exps}


def fit_decay_exponent(radii, vals, floor=1e-13):
    vals = np.asarray(vals, dtype=float)
    top = vals.max() if vals.size else 0.0
    if top == 0:
        return math.inf
    ok = vals > floor * top
    if ok.sum() < 2:
        return math.inf
    slope = np.polyfit(np.log(np.asarray(radii)[ok]), np.log(vals[ok]), 1)[0]
    return float(-slope)


# ---------------------------------------------------------------- snapshots

def save_field(path, u: GridField, t: float | None = None, extra: dict | None = None):
    """Write ``<path>.bin`` (little-endian complex128, row-major) and ``<path>.json``."""
    path = Path(path)
    data = np.ascontiguousarray(u.values, dtype="<c16")
    path.with_suffix(".bin").write_bytes(data.tobytes())
    meta = {"grid": u.grid.spec(), "time": t, "l2_norm": u.norm(),
            "dtype": "complex128-le-interleaved", "order": "row-major"}
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path.with_suffix(".bin"), path.with_suffix(".json")


def load_field(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    g = meta["grid"]
    grid = BoxGrid(g["dim"], g["L"], g["N"])
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<c16")
    return GridField(grid, raw.reshape(grid.shape).astype(complex)), meta
