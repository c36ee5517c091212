"""Variable coefficient matrices A(x), truncations A^R and structural checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .cutoffs import THETA, CutoffProfile

EPS = np.finfo(float).eps


class EvaluationError(ValueError):
    """A coefficient evaluated to a non-finite value."""

    def __init__(self, x, what="matrix"):
        self.x = np.asarray(x)
        super().__init__(f"non-finite {what} entry at x={self.x.tolist()}")


class PerturbationTooLarge(ValueError):
    def __init__(self, x, xi, value, bounds):
        self.x = np.asarray(x)
        self.xi = np.asarray(xi)
        self.value = value
        self.bounds = bounds
        super().__init__(
            f"non-degeneracy violated at x={self.x.tolist()}, xi={self.xi.tolist()}: "
            f"|A xi| = {value:.4g} outside [{bounds[0]:.4g}, {bounds[1]:.4g}]"
        )


@dataclass(frozen=True)
class MatrixField:
    """Vectorized symmetric matrix function and its gradient.

    ``value(x)`` maps points of shape (..., n) to (..., n, n);
    ``grad(x)`` returns (..., n, n, n) with ``[..., l, j, k] = d_l a_jk``.
    """

    dim: int
    value: Callable
    grad: Callable

    @classmethod
    def from_entries(cls, entries, grads):
        """Build from nested lists of scalar closures.

        ``entries[j][k](x)`` gives a_jk on (..., n) points and
        ``grads[j][k](x)`` its gradient with trailing axis n.
        """
        n = len(entries)

        def value(x):
            x = np.asarray(x, dtype=float)
            out = np.empty(x.shape[:-1] + (n, n))
            for j in range(n):
                for k in range(j, n):
                    v = np.broadcast_to(entries[j][k](x), x.shape[:-1])
                    out[..., j, k] = v
                    out[..., k, j] = v
            return out

        def grad(x):
            x = np.asarray(x, dtype=float)
            out = np.empty(x.shape[:-1] + (n, n, n))
            for j in range(n):
                for k in range(j, n):
                    g = np.broadcast_to(grads[j][k](x), x.shape)
                    out[..., :, j, k] = g
                    out[..., :, k, j] = g
            return out

        return cls(n, value, grad)

    @classmethod
    def zero(cls, dim):
        return cls(dim, lambda x: np.zeros(np.shape(x)[:-1] + (dim, dim)),
                   lambda x: np.zeros(np.shape(x)[:-1] + (dim, dim, dim)))


@dataclass(frozen=True)
class CoefficientField:
    """The geometry of the problem: A(x), its gradient and asymptotics."""

    dim: int
    matrix: MatrixField
    asymptotic: np.ndarray
    nu: float
    kind: str
    signature_k: int
    name: str = "field"
    tau: float = 3.0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError("supported dimensions are n in {1, 2, 3}")
        if self.kind not in ("elliptic", "ultrahyperbolic"):
            raise ValueError(f"unknown kind {self.kind!r}")
        a0 = np.asarray(self.asymptotic, dtype=float)
        if a0.shape != (self.dim, self.dim) or not np.array_equal(a0, a0.T):
            raise ValueError("asymptotic matrix must be symmetric n x n")
        object.__setattr__(self, "asymptotic", a0)
        if self.kind == "ultrahyperbolic" and not 1 <= self.signature_k <= self.dim - 1:
            raise ValueError("ultrahyperbolic fields need n >= 2 and 1 <= k <= n-1")
        if self.nu <= 0:
            raise ValueError("nu must be positive")

    def __call__(self, x):
        return self.matrix.value(np.asarray(x, dtype=float))

    def grad(self, x):
        return self.matrix.grad(np.asarray(x, dtype=float))

    def hessian(self, x):
        """Central differences of the gradient; (..., m, l, j, k) = d_m d_l a_jk."""
        x = np.asarray(x, dtype=float)
        h = EPS ** (1.0 / 3.0) * (1.0 + np.linalg.norm(x, axis=-1))
        n = self.dim
        out = np.empty(x.shape[:-1] + (n, n, n, n))
        for m in range(n):
            e = np.zeros(n)
            e[m] = 1.0
            step = h[..., None] * e
            gp = self.grad(x + step)
            gm = self.grad(x - step)
            out[..., m, :, :, :] = (gp - gm) / (2.0 * h[..., None, None, None])
        return out

    @property
    def is_constant(self) -> bool:
        return bool(self.metadata.get("constant", False))


def eval_matrix(field: CoefficientField, x) -> np.ndarray:
    """A(x) at a single point or a batch of points; raises on non-finite entries."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise EvaluationError(x, "point")
    a = field(x)
    if not np.all(np.isfinite(a)):
        bad = ~np.all(np.isfinite(a), axis=(-2, -1))
        where = x if x.ndim == 1 else x[bad][0]
        raise EvaluationError(where)
    return a


# ---------------------------------------------------------------- builtins

def _signature(a0):
    w = np.linalg.eigvalsh(a0)
    return int(np.sum(w > 0))


def _kind_and_nu(a0, extra_nu=1.0):
    w = np.linalg.eigvalsh(a0)
    kind = "elliptic" if np.all(w > 0) else "ultrahyperbolic"
    aw = np.abs(w)
    nu = max(aw.max(), 1.0 / aw.min()) * extra_nu
    return kind, nu


def constant_field(a0, name="constant") -> CoefficientField:
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    n = a0.shape[0]
    kind, nu = _kind_and_nu(a0)
    mf = MatrixField(
        n,
        lambda x: np.broadcast_to(a0, np.shape(x)[:-1] + (n, n)).copy(),
        lambda x: np.zeros(np.shape(x)[:-1] + (n, n, n)),
    )
    return CoefficientField(n, mf, a0, nu, kind, _signature(a0), name,
                            metadata={"constant": True})


def gaussian_matrix(m, amplitude=1.0, width=1.0, center=None) -> MatrixField:
    """x -> amplitude * exp(-|x - c|^2 / width^2) * M."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    n = m.shape[0]
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    w2 = float(width) ** 2

    def value(x):
        y = np.asarray(x, dtype=float) - c
        g = amplitude * np.exp(-np.sum(y * y, axis=-1) / w2)
        return g[..., None, None] * m

    def grad(x):
        y = np.asarray(x, dtype=float) - c
        g = amplitude * np.exp(-np.sum(y * y, axis=-1) / w2)
        dg = (-2.0 / w2) * g[..., None] * y
        return dg[..., :, None, None] * m

    return MatrixField(n, value, grad)


def bump_field(a0, perturbation, amplitude=1.0, width=1.0, name="bump",
               nu_margin=1.25, tau=3.0) -> CoefficientField:
    """A(x) = A0 + amplitude * exp(-|x|^2/width^2) * M."""
    a0 = np.atleast_2d(np.asarray(a0, dtype=float))
    pert = gaussian_matrix(perturbation, amplitude, width)
    n = a0.shape[0]
    mf = MatrixField(n, lambda x: a0 + pert.value(x), pert.grad)
    kind, _ = _kind_and_nu(a0)
    nu = _measure_nu(mf, kind, radius=3.0 * width) * nu_margin
    return CoefficientField(n, mf, a0, nu, kind, _signature(a0), name, tau=tau)


def radial_profile_field(n, profile, dprofile, name="radial", tau=3.0, nu=None):
    """A(x) = (1 + profile(|x|)) I for a scalar radial profile."""
    eye = np.eye(n)

    def value(x):
        r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
        return (1.0 + profile(r))[..., None, None] * eye

    def grad(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        unit = np.where(r[..., None] > 0, x / safe[..., None], 0.0)
        d = dprofile(r)[..., None] * unit
        return d[..., :, None, None] * eye

    mf = MatrixField(n, value, grad)
    if nu is None:
        nu = _measure_nu(mf, "elliptic", radius=8.0) * 1.25
    return CoefficientField(n, mf, eye, nu, "elliptic", n, name, tau=tau)


def elliptic_bump(n=2, amplitude=1.0, width=1.0) -> CoefficientField:
    """A(x) = (1 + amplitude * exp(-|x|^2/width^2)) I."""
    return bump_field(np.eye(n), np.eye(n), amplitude, width, name="elliptic-bump")


def ultrahyperbolic_bump(n=2, k=1, amplitude=0.4, width=1.0) -> CoefficientField:
    """A_h = diag(I_k, -I_{n-k}) plus a Gaussian symmetric perturbation."""
    a0 = np.diag([1.0] * k + [-1.0] * (n - k))
    m = np.full((n, n), 0.5)
    np.fill_diagonal(m, [1.0] * k + [-0.5] * (n - k))
    return bump_field(a0, m, amplitude, width, name="ultrahyperbolic-bump")


def trapped_gallery(n=2, strength=8.0, ring=3.0, width=1.0) -> CoefficientField:
    """Radial speed ring (1 + s exp(-(r - r0)^2/w^2)) I with trapped circular rays."""
    w2 = width**2

    def prof(r):
        return strength * np.exp(-((r - ring) ** 2) / w2)

    def dprof(r):
        return prof(r) * (-2.0 * (r - ring) / w2)

    return radial_profile_field(n, prof, dprof, name="trapped-gallery",
                                nu=(1.0 + strength) * 1.05)


def compact_bump(n=2, amplitude=0.5, radius=0.5) -> CoefficientField:
    """(1 + amplitude * bump(|x|)) I, supported in |x| <= radius."""
    prof = CutoffProfile(radius / 2.0, radius, "bump")
    return radial_profile_field(
        n, lambda r: amplitude * prof.evaluate(r), lambda r: amplitude * prof.derivative(r),
        name="compact-bump", nu=(1.0 + amplitude) * 1.05)


def _measure_nu(mf: MatrixField, kind: str, radius: float, pts: int = 41) -> float:
    n = mf.dim
    axes = [np.linspace(-radius, radius, pts)] * n
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    a = mf.value(grid)
    if kind == "elliptic":
        w = np.linalg.eigvalsh(a)
        lo, hi = w.min(), w.max()
        if lo <= 0:
            raise ValueError("field is not elliptic on the sample grid")
    else:
        sv = np.linalg.svd(a, compute_uv=False)
        lo, hi = sv.min(), sv.max()
        if lo <= 0:
            raise ValueError("field is degenerate on the sample grid")
    return float(max(hi, 1.0 / lo))


# ---------------------------------------------------------------- operations

def truncate(field: CoefficientField, R: float, theta: CutoffProfile = THETA) -> CoefficientField:
    """A^R(x) = A0 + theta(x/R) (A(x) - A0); R = inf returns the field itself."""
    if math.isinf(R):
        return field
    if not R > 1:
        raise ValueError("truncation radius must exceed 1")
    if (theta.inner_radius, theta.outer_radius, theta.kind) != (1.0, 2.0, "bump"):
        raise ValueError("truncation cutoff must be the (1, 2) bump profile")
    a0 = field.asymptotic
    base = field.matrix

    def value(x):
        x = np.asarray(x, dtype=float)
        t = theta.radial(x / R)
        return a0 + t[..., None, None] * (base.value(x) - a0)

    def grad(x):
        x = np.asarray(x, dtype=float)
        t = theta.radial(x / R)
        dt = theta.radial_grad(x / R) / R
        diff = base.value(x) - a0
        return dt[..., :, None, None] * diff[..., None, :, :] + t[..., None, None, None] * base.grad(x)

    meta = dict(field.metadata)
    meta["truncation_radius"] = R
    return replace(field, matrix=MatrixField(field.dim, value, grad),
                   name=f"{field.name}@R={R:g}", metadata=meta)


def fibonacci_directions(n: int, count: int = 256) -> np.ndarray:
    """Deterministic, rotation-fair unit vectors in R^n."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        ang = 2.0 * np.pi * (np.arange(count) + 0.5) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    rho = np.sqrt(1.0 - z * z)
    phi = np.pi * (1.0 + 5**0.5) * i
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def decay_report(field: CoefficientField, radii, tau: float, directions: int = 256):
    """Rows (radius, max over sphere of max_jkl |d_l a_jk| * radius^tau)."""
    radii = list(radii)
    if not radii:
        raise ValueError("decay_report needs at least one radius")
    dirs = fibonacci_directions(field.dim, directions)
    rows = []
    for r in radii:
        g = field.grad(r * dirs)
        rows.append((float(r), float(np.max(np.abs(g)) * r**tau)))
    return rows


def nondegeneracy_violation(field: CoefficientField, nu: float, points) -> tuple | None:
    """First (x, xi, |A xi|) with |A(x) xi| outside [1/nu, nu] over unit xi, or None."""
    pts = np.asarray(points, dtype=float)
    a = field(pts)
    if field.kind == "elliptic":
        w, v = np.linalg.eigh(a)
    else:
        u, w, vt = np.linalg.svd(a)
        v = np.swapaxes(vt, -1, -2)
    lo, hi = 1.0 / nu, nu
    bad = (np.abs(w) < lo) | (np.abs(w) > hi)
    if field.kind == "elliptic":
        bad |= w <= 0
    if not bad.any():
        return None
    i, j = np.argwhere(bad)[0]
    return pts[i], v[i][:, j], float(w[i, j])


def verification_grid(n: int, radius: float = 6.0, pts: int = 25) -> np.ndarray:
    axes = [np.linspace(-radius, radius, pts)] * n
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)


def perturbed_field(field: CoefficientField, B1: MatrixField, eps: float,
                    grid=None) -> CoefficientField:
    """A1 = A + eps * B1 with nu doubled; rejects perturbations breaking non-degeneracy."""
    if eps == 0:
        return field
    base = field.matrix
    mf = MatrixField(field.dim,
                     lambda x: base.value(x) + eps * B1.value(x),
                     lambda x: base.grad(x) + eps * B1.grad(x))
    new = replace(field, matrix=mf, nu=2.0 * field.nu,
                  name=f"{field.name}+{eps:g}B1",
                  metadata={**field.metadata, "constant": False})
    pts = verification_grid(field.dim) if grid is None else grid
    hit = nondegeneracy_violation(new, new.nu, pts)
    if hit is not None:
        x, xi, val = hit
        raise PerturbationTooLarge(x, xi, val, (1.0 / new.nu, new.nu))
    return new
