"""Smooth cutoff profiles built from the exp(-1/t) mollifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def eta(t):
    """exp(-1/t) for t > 0 and 0 otherwise (C-infinity, flat at 0)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def eta_prime(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    tp = t[pos]
    out[pos] = np.exp(-1.0 / tp) / tp**2
    return out


def smooth_step(s):
    """0 for s <= 0, 1 for s >= 1, monotone and smooth in between."""
    s = np.asarray(s, dtype=float)
    f = eta(s)
    g = eta(1.0 - s)
    return f / (f + g)


def smooth_step_prime(s):
    s = np.asarray(s, dtype=float)
    f = eta(s)
    g = eta(1.0 - s)
    fp = eta_prime(s)
    gp = -eta_prime(1.0 - s)
    return (fp * g - f * gp) / (f + g) ** 2


@dataclass(frozen=True)
class CutoffProfile:
    """Radial cutoff t -> [0, 1].

    ``kind="bump"`` equals 1 for ``|t| <= inner_radius`` and 0 for
    ``|t| >= outer_radius``; ``kind="step"`` is the complement (0 inside,
    1 outside).
    """

    inner_radius: float = 1.0
    outer_radius: float = 2.0
    kind: str = "bump"

    def __post_init__(self):
        if not self.outer_radius > self.inner_radius:
            raise ValueError("outer_radius must exceed inner_radius")
        if self.kind not in ("bump", "step"):
            raise ValueError(f"unknown cutoff kind {self.kind!r}")

    def _s(self, t):
        t = np.abs(np.asarray(t, dtype=float))
        return (t - self.inner_radius) / (self.outer_radius - self.inner_radius)

    def evaluate(self, t):
        up = smooth_step(self._s(t))
        return 1.0 - up if self.kind == "bump" else up

    __call__ = evaluate

    def derivative(self, t):
        """d/dt of the profile as a function of signed t."""
        t = np.asarray(t, dtype=float)
        d = smooth_step_prime(self._s(t)) / (self.outer_radius - self.inner_radius)
        d = d * np.sign(t)
        return -d if self.kind == "bump" else d

    def complement(self) -> "CutoffProfile":
        other = "step" if self.kind == "bump" else "bump"
        return CutoffProfile(self.inner_radius, self.outer_radius, other)

    def radial(self, x):
        """Evaluate at |x| for points x of shape (..., n)."""
        return self.evaluate(np.linalg.norm(np.asarray(x, dtype=float), axis=-1))

    def radial_grad(self, x):
        """Gradient of x -> profile(|x|), shape (..., n)."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        d = self.derivative(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(r[..., None] > 0, x / np.where(r > 0, r, 1.0)[..., None], 0.0)
        return d[..., None] * unit


# theta: 1 on |x| <= 1, 0 on |x| >= 2; chi is its complement.
THETA = CutoffProfile(1.0, 2.0, "bump")
CHI = CutoffProfile(1.0, 2.0, "step")


def odd_switch(t):
    """Smooth sign-like profile: -1 for t <= -1/2, +1 for t >= 1/2."""
    return 2.0 * smooth_step(np.asarray(t, dtype=float) + 0.5) - 1.0
