"""Phase-space symbols p(x, xi) with order, parity and structure metadata.

``Symbol.evaluate`` broadcasts over leading axes of x and xi (trailing axis
n).  Symbols that are sums of products a_i(x) m_i(xi) may declare that
structure in ``separable``; quantization then avoids the dense O(N^{2n})
kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

PARITIES = ("even", "odd", "none")
CLASS_TAGS = ("classical", "projected", "integrating-factor", "doi")


def _ones(z):
    return np.ones(np.shape(z)[:-1])


@dataclass(frozen=True)
class Symbol:
    dim: int
    evaluate: Callable
    order_m: float = 0.0
    parity: str = "none"
    class_tag: str = "classical"
    metadata: dict = field(default_factory=dict, compare=False)
    separable: tuple | None = None

    def __post_init__(self):
        if self.parity not in PARITIES:
            raise ValueError(f"unknown parity {self.parity!r}")
        if self.class_tag not in CLASS_TAGS:
            raise ValueError(f"unknown class tag {self.class_tag!r}")

    def __call__(self, x, xi):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        return self.evaluate(x, xi)

    @property
    def x_independent(self) -> bool:
        return self.separable is not None and all(a is None for a, _ in self.separable)

    @property
    def xi_independent(self) -> bool:
        return self.separable is not None and all(m is None for _, m in self.separable)

    # ------------------------------------------------------------ builders
    @classmethod
    def from_terms(cls, dim, terms, **kw):
        """Sum of a(x) * m(xi); ``None`` stands for the constant 1."""
        terms = tuple(terms)

        def ev(x, xi):
            shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(xi)[:-1])
            out = np.zeros(shape, dtype=complex)
            for a, m in terms:
                av = 1.0 if a is None else a(x)
                mv = 1.0 if m is None else m(xi)
                out = out + av * mv
            return out

        return cls(dim, ev, separable=terms, **kw)

    @classmethod
    def constant(cls, dim, c=1.0, **kw):
        kw.setdefault("parity", "even")
        c = complex(c)
        return cls.from_terms(dim, [(None, lambda xi: np.full(np.shape(xi)[:-1], c))], **kw)

    @classmethod
    def multiplier(cls, dim, m, **kw):
        return cls.from_terms(dim, [(None, m)], **kw)

    @classmethod
    def x_only(cls, dim, a, **kw):
        kw.setdefault("parity", "even")
        return cls.from_terms(dim, [(a, None)], **kw)

    @classmethod
    def vector_field(cls, dim, b, c0=None, **kw):
        """i b(x) . xi (+ c0(x)): the symbol of b . grad (+ c0)."""
        terms = [(lambda x, j=j: b(x)[..., j], lambda xi, j=j: 1j * xi[..., j]) for j in range(dim)]
        if c0 is not None:
            terms.append((c0, None))
        kw.setdefault("order_m", 1.0)
        kw.setdefault("parity", "odd" if c0 is None else "none")
        if c0 is None:
            kw.setdefault("metadata", {"homogeneous_degree": 1})
        return cls.from_terms(dim, terms, **kw)

    @classmethod
    def japanese(cls, dim, m=1.0, **kw):
        kw.setdefault("parity", "even")
        kw.setdefault("order_m", m)
        return cls.multiplier(dim, lambda xi: (1.0 + np.sum(xi * xi, axis=-1)) ** (m / 2.0), **kw)

    # ------------------------------------------------------------ algebra
    def scaled(self, c) -> "Symbol":
        c = complex(c)
        sep = None
        if self.separable is not None:
            sep = tuple((a, (lambda xi, m=m: c * (1.0 if m is None else m(xi)) * _ones(xi)))
                        for a, m in self.separable)
        return replace(self, evaluate=lambda x, xi: c * self.evaluate(x, xi), separable=sep)

    def conj(self) -> "Symbol":
        sep = None
        if self.separable is not None:
            sep = tuple((None if a is None else (lambda x, a=a: np.conj(a(x))),
                         None if m is None else (lambda xi, m=m: np.conj(m(xi))))
                        for a, m in self.separable)
        return replace(self, evaluate=lambda x, xi: np.conj(self.evaluate(x, xi)), separable=sep)

    def __add__(self, other: "Symbol") -> "Symbol":
        sep = None
        if self.separable is not None and other.separable is not None:
            sep = self.separable + other.separable
        parity = self.parity if self.parity == other.parity else "none"
        return Symbol(self.dim, lambda x, xi: self.evaluate(x, xi) + other.evaluate(x, xi),
                      max(self.order_m, other.order_m), parity, self.class_tag,
                      {"sum": [self.metadata, other.metadata]}, sep)


def as_symbol(p, dim=None) -> Symbol:
    """Wrap a bare closure (x, xi) -> values as a general Symbol."""
    if isinstance(p, Symbol):
        return p
    if callable(p):
        if dim is None:
            raise ValueError("dimension needed to wrap a bare closure")
        return Symbol(dim, p)
    raise TypeError(f"cannot interpret {type(p).__name__} as a symbol")
