import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schrolab import quantize as qz
from schrolab import symcalc as sc
from schrolab.symbols import Symbol


def _gauss(grid, center=0.0, width=1.0, k=None):
    x = grid.nodes - center
    v = np.exp(-np.sum(x * x, -1) / (2 * width**2)).astype(complex)
    if k is not None:
        v = v * np.exp(1j * (grid.nodes @ np.asarray(k, dtype=float)))
    return qz.GridField(grid, v)


def _random_field(grid, rng):
    # smooth random field: random low-frequency spectrum times a Gaussian envelope
    spec = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    spec = spec * np.exp(-np.sum(grid.freqs**2, -1) / 8)
    u = qz.GridField.from_spectrum(grid, spec)
    return u * np.exp(-np.sum(grid.nodes**2, -1) / 8)


@pytest.fixture(scope="module")
def g2():
    return qz.BoxGrid(2, 8.0, 32)


def test_grid_basics():
    g = qz.BoxGrid(1, 5.0, 8)
    np.testing.assert_allclose(g.axis, -5 + 1.25 * np.arange(8))
    assert g.xi_max == pytest.approx(math.pi * 8 / 10)
    assert g.k_axis.tolist() == [0, 1, 2, 3, -4, -3, -2, -1]
    for bad in ((4, 1.0, 8), (1, 1.0, 7), (1, -1.0, 8)):
        with pytest.raises(ValueError):
            qz.BoxGrid(*bad)


def test_transform_is_unitary(g2):
    u = _random_field(g2, np.random.default_rng(0))
    assert u.spectral_norm() == pytest.approx(u.norm(), rel=1e-13)
    back = qz.GridField.from_spectrum(g2, u.spectrum)
    np.testing.assert_allclose(back.values, u.values, atol=1e-14)


def test_gaussian_transform_closed_form():
    # the unitary transform of exp(-|x|^2/2) is exp(-|xi|^2/2)
    g = qz.BoxGrid(2, 10.0, 64)
    u = _gauss(g)
    np.testing.assert_allclose(u.spectrum, np.exp(-np.sum(g.freqs**2, -1) / 2), atol=1e-13)


def test_apply_identity_derivative_multiplication(g2):
    u = _random_field(g2, np.random.default_rng(1))
    np.testing.assert_allclose(qz.apply_pdo(Symbol.constant(2, 1.0), u).values, u.values, atol=1e-14)
    d1 = qz.apply_pdo(Symbol.multiplier(2, lambda xi: 1j * xi[..., 0], parity="odd"), u)
    np.testing.assert_allclose(d1.values, qz.derivative(u, (1, 0)).values, atol=1e-13)
    a = lambda x: np.cos(x[..., 0]) + x[..., 1] ** 2
    prod = qz.apply_pdo(Symbol.x_only(2, a), u)
    np.testing.assert_allclose(prod.values, a(g2.nodes) * u.values, atol=1e-13)


def test_dense_and_separable_paths_agree():
    g = qz.BoxGrid(2, 6.0, 16)
    u = _random_field(g, np.random.default_rng(2))
    b = lambda x: np.stack([np.exp(-np.sum(x * x, -1)), 0.5 * np.sin(x[..., 0])], -1)
    sep = Symbol.vector_field(2, b)
    dense = Symbol(2, lambda x, xi: sep(x, xi), parity="odd")
    np.testing.assert_allclose(qz.apply_pdo(sep, u).values, qz.apply_pdo(dense, u).values, atol=1e-12)
    chunked = qz.ChunkedOperator(g, dense)
    np.testing.assert_allclose(chunked.apply(u).values, qz.apply_pdo(dense, u).values, atol=1e-12)


def test_pdo_at_points_matches_nodes():
    g = qz.BoxGrid(2, 6.0, 16)
    u = _random_field(g, np.random.default_rng(3))
    p = Symbol(2, lambda x, xi: np.exp(-np.sum(x * x, -1)) * (1 + np.sum(xi * xi, -1)) ** 0.5 + 0j)
    nodes = g.nodes.reshape(-1, 2)[::17]
    np.testing.assert_allclose(qz.pdo_at_points(p, u, nodes),
                               qz.apply_pdo(p, u).values.reshape(-1)[::17], atol=1e-12)


def test_bessel(g2):
    u = _random_field(g2, np.random.default_rng(4))
    assert qz.bessel(0.0, u) is u
    np.testing.assert_allclose(qz.bessel(-1.5, qz.bessel(1.5, u)).values, u.values, atol=1e-13)
    k = np.array([3.0, -2.0]) * g2.dxi
    pw = qz.GridField(g2, np.exp(1j * (g2.nodes @ k)))
    np.testing.assert_allclose(qz.bessel(2.0, pw).values, (1 + k @ k) * pw.values, atol=1e-12)


@pytest.mark.parametrize("kind", ["separable", "dense"])
def test_adjoint_defining_property(kind):
    g = qz.BoxGrid(2, 5.0, 16)
    rng = np.random.default_rng(5)
    if kind == "separable":
        p = Symbol.vector_field(2, lambda x: np.stack([np.exp(-np.sum(x * x, -1)) * (1 + 1j), np.cos(x[..., 1])], -1))
    else:
        p = sc.make_projected_symbol(sc.gaussian_amplitude(0.5), np.diag([1.0, -1.0]))
    for _ in range(3):
        u = qz.GridField(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape))
        v = qz.GridField(g, rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape))
        lhs = qz.apply_pdo(p, u).inner(v)
        rhs = u.inner(qz.adjoint_apply(p, v))
        assert abs(lhs - rhs) <= 1e-12 * abs(lhs) + 1e-12


def test_adjoint_special_cases(g2):
    u = _random_field(g2, np.random.default_rng(6))
    a = Symbol.x_only(2, lambda x: np.exp(-np.sum(x * x, -1)))
    np.testing.assert_allclose(qz.adjoint_apply(a, u).values, qz.apply_pdo(a, u).values, atol=1e-13)
    i = Symbol.constant(2, 1j)
    np.testing.assert_allclose(qz.adjoint_apply(i, u).values, -1j * u.values, atol=1e-13)


def test_norms():
    g = qz.BoxGrid(2, 10.0, 64)
    assert qz.weighted_norm(qz.GridField.zeros(g), 1.0, 2.0) == 0.0
    u = _gauss(g)
    # ||exp(-|x|^2/2)||^2 = pi in 2-D
    assert qz.weighted_norm(u) == pytest.approx(math.sqrt(math.pi), rel=1e-12)
    assert qz.sobolev_norm(u) == pytest.approx(u.norm(), rel=1e-12)
    # ||<xi> u_hat||^2 = pi + pi = 2 pi (E|xi|^2 = 1 under |u_hat|^2 / pi)
    assert qz.sobolev_norm(u, 1.0) == pytest.approx(math.sqrt(2 * math.pi), rel=1e-10)
    lo, hi = qz.weighted_norm(u, 0.0, -2.0), qz.weighted_norm(u, 0.0, 2.0)
    assert lo * hi >= qz.weighted_norm(u) ** 2 * (1 - 1e-12)


def test_operator_norm_trivial_cases():
    g = qz.BoxGrid(2, 5.0, 16)
    one = qz.operator_norm_estimate(Symbol.constant(2, 1.0), g, iters=20)
    assert one.value == pytest.approx(1.0, abs=1e-6)
    a = lambda x: 1.0 + 2.0 * np.exp(-np.sum((x - 0.3125) ** 2, -1))
    est = qz.operator_norm_estimate(Symbol.x_only(2, a), g, iters=200, rtol=1e-13)
    assert est.value == pytest.approx(np.max(a(g.nodes)), abs=1e-6)
    with pytest.raises(ValueError):
        qz.operator_norm_estimate(Symbol.constant(2, 1.0), g, iters=5)


def test_operator_norm_resolution_stable():
    Ah = np.diag([1.0, -1.0])
    b = sc.make_projected_symbol(sc.light_cone_amplitude(0.0), Ah)
    vals = [qz.operator_norm_estimate(b, qz.BoxGrid(2, 10.0, N), iters=60, rtol=1e-8).value
            for N in (32, 48)]
    assert max(vals) / min(vals) <= 1.2


def test_composition_trivial_case():
    g = qz.BoxGrid(2, 6.0, 32)
    u = _gauss(g, 0.0, 1.0, k=[1.0, 0.0])
    b = Symbol.japanese(2, 0.5)
    phi = lambda x: np.exp(-np.sum(x * x, -1) / 2)
    assert qz.composition_residual(phi, (0, 0), b, 1, u) < 1e-13


def test_composition_bounded_and_improving():
    g = qz.BoxGrid(2, 6.0, 32)
    Ah = np.diag([1.0, -1.0])
    b = sc.make_projected_symbol(sc.gaussian_amplitude(0.0), Ah)
    phi = lambda x: np.exp(-np.sum(x * x, -1) / 2)
    rng = np.random.Generator(np.random.Philox(11))
    us = []
    for _ in range(10):
        d = rng.normal(size=2)
        us.append(_gauss(g, rng.uniform(-1, 1, 2), 1.0, k=4.0 * d / np.linalg.norm(d)))
    r1 = np.array(qz.composition_residual(phi, (1, 0), b, 1, us, "E1"))
    r2 = np.array(qz.composition_residual(phi, (1, 0), b, 2, us, "E1"))
    assert np.all(np.isfinite(r1)) and r1.max() < 1.0
    assert r2.mean() <= r1.mean()
    single = qz.composition_residual(phi, (1, 0), b, 1, us[0], "E1")
    assert single == pytest.approx(r1[0], rel=1e-12)


def test_weight_commutator_trivial():
    g = qz.BoxGrid(2, 10.0, 32)
    u = _gauss(g)
    const = Symbol(2, lambda x, xi: np.full(np.broadcast_shapes(x.shape, xi.shape)[:-1], 2.5 + 0j), parity="even")
    assert qz.weight_commutator_residual(const, (1, 0), u, 1e-3) < 1e-12
    xonly = Symbol.x_only(2, lambda x: np.exp(-np.sum(x * x, -1)))
    assert qz.weight_commutator_residual(xonly, (1, 1), u, 1e-3) < 1e-12


def test_weight_commutator_second_order():
    g = qz.BoxGrid(2, 20.0, 128)
    u = _gauss(g)
    p = Symbol.japanese(2, 1.0)
    res = [qz.weight_commutator_residual(p, (1, 0), u, h) for h in (0.2, 0.1, 0.05)]
    slope = np.polyfit(np.log([0.2, 0.1, 0.05]), np.log(res), 1)[0]
    assert slope > 1.8


def test_decay_probe_elliptic_rapid():
    g = qz.BoxGrid(2, 16.0, 64)
    u = _gauss(g)
    v = qz.apply_pdo(Symbol.japanese(2, 1.0), u)
    rep = qz.decay_probe(v, [[1.0, 0.0], [1.0, 1.0]], [2.0, 3.0, 4.0, 5.0])
    assert min(rep["exponents"]) >= 4


def test_fit_decay_exponent():
    r = np.array([10.0, 20.0, 40.0])
    assert qz.fit_decay_exponent(r, 3.0 / r**2) == pytest.approx(2.0)
    assert qz.fit_decay_exponent(r, np.zeros(3)) == math.inf


def test_boundary_mass_fraction():
    g = qz.BoxGrid(1, 10.0, 64)
    assert qz.boundary_mass_fraction(_gauss(g)) < 1e-15
    assert qz.boundary_mass_fraction(qz.GridField(g, np.ones(64))) == pytest.approx(0.125, abs=0.02)


def test_save_load_field(tmp_path):
    g = qz.BoxGrid(2, 3.0, 8)
    u = _random_field(g, np.random.default_rng(7))
    qz.save_field(tmp_path / "u", u, t=0.5)
    back, meta = qz.load_field(tmp_path / "u")
    np.testing.assert_array_equal(back.values, u.values)
    assert meta["time"] == 0.5 and meta["grid"] == {"dim": 2, "L": 3.0, "N": 8}
    assert (tmp_path / "u.bin").stat().st_size == 16 * 64


@given(st.integers(-7, 7), st.integers(-7, 7))
@settings(max_examples=40, deadline=None)
def test_plane_wave_eigenfunction(k1, k2):
    g = qz.BoxGrid(2, 4.0, 16)
    k = np.array([k1, k2]) * g.dxi
    pw = qz.GridField(g, np.exp(1j * (g.nodes @ k)))
    p = Symbol.multiplier(2, lambda xi: np.sum(xi * xi, -1) + 0j, parity="even")
    np.testing.assert_allclose(qz.apply_pdo(p, pw).values, (k @ k) * pw.values, atol=1e-11)
