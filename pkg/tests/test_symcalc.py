import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from schrolab import coeffields as cf
from schrolab import symcalc as sc
from schrolab.quantize import BoxGrid
from schrolab.symbols import Symbol

SQPI4 = math.sqrt(math.pi) / 4


def _gauss_b1_1d():
    # Re b1(x, xi) = -exp(-x^2) xi, so b^R = exp(-x^2) xi
    return Symbol(1, lambda x, xi: -np.exp(-np.sum(x * x, -1)) * xi[..., 0] + 0j,
                  order_m=1.0, parity="odd")


@pytest.fixture(scope="module")
def gauss_family():
    return sc.integrating_factor(cf.constant_field(np.eye(1)), _gauss_b1_1d())


# ---------------------------------------------------------------- projection

def test_projection_examples():
    np.testing.assert_array_equal(sc.projection([1.0, 0.0], [0.0, 1.0]), [1.0, 0.0])
    np.testing.assert_allclose(sc.projection([1.0, 1.0], [1.0, 0.0]), [0.0, 1.0])
    with pytest.raises(ValueError):
        sc.projection([1.0, 1.0], [0.0, 0.0])


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.floats(0.1, 10))
@settings(max_examples=100, deadline=None)
def test_projection_properties(v, t):
    y, z = np.array(v[:2]), np.array(v[2:]) + np.array([0.3, 0.0])
    p = sc.projection(y, z)
    np.testing.assert_allclose(p, sc.projection(y, t * z), atol=1e-12 * (1 + np.abs(y).max()))
    assert abs(p @ z) <= 1e-10 * (1 + np.abs(y).max()) * (1 + np.abs(z).max())


def test_projected_symbol_cutoff():
    Ah = np.diag([1.0, -1.0])
    one = sc.make_projected_symbol(lambda s, x, xi: np.ones(len(s)), Ah)
    x = np.array([[0.3, 5.0], [2.0, -1.0]])
    assert np.all(one(x, np.array([[0.5, 0.5], [0.0, 1.0]])) == 0)
    np.testing.assert_array_equal(one(x, np.array([[3.0, 0.0], [1.5, 1.5]])), [1.0, 1.0])
    with pytest.raises(ValueError):
        sc.make_projected_symbol(lambda s, x, xi: 1.0, Ah, variant="other")


def test_light_cone_symbol_support():
    Ah = np.diag([1.0, -1.0])
    b = sc.make_projected_symbol(sc.light_cone_amplitude(0.0), Ah)
    xi = np.array([[4.0, 0.0]] * 3)
    # A_h xi = (4, 0): the projection keeps only x_2
    x = np.array([[7.0, 0.1], [-3.0, 0.3], [0.0, 0.6]])
    np.testing.assert_allclose(b(x, xi).real, [1.0, sc.CutoffProfile(0.25, 0.5)(0.3), 0.0])


# ---------------------------------------------------------------- seminorms

def test_seminorm_trivial_cases():
    rng = np.random.default_rng(3)
    probes = (rng.normal(size=(20, 2)), rng.normal(scale=5, size=(20, 2)))
    assert sc.seminorm_estimate(Symbol.constant(2, 1.0), 3, 0.0, probes) == pytest.approx(1.0)
    assert sc.seminorm_estimate(Symbol.japanese(2, 1.5), 0, 1.5, probes) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        sc.seminorm_estimate(Symbol.constant(2, 1.0), 5, 0.0, probes)


def test_seminorm_projected_refinement():
    Ah = np.diag([1.0, -1.0])
    b = sc.make_projected_symbol(sc.gaussian_amplitude(0.0), Ah)
    rng = np.random.default_rng(4)
    x = rng.uniform(-4, 4, size=(40, 2))
    d = rng.normal(size=(40, 2))
    xi = 6.0 * d / np.linalg.norm(d, axis=1, keepdims=True)
    coarse = sc.seminorm_estimate(b, 2, 0.0, (x, xi), x_weight=True, h=2e-2)
    fine = sc.seminorm_estimate(b, 2, 0.0, (x, xi), x_weight=True, h=1e-2)
    assert np.isfinite(fine)
    assert fine == pytest.approx(coarse, rel=0.05)


# ---------------------------------------------------------------- brackets

def test_poisson_bracket_examples():
    bump = cf.elliptic_bump(2)
    eye = cf.constant_field(np.eye(2))
    h = sc.hamiltonian_symbol(bump)
    at = (np.array([0.3, -0.2]), np.array([1.0, 2.0]))
    assert abs(sc.poisson_bracket(h, h, at)) < 1e-6
    h_eye = sc.hamiltonian_symbol(eye)
    x1 = Symbol(2, lambda x, xi: x[..., 0] + 0j)
    xi1 = Symbol(2, lambda x, xi: xi[..., 0] + 0j)
    pt = (np.array([0.0, 0.0]), np.array([1.0, 0.0]))
    assert sc.poisson_bracket(h_eye, x1, pt).real == pytest.approx(2.0, abs=1e-7)
    assert abs(sc.poisson_bracket(h_eye, xi1, pt)) < 1e-9
    assert sc.hamiltonian_bracket(eye, x1, *pt)[0].real == pytest.approx(2.0, abs=1e-8)


def test_hamiltonian_bracket_matches_poisson():
    bump = cf.elliptic_bump(2)
    q = Symbol(2, lambda x, xi: np.sin(x[..., 0]) * xi[..., 1] + np.exp(-np.sum(x * x, -1)) + 0j)
    rng = np.random.default_rng(5)
    x, xi = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    a = sc.hamiltonian_bracket(bump, q, x, xi)
    b = sc.poisson_bracket(sc.hamiltonian_symbol(bump), q, (x, xi))
    np.testing.assert_allclose(a, b, atol=1e-6)


# ---------------------------------------------------------------- Doi symbol

@pytest.fixture(scope="module")
def doi_eye():
    return sc.doi_symbol(cf.constant_field(np.eye(2)), M=3.0, c2=1.0)


def test_doi_symbol_reduces_to_p1(doi_eye):
    p1 = doi_eye.metadata["parts"]["p1"]
    x = np.array([[9.0, 1.0], [0.2, 0.1], [-7.0, 4.0]])
    xi = np.array([[3.0, 1.0], [0.5, 0.2], [-2.0, 4.0]])
    # outside phi1's support (|x| >= 5) and inside |xi| <= 1, p3 vanishes
    np.testing.assert_allclose(doi_eye(x, xi).real, p1(x, xi), atol=0)


def test_doi_p1_bracket_closed_form(doi_eye):
    p1 = doi_eye.metadata["parts"]["p1"]
    x = np.array([[5.0, 0.0], [0.0, -6.0], [4.5, 3.5]])
    xi = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    got = sc.hamiltonian_bracket(cf.constant_field(np.eye(2)), p1, x, xi)
    r2 = np.sum(xi * xi, -1)
    np.testing.assert_allclose(got, 8 * r2 / np.sqrt(1 + r2), rtol=1e-6)


def test_doi_p2_free_flow():
    # A = I, x = 0, xi = (lam, 0): X(s) = 2 s e1, phi1 = 1 up to |X| = M + 1
    eye = cf.constant_field(np.eye(2))
    p4 = sc.doi_symbol(eye, M=3.0)
    w = p4.metadata["parts"]["ray_weights"](np.zeros((1, 2)), np.array([[1.0, 0.0]]), np.array([[2.0]]))
    prof = p4.metadata["profiles"].phi1
    from scipy.integrate import quad

    expect = quad(lambda s: prof(2 * s) * math.sqrt(5.0), 0, 3)[0]
    assert w[0, 0] == pytest.approx(expect, rel=1e-7)


def test_doi_escape_inequality_constant_field(doi_eye):
    eye = cf.constant_field(np.eye(2))
    X = np.array([[6.0, 0.0], [0.0, 7.0], [-8.0, 8.0]])
    grid = (X, cf.fibonacci_directions(2, 8), np.array([2.0, 4.0, 8.0]))
    res = sc.verify_escape_inequality(doi_eye, eye, grid=grid, auto_scale=False)
    assert res["min_slack"] > 0 and res["c"] == 0.0


def test_doi_flow_identity_matches_fd():
    field = cf.elliptic_bump(2)
    p4 = sc.doi_symbol(field, M=3.0, c2=4.0)
    X = np.array([[1.0, 0.5], [-2.0, 3.0], [4.6, 0.2]])
    grid = (X, cf.fibonacci_directions(2, 4), np.array([2.0, 4.0]))
    flow = sc.verify_escape_inequality(p4, field, grid=grid, auto_scale=False, method="flow")
    fd = sc.verify_escape_inequality(p4, field, grid=grid, auto_scale=False, method="fd")
    assert flow["min_slack"] == pytest.approx(fd["min_slack"], abs=1e-3)


def test_doi_trapping_detected():
    p4 = sc.doi_symbol(cf.trapped_gallery(2), M=3.0, ray_budget=40.0)
    with pytest.raises(sc.TrappingSuspected):
        p4(np.array([[-1.0, -1.0]]), 4.0 * np.array([[-math.sin(3 * math.pi / 16), math.cos(3 * math.pi / 16)]]))


# ---------------------------------------------------------------- integrating factors

def test_trivial_family():
    fam = sc.integrating_factor(cf.elliptic_bump(2), None, 0.0)
    x = np.array([[0.0, 0.0], [1.0, 2.0]])
    xi = np.array([[3.0, 4.0], [-5.0, 1.0]])
    assert np.all(fam.b(x, xi) == 0) and np.all(fam.p(x, xi) == 0)
    assert np.all(fam.k(x, xi) == 1) and np.all(fam.k_tilde(x, xi) == 1)
    rep = sc.verify_cancellation(fam, x_pts=3, directions=4, xi_octaves=(4.0, 8.0))
    assert rep["octaves"][0][2:4] == (0.0, 0.0) and rep["reciprocal"] == 0.0


def test_integrating_factor_erf_oracle(gauss_family):
    x = np.array([[-1.0], [0.0], [0.5], [2.0], [0.5]])
    xi = np.array([[4.0], [4.0], [-6.0], [10.0], [6.0]])
    sg = np.sign(xi[:, 0])
    p = SQPI4 * sg * (1 + sg * erf(x[:, 0]))
    np.testing.assert_allclose(gauss_family.p(x, xi).real, p, atol=1e-6)
    np.testing.assert_allclose(gauss_family.p_e(x, xi).real, SQPI4 * erf(x[:, 0]), atol=1e-6)
    kk = gauss_family.k(x, xi) * gauss_family.k_tilde(x, xi)
    np.testing.assert_allclose(kk, 1.0, rtol=1e-15)


def test_integrating_factor_low_frequency_cutoff(gauss_family):
    x = np.array([[0.3], [-0.4]])
    xi = np.array([[1.5], [-2.0]])
    assert np.all(gauss_family.p(x, xi) == 0)


def test_cancellation_gaussian_family(gauss_family):
    X = np.array([[-1.0], [0.0], [0.7]])
    rep = sc.verify_cancellation(gauss_family, grid=(X, np.array([[1.0], [-1.0]])),
                                 xi_octaves=(4.0, 8.0, 16.0))
    for lo, hi, res_pe, res_k, scale in rep["octaves"]:
        assert res_pe < 1e-5 * scale
        assert res_k < 1e-5 * scale * math.exp(SQPI4)
    assert rep["reciprocal"] < 1e-9


def test_homogeneous_table_matches_direct():
    field = cf.truncate(cf.elliptic_bump(2), 4.0)
    b1 = Symbol.vector_field(2, lambda x: np.stack([0.5 * np.exp(-np.sum(x * x, -1)),
                                                    np.zeros(x.shape[:-1])], axis=-1))
    fam = sc.integrating_factor(field, b1)
    assert fam.homogeneous
    g = BoxGrid(2, 4.0, 8)
    tab = fam.table(g, "p_e", angles=64)
    X = g.nodes.reshape(-1, 2)
    k = np.arange(-4, 4) * g.dxi
    XI = np.stack(np.meshgrid(k, k, indexing="ij"), -1).reshape(-1, 2)
    rows = [5, 27, 40]
    direct = np.stack([fam.p_e(np.broadcast_to(X[r], XI.shape), XI).real for r in rows])
    assert np.max(np.abs(tab.values[rows].real - direct)) < 1e-4


def test_decompose_projected_trivial():
    fam = sc.integrating_factor(cf.elliptic_bump(2), None)
    x = np.array([[0.0, 0.0], [30.0, 5.0], [100.0, 0.0]])
    xi = np.array([[4.0, 0.0], [0.0, 5.0], [3.0, 3.0]])
    rep = sc.decompose_projected(fam, range(0, 3), probe=(x, xi))
    assert np.all(rep["q"](x, xi) == 0)
    assert rep["residual"] == 0.0
    # the j-th piece vanishes for |x| <= 10 * 2^j
    assert np.all(rep["pieces"][2](np.array([[20.0, 0.0]]), np.array([[4.0, 0.0]])) == 0)


def test_decompose_projected_reconstruction(gauss_family):
    x = np.array([[0.5], [12.0], [25.0], [60.0]])
    xi = np.array([[4.0], [-5.0], [8.0], [6.0]])
    rep = sc.decompose_projected(gauss_family, range(0, 3), probe=(x, xi))
    assert rep["residual"] <= 10 * 1e-8


# ---------------------------------------------------------------- tables

def test_table_of_one_and_nodes():
    g = BoxGrid(2, 3.0, 8)
    one = sc.tabulate(Symbol.constant(2, 1.0), g, probes=10)
    assert np.all(one.values == 1)
    assert one.metadata["probe_error"] < 1e-15


def test_table_reprobe_nodes_exact(gauss_family):
    g = BoxGrid(1, 4.0, 16)
    tab = sc.tabulate(gauss_family.k, g, probes=0)
    X = g.nodes.reshape(-1, 1)
    k = np.arange(-8, 8) * g.dxi
    xs = np.repeat(X, len(k), axis=0)
    ks = np.tile(k[:, None], (len(X), 1))
    np.testing.assert_allclose(tab(xs, ks), tab.values.reshape(-1), rtol=0, atol=1e-14)


def test_table_refinement_second_order(gauss_family):
    errs = []
    for N in (32, 64):
        g = BoxGrid(1, 4.0, N)
        errs.append(sc.tabulate(gauss_family.k, g, probes=200, seed=7).metadata["probe_error"])
    assert errs[0] / errs[1] >= 3.5


def test_table_round_trip(tmp_path):
    g = BoxGrid(1, 2.0, 8)
    sym = Symbol(1, lambda x, xi: np.cos(x[..., 0]) + 1j * xi[..., 0])
    tab = sc.tabulate(sym, g, probes=0)
    tab.save(tmp_path / "t")
    back = sc.SymbolTable.load(tmp_path / "t")
    assert back.grid == g
    np.testing.assert_array_equal(back.values, tab.values)
    with pytest.raises(ValueError):
        sc.SymbolTable(g, np.ones((3, 3)))
