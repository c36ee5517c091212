import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schrolab import coeffields as cf
from schrolab import hamflow as hf


TRAPPED_SEED = hf.PhasePoint([-1.0, -1.0], [-math.sin(math.pi * 3 / 16), math.cos(math.pi * 3 / 16)])


@pytest.fixture(scope="module")
def eye2():
    return cf.constant_field(np.eye(2))


@pytest.fixture(scope="module")
def bump():
    return cf.elliptic_bump(2)


def test_h2_examples(eye2, bump):
    assert hf.h2(eye2, [0.0, 0.0], [3.0, 4.0]) == pytest.approx(25.0, abs=0)
    hyp = cf.constant_field(np.diag([1.0, -1.0]))
    assert hf.h2(hyp, [5.0, 1.0], [1.0, 1.0]) == 0.0
    assert hf.hamiltonian(bump, hf.PhasePoint([0.0, 0.0], [1.0, 0.0])) == pytest.approx(2.0, abs=1e-15)


def test_seed_needs_nonzero_covector(eye2):
    with pytest.raises(ValueError):
        hf.trace_ray(eye2, hf.PhasePoint([0.0, 0.0], [0.0, 0.0]))


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.floats(-8, 8))
@settings(max_examples=25, deadline=None)
def test_constant_flow_is_straight(v, s):
    a0 = np.array([[2.0, 0.5], [0.5, -1.0]])
    f = cf.constant_field(a0)
    x, xi = np.array(v[:2]), np.array(v[2:]) + np.array([0.5, 0.0])
    X, Xi = hf.flow_endpoints(f, x[None], xi[None], np.array([s]))
    np.testing.assert_allclose(X[0], x + 2 * s * a0 @ xi, atol=1e-8 * (1 + abs(s)) * (1 + np.abs(xi).sum()))
    np.testing.assert_allclose(Xi[0], xi, atol=1e-12)


def test_zero_span_is_single_sample(eye2):
    t = hf.trace_ray(eye2, hf.PhasePoint([1.0, 2.0], [0.0, 1.0]), (0.0, 0.0))
    assert len(t.samples) == 1
    s, X, Xi = t.samples[0]
    assert s == 0.0 and X.tolist() == [1.0, 2.0] and Xi.tolist() == [0.0, 1.0]


def test_bump_conservation(bump):
    tol = 1e-10
    t = hf.trace_ray(bump, hf.PhasePoint([0.0, 0.0], [1.0, 0.0]), (0.0, 10.0), tol=tol)
    assert t.h2_drift() <= 100 * tol
    fine = hf.trace_ray(bump, hf.PhasePoint([0.0, 0.0], [1.0, 0.0]), (0.0, 10.0), tol=tol / 32)
    np.testing.assert_allclose(t.X[-1], fine.X[-1], atol=1e-7)


def test_backward_span_and_interpolation(bump):
    t = hf.trace_ray(bump, hf.PhasePoint([0.3, -0.2], [0.5, 1.0]), (-3.0, 3.0))
    assert t.s[0] == -3.0 and t.s[-1] == 3.0
    assert np.all(np.diff(t.s) > 0)
    X, Xi = t.state_at([-1.234, 2.5])
    Xe, Xie = hf.flow_endpoints(bump, np.array([[0.3, -0.2]] * 2), np.array([[0.5, 1.0]] * 2),
                                np.array([-1.234, 2.5]))
    np.testing.assert_allclose(X, Xe, atol=1e-6)
    np.testing.assert_allclose(Xi, Xie, atol=1e-6)
    with pytest.raises(ValueError):
        t.state_at(4.0)


def test_homogeneity(eye2, bump):
    seed = hf.PhasePoint([0.5, -1.0], [1.0, 0.3])
    assert hf.homogeneity_check(bump, seed, 1.0, 1.0) == (0.0, 0.0)
    assert max(hf.homogeneity_check(eye2, seed, 3.0, 2.0)) <= 10 * 1e-10 * 10
    assert max(hf.homogeneity_check(bump, seed, 2.0, 1.0)) <= 100 * 1e-10 * 10


def test_along_flow_derivative(eye2, bump):
    p = hf.PhasePoint([0.0, 0.0], [1.0, 0.0])
    d = hf.along_flow_derivative(bump, lambda X, Xi: hf.h2(bump, X, Xi), hf.PhasePoint([0.4, 0.1], [1.0, 0.5]))
    assert abs(d) < 1e-6
    assert hf.along_flow_derivative(eye2, lambda X, Xi: X[:, 0], p) == pytest.approx(2.0, abs=1e-8)
    assert hf.along_flow_derivative(eye2, lambda X, Xi: Xi[:, 0], p) == pytest.approx(0.0, abs=1e-12)


def test_escape_time_free_flow(eye2):
    t = hf.trace_ray(eye2, hf.PhasePoint([-10.0, 0.0], [1.0, 0.0]), (0.0, 20.0))
    assert hf.escape_time(t, 5.0, eye2) == pytest.approx(7.5, abs=1e-8)
    assert hf.escape_time(t, 5.0) == pytest.approx(7.5, abs=1e-6)
    out = hf.trace_ray(eye2, hf.PhasePoint([6.0, 0.0], [1.0, 0.0]), (0.0, 1.0))
    assert hf.escape_time(out, 5.0, eye2) == 0.0


def test_escape_time_trapped():
    f = cf.trapped_gallery(2)
    # the fast ring at r = 3 reflects this ray back into the slow interior
    t = hf.trace_ray(f, TRAPPED_SEED, (0.0, 50.0))
    assert np.linalg.norm(t.X, axis=1).max() < 3.0
    assert hf.escape_time(t, 6.0, f) is None


def test_dyadic_occupation_free_flow(eye2):
    t = hf.trace_ray(eye2, hf.PhasePoint([0.0, 0.0], [1.0, 0.0]), (0.0, 300.0))
    assert hf.dyadic_occupation(t, 0.0) == {}
    # |X| = 2s, so I_k has length 2^(k-1)
    occ = hf.dyadic_occupation(t, 256.0, k_max=8)
    ratios = hf.dyadic_ratios(occ)
    assert sorted(ratios) == list(range(1, 9))
    for k, r in ratios.items():
        assert r == pytest.approx(0.5, abs=1e-9)


def test_dyadic_occupation_bump_bounded(bump):
    t = hf.trace_ray(bump, hf.PhasePoint([0.2, -0.1], [1.0, 0.4]), (0.0, 300.0))
    ratios = hf.dyadic_ratios(hf.dyadic_occupation(t, 250.0, k_max=8))
    assert max(ratios.values()) < 1.0


def test_nontrapping_probe(eye2, bump):
    seeds = hf.seed_grid(2, 2, 3.0, 4)
    v = hf.nontrapping_probe(eye2, seeds, 100.0, 200.0)
    assert all(r["verdict"] == "escaped" for r in v)
    # |x + 2 s xi| = 100 with x = (-3,-3), xi = (1,0): s = (3 + sqrt(100^2 - 9)) / 2
    first = hf.nontrapping_probe(eye2, [hf.PhasePoint([-3.0, -3.0], [1.0, 0.0])], 100.0, 200.0)[0]
    assert first["s"] == pytest.approx((3 + math.sqrt(1e4 - 9)) / 2, abs=1e-7)
    v = hf.nontrapping_probe(bump, hf.seed_grid(2, 4, 3.0, 4), 50.0, 200.0)
    assert len(v) == 64 and all(r["verdict"] == "escaped" for r in v)
    trapped = cf.trapped_gallery(2)
    v = hf.nontrapping_probe(trapped, [TRAPPED_SEED,
                                       hf.PhasePoint([0.0, 0.0], [1.0, 0.0])], 20.0, 60.0)
    assert v[0]["verdict"] == "undetermined"
    assert v[1]["verdict"] == "escaped"


def test_jacobian_constant_field():
    a0 = np.array([[1.0, 0.2], [0.2, -0.5]])
    f = cf.constant_field(a0)
    seed = hf.PhasePoint([1.0, 2.0], [0.3, -0.7])
    np.testing.assert_allclose(hf.flow_jacobian(f, seed, 0.0), np.eye(4), atol=0)
    J = hf.flow_jacobian(f, seed, 2.5)
    np.testing.assert_allclose(J[:2, :2], np.eye(2), atol=1e-10)
    np.testing.assert_allclose(J[:2, 2:], 5.0 * a0, atol=1e-9)
    np.testing.assert_allclose(J[2:, :2], 0.0, atol=1e-12)
    np.testing.assert_allclose(J[2:, 2:], np.eye(2), atol=1e-12)


def test_jacobian_bump_matches_finite_differences(bump):
    seed = hf.PhasePoint([0.3, -0.4], [1.0, 0.5])
    s = 5.0
    J = hf.flow_jacobian(bump, seed, s, tol=1e-12)
    h = 1e-5
    base = np.concatenate([seed.x, seed.xi])
    cols = []
    for c in range(4):
        e = np.zeros(4)
        e[c] = h
        p, m = base + e, base - e
        X, Xi = hf.flow_endpoints(bump, np.array([p[:2], m[:2]]), np.array([p[2:], m[2:]]),
                                  np.array([s, s]), tol=1e-12)
        cols.append((np.concatenate([X[0], Xi[0]]) - np.concatenate([X[1], Xi[1]])) / (2 * h))
    fd = np.stack(cols, axis=1)
    assert np.max(np.abs(J - fd)) <= 1e-4 * np.max(np.abs(fd))


def test_jacobian_growth_constant_field(eye2):
    seeds = [hf.PhasePoint([0.0, 0.0], [1.0, 0.0])]
    rep = hf.jacobian_growth_report(eye2, 8.0, seeds, [0.0, 1.0, 4.0])
    entries = [e for _, e, _ in rep["rows"]]
    assert entries == pytest.approx([1.0, 2.0, 8.0], abs=1e-9)
    assert not rep["superlinear"]


def test_jacobian_growth_truncated_bump(bump):
    seeds = hf.seed_grid(2, 2, 1.0, 4)
    cs = [hf.jacobian_growth_report(cf.truncate(bump, R), R, seeds, [0.0, 5.0, 10.0, 20.0])["c"]
          for R in (8.0, 16.0)]
    assert all(np.isfinite(cs))
    assert max(cs) / min(cs) < 4.0


def test_line_integral_bound_free_flow(eye2):
    # from the origin with unit xi: int_0^S (1 + 4 r^2)^(-1) dr = atan(2S) / 2
    val = hf.line_integral_bound(eye2, [hf.PhasePoint([0.0, 0.0], [1.0, 0.0])], 50.0, 2.0)
    assert val == pytest.approx(math.atan(100.0) / 2, rel=1e-7)


def test_mizohata_integral():
    zero = hf.mizohata_integral(lambda x: np.zeros(2), [0.0, 0.0], [1.0, 0.0])
    assert zero.value == 0.0 and not zero.diverged
    const = hf.mizohata_integral(lambda x: np.array([1.0, 0.0]), [0.0, 0.0], [1.0, 0.0])
    assert const.diverged
    g = hf.mizohata_integral(lambda x: np.array([math.exp(-x @ x), 0.0]), [0.0, 0.0], [1.0, 0.0])
    assert g.converged and g.value == pytest.approx(math.sqrt(math.pi) / 2, abs=1e-9)
    with pytest.raises(ValueError):
        hf.mizohata_integral(lambda x: np.zeros(2), [0.0, 0.0], [2.0, 0.0])


def test_trajectory_csv(tmp_path, eye2):
    t = hf.trace_ray(eye2, hf.PhasePoint([0.0, 0.0], [1.0, 0.0]), (0.0, 1.0))
    p = tmp_path / "ray.csv"
    t.to_csv(p)
    rows = p.read_text().splitlines()
    assert rows[0] == "s,X1,X2,Xi1,Xi2,h2"
    assert len(rows) == len(t.s) + 1
