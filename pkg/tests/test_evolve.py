import math

import numpy as np
import pytest

from schrolab import coeffields as cf
from schrolab import evolve as ev
from schrolab import quantize as qz
from schrolab import symcalc as sc
from schrolab.symbols import Symbol


def _gauss(grid, width=1.0, k=None):
    x = grid.nodes
    v = np.exp(-np.sum(x * x, -1) / (2 * width**2)).astype(complex)
    if k is not None:
        v = v * np.exp(1j * (x @ np.asarray(k, float)))
    return qz.GridField(grid, v)


def test_plane_wave_exact_multiplier():
    g = qz.BoxGrid(2, 4.0, 16)
    a0 = np.array([[1.0, 0.3], [0.3, -0.5]])
    spec = ev.LinearOperatorSpec(cf.constant_field(a0))
    k = np.array([2.0, -1.0]) * g.dxi
    u0 = qz.GridField(g, np.exp(1j * (g.nodes @ k)))
    T = 0.3
    tr = ev.evolve_linear(u0, spec, T)
    exact = np.exp(-1j * T * (k @ a0 @ k)) * u0.values
    err = np.max(np.abs(tr.final().values - exact))
    assert err < 1e-8
    # RK4: halving dt cuts the error about 16x
    tr2 = ev.evolve_linear(u0, spec, T, ev.EvolveConfig(dt=tr.dt / 2))
    err2 = np.max(np.abs(tr2.final().values - exact))
    assert err / err2 > 10


def test_zero_data_zero_trace():
    g = qz.BoxGrid(2, 4.0, 16)
    tr = ev.evolve_linear(qz.GridField.zeros(g), ev.LinearOperatorSpec(cf.elliptic_bump(2)), 0.05)
    assert all(np.all(u.values == 0) for _, u in tr.snapshots)
    assert ev.smoothing_functional(tr)["degenerate"]


def test_dt_above_bound_rejected():
    g = qz.BoxGrid(1, 4.0, 16)
    spec = ev.LinearOperatorSpec(cf.constant_field(np.eye(1)))
    with pytest.raises(ValueError):
        ev.evolve_linear(_gauss(g), spec, 1.0, ev.EvolveConfig(dt=10 * ev.dt_max(spec, g)))


def test_dt_max_formula():
    g = qz.BoxGrid(2, 5.0, 32)
    spec = ev.LinearOperatorSpec(cf.constant_field(np.eye(2)))
    assert ev.dt_max(spec, g) == pytest.approx(2.5 / (math.pi * 32 / 5) ** 2)


def test_variable_coefficient_conserves_norm():
    g = qz.BoxGrid(2, 8.0, 32)
    spec = ev.LinearOperatorSpec(cf.elliptic_bump(2))
    u0 = _gauss(g, k=[1.0, 0.5])
    tr = ev.evolve_linear(u0, spec, 0.2)
    assert tr.final().norm() == pytest.approx(u0.norm(), rel=1e-6)


def test_conjugated_spec():
    g = qz.BoxGrid(2, 6.0, 16)
    b1 = Symbol.vector_field(2, lambda x: np.stack([0.3j * np.exp(-np.sum(x * x, -1)), 0.2 + 0 * x[..., 0]], -1))
    spec = ev.LinearOperatorSpec(cf.elliptic_bump(2), b1=b1,
                                 b2=lambda x: np.stack([0.1 * np.exp(-np.sum(x * x, -1)), 0 * x[..., 0]], -1))
    u0 = _gauss(g, k=[1.0, 0.0])
    a = ev.evolve_linear(u0, spec, 0.05).final()
    b = ev.evolve_linear(u0.conj(), spec.conjugated(), 0.05).final()
    np.testing.assert_allclose(b.values, np.conj(a.values), atol=1e-12)


def test_b2_pair_system_oracle():
    g = qz.BoxGrid(2, 8.0, 32)
    b2 = np.array([0.5j, 0.25])
    spec = ev.LinearOperatorSpec(cf.constant_field(np.eye(2)),
                                 b2=lambda x: np.broadcast_to(b2, x.shape))
    u0 = _gauss(g, k=[1.0, 0.0])
    T = 0.1
    num = ev.evolve_linear(u0, spec, T).final()
    xi = g.freqs
    neg = np.ix_(*[(-g.k_axis) % g.N] * 2)
    beta = 1j * (xi @ b2)
    m11, m12, _, _ = ev._pair_propagator(-1j * np.sum(xi * xi, -1), beta, np.conj(-beta), T)
    exact = qz.GridField.from_spectrum(g, m11 * u0.spectrum + m12 * np.conj(u0.spectrum[neg]))
    assert (num - exact).norm() / exact.norm() < 1e-6


def test_blowup_raised_with_partial_trace():
    g = qz.BoxGrid(1, 10.0, 128)
    b1 = Symbol.vector_field(1, lambda x: np.ones(x.shape, dtype=complex) * 1j)
    spec = ev.LinearOperatorSpec(cf.constant_field(np.eye(1)), b1=b1)
    u0 = qz.GridField(g, np.exp(-1j * 16 * g.nodes[..., 0] - g.nodes[..., 0] ** 2 / 2))
    with pytest.raises(ev.BlowUp) as info:
        ev.evolve_linear(u0, spec, 1.5, ev.EvolveConfig(stride=50))
    assert 1.0 < info.value.t < 1.5
    assert len(info.value.trace.snapshots) > 1


def test_trace_save_load_and_determinism(tmp_path):
    g = qz.BoxGrid(2, 6.0, 16)
    spec = ev.LinearOperatorSpec(cf.elliptic_bump(2))
    tr = ev.evolve_linear(_gauss(g), spec, 0.05, ev.EvolveConfig(stride=5))
    tr.save(tmp_path / "run")
    back = ev.EvolutionTrace.load(tmp_path / "run")
    np.testing.assert_array_equal(back.times, tr.times)
    for (_, a), (_, b) in zip(back.snapshots, tr.snapshots):
        np.testing.assert_array_equal(a.values, b.values)
    again = ev.evolve_linear(_gauss(g), spec, 0.05, ev.EvolveConfig(stride=5))
    e1 = [u.norm() for _, u in back.snapshots]
    e2 = [u.norm() for _, u in again.snapshots]
    assert max(abs(a - b) for a, b in zip(e1, e2)) <= 1e-10


def test_smoothing_functional_dt_stable():
    g = qz.BoxGrid(2, 10.0, 32)
    spec = ev.LinearOperatorSpec(cf.constant_field(np.eye(2)))
    u0 = _gauss(g)
    base = ev.evolve_linear(u0, spec, 0.5, ev.EvolveConfig(stride=8))
    fine = ev.evolve_linear(u0, spec, 0.5, ev.EvolveConfig(dt=base.dt / 2, stride=16))
    r1 = ev.smoothing_functional(base)["ratio"]
    r2 = ev.smoothing_functional(fine)["ratio"]
    assert np.isfinite(r1) and r1 > 0
    assert r2 == pytest.approx(r1, rel=0.05)
    with pytest.raises(ValueError):
        ev.smoothing_functional(ev.EvolutionTrace(base.snapshots[:2], base.dt))


def test_smoothing_functional_with_forcing():
    g = qz.BoxGrid(1, 10.0, 64)
    f0 = _gauss(g)
    spec = ev.LinearOperatorSpec(cf.constant_field(np.eye(1)), forcing=lambda t: f0.values)
    tr = ev.evolve_linear(qz.GridField.zeros(g), spec, 0.5, ev.EvolveConfig(stride=4))
    out = ev.smoothing_functional(tr)
    assert out["rhs_forcing_l2"] == pytest.approx(0.5 * f0.norm() ** 2, rel=1e-12)
    assert not out["degenerate"]


def test_trivial_integrating_factor_energy():
    g = qz.BoxGrid(2, 4.0, 8)
    fam = sc.integrating_factor(cf.elliptic_bump(2), None)
    tr = ev.evolve_linear(_gauss(g), ev.LinearOperatorSpec(cf.elliptic_bump(2)), 0.05, ev.EvolveConfig(stride=20))
    out = ev.k_transform_energy(tr, fam)
    np.testing.assert_allclose(out["transformed"], out["raw"], rtol=1e-12)
    chk = ev.error_operator_check(fam, [_gauss(g)], freqs=(1.0, 2.0))
    assert max(chk["ratios"]) < 1e-13
    assert max(r for _, r in chk["sweep"]) < 1e-13
    with pytest.raises(ValueError):
        ev.error_operator_check(fam, [_gauss(g)], freqs=(10.0,))


def test_mizohata_demo():
    g = qz.BoxGrid(2, 10.0, 128)
    flat = ev.mizohata_blowup_demo(0.0, 0.5, g)
    assert all(r["growth"] >= 1.0 - 1e-12 for r in flat["rows"])
    out = ev.mizohata_blowup_demo(8.0, 0.5, g)
    assert out["rows"][-1]["growth"] == pytest.approx(math.exp(4.0), rel=0.15)
    real = ev.mizohata_blowup_demo(8.0, 0.5, g, imaginary=False)
    assert all(abs(r["growth"] - 1.0) < 1e-12 for r in real["rows"])
    with pytest.raises(ValueError):
        ev.mizohata_blowup_demo(16.0, 0.5, g)


def test_gain_probe_free_case_bounded():
    g = qz.BoxGrid(2, 20.0, 256)
    for variant in ("elliptic", "ultrahyperbolic"):
        out = ev.gain_exponent_probe(variant, freqs=(4.0, 8.0), grid=g, b2=(0.0, 0.0), steps=10)
        assert out["verdict"]["0.25"]["bounded"]
    with pytest.raises(ValueError):
        ev.gain_exponent_probe("other")


def test_weighted_growth_check():
    g = qz.BoxGrid(2, 10.0, 32)
    spec = ev.LinearOperatorSpec(cf.elliptic_bump(2))
    zero = ev.weighted_growth_check(qz.GridField.zeros(g), spec, 0.2)
    assert zero["zero"] and zero["lhs"] == [0.0]
    u0 = _gauss(g)
    out = ev.weighted_growth_check(u0, spec, 0.2, N_weight=1)
    assert out["c"][0] == 1.0 and all(np.isfinite(out["c"])) and min(out["c"]) >= 0
    # the t = 0 value is the j = 0 term exactly
    assert out["lhs"][0] == pytest.approx(out["terms"][0], rel=1e-14)


def test_packets_unit_norm():
    g = qz.BoxGrid(2, 10.0, 64)
    assert ev.wave_packet(g, 4.0).norm() == pytest.approx(1.0, rel=1e-14)
    assert ev.knapp_packet(g, 4.0).norm() == pytest.approx(1.0, rel=1e-14)
