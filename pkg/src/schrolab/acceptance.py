"""The acceptance battery: fourteen quantitative checks at desk scale.

Each check returns a ``CriterionResult`` with the measured values and the
rows written to its CSV by ``labcli``.  Budgets are wall-clock seconds.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import coeffields as cf
from . import evolve as ev
from . import hamflow as hf
from . import nlsolve as nl
from . import quantize as qz
from . import symcalc as sc
from .symbols import Symbol

__all__ = ["CriterionResult", "CRITERIA", "FAST_TIER", "run_criterion", "run_all"]


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    measured: dict
    runtime: float
    budget: float
    rows: list = field(default_factory=list)

    @property
    def within_budget(self) -> bool:
        return self.runtime <= self.budget

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] C{self.id:02d} {self.name}: {_summary(self.measured)} ({self.runtime:.1f}s / {self.budget:.0f}s)"


def _summary(measured: dict) -> str:
    parts = []
    for k, v in measured.items():
        if isinstance(v, float):
            parts.append(f"{k}={v:.4g}")
        elif isinstance(v, (int, str, bool)):
            parts.append(f"{k}={v}")
    return ", ".join(parts)


def _gauss(x, center=0.0, width=1.0):
    return np.exp(-np.sum((x - center) ** 2, axis=-1) / width**2)


# ---------------------------------------------------------------- criteria

def flow_conservation():
    seeds = hf.seed_grid(2, 4, 3.0, 16)
    rows, worst = [], 0.0
    for f in (cf.elliptic_bump(2), cf.ultrahyperbolic_bump(2)):
        rays = hf.trace_rays(f, seeds, (0.0, 20.0), tol=1e-10)
        drift = max(r.h2_drift() for r in rays)
        statuses = sorted({r.status for r in rays})
        rows.append({"field": f.name, "seeds": len(rays), "max_drift": drift, "statuses": "|".join(statuses)})
        worst = max(worst, drift)
    return worst <= 1e-8, {"max_drift": worst}, rows


def free_flow():
    A = np.array([[1.0, 0.3], [0.3, -0.5]])
    f = cf.constant_field(A)
    seeds = hf.seed_grid(2, 4, 3.0, 16)
    rays = hf.trace_rays(f, seeds, (0.0, 10.0), tol=1e-10)
    errs = [float(np.max(np.abs(r.X[-1] - (r.seed.x + 20.0 * A @ r.seed.xi)))) for r in rays]
    rows = [{"seed": i, "abs_error": e} for i, e in enumerate(errs)]
    return max(errs) <= 1e-9, {"max_abs_error": max(errs)}, rows


def _incoming_seeds(A0, radii=(64.0, 256.0), count=16):
    """Far seeds whose initial velocity 2 A0 xi points back at the origin."""
    inv = np.linalg.inv(A0)
    out = []
    for r in radii:
        for a in np.linspace(0.0, 2 * math.pi, count, endpoint=False):
            w = np.array([math.cos(a), math.sin(a)])
            v = -np.array([math.cos(a + 0.02), math.sin(a + 0.02)])
            xi = inv @ v
            out.append(hf.PhasePoint(r * w, xi / np.linalg.norm(xi)))
    return out


def uniform_nontrapping():
    base = cf.ultrahyperbolic_bump(2)
    seeds = hf.seed_grid(2, 4, 3.0, 16)
    extra = _incoming_seeds(base.asymptotic)
    rows, c2s, worst_ratio, all_escape = [], [], 0.0, True
    for R in (8.0, 16.0, 32.0):
        g = cf.truncate(base, R)
        verdicts = hf.nontrapping_probe(g, seeds, 50.0, 200.0)
        escaped = sum(v["verdict"] == "escaped" for v in verdicts)
        all_escape &= escaped == len(seeds)
        M1 = 2.0 * R
        c2, ratio, missing = math.inf, 0.0, 0
        for ray in hf.trace_rays(g, seeds + extra, (0.0, 400.0), tol=1e-10):
            s0 = hf.escape_time(ray, M1, g)
            if s0 is None:
                missing += 1
                continue
            c2 = min(c2, hf.fit_escape_constant(ray, M1, s0))
            occ = hf.dyadic_ratios(hf.dyadic_occupation(ray, s0, 8))
            if occ:
                ratio = max(ratio, max(occ.values()))
        c2s.append(c2)
        worst_ratio = max(worst_ratio, ratio)
        all_escape &= missing == 0
        rows.append({"R": R, "escaped": escaped, "seeds": len(seeds), "M1": M1, "c2": c2,
                     "max_dyadic_ratio": ratio, "no_escape_time": missing})
    spread = max(c2s) / min(c2s) if min(c2s) > 0 else math.inf
    passed = all_escape and spread <= 2.0 and worst_ratio <= 5.0
    return passed, {"c2_spread": spread, "max_dyadic_ratio": worst_ratio, "all_escape": all_escape}, rows


def doi_inequality():
    rows, ok = [], True
    for f in (cf.elliptic_bump(2), cf.ultrahyperbolic_bump(2)):
        p4 = sc.doi_symbol(f, M=3.0, c2=1.0)
        res = [sc.verify_escape_inequality(p4, f, x_pts=pts) for pts in (64, 128)]
        c_a, c_b = res[0]["c"], res[1]["c"]
        stable = abs(c_a - c_b) <= 0.1 * max(abs(c_a), abs(c_b)) or c_a == c_b
        positive = all(r["min_slack"] + r["c"] > 0 and math.isfinite(r["c"]) for r in res)
        ok &= stable and positive
        for pts, r in zip((64, 128), res):
            rows.append({"field": f.name, "x_pts": pts, "min_slack": r["min_slack"], "c": r["c"],
                         "c2": r["c2"], "points": r["points"]})
    worst = min(r["min_slack"] for r in rows)
    return ok, {"min_slack": worst, "c": max(r["c"] for r in rows)}, rows


def cancellation():
    f = cf.truncate(cf.elliptic_bump(2), 8.0)
    b1 = Symbol.vector_field(2, lambda x: np.stack(
        [(1 + 1j) * _gauss(x), 0.5j * _gauss(x, 1.0)], axis=-1))
    fam = sc.integrating_factor(f, b1)
    res = sc.verify_cancellation(fam)
    rows = [{"xi_lo": lo, "xi_hi": hi, "residual_pe": r_pe, "residual_k": r_k, "b_scale": sb}
            for lo, hi, r_pe, r_k, sb in res["octaves"]]
    vals = [r["residual_pe"] for r in rows]
    factors = [a / b if b > 0 else math.inf for a, b in zip(vals[:-1], vals[1:])]
    passed = all(q >= 2.0 for q in factors)
    return passed, {"min_decrease": min(factors), "max_residual": max(vals),
                    "reciprocal": res["reciprocal"]}, rows


def l2_boundedness():
    b = sc.make_projected_symbol(sc.light_cone_amplitude(0.0), np.diag([1.0, -1.0]))
    rows = []
    for N in (32, 48, 64):
        est = qz.operator_norm_estimate(b, qz.BoxGrid(2, 10.0, N), iters=200, rtol=1e-9)
        rows.append({"N": N, "L": 10.0, "norm": est.value, "converged": est.converged,
                     "iterations": est.iterations})
    vals = [r["norm"] for r in rows]
    variation = (max(vals) - min(vals)) / max(vals)
    return variation <= 0.2, {"variation": variation, "min": min(vals), "max": max(vals)}, rows


def light_cone():
    g = qz.BoxGrid(2, 80.0, 256)
    c = sc.CHI(np.linalg.norm(g.freqs, axis=-1))
    v = qz.GridField.from_spectrum(g, c * (1 - c) ** 2)
    b = sc.make_projected_symbol(sc.light_cone_amplitude(0.0), np.diag([1.0, -1.0]))
    radii = np.linspace(10.0, 0.4 * g.L, 23)
    probe = qz.decay_probe(lambda pts: qz.pdo_at_points(b, v, pts),
                           [[1.0, 1.0], [1.0, 0.0]], radii)
    rows = [{"direction": f"{d[0]:.6f} {d[1]:.6f}", "r": r, "abs_value": a, "scaled": a * r}
            for d, r, a in probe["rows"]]
    band = np.array([r["scaled"] for r in rows[:len(radii)]])
    band_ratio = float(band.max() / band.min())
    exponent = probe["exponents"][1]
    passed = band_ratio <= 4.0 and exponent >= 3.0
    return passed, {"band_ratio": band_ratio, "c_minus": float(band.min()),
                    "c_plus": float(band.max()), "noncharacteristic_exponent": exponent}, rows


def mizohata():
    g = qz.BoxGrid(2, 10.0, 256)
    rows, worst = [], 0.0
    for lam in (8.0, 16.0, 32.0):
        r = ev.mizohata_blowup_demo(lam, 0.5, g)
        for row in r["rows"]:
            rows.append({"lambda": lam, **row})
        worst = max(worst, max(x["rel_error"] for x in r["rows"]))
    real = ev.mizohata_blowup_demo(8.0, 0.5, g, imaginary=False)
    exact_drift = max(abs(x["growth"] - 1.0) for x in real["rows"])
    # the same real-coefficient equation through the RK4 stepper
    gs = qz.BoxGrid(2, 10.0, 64)
    spec = ev.LinearOperatorSpec(cf.constant_field(np.eye(2)),
                                 b1=Symbol.vector_field(2, lambda x: np.stack(
                                     [np.ones(x.shape[:-1]), np.zeros(x.shape[:-1])], axis=-1)))
    u0 = ev.wave_packet(gs, 4.0)
    tr = ev.evolve_linear(u0, spec, 0.5, ev.EvolveConfig(stride=10))
    stepper_drift = max(abs(u.norm() - 1.0) for _, u in tr.snapshots)
    passed = worst <= 0.15 and exact_drift <= 1e-6 and stepper_drift <= 1e-6
    return passed, {"max_rel_error": worst, "unitary_drift_exact": exact_drift,
                    "unitary_drift_rk4": stepper_drift}, rows


def smoothing_gain():
    g = qz.BoxGrid(2, 5.0, 128)
    b1 = Symbol.vector_field(2, lambda x: np.stack([0.5 * _gauss(x), 0.25 * _gauss(x)], axis=-1))
    rows, spreads, worst_dt = [], [], 0.0
    for f in (cf.elliptic_bump(2), cf.ultrahyperbolic_bump(2)):
        spec = ev.LinearOperatorSpec(f, b1=b1)
        limit = ev.dt_max(spec, g)
        ratios = []
        for lam in (4.0, 8.0, 16.0, 32.0):
            T = 1.5 / lam
            u0 = ev.wave_packet(g, lam)
            pair = []
            for fac in (1, 2):
                dt = T / math.ceil(T / limit) / fac
                tr = ev.evolve_linear(u0, spec, T, ev.EvolveConfig(dt=dt, stride=4 * fac))
                pair.append(ev.smoothing_functional(tr, 0.0, 2.0)["ratio"])
            change = abs(pair[1] - pair[0]) / pair[0]
            worst_dt = max(worst_dt, change)
            ratios.append(pair[0])
            rows.append({"field": f.name, "lambda": lam, "T": T, "ratio": pair[0],
                         "ratio_half_dt": pair[1], "dt_change": change,
                         "boundary_mass": tr.diagnostics["boundary_mass"]})
        spreads.append(max(ratios) / min(ratios))
    passed = max(spreads) <= 2.0 and worst_dt <= 0.1
    return passed, {"max_spread": max(spreads), "max_dt_change": worst_dt}, rows


def quarter_gain():
    rows = []
    out = {}
    for variant in ("ultrahyperbolic", "elliptic"):
        r = ev.gain_exponent_probe(variant)
        out[variant] = r["verdict"]
        rows.extend({"variant": variant, **row} for row in r["rows"])
    uh, el = out["ultrahyperbolic"], out["elliptic"]
    passed = (uh["0.5"]["increasing"] and uh["0.5"]["growth"] >= 2.0 and uh["0.25"]["spread"] <= 2.0
              and el["0.5"]["spread"] <= 2.0)
    return passed, {"uh_half_growth": uh["0.5"]["growth"], "uh_quarter_spread": uh["0.25"]["spread"],
                    "elliptic_half_spread": el["0.5"]["spread"]}, rows


def weight_commutator():
    g = qz.BoxGrid(2, 20.0, 128)
    x = g.nodes
    u = qz.GridField(g, np.exp(-np.sum(x * x, -1) / 2) * (1 + 0.3j * x[..., 0]))
    steps = (0.2, 0.1, 0.05)
    symbols = {"japanese": Symbol.japanese(2, 1.0),
               "i_xi1": Symbol.multiplier(2, lambda xi: 1j * xi[..., 0], order_m=1.0, parity="odd")}
    rows, worst = [], math.inf
    for name, p in symbols.items():
        for alpha in qz.multi_indices(2, 2, 1):
            res = [qz.weight_commutator_residual(p, alpha, u, h) for h in steps]
            exact = max(res) <= 1e-10 * u.norm()
            order = math.inf if exact else float(np.polyfit(np.log(steps), np.log(res), 1)[0])
            worst = min(worst, order)
            rows.append({"symbol": name, "alpha": f"{alpha[0]}{alpha[1]}", "h1": res[0], "h2": res[1],
                         "h3": res[2], "order": order, "exact": exact})
    return worst >= 1.9, {"min_order": worst}, rows


def picard():
    from .scenarios import builtin, build_problem, build_u0, build_grid

    cfg = builtin("model-nls")
    grid = build_grid(cfg)
    problem = build_problem(cfg)
    u0 = build_u0(cfg, grid)
    trace, report, T = nl.solve_nonlinear(problem, u0, cfg.evolution["T"])
    check = nl.crosscheck_direct(problem, u0, T, picard_trace=trace)
    final = report["final_ratios"]
    rows = [{"iteration": i + 1, "delta": d} for i, d in enumerate(report["deltas"])]
    passed = (T > 0 and all(r <= 0.5 for r in final) and check["available"]
              and check["max_relative"] <= 1e-4)
    return passed, {"certified_T": T, "max_final_ratio": max(final) if final else 0.0,
                    "crosscheck": check.get("max_relative", math.nan)}, rows


def perturbation():
    seeds = hf.seed_grid(2, 4, 3.0, 16)
    B1 = cf.gaussian_matrix(np.array([[1.0, 0.5], [0.5, -1.0]]))
    g = cf.perturbed_field(cf.ultrahyperbolic_bump(2), B1, 0.01)
    rows = []
    counts = {}
    for name, f, s_max in ((g.name, g, 200.0), ("trapped-gallery", cf.trapped_gallery(2), 60.0)):
        verdicts = hf.nontrapping_probe(f, seeds, 50.0, s_max)
        c = {k: sum(v["verdict"] == k for v in verdicts) for k in ("escaped", "undetermined", "error")}
        counts[name] = c
        rows.append({"field": name, "s_max": s_max, **c})
    pert, trap = counts[g.name], counts["trapped-gallery"]
    passed = pert["escaped"] == len(seeds) and trap["undetermined"] > 0
    return passed, {"perturbed_escaped": pert["escaped"], "trapped_undetermined": trap["undetermined"]}, rows


def composition():
    g = qz.BoxGrid(2, 6.0, 32)
    Ah = np.diag([1.0, -1.0])
    b = sc.make_projected_symbol(sc.gaussian_amplitude(0.0, 1.0), Ah)
    b2 = sc.make_projected_symbol(sc.gaussian_amplitude(-1.0, 1.0), Ah)

    def phi(x):
        return np.exp(-np.sum(x * x, -1) / 2)

    rng = np.random.Generator(np.random.Philox(14))
    x = g.nodes
    probes = []
    for _ in range(10):
        c = rng.uniform(-1, 1, 2)
        th = rng.uniform(0, 2 * math.pi)
        w = 4.0 * np.array([math.cos(th), math.sin(th)])
        probes.append(qz.GridField(g, np.exp(-np.sum((x - c) ** 2, -1) / 2 + 1j * (x @ w))))
    rows, ok, worst = [], True, 0.0
    for variant, alpha in (("E1", (1, 1)), ("E2", (1, 0)), ("adjoint", (0, 0)), ("product", (0, 0))):
        means = []
        # residuals relative to ||u||_{H^|alpha|}: the operators lose |alpha| derivatives
        scale = np.array([qz.sobolev_norm(u, sum(alpha)) / u.norm() for u in probes])
        for order in (1, 2, 3):
            r = np.array(qz.composition_residual(phi, alpha, b, order, probes, variant, b2=b2)) / scale
            means.append(float(r.mean()))
            worst = max(worst, float(r.max()))
            rows.append({"variant": variant, "N_order": order, "mean": means[-1], "max": float(r.max())})
        ok &= all(a > c for a, c in zip(means[:-1], means[1:]))
    passed = ok and worst <= 1.0
    return passed, {"decreasing": ok, "max_residual": worst}, rows


CRITERIA: dict[int, tuple[str, float, Callable]] = {
    1: ("flow conservation", 30, flow_conservation),
    2: ("free-flow exactness", 1, free_flow),
    3: ("uniform non-trapping", 300, uniform_nontrapping),
    4: ("escape inequality", 600, doi_inequality),
    5: ("cancellation", 600, cancellation),
    6: ("L2 boundedness", 600, l2_boundedness),
    7: ("light-cone lower bound", 300, light_cone),
    8: ("Mizohata blow-up", 60, mizohata),
    9: ("smoothing gain", 1800, smoothing_gain),
    10: ("quarter-gain dichotomy", 300, quarter_gain),
    11: ("weight commutator", 60, weight_commutator),
    12: ("Picard contraction", 1200, picard),
    13: ("perturbation stability", 300, perturbation),
    14: ("composition remainders", 600, composition),
}

FAST_TIER = (1, 2, 8, 11, 12)


def run_criterion(cid: int) -> CriterionResult:
    name, budget, fn = CRITERIA[cid]
    t0 = time.perf_counter()
    passed, measured, rows = fn()
    return CriterionResult(cid, name, bool(passed), measured, time.perf_counter() - t0, float(budget), rows)


def run_all(ids=None):
    return [run_criterion(i) for i in (ids or sorted(CRITERIA))]
