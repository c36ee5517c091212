"""Command-line front end: run scenarios, the acceptance suite and exports.

Exit codes: 0 success (computational findings included), 1 internal error,
2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import acceptance as ac
from . import evolve as ev
from . import hamflow as hf
from . import nlsolve as nl
from . import scenarios as scn
from . import symcalc as sc
from .coeffields import truncate
from .quantize import load_field

__all__ = ["RunManifest", "run_scenario", "verify_suite", "export_run", "parallel_map", "main"]

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3
TIERS = {"fast": ac.FAST_TIER, "full": tuple(sorted(ac.CRITERIA))}


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    fingerprint: str
    version: str
    started: str
    finished: str = ""
    files: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    findings: list = field(default_factory=list)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, out_dir) -> "RunManifest":
        return cls(**json.loads((Path(out_dir) / "manifest.json").read_text()))

    def verify_inventory(self, out_dir) -> list:
        """Problems found when re-scanning ``out_dir`` against the inventory."""
        root = Path(out_dir)
        problems = []
        listed = {f["path"]: f["bytes"] for f in self.files}
        for rel, size in listed.items():
            p = root / rel
            if not p.is_file():
                problems.append(f"missing {rel}")
            elif p.stat().st_size != size:
                problems.append(f"size mismatch {rel}")
        present = {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()}
        present.discard("manifest.json")
        for extra in sorted(present - set(listed)):
            problems.append(f"unlisted {extra}")
        return problems


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path, rows) -> Path:
    """Rows of dicts to CSV with round-trip float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if rows:
        cols = list(rows[0])
        for r in rows[1:]:
            cols.extend(k for k in r if k not in cols)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
    path.write_text(buf.getvalue())
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------- experiments

def _block(cfg, name):
    return dict(cfg.blocks.get(name) or {})


def _exp_trace(cfg, out):
    b = _block(cfg, "trace")
    field_ = scn.build_field(cfg)
    n = field_.dim
    seeds = hf.seed_grid(n, b.get("positions", 4), b.get("extent", 3.0), b.get("directions", 16))
    tol = b.get("tol", 1e-10)
    rays = hf.trace_rays(field_, seeds, (0.0, b.get("s_max", 20.0)), tol=tol)
    rows = []
    for i, r in enumerate(rays):
        rows.append({"seed": i, "x0": r.seed.x.tolist(), "xi0": r.seed.xi.tolist(), "status": r.status,
                     "h2_drift": r.h2_drift(), "final_radius": float(np.linalg.norm(r.X[-1]))})
    files = [write_csv(out / "rays.csv", rows)]
    for i in range(min(int(b.get("save_rays", 4)), len(rays))):
        path = out / f"ray_{i:04d}.csv"
        rays[i].to_csv(path)
        files.append(path)
    mu = b.get("mu", 50.0)
    verdicts = hf.nontrapping_probe(field_, seeds, mu, b.get("probe_s_max", 200.0), tol=tol)
    files.append(write_csv(out / "nontrapping.csv",
                           [{"seed": i, "verdict": v["verdict"], "s": "" if v["s"] is None else v["s"],
                             "status": v["status"]} for i, v in enumerate(verdicts)]))
    undetermined = sum(v["verdict"] != "escaped" for v in verdicts)
    findings = [f"{undetermined} of {len(seeds)} seeds did not reach |X| = {mu:g}"] if undetermined else []
    checks = {"trace.h2_conservation": max(r["h2_drift"] for r in rows) <= 1e-8}
    return files, checks, findings


def _exp_symbol(cfg, out):
    b = _block(cfg, "symbol")
    field_ = scn.build_field(cfg)
    grid = scn.build_grid(cfg)
    kind = b.get("kind", "integrating-factor")
    files, checks, findings = [], {}, []
    try:
        if kind == "doi":
            p4 = sc.doi_symbol(field_, M=b.get("M", 3.0), c2=b.get("c2", 1.0))
            res = sc.verify_escape_inequality(p4, field_, x_pts=b.get("x_pts", 32),
                                              directions=b.get("directions", 16))
            files.append(write_json(out / "escape_inequality.json", res))
            checks["symbol.escape_inequality"] = res["min_slack"] + res["c"] > 0
        else:
            spec = scn.build_spec(cfg)
            R = b.get("R", 8.0)
            fam = sc.integrating_factor(truncate(field_, R), spec.b1, s_param=b.get("s_param", 0.0))
            which = b.get("which", ["p_e", "k", "k_tilde"])
            tables = {}
            for w in which:
                tab = fam.table(grid, w, angles=b.get("angles", 64))
                base = out / f"table_{w}"
                tab.save(base)
                files.extend([base.with_suffix(".bin"), base.with_suffix(".json")])
                tables[w] = tab
            summary = {"R": R, "s_param": b.get("s_param", 0.0), "warnings": fam.warnings,
                       "homogeneous": fam.homogeneous}
            if "k" in tables and "k_tilde" in tables:
                rng = scn.make_rng(cfg.seed, 1)
                probes = []
                for _ in range(b.get("probes", 3)):
                    c = rng.uniform(-1, 1, grid.dim)
                    v = np.exp(-np.sum((grid.nodes - c) ** 2, -1)) * np.exp(1j * grid.nodes @ rng.normal(size=grid.dim))
                    probes.append(scn.GridField(grid, v))
                freqs = [f for f in b.get("freqs", [2.0, 4.0, 8.0]) if f < grid.xi_max]
                err = ev.error_operator_check(fam, probes, freqs, tables=(tables["k"], tables["k_tilde"]))
                summary["error_operator"] = err
                checks["symbol.error_operator_bounded"] = all(math.isfinite(r) for r in err["ratios"])
            files.append(write_json(out / "symbol.json", summary))
            if fam.warnings:
                findings.extend(str(w) for w in fam.warnings)
    except sc.TrappingSuspected as exc:
        findings.append(f"trapping suspected: {exc}")
    return files, checks, findings


def _exp_smooth(cfg, out):
    b = _block(cfg, "smooth")
    grid = scn.build_grid(cfg)
    spec = scn.build_spec(cfg)
    horizon = b.get("horizon", 1.5)
    rows, findings = [], []
    for lam in b.get("lambdas", [4.0, 8.0, 16.0, 32.0]):
        if lam >= grid.xi_max:
            findings.append(f"lambda {lam:g} beyond the grid band {grid.xi_max:g}; skipped")
            continue
        T = horizon / lam
        u0 = scn.build_u0(cfg, grid, lam)
        try:
            tr = ev.evolve_linear(u0, spec, T, ev.EvolveConfig(stride=b.get("stride", 4)))
        except ev.BlowUp as exc:
            findings.append(f"lambda {lam:g}: {exc}")
            continue
        f = ev.smoothing_functional(tr, b.get("s", 0.0), b.get("N_weight", 2.0))
        rows.append({"lambda": lam, "T": T, "ratio": f["ratio"], "lhs": f["lhs"], "rhs": f["rhs_sup"],
                     "boundary_mass": tr.diagnostics["boundary_mass"]})
    files = [write_csv(out / "smoothing.csv", rows)]
    checks = {}
    if rows:
        vals = [r["ratio"] for r in rows]
        checks["smooth.ratio_spread"] = max(vals) / min(vals) <= 2.0
    return files, checks, findings


def _exp_evolve(cfg, out):
    grid = scn.build_grid(cfg)
    spec = scn.build_spec(cfg)
    u0 = scn.build_u0(cfg, grid)
    evo = cfg.evolution
    ecfg = ev.EvolveConfig(dt=evo.get("dt"), stride=evo.get("stride", 1), cfl=evo.get("cfl", 2.5))
    findings = []
    try:
        tr = ev.evolve_linear(u0, spec, evo["T"], ecfg)
    except ev.BlowUp as exc:
        tr = exc.trace
        findings.append(str(exc))
    tr.save(out / "trace")
    files = sorted(p for p in (out / "trace").iterdir())
    rows = [{"t": r["t"], "l2": r["l2"], **{f"h{k}": v for k, v in r["hs"].items()}} for r in tr.norm_history]
    files.append(write_csv(out / "norms.csv", rows))
    checks = {}
    if not findings:
        checks["evolve.finite"] = all(math.isfinite(r["l2"]) for r in rows)
    return files, checks, findings


def _exp_nonlinear(cfg, out):
    b = _block(cfg, "nonlinear")
    grid = scn.build_grid(cfg)
    problem = scn.build_problem(cfg)
    u0 = scn.build_u0(cfg, grid)
    try:
        trace, report, T = nl.solve_nonlinear(problem, u0, cfg.evolution["T"], tol=b.get("tol", 1e-9),
                                              max_iter=b.get("max_iter", 30))
    except (nl.NoCertifiedExistence, nl.IterateDiverged) as exc:
        return [write_json(out / "nonlinear.json", {"certified": False, "reason": str(exc)})], {}, [str(exc)]
    check = nl.crosscheck_direct(problem, u0, T, picard_trace=trace)
    rows = [{"iteration": i + 1, "delta": d, "ratio": (report["ratios"][i - 1] if i else "")}
            for i, d in enumerate(report["deltas"])]
    files = [write_csv(out / "picard.csv", rows),
             write_json(out / "nonlinear.json", {"certified": True, "report": report, "crosscheck": check})]
    checks = {"nonlinear.contraction": all(r <= 0.5 for r in report["final_ratios"]),
              "nonlinear.crosscheck": bool(check.get("available")) and check["max_relative"] <= 1e-4}
    return files, checks, []


def _exp_verify(cfg, out):
    ids = _block(cfg, "verify").get("criteria", list(ac.FAST_TIER))
    files, checks = [], {}
    for cid in ids:
        r = ac.run_criterion(int(cid))
        files.append(write_csv(out / f"criterion_{r.id:02d}.csv", r.rows))
        checks[f"verify.C{r.id:02d}"] = r.passed
    return files, checks, []


def _exp_mizohata(cfg, out):
    b = _block(cfg, "mizohata")
    grid = scn.build_grid(cfg)
    rows, ok = [], True
    for lam in b.get("lambdas", [8.0, 16.0, 32.0]):
        r = ev.mizohata_blowup_demo(lam, b.get("T", 0.5), grid)
        for row in r["rows"]:
            passed = row["rel_error"] <= b.get("tolerance", 0.15)
            ok &= passed
            rows.append({"lambda": lam, **row, "pass": passed})
    return [write_csv(out / "growth.csv", rows)], {"mizohata.exp_growth": ok}, []


def _exp_quarter_gain(cfg, out):
    b = _block(cfg, "quarter-gain")
    grid = scn.build_grid(cfg)
    files, verdicts, rows = [], {}, []
    for variant in b.get("variants", ["ultrahyperbolic", "elliptic"]):
        r = ev.gain_exponent_probe(variant, b.get("lambdas", [4.0, 8.0, 16.0, 32.0]), b.get("T", 0.5), grid)
        verdicts[variant] = r["verdict"]
        rows.extend({"variant": variant, **row} for row in r["rows"])
    files.append(write_csv(out / "gain.csv", rows))
    files.append(write_json(out / "gain_verdict.json", verdicts))
    checks = {}
    if "ultrahyperbolic" in verdicts:
        v = verdicts["ultrahyperbolic"]
        checks["quarter-gain.half_grows"] = v["0.5"]["increasing"] and v["0.5"]["growth"] >= 2.0
        checks["quarter-gain.quarter_bounded"] = v["0.25"]["spread"] <= 2.0
    if "elliptic" in verdicts:
        checks["quarter-gain.elliptic_bounded"] = verdicts["elliptic"]["0.5"]["spread"] <= 2.0
    return files, checks, []


EXPERIMENT_RUNNERS = {
    "trace": _exp_trace, "symbol": _exp_symbol, "smooth": _exp_smooth, "evolve": _exp_evolve,
    "nonlinear": _exp_nonlinear, "verify": _exp_verify, "mizohata": _exp_mizohata,
    "quarter-gain": _exp_quarter_gain,
}


def _run_one(args):
    mapping, name, out = args
    cfg = scn.from_mapping(mapping)
    sub = Path(out) / name
    sub.mkdir(parents=True, exist_ok=True)
    files, checks, findings = EXPERIMENT_RUNNERS[name](cfg, sub)
    return [str(Path(f)) for f in files], checks, findings


def parallel_map(fn, items, workers: int = 1):
    """Ordered map over processes when ``workers > 1``."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("LAB_WORKERS", "1")))
    except ValueError:
        return 1


def run_scenario(config: scn.ScenarioConfig, out_dir, workers: int | None = None) -> RunManifest:
    """Run every selected experiment, write outputs and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config.fingerprint(), __version__, _now())
    write_json(out / "config.json", config.to_mapping())
    mapping = config.to_mapping()
    results = parallel_map(_run_one, [(mapping, e, str(out)) for e in config.experiments],
                           workers or default_workers())
    paths = [out / "config.json"]
    for files, checks, findings in results:
        paths.extend(Path(f) for f in files)
        manifest.checks.update(checks)
        manifest.findings.extend(findings)
    manifest.files = [{"path": str(p.relative_to(out)), "bytes": p.stat().st_size} for p in sorted(set(paths))]
    manifest.finished = _now()
    manifest.write(out)
    return manifest


# ---------------------------------------------------------------- verify and export

def _criterion_task(cid):
    return ac.run_criterion(cid)


def verify_suite(tier: str, out_dir, workers: int | None = None, stream=None) -> dict:
    """Run the acceptance battery; one CSV per criterion plus ``summary.csv``."""
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; expected one of {sorted(TIERS)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = parallel_map(_criterion_task, TIERS[tier], workers or default_workers())
    summary_rows = []
    for r in results:
        write_csv(out / f"criterion_{r.id:02d}.csv", r.rows)
        summary_rows.append({"id": r.id, "name": r.name, "passed": r.passed, "runtime": r.runtime,
                             "budget": r.budget, **{k: v for k, v in r.measured.items()
                                                    if isinstance(v, (int, float, bool, str))}})
        if stream is not None:
            print(r.line(), file=stream, flush=True)
    write_csv(out / "summary.csv", summary_rows)
    failing = [r.id for r in results if not r.passed]
    summary = {"tier": tier, "passed": not failing, "failing": failing,
               "results": [{"id": r.id, "name": r.name, "passed": r.passed, "measured": r.measured,
                            "runtime": r.runtime} for r in results]}
    write_json(out / "summary.json", summary)
    return summary


def export_run(run_dir, out_dir) -> list:
    """Binary fields of a run as CSV (node coordinates, real, imaginary parts)."""
    run, out = Path(run_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for bin_path in sorted(run.rglob("*.bin")):
        meta_path = bin_path.with_suffix(".json")
        if not meta_path.is_file():
            continue
        meta = json.loads(meta_path.read_text())
        if "time" not in meta:
            continue
        u, meta = load_field(bin_path.with_suffix(""))
        X = u.grid.nodes.reshape(-1, u.grid.dim)
        v = u.values.reshape(-1)
        rows = [{**{f"x{j + 1}": X[i, j] for j in range(u.grid.dim)}, "re": v[i].real, "im": v[i].imag}
                for i in range(len(v))]
        rel = bin_path.relative_to(run).with_suffix(".csv")
        written.append(write_csv(out / rel, rows))
    return written


# ---------------------------------------------------------------- entry point

def _parser():
    p = argparse.ArgumentParser(prog="schrolab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "trace", "symbol", "smooth", "evolve", "nonlinear"):
        s = sub.add_parser(name, help=f"run the {name} experiment" if name != "run" else
                           "run every experiment listed in the configuration")
        g = s.add_mutually_exclusive_group(required=True)
        g.add_argument("--config", type=Path, help="YAML configuration file")
        g.add_argument("--scenario", choices=sorted(scn.SCENARIOS), help="builtin scenario")
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--tier", choices=sorted(TIERS), default="fast")
    v.add_argument("--out", type=Path, required=True)
    v.add_argument("--workers", type=int)
    e = sub.add_parser("export", help="convert binary fields of a run to CSV")
    e.add_argument("--from", dest="source", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    return p


def _load(args) -> scn.ScenarioConfig:
    cfg = scn.load_config(args.config) if args.config else scn.builtin(args.scenario)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.command != "run":
        cfg = cfg.with_experiments([args.command])
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "verify":
            t0 = time.perf_counter()
            summary = verify_suite(args.tier, args.out, args.workers, stream=sys.stdout)
            print(f"{args.tier} tier: {'all passed' if summary['passed'] else 'failing ' + str(summary['failing'])}"
                  f" in {time.perf_counter() - t0:.1f}s")
            return EXIT_OK if summary["passed"] else EXIT_VERIFY
        if args.command == "export":
            files = export_run(args.source, args.out)
            print(f"wrote {len(files)} CSV files to {args.out}")
            return EXIT_OK
        cfg = _load(args)
        manifest = run_scenario(cfg, args.out, args.workers)
        for k, ok in sorted(manifest.checks.items()):
            print(f"[{'PASS' if ok else 'FAIL'}] {k}")
        for f in manifest.findings:
            print(f"finding: {f}")
        return EXIT_OK
    except scn.ConfigError as exc:
        print(json.dumps({"errors": exc.errors}, indent=2), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
