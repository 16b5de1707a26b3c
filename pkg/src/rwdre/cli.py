"""Command line entry point: ``rwdre <subcommand> [options]``.

Every option can also be set through an environment variable named
``RWDRE_`` followed by the option name in upper case with dashes turned into
underscores (``--env-seed`` becomes ``RWDRE_ENV_SEED``). Command line values
win over the environment.

Exit codes: 0 when the run passes (or has nothing to judge), 1 when a
verdict or cross-check fails or a computation gives up, 2 for usage and
configuration errors, including guard violations.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, limits, pathlaw, sim, stats, transfer
from .errors import GuardViolation, ModelError, NoDecayDetected, RWDREError
from .model import builtin_model, builtin_model_names, load_model

ENV_PREFIX = "RWDRE_"
EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

GUARDS = {
    "ENUMERATION_GUARD": pathlaw.ENUMERATION_GUARD,
    "EXTENSION_GUARD": pathlaw.EXTENSION_GUARD,
    "TABLE_GUARD": transfer.TABLE_GUARD,
    "QUENCHED_MEMORY_GUARD": sim.QUENCHED_MEMORY_GUARD,
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _depth(text):
    if text == "auto":
        return "auto"
    try:
        d = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("depth must be an integer or 'auto'") from None
    if d < 1:
        raise argparse.ArgumentTypeError("depth must be >= 1")
    return d


def _positive_int(text):
    v = int(float(text)) if "e" in str(text).lower() else int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _gaps(text):
    text = str(text)
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x]


def resolve_model(ref):
    """A model file path, or the name of a bundled model."""
    if ref is None:
        raise UsageError("--model is required")
    path = Path(ref)
    if path.exists():
        return load_model(path), str(ref)
    name = ref[len("builtin:"):] if ref.startswith("builtin:") else ref
    if name in builtin_model_names():
        return builtin_model(name), f"builtin:{name}"
    raise UsageError(f"model {ref!r} is neither a file nor a bundled model "
                     f"({', '.join(builtin_model_names())})")


def _digest_array(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _series_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


# ---------------------------------------------------------------- subcommands
# each returns (result dict, passed or None, csv text or None, seeds dict)

def cmd_analyze_chain(args, model):
    chain = model.chain
    ks, errs = chain.mixing_profile(args.kmax)
    rate, c = chain.fit_mixing_rate(args.kmax)
    res = {"pi": chain.pi, "lambda": chain.lam, "cutoff": chain.cutoff,
           "fitted_rate": rate, "fitted_constant": c,
           "mixing_profile": {"k": ks, "error": errs}}
    return res, None, _series_csv(["k", "error"], zip(ks, errs)), {}


def cmd_oracle(args, model):
    law = pathlaw.enumerate_walk_law(model, args.n, prune=args.prune)
    ok = abs(law.total_mass - 1.0) <= 1e-9 if law.exact else None
    return law.to_json_dict(), ok, law.to_csv(), {}


def _simulate(args, model):
    if args.mode == "annealed":
        run = sim.run_annealed(model, args.n, args.replicas, args.seed, threads=args.threads)
        return [run], {"seed": args.seed}
    runs = sim.run_quenched_batch(model, args.n, args.walkers, args.environments,
                                  args.env_seed, args.seed, threads=args.threads)
    return runs, {"seed": args.seed, "env_seed": args.env_seed}


def _empirical_law(pos):
    pts, counts = np.unique(pos, axis=0, return_counts=True)
    if pts.shape[0] > 2000:
        return None
    return {",".join(str(int(c)) for c in p): int(k) for p, k in zip(pts, counts)}


def cmd_simulate(args, model):
    runs, seeds = _simulate(args, model)
    pos = np.concatenate([r.positions for r in runs])
    n = args.n
    cov = np.atleast_2d(np.cov(pos, rowvar=False)) / n if pos.shape[0] > 1 else None
    res = {
        "mode": args.mode,
        "n": n,
        "samples": int(pos.shape[0]),
        "mean_position": pos.mean(axis=0),
        "drift_estimate": pos.mean(axis=0) / n,
        "drift_se": (np.sqrt(np.diag(cov) * n / pos.shape[0]) / n) if cov is not None else None,
        "covariance_over_n": cov,
        "positions_digest": _digest_array(pos.astype(np.int64)),
        "empirical_law": _empirical_law(pos),
    }
    if args.mode == "quenched":
        res["environments"] = [
            {"env_index": r.env_index, "environment_digest": r.environment_digest,
             "touched_digest": r.touched_digest, "touched_sites": r.touched_sites}
            for r in runs]
    text = _series_csv([f"x{i}" for i in range(model.d)], pos.astype(np.int64).tolist())
    return res, None, text, seeds


def _report_for(args, model):
    rep, rpf = limits.diffusion_report(model, depth=args.depth, tol=args.tol, j_max=args.jmax)
    return rep, rpf


def cmd_annealed_clt(args, model):
    rep, _ = _report_for(args, model)
    run = sim.run_annealed(model, args.n, args.replicas, args.seed, threads=args.threads)
    verdict = stats.test_annealed_clt(run, rep, alpha=args.alpha, cov_tol=args.cov_tol)
    res = {"diffusion_report": rep.to_json_dict(), "verdict": verdict.to_json_dict(),
           "positions_digest": _digest_array(run.positions)}
    return res, verdict.passed, verdict.to_csv(), {"seed": args.seed}


def cmd_quenched_clt(args, model):
    rep, _ = _report_for(args, model)
    runs = sim.run_quenched_batch(model, args.n, args.walkers, args.environments,
                                  args.env_seed, args.seed, threads=args.threads)
    verdict = stats.test_quenched_clt(runs, rep, alpha=args.alpha)
    res = {"diffusion_report": rep.to_json_dict(), "verdict": verdict.to_json_dict(),
           "environment_digests": [r.environment_digest for r in runs]}
    return res, verdict.passed, verdict.to_csv(), {"seed": args.seed, "env_seed": args.env_seed}


def cmd_transfer(args, model):
    depth = 6 if args.depth == "auto" else args.depth
    rpf = transfer.rpf_fixed_point(model, depth, args.rpf_tol)
    prof = transfer.contraction_profile(rpf)
    res = rpf.to_json_dict(full=args.full)
    res["contraction_profile"] = prof
    res["lambda"] = model.chain.lam
    ok = bool(rpf.gamma_hat < 1.0)
    return res, ok, _series_csv(["iteration", "residual"], enumerate(prof)), {}


def cmd_green_kubo(args, model):
    rep, rpf = _report_for(args, model)
    res = rep.to_json_dict()
    res["rpf"] = rpf.to_json_dict()
    return res, None, _series_csv(["lag", "norm"], enumerate(rep.lag_norms)), {}


def cmd_degeneracy(args, model):
    cert = limits.degeneracy_check(model)
    res = {"certificate": cert.to_json_dict()}
    if not cert.positive_definite:
        res["projected_diameter"] = cert.projected_diameter()
    return res, None, None, {}


def cmd_mixing(args, model):
    kind, _, idx = args.observable.partition(":")
    idx = int(idx or 0)
    if kind == "state":
        f = stats.state_indicator(model, idx)
    elif kind == "jump":
        f = stats.jump_indicator(model, idx)
    else:
        raise UsageError("--observable must be state:<i> or jump:<i>")
    try:
        fit = stats.fit_mixing_rate(model, f, args.m, args.gaps, mode=args.mixing_mode,
                                    continuations=args.replicas, seed=args.seed)
    except NoDecayDetected as exc:
        res = {"no_decay": True, "floor": exc.floor, "gaps": args.gaps, "errors": exc.errors,
               "observable": args.observable}
        return res, None, _series_csv(["gap", "error"], zip(args.gaps, exc.errors)), {}
    res = fit.to_json_dict()
    res["observable"] = args.observable
    res["no_decay"] = False
    ok = bool(0 < fit.gamma_emp < 1)
    seeds = {"seed": args.seed} if args.mixing_mode == "mc" else {}
    return res, ok, fit.to_csv(), seeds


# ---------------------------------------------------------------- report merging

def _load_reports(paths):
    out = []
    for p in paths:
        try:
            out.append((str(p), json.loads(Path(p).read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read report {p}: {exc}") from None
    return out


def _law_vs_mc(oracle, simulated):
    law = oracle["result"]["law"]
    counts = simulated["result"].get("empirical_law")
    if counts is None:
        return None
    total = simulated["result"]["samples"]
    worst = 0.0
    for site, prob in law.items():
        if prob < 1e-4:
            continue
        freq = counts.get(site, 0) / total
        se = math.sqrt(prob * (1 - prob) / total)
        worst = max(worst, abs(freq - prob) / se)
    return {"max_standard_errors": worst, "passed": worst <= 4.0}


def _operator_vs_mc(gk, simulated):
    res = simulated["result"]
    if res.get("drift_se") is None:
        return None
    drift = np.asarray(gk["result"]["drift"])
    emp = np.asarray(res["drift_estimate"])
    se = np.asarray(res["drift_se"])
    z = float(np.max(np.abs(emp - drift) / np.where(se > 0, se, np.inf)))
    out = {"drift_max_z": z, "drift_ok": z <= 3.0}
    V = np.asarray(gk["result"]["diffusion"])
    cov = np.asarray(res["covariance_over_n"])
    rel = float(np.linalg.norm(cov - V) / max(np.linalg.norm(V), 1e-300))
    out["covariance_rel_error"] = rel
    out["covariance_ok"] = rel <= stats.COV_TOL
    out["passed"] = out["drift_ok"] and out["covariance_ok"]
    return out


def cmd_report(args, _model):
    reports = _load_reports(args.inputs)
    if not reports:
        raise UsageError("report needs at least one input JSON")
    checks = []
    for path, r in reports:
        if r.get("passed") is not None:
            checks.append({"check": f"{r.get('command')} verdict", "inputs": [path],
                           "passed": bool(r["passed"])})
    by_cmd = {}
    for path, r in reports:
        by_cmd.setdefault(r.get("command"), []).append((path, r))
    for po, o in by_cmd.get("oracle", []):
        for ps, s in by_cmd.get("simulate", []):
            if (s["model"]["digest"] == o["model"]["digest"] and s["result"]["n"] == o["result"]["n"]
                    and s["result"]["mode"] == "annealed"):
                c = _law_vs_mc(o, s)
                if c is not None:
                    checks.append({"check": "oracle vs Monte Carlo", "inputs": [po, ps], **c})
    for pg, g in by_cmd.get("green-kubo", []):
        for ps, s in by_cmd.get("simulate", []):
            if (s["model"]["digest"] == g["model"]["digest"] and s["result"]["mode"] == "annealed"
                    and s["result"]["n"] >= args.min_n_crosscheck):
                c = _operator_vs_mc(g, s)
                if c is not None:
                    checks.append({"check": "operator vs Monte Carlo", "inputs": [pg, ps], **c})
        for po, o in by_cmd.get("oracle", []):
            if o["model"]["digest"] == g["model"]["digest"]:
                n = o["result"]["n"]
                mean = np.asarray(o["result"]["mean"]) / max(n, 1)
                gap = float(np.max(np.abs(mean - np.asarray(g["result"]["drift"]))))
                # the exact mean at time n differs from the stationary drift by O(1/n)
                checks.append({"check": "oracle vs operator drift (informational)",
                               "inputs": [po, pg], "difference": gap, "passed": True})
    passed = all(c["passed"] for c in checks)
    res = {"inputs": [p for p, _ in reports], "checks": checks,
           "matrix": {c["check"] + " :: " + ",".join(c["inputs"]): c["passed"] for c in checks}}
    text = _series_csv(["check", "inputs", "passed"],
                       [(c["check"], ";".join(c["inputs"]), c["passed"]) for c in checks])
    return res, passed, text, {}


COMMANDS = {
    "analyze-chain": cmd_analyze_chain,
    "oracle": cmd_oracle,
    "simulate": cmd_simulate,
    "annealed-clt": cmd_annealed_clt,
    "quenched-clt": cmd_quenched_clt,
    "transfer": cmd_transfer,
    "green-kubo": cmd_green_kubo,
    "degeneracy": cmd_degeneracy,
    "mixing": cmd_mixing,
    "report": cmd_report,
}


# ---------------------------------------------------------------- parser

# option name -> (type, default)
COMMON = {
    "model": (str, None),
    "seed": (_nonneg_int, 0),
    "env-seed": (_nonneg_int, 1),
    "n": (_positive_int, 100),
    "replicas": (_positive_int, 10**5),
    "walkers": (_positive_int, 2000),
    "environments": (_positive_int, 50),
    "depth": (_depth, "auto"),
    "tol": (float, limits.DEFAULT_GK_TOL),
    "jmax": (_positive_int, limits.DEFAULT_JMAX),
    "alpha": (float, stats.DEFAULT_ALPHA),
    "out": (str, None),
    "format": (str, "json"),
    "threads": (_positive_int, None),
}

EXTRA = {
    "analyze-chain": {"kmax": (_positive_int, 20)},
    "oracle": {"prune": (float, 0.0)},
    "simulate": {"mode": (str, "annealed")},
    "annealed-clt": {"cov-tol": (float, stats.COV_TOL)},
    "transfer": {"rpf-tol": (float, 1e-12)},
    "mixing": {"m": (_nonneg_int, 2), "gaps": (_gaps, "1..8"),
               "observable": (str, "state:0"), "mixing-mode": (str, "exact")},
    "report": {"min-n-crosscheck": (_positive_int, 1000)},
}

CHOICES = {"format": ("json", "csv"), "mode": ("annealed", "quenched"),
           "mixing-mode": ("exact", "mc")}


def _env_default(name, typ, default):
    raw = os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))
    if raw is None:
        return default
    try:
        return typ(raw)
    except (ValueError, argparse.ArgumentTypeError) as exc:
        raise UsageError(f"{ENV_PREFIX}{name.upper().replace('-', '_')}={raw!r}: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rwdre",
        description="Random walks in a Markovian dynamic environment: exact laws, "
                    "transfer-operator limits and CLT checks.",
        epilog=f"Options may be set via {ENV_PREFIX}<OPTION> environment variables.",
    )
    parser.add_argument("--version", action="version", version=f"rwdre {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        for opt, (typ, default) in {**COMMON, **EXTRA.get(name, {})}.items():
            kw = {"type": typ, "default": _env_default(opt, typ, default)}
            if opt in CHOICES:
                kw["choices"] = CHOICES[opt]
            sp.add_argument(f"--{opt}", **kw)
        sp.add_argument("--csv", default=None, help="also write the CSV table to this path")
        if name == "mixing":
            sp.set_defaults(replicas=_env_default("replicas", _positive_int,
                                                  stats.MIN_CONTINUATIONS))
        if name == "report":
            sp.add_argument("inputs", nargs="*")
        if name == "transfer":
            sp.add_argument("--full", action="store_true",
                            help="include the full eigenfunction and measure tables")
    return parser


def _parameters(args):
    skip = {"command", "out", "format", "csv", "threads", "seed", "env_seed", "model", "inputs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    try:
        parser = build_parser()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS

    start = time.perf_counter()
    try:
        if args.threads is not None:
            sim._check_threads(args.threads)
        if args.command == "report":
            model, source = None, None
        else:
            model, source = resolve_model(args.model)
        result, passed, text, seeds = COMMANDS[args.command](args, model)
    except (UsageError, ModelError, GuardViolation, ValueError) as exc:
        path = getattr(exc, "path", None)
        guard = getattr(exc, "guard", None)
        detail = f" [field {path}]" if path else ""
        if guard:
            detail += f" [guard {guard} = {getattr(exc, 'value', None)}]"
        print(f"error: {exc}{detail}", file=sys.stderr)
        return EXIT_USAGE
    except RWDREError as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL

    report = {
        "tool": "rwdre",
        "version": __version__,
        "command": args.command,
        "model": None if model is None else {"source": source, "digest": model.digest(),
                                             "spec": model.to_dict()},
        "seeds": seeds,
        "parameters": _parameters(args),
        "guards": GUARDS,
        "result": result,
        "passed": passed,
        "wall_clock_seconds": round(time.perf_counter() - start, 3),
    }
    body = json.dumps(_clean(report), indent=2, sort_keys=True) + "\n"
    if args.format == "csv":
        if text is None:
            print("error: this subcommand has no CSV output", file=sys.stderr)
            return EXIT_USAGE
        body = text
    if args.out:
        Path(args.out).write_text(body)
    else:
        stdout.write(body)
    if args.csv and text is not None:
        Path(args.csv).write_text(text)
    return EXIT_FAIL if passed is False else EXIT_PASS


def main():
    sys.exit(run())
