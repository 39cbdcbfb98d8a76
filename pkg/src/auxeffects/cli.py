"""Command-line entry point: simulate, oracle, estimate, profile, replicate.

Exit status is 0 on success, 1 on invalid input or usage and 2 when an
estimator fails numerically.  Reports are JSON written with sorted keys and
no timestamps, so identical argv gives byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, harness, oracle, psem, snm, survival
from .covariate import (
    ExtrapolationWarning,
    conventional_fit,
    eas_fit,
    effect_above_threshold,
    fit_principal_score,
    joint_score_effects,
)
from .data import load_complete_csv, load_observed_csv, load_survival_csv
from .errors import DataError, EstimationError
from .synth import (
    ContinuousWorldConfig,
    ScreeningWorldConfig,
    generate,
    load_world,
    mask,
    resolve_config_path,
    world_from_dict,
    world_to_dict,
)

log = logging.getLogger("auxeffects")

METHODS = (
    "conventional",
    "eas",
    "eas-threshold",
    "eas-joint",
    "snm",
    "mediation",
    "ps1",
    "ps2",
    "survival-gest",
    "naive",
)

NAIVE_WARNING = (
    "this contrast compares treated and untreated units that share an auxiliary value; "
    "the auxiliary is itself affected by treatment, so the two groups are not comparable "
    "and the contrast is not a causal effect"
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with exit status 1 for usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --- serialization ------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_json(path, obj) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dumps(obj), encoding="utf-8")


def _config_hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(_jsonable(p), sort_keys=True).encode())
        h.update(b"\0")
    return h.hexdigest()


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_json(path) -> dict:
    p = resolve_config_path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from None


def _need(args, name):
    if getattr(args, name) is None:
        raise UsageError(f"--{name.replace('_', '-')} is required")
    return getattr(args, name)


# --- simulate / oracle --------------------------------------------------------------


def cmd_simulate(args) -> int:
    world = load_world(_need(args, "world"))
    if args.n is not None:
        world = world_from_dict({**world_to_dict(world), "n": args.n})
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    wd = world_to_dict(world)
    meta = {"seed": args.seed, "config_hash": _config_hash("simulate", wd, args.seed), "world": wd, "version": __version__}
    gen_seed = np.random.SeedSequence(args.seed, spawn_key=(0,))
    if isinstance(world, ScreeningWorldConfig):
        sd, truth = generate(world, gen_seed)
        sd.to_csv(out / "survival.csv")
        _write_json(out / "truth.json", {**meta, "truth": {**oracle.truth_report(world), "sample": truth}})
        print(f"wrote {out / 'survival.csv'} and {out / 'truth.json'}")
        return 0
    complete = generate(world, gen_seed)
    observed = mask(complete, world.p_treat, np.random.SeedSequence(args.seed, spawn_key=(1,)))
    complete.to_csv(out / "complete.csv")
    observed.to_csv(out / "observed.csv")
    _write_json(out / "truth.json", {**meta, "truth": oracle.truth_report(world, complete)})
    print(f"wrote {out / 'complete.csv'}, {out / 'observed.csv'} and {out / 'truth.json'}")
    return 0


def cmd_oracle(args) -> int:
    if args.input is None and args.world is None:
        raise UsageError("oracle needs --input complete.csv or --world world.json")
    world = load_world(args.world) if args.world else None
    complete = load_complete_csv(args.input) if args.input else None
    parts = ["oracle", world_to_dict(world) if world else None, _file_hash(args.input) if args.input else None]
    report = {
        "seed": args.seed,
        "config_hash": _config_hash(*parts),
        "world": world_to_dict(world) if world else None,
        "input": args.input,
        "truth": oracle.truth_report(world, complete),
    }
    path = args.out or "truth.json"
    _write_json(path, report)
    print(f"wrote {path}")
    return 0


# --- estimate -----------------------------------------------------------------------


def _ps_start(start, d, variant):
    if start is None or start == "default":
        return "default"
    cfg = _read_json(start)
    if isinstance(cfg.get("result"), dict) and "model" in cfg["result"]:  # a saved ps report
        cfg = cfg["result"]
    if "model" in cfg and isinstance(cfg["model"], dict):
        return psem.PsModel.from_dict(cfg["model"])
    if "stratum_probs" in cfg and "means" in cfg and "kind" not in cfg:
        return psem.PsModel.from_dict(cfg)
    world = world_from_dict(cfg["world"] if "world" in cfg else cfg)
    if not isinstance(world, ContinuousWorldConfig):
        raise DataError("a world start must describe a continuous world")
    return psem.start_from_world(world, d, variant)


def _estimate(method, args, spec: dict):
    """Run ``method``; returns (result dict, warnings)."""
    if method == "survival-gest":
        sd = load_survival_csv(args.input)
        gs = survival.SurvivalGSpec.from_dict(spec)
        pr = survival.profile_and_invert(sd, gs)
        return {**pr.to_dict(), "n": sd.n, "n_treated": sd.n_treated}, list(pr.caveats)
    d = load_observed_csv(args.input)
    if method == "conventional":
        cf = conventional_fit(d, interaction=bool(spec.get("interaction", False)), robust=bool(spec.get("robust", True)))
        res = {
            "effect": cf.effect,
            "se": cf.se,
            "interaction": cf.interaction,
            "coefficients": dict(zip(cf.fit.names, cf.fit.coef)),
        }
        return res, []
    if method == "eas":
        mode = spec.get("mode", "received")
        mode = mode if mode == "received" else int(mode)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ExtrapolationWarning)
            f = eas_fit(d, mode=mode, pooled=bool(spec.get("pooled", False)), robust=bool(spec.get("robust", True)))
        res = {
            "beta0": f.beta0,
            "beta_mu": f.beta_mu,
            "beta_a": f.beta_a,
            "beta_mua": f.beta_mua,
            "covariance": f.cov,
            "extrapolated": f.extrapolated,
            "extrapolated_se": f.effect_se(1.0),
            "score_mode": f.score_mode,
            "score_range": list(f.score_range),
        }
        return res, list(f.warnings)
    if method == "eas-threshold":
        arm = int(spec.get("arm", 1))
        model = fit_principal_score(d, arm, pooled=bool(spec.get("pooled", False)))
        # default cut: the mean score, which splits any non-constant score
        c = float(spec["threshold"]) if spec.get("threshold") is not None else float(model(d.x).mean())
        se = effect_above_threshold(d, model, c, adjust=bool(spec.get("adjust", False)))
        res = {"arm": arm, "threshold": c, "effect": se.effect, "se": se.se, "n": se.n, "n_treated": se.n_treated}
        return res, (["principal score is nearly constant"] if model.weak else [])
    if method == "eas-joint":
        m0 = fit_principal_score(d, 0)
        m1 = fit_principal_score(d, 1)
        cells = joint_score_effects(d, m0, m1, bins=spec.get("bins", 4))
        return {"cells": cells}, []
    if method in ("snm", "mediation"):
        spec = dict(spec)
        if method == "mediation":
            spec["model"] = snm.MEDIATION
        spec["seed"] = args.seed
        s = snm.SnmSpec.from_dict(spec)
        g = snm.solve_mediation(d, s) if s.model == snm.MEDIATION else snm.solve(d, s)
        return g.to_dict(), list(g.warnings)
    if method in ("ps1", "ps2"):
        variant = "I" if method == "ps1" else "II"
        f = psem.fit(
            d,
            variant,
            start=_ps_start(args.start, d, variant),
            tol=args.tol,
            max_iter=int(spec.get("max_iter", 5000)),
            accelerate=bool(spec.get("accelerate", True)),
            per_cell_sigma=bool(spec.get("per_cell_sigma", False)),
            monotone=bool(spec.get("monotone", False)),
            check_identifiability=bool(spec.get("check_identifiability", False)),
        )
        return f.to_dict(), list(f.warnings)
    if method == "naive":
        res = {"contrast": harness.naive_contrast(d)}
        for a in (0, 1):
            res[f"n_a{a}_s1"] = int(((d.a == a) & (d.s == 1)).sum())
        return res, [NAIVE_WARNING]
    raise UsageError(f"unknown method {method!r}")


def cmd_estimate(args) -> int:
    method = _need(args, "method")
    _need(args, "input")
    spec = _read_json(args.spec) if args.spec else {}
    if not isinstance(spec, dict):
        raise DataError("spec must be a JSON object")
    result, notes = _estimate(method, args, spec)
    report = {
        "method": method,
        "seed": args.seed,
        "config_hash": _config_hash("estimate", method, spec, args.seed, args.start, args.tol, _file_hash(args.input)),
        "input": args.input,
        "spec": spec,
        "result": result,
        "warnings": notes,
        "version": __version__,
    }
    path = args.out or "report.json"
    _write_json(path, report)
    for w in notes:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {path}")
    return 0


# --- profile ------------------------------------------------------------------------


def cmd_profile(args) -> int:
    sd = load_survival_csv(_need(args, "input"))
    spec = survival.SurvivalGSpec.from_dict(_read_json(args.spec) if args.spec else {})
    pr = survival.profile_and_invert(sd, spec)
    path = Path(args.out or "profile.csv")
    lines = ["psi,z,n_effective"]
    for psi, z, ne in zip(pr.grid, pr.z, pr.n_effective):
        lines.append(f"{float(psi)!r},{float(z)!r},{float(ne)!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {path}; psi_hat = {pr.psi_hat:.4f}, CI ({pr.ci[0]:.4f}, {pr.ci[1]:.4f})")
    return 0


# --- replicate ----------------------------------------------------------------------


def cmd_replicate(args) -> int:
    cfg = harness.StudyConfig.load(_need(args, "study"))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicates is not None:
        cfg.replicates = args.replicates
        if cfg.replicates < 1:
            raise DataError("replicates must be at least 1")
    threads = args.threads or harness.default_threads()
    step = max(1, cfg.replicates // 10)

    def progress(done, total):
        if done % step == 0 or done == total:
            log.info("replicate %d/%d", done, total)

    res = harness.run_study(cfg, threads=threads, progress=progress)
    report = {**res.to_dict(), "seed": cfg.seed, "config_hash": _config_hash("replicate", res.config)}
    path = args.out or "result.json"
    _write_json(path, report)
    print(harness.format_table(res))
    print(f"wrote {path} ({res.runtime:.1f} s)")
    return 0


# --- dispatch -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="auxeffects", description="Effects for groups defined by a post-treatment auxiliary outcome.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed_default=0):
        sp.add_argument("--seed", type=int, default=seed_default, help="random seed")
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    sp = sub.add_parser("simulate", help="draw a synthetic trial from a world config")
    common(sp)
    sp.add_argument("--world", help="world JSON (bundled names resolve too)")
    sp.add_argument("--n", type=int, help="override the world's sample size")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("oracle", help="ground-truth quantities from potential outcomes or a world")
    common(sp)
    sp.add_argument("--input", help="complete.csv with potential outcomes")
    sp.add_argument("--world", help="world JSON for population values")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("estimate", help="run one estimator on a dataset")
    common(sp)
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--input", help="observed.csv (survival.csv for survival-gest)")
    sp.add_argument("--spec", help="estimator options as JSON")
    sp.add_argument("--start", help="EM start: 'default', a world or truth JSON, or a previous ps report")
    sp.add_argument("--tol", type=float, default=1e-8, help="EM relative log-likelihood tolerance")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("profile", help="survival G-test profile as CSV plot data")
    common(sp)
    sp.add_argument("--input", help="survival.csv")
    sp.add_argument("--spec", help="survival spec JSON")
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("replicate", help="Monte Carlo study over seeded replicates")
    common(sp, seed_default=None)
    sp.add_argument("--study", help="study JSON (bundled names resolve too)")
    sp.add_argument("--threads", type=int, help="worker processes (default: available CPUs)")
    sp.add_argument("--replicates", type=int, help="override the study's replicate count")
    sp.set_defaults(func=cmd_replicate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"auxeffects: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"auxeffects: invalid input: {exc}", file=sys.stderr)
        return 1
    except EstimationError as exc:
        print(f"auxeffects: estimation failed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"auxeffects: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
