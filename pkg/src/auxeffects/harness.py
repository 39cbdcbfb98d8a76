"""Monte Carlo replication: run estimator batteries over seeded worlds,
summarize per estimand and compare with target tables."""

from __future__ import annotations

import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import oracle, psem, snm, survival
from .covariate import conventional_fit, eas_fit
from .data import Dataset
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

log = logging.getLogger(__name__)

ESTIMATORS = ("snm", "ps1", "ps2", "eas", "conventional", "naive", "survival", "mediation")


@dataclass
class StudyConfig:
    """A replication study.

    ``world`` is a world config dict or the name/path of a world JSON file.
    ``n`` overrides the world's sample size.  ``start`` is the EM start
    policy: "truth", "default" or "both" (the latter adds ``ps1_default.*``
    and ``ps2_default.*`` estimands).
    """

    world: dict | str
    estimators: list
    replicates: int = 500
    n: int | None = None
    seed: int = 20240501
    start: str = "truth"
    snm_spec: dict = field(default_factory=dict)
    survival_spec: dict = field(default_factory=dict)
    eas_mode: str | int = "received"
    em_tol: float = 1e-8
    em_max_iter: int = 5000
    exclusion_factor: float = 100.0
    targets: list = field(default_factory=list)
    name: str = ""
    threads: int | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise DataError("replicates must be at least 1")
        if not self.estimators:
            raise DataError("estimator list is empty")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise DataError(f"unknown estimators {sorted(unknown)}; choose from {list(ESTIMATORS)}")
        if self.start not in ("truth", "default", "both"):
            raise DataError(f"unknown start policy {self.start!r}")
        # validate nested specs up front
        snm.SnmSpec.from_dict(self.snm_spec)
        survival.SurvivalGSpec.from_dict(self.survival_spec)

    def world_config(self):
        if isinstance(self.world, dict):
            cfg = world_from_dict(self.world)
        else:
            cfg = load_world(self.world)
        if self.n is not None:
            d = world_to_dict(cfg)
            d["n"] = int(self.n)
            cfg = world_from_dict(d)
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["world"] = world_to_dict(self.world_config())
        d["n"] = d["world"]["n"]
        d.pop("threads")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"invalid study config: {exc}") from None

    @classmethod
    def load(cls, path) -> "StudyConfig":
        p = resolve_config_path(path)
        with open(p, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataError(f"invalid JSON in {path}: {exc}") from None
        if isinstance(d.get("world"), str):
            w = p.parent / d["world"]
            d["world"] = str(w) if w.exists() else d["world"]
        return cls.from_dict(d)


# --- truths -----------------------------------------------------------------------


def estimand_truths(cfg, world) -> dict:
    """Population truth for each estimand the study produces (None when undefined)."""
    t: dict = {}
    if isinstance(world, ScreeningWorldConfig):
        t["survival.psi_hat"] = world.psi_true
        t["survival.ci_covers"] = None
        return t
    eff = oracle.ps_effects_population(world)
    try:
        real = oracle.realized_effects_population(world)
    except DataError:
        real = (None, None)
    t["snm.psi0"], t["snm.psi1"] = real
    for k, v in eff.items():
        t[f"ps1.{k}"] = v
    # constrained estimands: the realized effects among s1 = 0 and s1 = 1
    t["ps2.I=TP"], t["ps2.TH=D"] = real
    t["eas.extrapolated"] = None
    t["conventional.effect"] = oracle.average_effect_population(world)
    t["naive.contrast"] = None
    if hasattr(world, "gamma"):
        for j, g in enumerate(world.gamma, 1):
            t[f"mediation.gamma{j}"] = g
    return t


# --- one replicate ----------------------------------------------------------------


def naive_contrast(d: Dataset) -> float:
    """Difference in mean outcome between arms among units with s = 1."""
    t = (d.a == 1) & (d.s == 1)
    u = (d.a == 0) & (d.s == 1)
    if not (t.any() and u.any()):
        raise EstimationError("no units with s = 1 in one of the arms")
    return float(d.y[t].mean() - d.y[u].mean())


def run_replicate(cfg: StudyConfig, r: int) -> dict:
    """Estimates of replicate ``r``: estimand -> (value or None, status)."""
    world = cfg.world_config()
    out: dict = {}
    gen_seed = np.random.SeedSequence(cfg.seed, spawn_key=(r, 0))
    mask_seed = np.random.SeedSequence(cfg.seed, spawn_key=(r, 1))

    def record(prefix, fn):
        try:
            vals, ok = fn()
        except EstimationError as exc:
            log.debug("replicate %d: %s failed: %s", r, prefix, exc)
            out[prefix + ".*"] = (None, "failed")
            return
        for k, v in vals.items():
            out[f"{prefix}.{k}"] = (v, "ok" if ok else "nonconverged")

    if isinstance(world, ScreeningWorldConfig):
        sd, _ = generate(world, gen_seed)
        spec = survival.SurvivalGSpec.from_dict(cfg.survival_spec)

        def surv():
            pr = survival.profile_and_invert(sd, spec)
            return {"psi_hat": pr.psi_hat, "ci_covers": float(pr.covers(world.psi_true))}, True

        record("survival", surv)
        return out

    complete = generate(world, gen_seed)
    d = mask(complete, world.p_treat, mask_seed)
    for est in cfg.estimators:
        if est == "snm":
            spec = snm.SnmSpec.from_dict({**cfg.snm_spec, "variance": "none"})
            record("snm", lambda: (snm.solve(d, spec).full(), True))
        elif est == "mediation":
            spec = snm.SnmSpec.from_dict({**cfg.snm_spec, "model": snm.MEDIATION, "variance": "none"})
            record("mediation", lambda: (snm.solve(d, spec).full(), True))
        elif est in ("ps1", "ps2"):
            variant = "I" if est == "ps1" else "II"
            starts = []
            if cfg.start in ("truth", "both"):
                if not isinstance(world, ContinuousWorldConfig):
                    raise DataError("truth starts need a continuous world")
                starts.append((est, psem.start_from_world(world, d, variant)))
            if cfg.start in ("default", "both"):
                starts.append((est if cfg.start == "default" else f"{est}_default", "default"))
            for prefix, start in starts:

                def em(start=start, variant=variant):
                    f = psem.fit(d, variant, start=start, tol=cfg.em_tol, max_iter=cfg.em_max_iter)
                    return f.effects, f.converged

                record(prefix, em)
        elif est == "eas":
            mode = cfg.eas_mode if cfg.eas_mode == "received" else int(cfg.eas_mode)

            def eas():
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    return {"extrapolated": eas_fit(d, mode=mode).extrapolated}, True

            record("eas", eas)
        elif est == "conventional":
            record("conventional", lambda: ({"effect": conventional_fit(d).effect}, True))
        elif est == "naive":
            record("naive", lambda: ({"contrast": naive_contrast(d)}, True))
        elif est == "survival":
            raise DataError("the survival estimator needs a screening world")
    return out


def _worker(payload):
    cfg_dict, r = payload
    return r, run_replicate(StudyConfig.from_dict(cfg_dict), r)


# --- study ------------------------------------------------------------------------


@dataclass
class StudyResult:
    name: str
    replicates: int
    estimands: dict
    values: dict
    comparisons: list
    config: dict
    runtime: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {
            "name": self.name,
            "replicates": self.replicates,
            "estimands": self.estimands,
            "comparisons": self.comparisons,
            "values": self.values,
            "config": self.config,
        }
        if include_runtime:
            d["runtime_seconds"] = self.runtime
        return d


def _expected_names(cfg: StudyConfig, world) -> list[str]:
    names = []
    for est in cfg.estimators:
        if est == "snm":
            names += ["snm.psi0", "snm.psi1"]
        elif est == "mediation":
            names += ["mediation.gamma1", "mediation.gamma2", "mediation.gamma3"]
        elif est in ("ps1", "ps2"):
            keys = ["I", "TP", "TH", "D"] if est == "ps1" else ["I=TP", "TH=D"]
            prefixes = [est] if cfg.start != "both" else [est, f"{est}_default"]
            names += [f"{p}.{k}" for p in prefixes for k in keys]
        elif est == "eas":
            names.append("eas.extrapolated")
        elif est == "conventional":
            names.append("conventional.effect")
        elif est == "naive":
            names.append("naive.contrast")
        elif est == "survival":
            names += ["survival.psi_hat", "survival.ci_covers"]
    return names


def summarize(values: list, statuses: list, truth, factor: float) -> dict:
    """Moments over included replicates with exclusion accounting."""
    R = len(values)
    inc = []
    counts = {"failed": 0, "nonconverged": 0, "exploded": 0}
    for v, st in zip(values, statuses):
        if st != "ok" or v is None:
            counts["failed" if st == "failed" else "nonconverged"] += 1
        elif truth not in (None, 0) and abs(v) > factor * abs(truth):
            counts["exploded"] += 1
        else:
            inc.append(v)
    arr = np.array(inc, dtype=float)
    s = {
        "truth": truth,
        "n_included": int(arr.size),
        "n_excluded": R - int(arr.size),
        "excluded": counts,
        "mean": float(arr.sum() / arr.size) if arr.size else None,
        "sd": float(arr.std(ddof=1)) if arr.size > 1 else None,
        "median": float(np.median(arr)) if arr.size else None,
    }
    return s


def run_study(cfg: StudyConfig, threads: int | None = None, progress=None) -> StudyResult:
    """Run every replicate, in parallel when ``threads`` > 1."""
    start = time.perf_counter()
    world = cfg.world_config()
    threads = threads or cfg.threads or 1
    R = cfg.replicates
    results: dict[int, dict] = {}
    payload = cfg.to_dict()
    payload["world"] = world_to_dict(world)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for r, out in pool.map(_worker, [(payload, r) for r in range(R)], chunksize=max(1, R // (4 * threads))):
                results[r] = out
                if progress:
                    progress(len(results), R)
    else:
        local = StudyConfig.from_dict(payload)
        for r in range(R):
            results[r] = run_replicate(local, r)
            if progress:
                progress(r + 1, R)
    truths = estimand_truths(cfg, world)
    names = _expected_names(cfg, world)
    estimands, values = {}, {}
    for name in names:
        prefix = name.split(".")[0]
        vals, sts = [], []
        for r in range(R):
            out = results[r]
            if name in out:
                v, st = out[name]
            elif prefix + ".*" in out:
                v, st = out[prefix + ".*"]
            else:
                v, st = None, "failed"
            vals.append(v)
            sts.append(st)
        estimands[name] = summarize(vals, sts, truths.get(name), cfg.exclusion_factor)
        values[name] = vals
    comparisons = compare(estimands, cfg.targets) if cfg.targets else []
    return StudyResult(cfg.name, R, estimands, values, comparisons, cfg.to_dict(), time.perf_counter() - start)


def compare(result, targets: list) -> list[dict]:
    """Check summaries against target rows.

    Each target row names an ``estimand`` and any of: ``mean`` with
    ``mean_tol`` (absolute), ``sd`` with ``sd_rel_tol`` (relative), ``lower``
    / ``upper`` bounds on the statistic, and ``statistic`` ("mean" or
    "median", default "mean").  Rows without tolerances are reported with
    ``pass`` = None.
    """
    estimands = result.estimands if isinstance(result, StudyResult) else result
    rows = []
    for t in targets:
        name = t.get("estimand")
        if name not in estimands:
            raise DataError(f"target estimand {name!r} is not in the result")
        s = estimands[name]
        stat = t.get("statistic", "mean")
        value = s.get(stat)
        row = {"estimand": name, "statistic": stat, "value": value, "label": t.get("label", "")}
        checks = []
        if "mean" in t:
            row["target"] = t["mean"]
            row["delta"] = None if value is None else value - t["mean"]
            if t.get("mean_tol") is not None:
                ok = value is not None and abs(value - t["mean"]) <= t["mean_tol"] + 1e-12
                row["mean_tol"] = t["mean_tol"]
                row["mean_pass"] = ok
                checks.append(ok)
        for bound, op in (("lower", lambda v, b: v >= b), ("upper", lambda v, b: v <= b)):
            if bound in t:
                ok = value is not None and op(value, t[bound])
                row[bound] = t[bound]
                row[f"{bound}_pass"] = ok
                checks.append(ok)
        if "sd" in t:
            sd = s.get("sd")
            row["target_sd"] = t["sd"]
            row["sd"] = sd
            row["sd_ratio"] = None if sd is None else sd / t["sd"]
            if t.get("sd_rel_tol") is not None:
                ok = sd is not None and abs(sd / t["sd"] - 1) <= t["sd_rel_tol"] + 1e-12
                row["sd_rel_tol"] = t["sd_rel_tol"]
                row["sd_pass"] = ok
                checks.append(ok)
        row["pass"] = all(checks) if checks else None
        rows.append(row)
    return rows


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def format_table(result: StudyResult) -> str:
    """Plain-text summary: one line per estimand, then the comparison rows."""
    lines = [f"{'estimand':<22}{'truth':>9}{'mean':>9}{'sd':>8}{'median':>9}{'excl':>6}"]
    fmt = lambda v, w: f"{v:>{w}.3f}" if isinstance(v, (int, float)) and not math.isnan(v) else f"{'-':>{w}}"  # noqa: E731
    for name, s in result.estimands.items():
        lines.append(
            f"{name:<22}{fmt(s['truth'], 9)}{fmt(s['mean'], 9)}{fmt(s['sd'], 8)}{fmt(s['median'], 9)}{s['n_excluded']:>6}"
        )
    for row in result.comparisons:
        verdict = {True: "PASS", False: "FAIL", None: "info"}[row["pass"]]
        lines.append(f"{verdict:<5} {row['estimand']} {row.get('label', '')}".rstrip())
    return "\n".join(lines)
