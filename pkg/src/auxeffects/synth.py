"""Seeded generators for the study populations and masking of potential
outcomes down to what a randomized trial observes.

Potential outcomes are drawn in the order covariates/strata -> potential
auxiliaries -> potential outcomes -> treatment, so assignment is independent
of everything drawn before it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import expit

from .core_stats import gamma_with_moments
from .data import STRATA, CompleteDataset, Dataset, Event, SurvivalDataset
from .errors import DataError

LABELS = tuple(k.value for k in STRATA)  # ("I", "TP", "TH", "D")
S0 = np.array([0, 1, 0, 1])
S1 = np.array([0, 0, 1, 1])


def _stratum_vector(mapping, what, default=None) -> np.ndarray:
    unknown = set(mapping) - set(LABELS)
    if unknown:
        raise DataError(f"unknown strata in {what}: {sorted(unknown)}")
    out = []
    for k in LABELS:
        if k in mapping:
            out.append(float(mapping[k]))
        elif default is not None:
            out.append(float(default))
        else:
            raise DataError(f"{what} is missing stratum {k}")
    return np.array(out)


def _check_prob(v, what):
    if np.any((v < 0) | (v > 1)) or not np.all(np.isfinite(v)):
        raise DataError(f"{what} must lie in [0, 1]")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# --- binary world -----------------------------------------------------------------


@dataclass
class BinaryWorldConfig:
    """Binary outcome population with a sharp null effect.

    ``stratum_counts`` are relative population weights; ``mi_prob`` is the
    outcome risk in each stratum, shared by both arms.
    """

    stratum_counts: dict = field(default_factory=lambda: {"I": 500, "TP": 300, "TH": 0, "D": 200})
    mi_prob: dict = field(default_factory=lambda: {"I": 0.1, "TP": 0.2, "TH": 0.0, "D": 0.3})
    n: int = 1000
    p_treat: float = 0.5
    px1_given_stratum: dict | None = None
    kind: str = field(default="binary", init=False)

    def __post_init__(self):
        w = _stratum_vector(self.stratum_counts, "stratum_counts", default=0)
        if np.any(w < 0) or w.sum() <= 0:
            raise DataError("stratum weights must be nonnegative with a positive total")
        _check_prob(_stratum_vector(self.mi_prob, "mi_prob", default=0), "mi_prob")
        _check_prob(np.array([self.p_treat]), "p_treat")
        if self.px1_given_stratum is not None:
            _check_prob(_stratum_vector(self.px1_given_stratum, "px1_given_stratum"), "px1_given_stratum")
        if self.n < 1:
            raise DataError("n must be positive")

    @property
    def weights(self) -> np.ndarray:
        w = _stratum_vector(self.stratum_counts, "stratum_counts", default=0)
        return w / w.sum()

    @property
    def risk(self) -> np.ndarray:
        return _stratum_vector(self.mi_prob, "mi_prob", default=0)

    @property
    def monotone(self) -> bool:
        return self.weights[2] == 0


def gen_binary_world(cfg: BinaryWorldConfig, seed) -> CompleteDataset:
    """Sample the binary world.  y0 = y1 for every unit (one draw per unit)."""
    rng = _rng(seed)
    k = rng.choice(4, size=cfg.n, p=cfg.weights)
    if cfg.px1_given_stratum is not None:
        px = _stratum_vector(cfg.px1_given_stratum, "px1_given_stratum")
        x = (rng.random(cfg.n) < px[k]).astype(float)[:, None]
        names = ("x1",)
    else:
        x = np.empty((cfg.n, 0))
        names = ()
    y = (rng.random(cfg.n) < cfg.risk[k]).astype(float)
    return CompleteDataset(x, S0[k], S1[k], y, y.copy(), names)


# --- continuous (two-arm normal / gamma) world ------------------------------------

SETTING_MEANS = {
    "I": {1: {"I": 2, "TP": 2.5, "TH": 1.25, "D": 1.75}, 0: {"I": 1, "TP": 1.5, "TH": 0.75, "D": 1.25}},
    "II": {1: {"I": 2, "TP": 2.5, "TH": 1.25, "D": 2.25}, 0: {"I": 1, "TP": 1.0, "TH": 0.75, "D": 1.25}},
}


@dataclass
class ContinuousWorldConfig:
    """Continuous outcome population with a binary covariate.

    ``means_at_x0[a][k]`` is E(Y^a | x=0, stratum k); ``x_shift`` is added when
    x = 1.  Errors have mean 0 and standard deviation ``sd`` within every
    (a, x, stratum) cell.  ``cross_world_corr`` correlates the two potential
    errors of a unit (0 = independent).
    """

    means_at_x0: dict = field(default_factory=lambda: {a: dict(m) for a, m in SETTING_MEANS["I"].items()})
    x_shift: float = 0.5
    sd: float = 1.0
    stratum_probs: dict = field(default_factory=lambda: {"I": 0.25, "TP": 0.4, "TH": 0.05, "D": 0.3})
    px1_given_stratum: dict = field(default_factory=lambda: {"I": 0.5, "TP": 0.75, "TH": 0.25, "D": 0.5})
    error_family: str = "normal"
    n: int = 5000
    p_treat: float = 0.5
    cross_world_corr: float = 0.0
    name: str = ""
    kind: str = field(default="continuous", init=False)

    def __post_init__(self):
        self.means_at_x0 = {int(a): dict(m) for a, m in self.means_at_x0.items()}
        if set(self.means_at_x0) != {0, 1}:
            raise DataError("means_at_x0 needs entries for arms 0 and 1")
        probs = _stratum_vector(self.stratum_probs, "stratum_probs")
        _check_prob(probs, "stratum_probs")
        if abs(probs.sum() - 1) > 1e-9:
            raise DataError(f"stratum_probs sum to {probs.sum()}, not 1")
        _check_prob(_stratum_vector(self.px1_given_stratum, "px1_given_stratum"), "px1_given_stratum")
        if not self.sd > 0:
            raise DataError("sd must be positive")
        self.error_family = self.error_family.lower()
        if self.error_family not in ("normal", "gamma"):
            raise DataError(f"unknown error family {self.error_family!r}")
        if not -1 <= self.cross_world_corr <= 1:
            raise DataError("cross_world_corr must lie in [-1, 1]")
        if self.error_family == "gamma":
            m = self.means
            lowest = min(m.min(), (m + self.x_shift).min())
            if lowest <= 0:
                raise DataError("gamma errors need every implied mean to be positive")
        if self.n < 1:
            raise DataError("n must be positive")

    @classmethod
    def setting(cls, setting: str, **overrides) -> "ContinuousWorldConfig":
        """One of the four simulation settings: "1a", "1b", "2a", "2b" (or "I(A)" etc.)."""
        key = setting.upper().replace("(", "").replace(")", "").replace(" ", "")
        roman = {"1A": "IA", "1B": "IB", "2A": "IIA", "2B": "IIB"}.get(key, key)
        if roman not in ("IA", "IB", "IIA", "IIB"):
            raise DataError(f"unknown setting {setting!r}")
        family = "normal" if roman.endswith("A") else "gamma"
        means = SETTING_MEANS[roman[:-1]]
        kw = dict(
            means_at_x0={a: dict(m) for a, m in means.items()},
            error_family=family,
            name=f"{roman[:-1]}({roman[-1]})",
        )
        kw.update(overrides)
        return cls(**kw)

    @property
    def means(self) -> np.ndarray:
        """(2, 4) array of cell means at x = 0, indexed [a, stratum]."""
        return np.vstack([_stratum_vector(self.means_at_x0[a], f"means_at_x0[{a}]") for a in (0, 1)])

    @property
    def probs(self) -> np.ndarray:
        return _stratum_vector(self.stratum_probs, "stratum_probs")

    @property
    def px1(self) -> np.ndarray:
        return _stratum_vector(self.px1_given_stratum, "px1_given_stratum")


def gen_continuous_world(cfg: ContinuousWorldConfig, seed) -> CompleteDataset:
    rng = _rng(seed)
    n = cfg.n
    k = rng.choice(4, size=n, p=cfg.probs)
    x = (rng.random(n) < cfg.px1[k]).astype(float)
    m = cfg.means
    mean0 = m[0, k] + cfg.x_shift * x
    mean1 = m[1, k] + cfg.x_shift * x
    rho = cfg.cross_world_corr
    if cfg.error_family == "normal":
        z0 = rng.standard_normal(n)
        z1 = rng.standard_normal(n)
        if rho:
            z1 = rho * z0 + math.sqrt(1 - rho * rho) * z1
        y0 = mean0 + cfg.sd * z0
        y1 = mean1 + cfg.sd * z1
    elif rho == 0:
        y0 = gamma_with_moments(rng, mean0, cfg.sd)
        y1 = gamma_with_moments(rng, mean1, cfg.sd)
    else:
        # Gaussian copula keeps the gamma margins exact
        z0 = rng.standard_normal(n)
        z1 = rho * z0 + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
        y0 = stats.gamma.ppf(stats.norm.cdf(z0), a=(mean0 / cfg.sd) ** 2, scale=cfg.sd**2 / mean0)
        y1 = stats.gamma.ppf(stats.norm.cdf(z1), a=(mean1 / cfg.sd) ** 2, scale=cfg.sd**2 / mean1)
    return CompleteDataset(x[:, None], S0[k], S1[k], y0, y1, ("x1",))


# --- mechanistic (joint effect of treatment and auxiliary) world ------------------


@dataclass
class MechanisticWorldConfig:
    """Outcome generated as Y^{a,s} = Y^{0,0} + a g1 + s g2 + a s g3.

    Strata are monotone (no treatment-harmful units).  Each covariate is binary
    with stratum-specific probability ``px_given_stratum[j][k]``; Y^{0,0} =
    ``intercept`` + ``beta_x`` . x + N(0, sd^2).
    """

    gamma: tuple = (1.0, 2.0, 0.0)
    intercept: float = 0.0
    beta_x: tuple = (0.5, -0.5)
    sd: float = 1.0
    stratum_probs: dict = field(default_factory=lambda: {"I": 0.45, "TP": 0.15, "TH": 0.0, "D": 0.4})
    px_given_stratum: list = field(
        default_factory=lambda: [
            {"I": 0.2, "TP": 0.7, "TH": 0.5, "D": 0.5},
            {"I": 0.6, "TP": 0.3, "TH": 0.5, "D": 0.8},
        ]
    )
    n: int = 100_000
    p_treat: float = 0.5
    kind: str = field(default="mechanistic", init=False)

    def __post_init__(self):
        self.gamma = tuple(float(g) for g in self.gamma)
        self.beta_x = tuple(float(b) for b in self.beta_x)
        if len(self.gamma) != 3:
            raise DataError("gamma needs three components")
        probs = self.probs
        _check_prob(probs, "stratum_probs")
        if abs(probs.sum() - 1) > 1e-9:
            raise DataError("stratum_probs must sum to 1")
        if probs[2] != 0:
            raise DataError("mechanistic world requires monotone strata (TH probability 0)")
        if len(self.px_given_stratum) != len(self.beta_x):
            raise DataError("one px_given_stratum map per covariate coefficient")
        for j, px in enumerate(self.px_given_stratum):
            _check_prob(_stratum_vector(px, f"px_given_stratum[{j}]", default=0.5), "px_given_stratum")
        if not self.sd > 0:
            raise DataError("sd must be positive")

    @property
    def probs(self) -> np.ndarray:
        return _stratum_vector(self.stratum_probs, "stratum_probs", default=0)

    @property
    def q(self) -> float:
        """pr(s0 = 1 | s1 = 0): share of treatment-protective units among those with s1 = 0."""
        p = self.probs
        return float(p[1] / (p[0] + p[1]))


def gen_mechanistic_world(cfg: MechanisticWorldConfig, seed) -> CompleteDataset:
    rng = _rng(seed)
    n = cfg.n
    k = rng.choice(4, size=n, p=cfg.probs)
    cols = []
    for px in cfg.px_given_stratum:
        p = _stratum_vector(px, "px_given_stratum", default=0.5)
        cols.append((rng.random(n) < p[k]).astype(float))
    x = np.column_stack(cols) if cols else np.empty((n, 0))
    y00 = cfg.intercept + x @ np.asarray(cfg.beta_x) + cfg.sd * rng.standard_normal(n)
    g1, g2, g3 = cfg.gamma
    s0, s1 = S0[k], S1[k]
    y0 = y00 + s0 * g2
    y1 = y00 + g1 + s1 * g2 + s1 * g3
    names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
    return CompleteDataset(x, s0, s1, y0, y1, names)


# --- screening (censored failure time) world -------------------------------------


@dataclass
class ScreeningWorldConfig:
    """Screening trial with breast-cancer-style mortality and competing deaths.

    Assigned units accept screening with ``screen_prob``; a unit has the
    disease with probability expit(cancer_intercept + cancer_slope * x).  The
    auxiliary ``s`` is "screened and diagnosed", so pr(s=1 | a=1, x) =
    screen_prob * expit(...) and s = 0 whenever a = 0.  Disease-free units never
    have a main event.  Diseased units have log T0 = logtime_intercept +
    logtime_slope * x + logtime_sd * N(0, 1), and T = T0 * exp(psi_true * a * s).
    Competing deaths are exponential with rate ``competing_rate``; follow-up
    ends administratively at ``horizon``.
    """

    psi_true: float = -0.5
    n: int = 20_000
    p_treat: float = 0.5
    horizon: float = 10.0
    screen_prob: float = 0.7
    cancer_intercept: float = -1.5
    cancer_slope: float = 0.5
    logtime_intercept: float = 1.8
    logtime_slope: float = -0.3
    logtime_sd: float = 0.8
    competing_rate: float = 0.02
    kind: str = field(default="screening", init=False)

    def __post_init__(self):
        _check_prob(np.array([self.p_treat, self.screen_prob]), "probabilities")
        if not (self.horizon > 0 and self.logtime_sd > 0 and self.competing_rate >= 0):
            raise DataError("horizon and logtime_sd must be positive, competing_rate nonnegative")
        if self.n < 1:
            raise DataError("n must be positive")


def gen_screening_world(cfg: ScreeningWorldConfig, seed) -> tuple[SurvivalDataset, dict]:
    """Sample the screening world; returns the observed data and a truth record.

    Besides ``s`` the dataset carries ``s_screen`` (screened at all), which
    differs from ``s`` only for screened units without disease.
    """
    rng = _rng(seed)
    n = cfg.n
    x = rng.standard_normal(n)
    a = (rng.random(n) < cfg.p_treat).astype(int)
    accepts = rng.random(n) < cfg.screen_prob
    diseased = rng.random(n) < expit(cfg.cancer_intercept + cfg.cancer_slope * x)
    s_screen = a * accepts
    s = s_screen * diseased
    log_t0 = cfg.logtime_intercept + cfg.logtime_slope * x + cfg.logtime_sd * rng.standard_normal(n)
    t_main = np.where(diseased, np.exp(log_t0 + cfg.psi_true * a * s), np.inf)
    if cfg.competing_rate > 0:
        t_comp = rng.exponential(1 / cfg.competing_rate, size=n)
    else:
        t_comp = np.full(n, np.inf)
    c = np.full(n, float(cfg.horizon))
    event = np.full(n, int(Event.ADMIN))
    time = c.copy()
    main = (t_main < c) & (t_main <= t_comp)
    comp = (t_comp < c) & (t_comp < t_main)
    event[main] = Event.MAIN
    time[main] = t_main[main]
    event[comp] = Event.COMPETING
    time[comp] = t_comp[comp]
    sd = SurvivalDataset(x[:, None], a, s, time, event, c, ("x1",), {"s_screen": s_screen})
    truth = {
        "kind": "screening",
        "psi_true": cfg.psi_true,
        "n": n,
        "main_events": int(main.sum()),
        "competing_events": int(comp.sum()),
        "diagnosed_treated": int(s.sum()),
    }
    return sd, truth


# --- masking ----------------------------------------------------------------------


def mask(complete: CompleteDataset, p_treat: float, seed) -> Dataset:
    """Randomize treatment and reveal the potential outcomes of the assigned arm."""
    if not 0 <= p_treat <= 1:
        raise DataError("p_treat must lie in [0, 1]")
    rng = _rng(seed)
    a = (rng.random(complete.n) < p_treat).astype(int)
    s = np.where(a == 1, complete.s1, complete.s0)
    y = np.where(a == 1, complete.y1, complete.y0)
    return Dataset(complete.x, a, s, y, complete.x_names)


# --- config (de)serialisation -----------------------------------------------------

WORLD_TYPES = {
    "binary": BinaryWorldConfig,
    "continuous": ContinuousWorldConfig,
    "mechanistic": MechanisticWorldConfig,
    "screening": ScreeningWorldConfig,
}


def world_to_dict(cfg) -> dict:
    d = asdict(cfg)
    if "means_at_x0" in d:
        d["means_at_x0"] = {str(a): m for a, m in d["means_at_x0"].items()}
    for key in ("gamma", "beta_x"):
        if key in d:
            d[key] = list(d[key])
    return d


def world_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in WORLD_TYPES:
        raise DataError(f"unknown world kind {kind!r}; expected one of {sorted(WORLD_TYPES)}")
    try:
        return WORLD_TYPES[kind](**d)
    except TypeError as exc:
        raise DataError(f"invalid {kind} world config: {exc}") from None


def bundled_path(name: str) -> Path:
    """Path of a config shipped in the package's ``studies`` directory."""
    return Path(str(resources.files("auxeffects") / "studies" / name))


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    b = bundled_path(p.name)
    if b.exists():
        return b
    raise DataError(f"no such config file: {path}")


def load_world(path):
    with open(resolve_config_path(path), encoding="utf-8") as fh:
        try:
            return world_from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON in {path}: {exc}") from None


def generate(cfg, seed):
    """Dispatch on world kind.  Returns a CompleteDataset, or (SurvivalDataset, truth)."""
    if isinstance(cfg, BinaryWorldConfig):
        return gen_binary_world(cfg, seed)
    if isinstance(cfg, ContinuousWorldConfig):
        return gen_continuous_world(cfg, seed)
    if isinstance(cfg, MechanisticWorldConfig):
        return gen_mechanistic_world(cfg, seed)
    if isinstance(cfg, ScreeningWorldConfig):
        return gen_screening_world(cfg, seed)
    raise TypeError(f"not a world config: {type(cfg).__name__}")
