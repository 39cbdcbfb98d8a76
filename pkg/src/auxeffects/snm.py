"""Structural nested mean models fitted by G-estimation.

Two models share one solver:

* observed-auxiliary model, E(Y - Y^0 | a=1, s, x) = (1 - s) psi0 + s psi1;
* mediation model, Y^{a,s} = Y^{0,0} + a g1 + s g2 + a s g3.

The blipped-down outcome is affine in the parameters and the residual
eps(psi) comes from a linear outcome regression on {1, x}, so the estimating
equations sum_i (a_i - p) h(x_i) eps_i(psi) = 0 form a linear system that is
solved exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from .core_stats import bootstrap, residualize, sandwich_variance
from .covariate import fit_principal_score
from .data import Dataset
from .errors import DataError, EstimationError, InestimableError, RankDeficientError

OBSERVED_AUX = "observed_aux"
MEDIATION = "mediation"
PARAMS = {OBSERVED_AUX: ("psi0", "psi1"), MEDIATION: ("gamma1", "gamma2", "gamma3")}
BANK_RANK_TOL = 1e-8


@dataclass
class SnmSpec:
    """What to estimate and how.

    ``fixed`` pins parameters to known values (e.g. ``{"psi0": 0.0}``);
    ``p_treat`` is a known randomization probability or "estimate" (sample
    mean of a); ``outcome_covariates`` names the x columns used to form
    eps(psi) (``None`` means all); ``g`` is "optimal" or "constant" (h = 1).
    ``q`` = pr(s0 = 1 | s1 = 0), when known, lets mediation fits report
    implied realized effects.
    """

    model: str = OBSERVED_AUX
    fixed: dict = field(default_factory=dict)
    p_treat: float | str = "estimate"
    outcome_covariates: list | None = None
    g: str = "optimal"
    variance: str = "sandwich"
    bootstrap_reps: int = 200
    seed: int = 0
    q: float | None = None
    pooled_score: bool = False

    def __post_init__(self):
        if self.model not in PARAMS:
            raise DataError(f"unknown model {self.model!r}; expected one of {sorted(PARAMS)}")
        unknown = set(self.fixed) - set(PARAMS[self.model])
        if unknown:
            raise DataError(f"unknown parameters for {self.model}: {sorted(unknown)}")
        self.fixed = {k: float(v) for k, v in self.fixed.items()}
        if not self.free:
            raise DataError("every parameter is fixed; nothing to estimate")
        if self.p_treat != "estimate":
            p = float(self.p_treat)
            if not 0 < p < 1:
                raise DataError("p_treat must lie strictly between 0 and 1")
            self.p_treat = p
        if self.g not in ("optimal", "constant"):
            raise DataError(f"unknown g-function {self.g!r}")
        if self.variance not in ("sandwich", "bootstrap", "none"):
            raise DataError(f"unknown variance method {self.variance!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return PARAMS[self.model]

    @property
    def free(self) -> tuple[str, ...]:
        return tuple(k for k in self.names if k not in self.fixed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SnmSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"invalid SNM spec: {exc}") from None


def blip_columns(d: Dataset, model: str = OBSERVED_AUX) -> np.ndarray:
    """Per-unit derivative of the blip with respect to each model parameter."""
    a = d.a.astype(float)
    s = d.s.astype(float)
    if model == OBSERVED_AUX:
        return np.column_stack([a * (1 - s), a * s])
    if model == MEDIATION:
        return np.column_stack([a, s, a * s])
    raise DataError(f"unknown model {model!r}")


def blip_down(d: Dataset, psi, model: str = OBSERVED_AUX) -> np.ndarray:
    """Y^0(psi): the outcome with the modelled effect removed."""
    if isinstance(psi, dict):
        psi = [psi.get(k, 0.0) for k in PARAMS[model]]
    return d.y - blip_columns(d, model) @ np.asarray(psi, dtype=float)


# --- instruments ------------------------------------------------------------------


@dataclass
class Bank:
    h: np.ndarray
    names: tuple[str, ...]
    scores: dict
    rank: int
    weak_score: bool


def _scores(d: Dataset, spec: SnmSpec, scores) -> dict:
    scores = dict(scores or {})
    if 1 not in scores:
        scores[1] = fit_principal_score(d, 1, pooled=spec.pooled_score)
    if spec.model == MEDIATION and 0 not in scores:
        untreated_s = d.s[d.a == 0]
        if untreated_s.size and untreated_s.max() == 0:
            scores[0] = lambda x: np.zeros(len(x))
        else:
            scores[0] = fit_principal_score(d, 0, pooled=spec.pooled_score)
    return scores


def _score_of(model, x) -> np.ndarray:
    return np.asarray(model(x), dtype=float).ravel()


def g_bank(d: Dataset, spec: SnmSpec, scores=None) -> Bank:
    """Instrument functions h(x), one column per free parameter.

    Optimal choices are E(b_j | x, a=1) - E(b_j | x, a=0) for each blip
    column b_j: {1 - mu1, mu1} for the observed-auxiliary model and
    {1, mu1 - mu0, mu1} for the mediation model.
    """
    free = spec.free
    if spec.model == MEDIATION and {"gamma2", "gamma3"} <= set(free):
        if not np.any((d.a == 0) & (d.s == 1)):
            raise InestimableError(
                "s never occurs without treatment, so gamma2 and gamma3 cannot both be estimated; "
                "fix gamma3 (no treatment-auxiliary interaction) to estimate gamma2"
            )
    if spec.g == "constant":
        h = np.ones((d.n, 1))
        names = ("1",)
        scores = dict(scores or {})
        weak = False
    else:
        scores = _scores(d, spec, scores)
        mu1 = _score_of(scores[1], d.x)
        if spec.model == OBSERVED_AUX:
            cols = {"psi0": 1 - mu1, "psi1": mu1}
            labels = {"psi0": "1-mu1", "psi1": "mu1"}
        else:
            mu0 = _score_of(scores[0], d.x)
            cols = {"gamma1": np.ones(d.n), "gamma2": mu1 - mu0, "gamma3": mu1}
            labels = {"gamma1": "1", "gamma2": "mu1-mu0", "gamma3": "mu1"}
        h = np.column_stack([cols[k] for k in free])
        names = tuple(labels[k] for k in free)
        weak = bool(np.ptp(mu1) < 0.01)
    norms = np.linalg.norm(h, axis=0)
    sv = np.linalg.svd(h / np.where(norms > 0, norms, 1.0), compute_uv=False)
    rank = int(np.sum(sv > BANK_RANK_TOL * sv[0])) if sv.size and sv[0] > 0 else 0
    if rank < len(free):
        if spec.model == OBSERVED_AUX:
            raise RankDeficientError(
                "auxiliary not predicted by covariates: the instrument bank has rank "
                f"{rank} but {len(free)} effects are free (a single effect is still estimable)",
                names,
            )
        raise RankDeficientError(
            "mediation instruments {1, mu1 - mu0, mu1} are collinear; they must not be collinear, "
            f"which usually needs at least two covariates (rank {rank} for {len(free)} free parameters)",
            names,
        )
    return Bank(h, names, scores, rank, weak)


# --- solving ----------------------------------------------------------------------


@dataclass
class GEstimate:
    names: tuple[str, ...]
    psi: np.ndarray
    cov: np.ndarray | None
    moment_norm: float
    p_hat: float
    n: int
    model: str
    fixed: dict
    bank: Bank
    method: str = "closed-form"
    implied: dict | None = None
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, name):
        if name in self.fixed:
            return self.fixed[name]
        return float(self.psi[self.names.index(name)])

    @property
    def se(self) -> np.ndarray:
        if self.cov is None:
            return np.full(len(self.psi), np.nan)
        return np.sqrt(np.diag(self.cov))

    def full(self) -> dict:
        """Estimates of every model parameter, fixed ones included."""
        return {k: self[k] for k in PARAMS[self.model]}

    def to_dict(self) -> dict:
        out = {
            "model": self.model,
            "estimates": dict(zip(self.names, map(float, self.psi))),
            "fixed": dict(self.fixed),
            "se": dict(zip(self.names, map(float, self.se))),
            "covariance": None if self.cov is None else self.cov.tolist(),
            "moment_norm": self.moment_norm,
            "p_hat": self.p_hat,
            "n": self.n,
            "method": self.method,
            "bank": {"columns": list(self.bank.names), "rank": self.bank.rank, "weak_score": self.bank.weak_score},
            "warnings": list(self.warnings),
        }
        if self.implied is not None:
            out["implied"] = self.implied
        return out


def _outcome_design(d: Dataset, spec: SnmSpec) -> np.ndarray:
    if spec.outcome_covariates is None:
        x = d.x
    else:
        missing = set(spec.outcome_covariates) - set(d.x_names)
        if missing:
            raise DataError(f"unknown outcome covariates: {sorted(missing)}")
        x = d.x[:, [d.x_names.index(k) for k in spec.outcome_covariates]]
    return np.column_stack([np.ones(d.n), x])


@dataclass
class _System:
    D: np.ndarray
    y: np.ndarray
    W: np.ndarray
    Ht: np.ndarray
    A: np.ndarray
    b: np.ndarray
    p: float
    bank: Bank

    def moments(self, theta) -> np.ndarray:
        eps = residualize(self.W, self.y - self.D @ np.atleast_1d(theta))
        return self.Ht * eps[:, None]


def _system(d: Dataset, spec: SnmSpec, scores=None) -> _System:
    if d.n_treated == 0 or d.n_treated == d.n:
        raise DataError("both arms must be present")
    full = blip_columns(d, spec.model)
    names = spec.names
    for j, k in enumerate(names):
        if k not in spec.fixed and not np.any(full[:, j]):
            raise InestimableError(f"{k} is not estimable: no units contribute to its blip")
    free_idx = [names.index(k) for k in spec.free]
    D = full[:, free_idx]
    y = d.y.astype(float).copy()
    for k, v in spec.fixed.items():
        y -= full[:, names.index(k)] * v
    bank = g_bank(d, spec, scores)
    p = float(d.a.mean()) if spec.p_treat == "estimate" else float(spec.p_treat)
    W = _outcome_design(d, spec)
    Ht = (d.a - p)[:, None] * bank.h
    Hr = residualize(W, Ht)
    return _System(D, y, W, Ht, Hr.T @ D, Hr.T @ y, p, bank)


def solve(d: Dataset, spec: SnmSpec | None = None, scores=None) -> GEstimate:
    """Closed-form G-estimate with sandwich (or bootstrap) covariance."""
    spec = spec or SnmSpec()
    sysm = _system(d, spec, scores)
    A, b = sysm.A, sysm.b
    sv = np.linalg.svd(A, compute_uv=False)
    if A.shape[0] != A.shape[1] or sv[-1] <= 1e-12 * sv[0]:
        raise EstimationError("estimating equations are singular")
    psi = np.linalg.solve(A, b)
    resid = np.linalg.norm(A @ psi - b)
    if resid > 1e-8 * (np.linalg.norm(A) * np.linalg.norm(psi) + np.linalg.norm(b)):
        raise EstimationError(f"linear solve left moment residual {resid:.3g}")
    U = sysm.moments(psi)
    n = d.n
    cov = None
    if spec.variance == "sandwich":
        cov = sandwich_variance(sysm.moments, psi, jacobian_fn=lambda _t: -A / n)
    elif spec.variance == "bootstrap":
        quiet = SnmSpec(**{**spec.to_dict(), "variance": "none"})
        res = bootstrap(lambda dd: solve(dd, quiet).psi, d, spec.bootstrap_reps, spec.seed)
        cov = np.atleast_2d(np.cov(res.replicates, rowvar=False))
    warnings = []
    if sysm.bank.weak_score:
        warnings.append("fitted score of the auxiliary varies by less than 0.01 across units")
    if spec.variance == "sandwich":
        warnings.append("sandwich covariance treats the fitted score and outcome regression as known")
    return GEstimate(
        spec.free,
        psi,
        cov,
        float(np.linalg.norm(U.sum(axis=0))),
        sysm.p,
        n,
        spec.model,
        dict(spec.fixed),
        sysm.bank,
        warnings=warnings,
    )


# --- Z profile --------------------------------------------------------------------


@dataclass
class ZProfile:
    grid: np.ndarray
    z: np.ndarray
    root: float
    ci: tuple[float, float]
    open_lower: bool
    open_upper: bool
    alpha: float


def _z_function(sysm: _System):
    def z(psi: float) -> float:
        U = sysm.moments(np.array([psi]))[:, 0]
        den = math.sqrt(float(U @ U))
        if den == 0:
            raise EstimationError("Z statistic has zero variance")
        return float(U.sum()) / den

    return z


def z_stat(d: Dataset, spec: SnmSpec, psi: float, scores=None) -> float:
    """Standardized moment Z(psi) for a spec with one free parameter."""
    if len(spec.free) != 1:
        raise DataError("Z needs exactly one free parameter")
    return _z_function(_system(d, spec, scores))(float(psi))


def z_profile(d: Dataset, spec: SnmSpec, grid, alpha: float = 0.05, scores=None) -> ZProfile:
    """Standardized scalar moment Z(psi) over ``grid`` with root and test-inversion CI."""
    if len(spec.free) != 1:
        raise DataError("a Z profile needs exactly one free parameter")
    grid = np.asarray(sorted(grid), dtype=float)
    sysm = _system(d, spec, scores)
    zf = _z_function(sysm)
    z = np.array([zf(g) for g in grid])
    crossings = np.flatnonzero(np.sign(z[:-1]) * np.sign(z[1:]) <= 0)
    if crossings.size == 0:
        raise EstimationError(
            f"estimate outside grid: Z({grid[0]:g}) = {z[0]:.3f}, Z({grid[-1]:g}) = {z[-1]:.3f}"
        )
    j = crossings[0]
    root = grid[j] if z[j] == 0 else optimize.bisect(zf, grid[j], grid[j + 1], xtol=1e-12)
    zc = stats.norm.ppf(1 - alpha / 2)
    inside = np.flatnonzero(np.abs(z) < zc)
    if inside.size == 0:
        raise EstimationError("no grid point is inside the confidence set")
    lo_i, hi_i = inside[0], inside[-1]
    crit = lambda g: abs(zf(g)) - zc  # noqa: E731
    lo = grid[lo_i] if lo_i == 0 else optimize.bisect(crit, grid[lo_i - 1], grid[lo_i], xtol=1e-10)
    hi = grid[hi_i] if hi_i == len(grid) - 1 else optimize.bisect(crit, grid[hi_i], grid[hi_i + 1], xtol=1e-10)
    return ZProfile(grid, z, float(root), (float(lo), float(hi)), lo_i == 0, hi_i == len(grid) - 1, alpha)


# --- mediation --------------------------------------------------------------------


def solve_mediation(d: Dataset, spec: SnmSpec | None = None, scores=None) -> GEstimate:
    """G-estimate (g1, g2, g3) of the mediation model and the implied realized effects.

    Implied values: Psi0 = g1 - q g2 and Psi1 = g1 + g3 for worlds with
    s1 <= s0, using ``spec.q`` when supplied; when s never occurs without
    treatment every treated unit with s = 1 has s0 = 0, so Psi0 = g1 and
    Psi1 = g1 + g2 + g3.
    """
    spec = spec or SnmSpec(model=MEDIATION)
    if spec.model != MEDIATION:
        spec = SnmSpec(**{**spec.to_dict(), "model": MEDIATION})
    est = solve(d, spec, scores)
    g = est.full()
    free = list(est.names)

    def grad(coefs: dict) -> np.ndarray:
        return np.array([coefs.get(k, 0.0) for k in free])

    def entry(value, gvec):
        se = None
        if est.cov is not None:
            se = float(np.sqrt(gvec @ est.cov @ gvec))
        return {"value": float(value), "se": se}

    implied: dict
    if not np.any((d.a == 0) & (d.s == 1)):
        implied = {
            "psi0": entry(g["gamma1"], grad({"gamma1": 1.0})),
            "psi1": entry(g["gamma1"] + g["gamma2"] + g["gamma3"], grad({"gamma1": 1, "gamma2": 1, "gamma3": 1})),
            "note": "s never occurs without treatment: psi1 = gamma1 + gamma2 + gamma3",
        }
    else:
        implied = {"psi1": entry(g["gamma1"] + g["gamma3"], grad({"gamma1": 1.0, "gamma3": 1.0}))}
        if spec.q is None:
            implied["psi0"] = {"value": None, "expression": "gamma1 - q * gamma2", "q": None}
        else:
            q = float(spec.q)
            implied["psi0"] = entry(g["gamma1"] - q * g["gamma2"], grad({"gamma1": 1.0, "gamma2": -q}))
            implied["psi0"]["q"] = q
        implied["note"] = "identities assume s1 <= s0 for every unit"
    est.implied = implied
    return est


__all__ = [
    "GEstimate",
    "MEDIATION",
    "OBSERVED_AUX",
    "SnmSpec",
    "ZProfile",
    "blip_columns",
    "blip_down",
    "g_bank",
    "solve",
    "solve_mediation",
    "z_profile",
    "z_stat",
]
