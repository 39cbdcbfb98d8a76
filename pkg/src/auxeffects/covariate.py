"""Estimators that condition only on baseline covariates.

Conventional regression, principal-score (expected-auxiliary) stratification,
threshold subgroups and two-score cell tables.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core_stats import LinearFit, LogisticFit, logistic_fit, ols
from .data import Dataset
from .errors import DataError, RankDeficientError

WEAK_SCORE_RANGE = 0.01

EXTRAPOLATION_WARNING = (
    "effect_at(1) extrapolates the fitted line beyond the observed score range "
    "[{lo:.3f}, {hi:.3f}]; it is not the effect among units certain to have s = 1"
)
GENERATED_REGRESSOR_NOTE = "score is estimated; small-sample plug-in bias of the generated regressor is not corrected"


class ExtrapolationWarning(UserWarning):
    pass


def _check_arms(d: Dataset):
    if d.n_treated == 0 or d.n_treated == d.n:
        raise DataError("both arms must be present")


# --- conventional -----------------------------------------------------------------


@dataclass
class ConventionalFit:
    fit: LinearFit
    effect: float
    se: float
    interaction: bool


def conventional_fit(d: Dataset, interaction: bool = False, robust: bool = True) -> ConventionalFit:
    """OLS of y on {1, x, a} (plus x*a with ``interaction``).

    Without interaction the effect is the coefficient on a.  With interaction
    covariates are centred first, so the a coefficient is the average effect.
    """
    _check_arms(d)
    x = d.x
    if interaction:
        x = x - x.mean(axis=0)
    a = d.a.astype(float)
    cols = [np.ones(d.n), *x.T, a]
    names = ["const", *d.x_names, "a"]
    if interaction:
        cols += list((x * a[:, None]).T)
        names += [f"{nm}:a" for nm in d.x_names]
    fit = ols(np.column_stack(cols), d.y, names=names)
    j = names.index("a")
    return ConventionalFit(fit, float(fit.coef[j]), float(fit.se(robust)[j]), interaction)


# --- principal scores -------------------------------------------------------------


@dataclass
class PrincipalScoreModel:
    """Logistic model for pr(s = 1 | x, a) evaluated for arm ``arm``.

    ``pooled`` models fit both arms together with arm-by-covariate
    interactions; otherwise only arm ``arm`` units are used.
    """

    arm: int
    fit: LogisticFit
    pooled: bool = False
    score_range: tuple[float, float] = (0.0, 1.0)

    def score(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        ones = np.ones((x.shape[0], 1))
        if self.pooled:
            a = np.full((x.shape[0], 1), float(self.arm))
            design = np.hstack([ones, x, a, x * a])
        else:
            design = np.hstack([ones, x])
        return self.fit.predict(design)

    __call__ = score

    @property
    def weak(self) -> bool:
        """Fitted scores span less than 0.01 over the data."""
        return self.score_range[1] - self.score_range[0] < WEAK_SCORE_RANGE


def fit_principal_score(d: Dataset, arm: int, pooled: bool = False) -> PrincipalScoreModel:
    """Logistic regression of s on x among arm-``arm`` units (or pooled with interactions)."""
    if arm not in (0, 1):
        raise DataError(f"arm must be 0 or 1, got {arm}")
    if pooled:
        _check_arms(d)
        a = d.a.astype(float)[:, None]
        design = np.hstack([np.ones((d.n, 1)), d.x, a, d.x * a])
        names = ["const", *d.x_names, "a", *(f"{nm}:a" for nm in d.x_names)]
        fit = logistic_fit(design, d.s, names=names)
    else:
        sub = d.a == arm
        if not sub.any():
            raise DataError(f"no units in arm {arm}")
        design = np.hstack([np.ones((int(sub.sum()), 1)), d.x[sub]])
        fit = logistic_fit(design, d.s[sub], names=["const", *d.x_names])
    model = PrincipalScoreModel(arm, fit, pooled)
    sc = model.score(d.x)
    model.score_range = (float(sc.min()), float(sc.max()))
    return model


def _score_values(score, d: Dataset) -> np.ndarray:
    """Per-unit score from a fitted model, a callable of x, or a ready vector."""
    if isinstance(score, PrincipalScoreModel) or callable(score):
        return np.asarray(score(d.x), dtype=float).ravel()
    v = np.asarray(score, dtype=float).ravel()
    if v.size != d.n:
        raise DataError("score vector length differs from dataset size")
    return v


# --- expected-auxiliary stratification --------------------------------------------


@dataclass
class EasFit:
    """OLS of y on {1, m, a, m*a} with m a principal score."""

    beta0: float
    beta_mu: float
    beta_a: float
    beta_mua: float
    cov: np.ndarray
    score_mode: str
    score_range: tuple[float, float]
    fit: LinearFit
    scores: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def effect_at(self, m) -> np.ndarray | float:
        return self.beta_a + np.asarray(m) * self.beta_mua

    def effect_se(self, m) -> float:
        g = np.array([0.0, 0.0, 1.0, float(m)])
        return float(np.sqrt(g @ self.cov @ g))

    @property
    def extrapolated(self) -> float:
        """effect_at(1) = beta_a + beta_mua."""
        return float(self.beta_a + self.beta_mua)


def eas_fit(d: Dataset, score=None, mode="received", pooled: bool = False, robust: bool = True) -> EasFit:
    """Expected-auxiliary stratification regression.

    Parameters
    ----------
    score
        ``None`` fits the needed score models; a ``PrincipalScoreModel`` or a
        callable of x supplies a single score used for every unit; a dict
        ``{0: ..., 1: ...}`` supplies one score per arm.
    mode
        "received": each unit gets the score for the arm it was assigned;
        0 or 1: every unit gets that arm's score.  Ignored when ``score`` is a
        single model or callable.
    """
    _check_arms(d)
    fitted = {}
    if score is None:
        arms = (0, 1) if mode == "received" else (int(mode),)
        score = {a: fit_principal_score(d, a, pooled=pooled) for a in arms}
        fitted = dict(score)
        if mode != "received":
            score = score[int(mode)]
    if isinstance(score, dict):
        if mode == "received":
            m = np.where(d.a == 1, _score_values(score[1], d), _score_values(score[0], d))
            label = "received"
        else:
            m = _score_values(score[int(mode)], d)
            label = f"arm {int(mode)}"
    else:
        m = _score_values(score, d)
        label = f"arm {score.arm}" if isinstance(score, PrincipalScoreModel) else "supplied"
    if np.ptp(m) == 0:
        raise RankDeficientError("score is constant; regression on the score is not identified", ["mu"])
    a = d.a.astype(float)
    design = np.column_stack([np.ones(d.n), m, a, m * a])
    fit = ols(design, d.y, names=["const", "mu", "a", "mu:a"])
    lo, hi = float(m.min()), float(m.max())
    notes = [EXTRAPOLATION_WARNING.format(lo=lo, hi=hi)]
    supplied = score.values() if isinstance(score, dict) else [score]
    if any(isinstance(v, PrincipalScoreModel) for v in supplied):
        notes.append(GENERATED_REGRESSOR_NOTE)
    warnings.warn(notes[0], ExtrapolationWarning, stacklevel=2)
    b = fit.coef
    return EasFit(
        float(b[0]),
        float(b[1]),
        float(b[2]),
        float(b[3]),
        fit.cov_robust if robust else fit.cov,
        label,
        (lo, hi),
        fit,
        fitted,
        notes,
    )


@dataclass
class SubgroupEffect:
    effect: float
    se: float
    n: int
    n_treated: int


def effect_above_threshold(d: Dataset, score, c: float, adjust: bool = False) -> SubgroupEffect:
    """Arm contrast among units whose score exceeds ``c``.

    ``score`` is a fitted model, a callable of x or a per-unit vector.  With
    ``adjust`` the contrast is the a coefficient of an OLS on {1, x, a}
    within the subgroup; otherwise it is the difference of arm means.
    """
    m = _score_values(score, d)
    sel = m > c
    if not sel.any():
        raise DataError(f"empty subgroup: no unit has score above {c}")
    sub = d.take(np.flatnonzero(sel))
    n1 = sub.n_treated
    if n1 == 0 or n1 == sub.n:
        raise DataError(f"subgroup above {c} lacks one of the arms")
    if adjust:
        cf = conventional_fit(sub)
        return SubgroupEffect(cf.effect, cf.se, sub.n, n1)
    y1, y0 = sub.y[sub.a == 1], sub.y[sub.a == 0]
    se = np.sqrt((y1.var(ddof=1) / y1.size if y1.size > 1 else np.nan) + (y0.var(ddof=1) / y0.size if y0.size > 1 else np.nan))
    return SubgroupEffect(float(y1.mean() - y0.mean()), float(se), sub.n, n1)


def joint_score_effects(d: Dataset, score0, score1, bins=4) -> list[dict]:
    """Arm contrasts in cells formed by binning both principal scores.

    ``bins`` is a number of equal-width bins on [0, 1] or an explicit edge
    array.  Every cell is reported; those lacking an arm have ``effect``
    ``None``.
    """
    edges = np.linspace(0, 1, int(bins) + 1) if np.isscalar(bins) else np.asarray(bins, dtype=float)
    m0 = _score_values(score0, d)
    m1 = _score_values(score1, d)
    nb = len(edges) - 1
    b0 = np.clip(np.searchsorted(edges, m0, side="right") - 1, 0, nb - 1)
    b1 = np.clip(np.searchsorted(edges, m1, side="right") - 1, 0, nb - 1)
    cells = []
    for i in range(nb):
        for j in range(nb):
            sel = (b0 == i) & (b1 == j)
            t = sel & (d.a == 1)
            u = sel & (d.a == 0)
            eff = float(d.y[t].mean() - d.y[u].mean()) if t.any() and u.any() else None
            cells.append(
                {
                    "mu0_bin": (float(edges[i]), float(edges[i + 1])),
                    "mu1_bin": (float(edges[j]), float(edges[j + 1])),
                    "n": int(sel.sum()),
                    "n_treated": int(t.sum()),
                    "effect": eff,
                }
            )
    return cells


__all__ = [
    "ConventionalFit",
    "EasFit",
    "ExtrapolationWarning",
    "PrincipalScoreModel",
    "SubgroupEffect",
    "conventional_fit",
    "eas_fit",
    "effect_above_threshold",
    "fit_principal_score",
    "joint_score_effects",
]
