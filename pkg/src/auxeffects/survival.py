"""G-estimation for censored failure times with artificial censoring.

Model: T = T0 exp(psi a s) for the main event.  With administrative horizon
c, the blipped-down log time log T - a s psi is observable for every unit only
below log c + min(0, -psi), so Delta(psi) records a main event before that
common threshold.  Randomization makes Delta(psi0) independent of a at the
true psi0, and the standardized statistic

    Z(psi) = sum_i w_i (a_i - p) Delta_i(psi) / sd

is inverted for a point estimate and a confidence set.  w are inverse
probability weights for remaining free of competing events.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core_stats import km_censoring_weights
from .data import Event, SurvivalDataset, SurvivalUnit
from .errors import DataError, EstimationError

IPW_CAVEAT = (
    "competing deaths are handled as independent censoring with Kaplan-Meier inverse probability "
    "weights; this is a standard stand-in and may be inappropriate when competing risks are informative"
)


@dataclass
class SurvivalGSpec:
    """Settings for the survival G-test.

    ``aux`` names the auxiliary column ("s" or one of the ``s_*`` columns);
    ``grid`` is (lo, hi, step) for the reported profile; ``weights`` is "km"
    or "none".
    """

    aux: str = "s"
    p_treat: float | str = "estimate"
    grid: tuple = (-2.0, 2.0, 0.01)
    alpha: float = 0.05
    weights: str = "km"

    def __post_init__(self):
        lo, hi, step = (float(v) for v in self.grid)
        if not lo < hi or step <= 0:
            raise DataError("grid needs lo < hi and a positive step")
        self.grid = (lo, hi, step)
        if not 0 < self.alpha < 0.5:
            raise DataError("alpha must lie in (0, 0.5)")
        if self.p_treat != "estimate":
            p = float(self.p_treat)
            if not 0 < p < 1:
                raise DataError("p_treat must lie strictly between 0 and 1")
            self.p_treat = p
        if self.weights not in ("km", "none"):
            raise DataError(f"unknown weights {self.weights!r}")

    def grid_points(self) -> np.ndarray:
        lo, hi, step = self.grid
        k = int(math.floor((hi - lo) / step + 1e-9))
        return lo + step * np.arange(k + 1)

    @classmethod
    def from_dict(cls, d: dict) -> "SurvivalGSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"invalid survival spec: {exc}") from None


def _delta_arrays(t, event, a, s, c, psi) -> np.ndarray:
    shift = np.asarray(a) * np.asarray(s) * psi
    y = np.where(np.asarray(event) == Event.MAIN, np.log(t) - shift, np.inf)
    return (y < np.log(c) + min(0.0, -psi)).astype(int)


def delta(unit, psi: float, aux: str = "s"):
    """Artificial-censoring event indicator Delta(psi).

    Accepts a ``SurvivalUnit`` (returns 0/1) or a ``SurvivalDataset``
    (returns an integer array, using auxiliary column ``aux``).
    """
    psi = float(psi)
    if isinstance(unit, SurvivalUnit):
        return int(_delta_arrays(unit.t, int(unit.event), unit.a, unit.s, unit.c, psi))
    return _delta_arrays(unit.t, unit.event, unit.a, unit.auxiliary(aux), unit.c, psi)


# --- Z statistic ------------------------------------------------------------------


@dataclass
class _Parts:
    """Per-unit ingredients of Z that do not depend on psi."""

    a: np.ndarray
    s: np.ndarray
    w: np.ndarray
    p: float
    centre: bool


def _parts(sd: SurvivalDataset, spec: SurvivalGSpec, weights=None) -> _Parts:
    if sd.n_treated == 0 or sd.n_treated == sd.n:
        raise DataError("both arms must be present")
    s = sd.auxiliary(spec.aux)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
    elif spec.weights == "km":
        w = km_censoring_weights(sd)
    else:
        w = np.where(sd.event == Event.COMPETING, 0.0, 1.0)
    estimate = spec.p_treat == "estimate"
    p = float(sd.a.mean()) if estimate else float(spec.p_treat)
    return _Parts(sd.a.astype(float), s, w, p, estimate)


def _z_from_sums(num, s_w2d, s_wd, n_wd_sum, n, sum_c2, centre):
    """Z from running sums.

    num = sum c w D; s_w2d = sum c^2 w^2 D; s_wd = sum c^2 w D; n_wd_sum =
    sum w D; sum_c2 = sum c^2, with c = a - p.  With an estimated p the
    summands are centred at mean(w D) in the variance.
    """
    if centre:
        m = n_wd_sum / n
        var = s_w2d - 2 * m * s_wd + m * m * sum_c2
    else:
        var = s_w2d
    var = np.asarray(var, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = num / np.sqrt(np.where(var > 0, var, np.nan))
    return z, var


def z_stat(sd: SurvivalDataset, psi: float, spec: SurvivalGSpec | None = None, weights=None) -> float:
    """Standardized G-test statistic at ``psi``.

    The numerator is sum w (a - p) Delta(psi).  With a known p the variance is
    sum w^2 (a - p)^2 Delta(psi); with p estimated by the sample mean of a the
    summands w Delta are centred at their mean first, which accounts for
    estimating p.
    """
    spec = spec or SurvivalGSpec()
    parts = _parts(sd, spec, weights)
    dl = _delta_arrays(sd.t, sd.event, parts.a, parts.s, sd.c, float(psi))
    c = parts.a - parts.p
    wd = parts.w * dl
    z, var = _z_from_sums(
        float(c @ wd), float(c * c @ (wd * parts.w)), float(c * c @ wd), float(wd.sum()), sd.n, float(c @ c), parts.centre
    )
    if not var > 0:
        raise EstimationError(f"Z statistic undefined at psi = {psi}: no weighted events")
    return float(z)


# --- profile ----------------------------------------------------------------------


@dataclass
class ProfileResult:
    grid: np.ndarray
    z: np.ndarray
    n_effective: np.ndarray
    psi_hat: float
    plateau: tuple[float, float]
    ci: tuple[float, float]
    open_lower: bool
    open_upper: bool
    z_at_zero: float
    alpha: float
    caveats: list[str] = field(default_factory=lambda: [IPW_CAVEAT])

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]

    def to_dict(self) -> dict:
        return {
            "psi_hat": self.psi_hat,
            "plateau": list(self.plateau),
            "ci": list(self.ci),
            "ci_open_lower": self.open_lower,
            "ci_open_upper": self.open_upper,
            "z_at_zero": self.z_at_zero,
            "alpha": self.alpha,
            "caveats": list(self.caveats),
        }


class _StepProfile:
    """Exact piecewise-constant Z(psi) on [lo, hi].

    Delta changes only at log(t/c) for treated units with s = 1 and at
    log(c/t) for the others (main events with t < c); between consecutive
    change points Z is constant.
    """

    def __init__(self, sd: SurvivalDataset, parts: _Parts, lo: float, hi: float):
        main = (sd.event == Event.MAIN) & (sd.t < sd.c)
        shifted = (parts.a * parts.s) == 1
        ratio = np.log(sd.t / sd.c)
        bp = np.where(shifted, ratio, -ratio)
        # treated-with-s units switch on when psi passes bp; the others switch off
        sign = np.where(shifted, 1.0, -1.0)
        use = main & (bp > lo) & (bp < hi)
        order = np.argsort(bp[use], kind="stable")
        idx = np.flatnonzero(use)[order]
        d0 = _delta_arrays(sd.t, sd.event, parts.a, parts.s, sd.c, lo + 0.0)
        # Delta just to the right of lo: units with breakpoint exactly at lo are resolved there
        at_lo = main & (bp == lo)
        d0 = d0.astype(float)
        d0[at_lo & shifted] = 1.0
        d0[at_lo & ~shifted] = 0.0
        c = parts.a - parts.p
        w = parts.w
        n_steps = idx.size
        dsign = np.concatenate([[0.0], sign[idx]])
        ci, wi = c[idx], w[idx]

        def run(base, per_unit):
            return base + np.cumsum(dsign * np.concatenate([[0.0], per_unit]))

        num = run(float(c @ (w * d0)), ci * wi)
        s_w2d = run(float(c * c @ (w * w * d0)), ci * ci * wi * wi)
        s_wd = run(float(c * c @ (w * d0)), ci * ci * wi)
        wd_sum = run(float(w @ d0), wi)
        n_eff = run(float(d0.sum()), np.ones(n_steps))
        z, _ = _z_from_sums(num, s_w2d, s_wd, wd_sum, sd.n, float(c @ c), parts.centre)
        edges = np.concatenate([[lo], bp[idx], [hi]])
        # drop the zero-length pieces left by coincident breakpoints
        keep = edges[:-1] < edges[1:]
        self.left = edges[:-1][keep]
        self.right = edges[1:][keep]
        self.z = z[keep]
        self.n_eff = n_eff[keep]
        self.lo, self.hi = lo, hi

    def at(self, psi) -> tuple[np.ndarray, np.ndarray]:
        j = np.clip(np.searchsorted(self.left, psi, side="right") - 1, 0, len(self.left) - 1)
        return self.z[j], self.n_eff[j]


def profile_and_invert(sd: SurvivalDataset, spec: SurvivalGSpec | None = None, weights=None) -> ProfileResult:
    """Z profile over the grid, point estimate and test-inversion interval.

    The point estimate is the midpoint of the plateau of Z(psi) with the
    smallest |Z| (ties go to the plateau closest to 0).  The interval runs
    from the first to the last plateau with |Z| below the normal critical
    value; ends that reach the grid boundary are flagged open.
    """
    spec = spec or SurvivalGSpec()
    parts = _parts(sd, spec, weights)
    lo, hi, _ = spec.grid
    prof = _StepProfile(sd, parts, lo, hi)
    grid = spec.grid_points()
    z_grid, n_grid = _grid_values(sd, parts, grid)
    finite = np.isfinite(prof.z)
    if not finite.any():
        raise EstimationError("Z statistic is undefined over the whole grid")
    absz = np.where(finite, np.abs(prof.z), np.inf)
    best = np.flatnonzero(absz == absz.min())
    mids = (prof.left + prof.right) / 2
    j = best[np.argmin(np.abs(mids[best]))]
    zc = stats.norm.ppf(1 - spec.alpha / 2)
    ok = np.flatnonzero(absz < zc)
    if ok.size == 0:
        raise EstimationError(
            f"empty confidence set on [{lo}, {hi}]: min |Z| = {absz.min():.3f}; widen the grid or check the model"
        )
    ci = (float(prof.left[ok[0]]), float(prof.right[ok[-1]]))
    if 0.0 >= lo and 0.0 <= hi:
        z0 = z_stat(sd, 0.0, spec, parts.w)
    else:
        z0 = float("nan")
    return ProfileResult(
        grid,
        z_grid,
        n_grid,
        float(mids[j]),
        (float(prof.left[j]), float(prof.right[j])),
        ci,
        ok[0] == 0,
        ok[-1] == len(prof.left) - 1,
        z0,
        spec.alpha,
    )


def _grid_values(sd: SurvivalDataset, parts: _Parts, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = parts.a - parts.p
    zs, ns = [], []
    for g in grid:
        dl = _delta_arrays(sd.t, sd.event, parts.a, parts.s, sd.c, float(g))
        wd = parts.w * dl
        z, _ = _z_from_sums(
            float(c @ wd), float(c * c @ (wd * parts.w)), float(c * c @ wd), float(wd.sum()), sd.n, float(c @ c), parts.centre
        )
        zs.append(float(z))
        ns.append(float(dl.sum()))
    return np.array(zs), np.array(ns)


def auxiliary_invariance_check(
    sd: SurvivalDataset, s_screen: str = "s_screen", s_diag: str = "s", spec: SurvivalGSpec | None = None
) -> tuple[bool, float]:
    """Compare Z profiles under two auxiliary definitions.

    The profiles coincide whenever no unit with s_screen = 1 and s_diag = 0
    has a main event, because Delta then agrees unit by unit.  Returns
    (identical, max |Z difference|) over the grid.
    """
    spec = spec or SurvivalGSpec()
    wide = sd.auxiliary(s_screen)
    narrow = sd.auxiliary(s_diag)
    if np.any(narrow > wide):
        raise DataError(f"{s_diag} must not exceed {s_screen} for any unit")
    if sd.n_treated == 0:
        raise DataError("treated arm is empty")
    parts = _parts(sd, spec)
    grid = spec.grid_points()
    za, _ = _grid_values(sd, _Parts(parts.a, wide, parts.w, parts.p, parts.centre), grid)
    zb, _ = _grid_values(sd, _Parts(parts.a, narrow, parts.w, parts.p, parts.centre), grid)
    both = np.isfinite(za) & np.isfinite(zb)
    diff = np.abs(za - zb)[both]
    mismatch = np.isfinite(za) != np.isfinite(zb)
    max_diff = float(diff.max()) if diff.size else 0.0
    if mismatch.any():
        max_diff = float("inf")
    return max_diff == 0.0, max_diff


__all__ = [
    "IPW_CAVEAT",
    "ProfileResult",
    "SurvivalGSpec",
    "auxiliary_invariance_check",
    "delta",
    "profile_and_invert",
    "z_stat",
]
