"""Principal stratification by maximum likelihood: EM over the latent strata.

Each unit's observed (a, s) is compatible with two strata.  Within stratum k
and arm a the outcome is normal with mean m[a, k] + x . delta and a shared
standard deviation (optionally one per (a, k) cell).  Stratum probabilities
are free within each distinct covariate pattern.

Variant I leaves the eight means free.  Variant II forces a common arm
contrast tau_IT in the immune and treatment-protective strata and tau_HD in
the treatment-harmful and doomed strata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import STRATA, Dataset, Stratum
from .errors import DataError, EstimationError

LABELS = tuple(k.value for k in STRATA)
S0 = np.array([0, 1, 0, 1])
S1 = np.array([0, 0, 1, 1])
DEGENERATE_WEIGHT = 1e-8
SIGMA_FLOOR = 1e-3
LOG_2PI = math.log(2 * math.pi)

# COMPAT[a, s, k]: stratum k can produce auxiliary s under arm a
COMPAT = np.zeros((2, 2, 4), dtype=bool)
for _a in (0, 1):
    for _k in range(4):
        COMPAT[_a, (S1 if _a else S0)[_k], _k] = True


def compatible_strata(a: int, s: int, monotone: bool = False) -> frozenset:
    """Strata whose potential auxiliary under arm ``a`` equals ``s``.

    ``monotone`` (s1 <= s0 for every unit) removes the treatment-harmful stratum.
    """
    out = {STRATA[k] for k in range(4) if COMPAT[a, s, k]}
    if monotone:
        out.discard(Stratum.TH)
    return frozenset(out)


# --- model ------------------------------------------------------------------------


@dataclass
class PsModel:
    """Parameters of the normal mixture.

    ``pi[l, k]`` is pr(stratum k | covariate pattern l) for the rows of
    ``levels``; ``means[a, k]`` the mean at x = 0; ``sigma`` a scalar or a
    (2, 4) array.
    """

    variant: str
    levels: np.ndarray
    pi: np.ndarray
    means: np.ndarray
    delta: np.ndarray
    sigma: float | np.ndarray
    degenerate: tuple[str, ...] = ()

    def __post_init__(self):
        if self.variant not in ("I", "II"):
            raise DataError(f"unknown variant {self.variant!r}")
        self.pi = np.asarray(self.pi, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if np.any(np.asarray(self.sigma) <= 0):
            raise DataError("sigma must be positive")

    @property
    def taus(self) -> tuple[float, float]:
        eff = self.means[1] - self.means[0]
        return float(eff[0]), float(eff[3])

    def effects(self) -> dict:
        """Per-stratum arm contrasts (variant II: the two shared contrasts)."""
        eff = self.means[1] - self.means[0]
        absent = self.pi.sum(axis=0) == 0
        if self.variant == "II":
            return {"I=TP": float(eff[0]), "TH=D": float(eff[3])}
        return {lab: (None if absent[k] else float(eff[k])) for k, lab in enumerate(LABELS)}

    def vector(self) -> np.ndarray:
        return np.concatenate([self.pi.ravel(), self.means.ravel(), self.delta, np.ravel(self.sigma)])

    def from_vector(self, v) -> "PsModel":
        i = self.pi.size
        j = i + self.means.size
        k = j + self.delta.size
        sigma = v[k:] if np.ndim(self.sigma) else float(v[k])
        return replace(
            self,
            pi=v[:i].reshape(self.pi.shape),
            means=v[i:j].reshape(self.means.shape),
            delta=v[j:k],
            sigma=np.reshape(sigma, np.shape(self.sigma)) if np.ndim(self.sigma) else sigma,
        )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "levels": self.levels.tolist(),
            "stratum_probs": [dict(zip(LABELS, map(float, row))) for row in self.pi],
            "means": {str(a): dict(zip(LABELS, map(float, self.means[a]))) for a in (0, 1)},
            "delta": self.delta.tolist(),
            "sigma": np.asarray(self.sigma).tolist(),
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PsModel":
        """Inverse of ``to_dict``."""
        try:
            pi = [[row[lab] for lab in LABELS] for row in d["stratum_probs"]]
            means = [[d["means"][str(a)][lab] for lab in LABELS] for a in (0, 1)]
            levels = np.asarray(d["levels"], dtype=float).reshape(len(pi), -1)
            sigma = d["sigma"]
            return cls(
                d.get("variant", "I"),
                levels,
                pi,
                means,
                d["delta"],
                np.asarray(sigma, dtype=float) if np.ndim(sigma) else float(sigma),
                tuple(d.get("degenerate", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"invalid mixture model: {exc}") from None


def covariate_levels(x: np.ndarray, max_levels: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Distinct covariate rows and each unit's row index."""
    levels, inv = np.unique(x, axis=0, return_inverse=True)
    if len(levels) > max_levels:
        raise DataError(
            f"{len(levels)} distinct covariate patterns; the mixture model needs discrete covariates"
        )
    return levels, inv.ravel()


def _level_index(d: Dataset, model: PsModel) -> np.ndarray:
    lv = {tuple(r): i for i, r in enumerate(model.levels)}
    try:
        return np.array([lv[tuple(r)] for r in d.x])
    except KeyError as exc:
        raise DataError(f"covariate pattern {exc.args[0]} not in the model") from None


@dataclass
class _Layout:
    """Per-dataset indices for the two strata compatible with each unit."""

    levels: np.ndarray
    lev: np.ndarray
    x: np.ndarray
    y: np.ndarray
    k1: np.ndarray
    k2: np.ndarray
    j1: np.ndarray  # cell a*4 + k
    j2: np.ndarray
    l1: np.ndarray  # pattern l*4 + k
    l2: np.ndarray
    counts: np.ndarray

    @property
    def n(self) -> int:
        return self.y.size


# PAIR[a, s] lists the two strata compatible with (a, s) in ascending order
PAIR = np.array([[np.flatnonzero(COMPAT[a, s]) for s in (0, 1)] for a in (0, 1)])


def _layout(d: Dataset, levels: np.ndarray | None = None, lev: np.ndarray | None = None) -> _Layout:
    if levels is None or lev is None:
        levels, lev = covariate_levels(d.x)
    k1 = PAIR[d.a, d.s, 0]
    k2 = PAIR[d.a, d.s, 1]
    return _Layout(
        levels, lev, d.x, d.y, k1, k2,
        d.a * 4 + k1, d.a * 4 + k2, lev * 4 + k1, lev * 4 + k2,
        np.bincount(lev, minlength=len(levels)),
    )


def _sigma_cells(model: PsModel) -> np.ndarray:
    return np.broadcast_to(np.asarray(model.sigma, dtype=float), (2, 4))


def _e_pair(lay: _Layout, model: PsModel) -> tuple[np.ndarray, np.ndarray, float]:
    """Responsibilities of each unit's two compatible strata and the log-likelihood."""
    sig = _sigma_cells(model).ravel()
    mf = model.means.ravel()
    resid = lay.y - lay.x @ model.delta
    with np.errstate(divide="ignore"):
        logpi = np.log(model.pi.ravel())
    s1, s2 = sig[lay.j1], sig[lay.j2]
    q1 = logpi[lay.l1] - 0.5 * ((resid - mf[lay.j1]) / s1) ** 2 - np.log(s1)
    q2 = logpi[lay.l2] - 0.5 * ((resid - mf[lay.j2]) / s2) ** 2 - np.log(s2)
    tot = np.logaddexp(q1, q2)
    bad = ~np.isfinite(tot)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise EstimationError(f"unit {i} has zero likelihood under every compatible stratum")
    ll = float(tot.sum()) - 0.5 * LOG_2PI * lay.n
    return np.exp(q1 - tot), np.exp(q2 - tot), ll


def _pair_to_full(lay: _Layout, r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    resp = np.zeros((lay.n, 4))
    idx = np.arange(lay.n)
    resp[idx, lay.k1] = r1
    resp[idx, lay.k2] = r2
    return resp


def e_step(d: Dataset, model: PsModel, lev: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Responsibilities (n, 4) and the observed-data log-likelihood."""
    if lev is None:
        lev = _level_index(d, model)
    lay = _layout(d, model.levels, lev)
    r1, r2, ll = _e_pair(lay, model)
    return _pair_to_full(lay, r1, r2), ll


def loglik(d: Dataset, model: PsModel) -> float:
    return e_step(d, model)[1]


def _constraint_map(variant: str) -> np.ndarray:
    """Matrix L with vec(means) = L theta (rows ordered a*4 + k)."""
    if variant == "I":
        return np.eye(8)
    L = np.zeros((8, 6))
    for k in range(4):
        L[k, k] = 1
        L[4 + k, k] = 1
        L[4 + k, 4 if k < 2 else 5] = 1
    return L


_MAPS = {v: _constraint_map(v) for v in ("I", "II")}


def _theta_from_means(means: np.ndarray, variant: str) -> np.ndarray:
    if variant == "I":
        return means.ravel().copy()
    eff = means[1] - means[0]
    return np.concatenate([means[0], [eff[0], eff[3]]])


def _cell_sums(lay: _Layout, w1: np.ndarray, w2: np.ndarray, size: int = 8, by: str = "j") -> np.ndarray:
    i1, i2 = (lay.j1, lay.j2) if by == "j" else (lay.l1, lay.l2)
    return np.bincount(i1, w1, size) + np.bincount(i2, w2, size)


def _m_pair(
    lay: _Layout,
    r1: np.ndarray,
    r2: np.ndarray,
    variant: str,
    previous: PsModel | None,
    per_cell_sigma: bool,
) -> PsModel:
    X, y = lay.x, lay.y
    n, p = X.shape
    n_lev = len(lay.levels)
    wl = _cell_sums(lay, r1, r2, 4 * n_lev, by="l").reshape(n_lev, 4)
    pi = wl / lay.counts[:, None]

    if per_cell_sigma and previous is not None:
        prec = 1.0 / _sigma_cells(previous).ravel() ** 2
        w1, w2 = r1 * prec[lay.j1], r2 * prec[lay.j2]
    else:
        w1, w2 = r1, r2
    Wc = _cell_sums(lay, w1, w2)
    Cx = np.empty((8, p))
    for c in range(p):
        Cx[:, c] = _cell_sums(lay, w1 * X[:, c], w2 * X[:, c])
    bc = _cell_sums(lay, w1 * y, w2 * y)
    rowtot = w1 + w2
    XtX = (X * rowtot[:, None]).T @ X
    Xty = X.T @ (rowtot * y)

    Lm = _MAPS[variant]
    q = Lm.shape[1]
    A = np.zeros((q + p, q + p))
    A[:q, :q] = Lm.T @ (Wc[:, None] * Lm)
    A[:q, q:] = Lm.T @ Cx
    A[q:, :q] = A[:q, q:].T
    A[q:, q:] = XtX
    b = np.concatenate([Lm.T @ bc, Xty])

    raw_w = _cell_sums(lay, r1, r2)
    param_w = Lm.T @ raw_w
    fixed = param_w < DEGENERATE_WEIGHT
    theta = np.zeros(q + p)
    if fixed.any():
        fixed_idx = np.flatnonzero(fixed)
        free_idx = np.flatnonzero(~np.concatenate([fixed, np.zeros(p, dtype=bool)]))
        if previous is not None:
            theta[:q] = np.nan_to_num(_theta_from_means(previous.means, variant))
        rhs = b[free_idx] - A[np.ix_(free_idx, fixed_idx)] @ theta[fixed_idx]
        A_free = A[np.ix_(free_idx, free_idx)]
    else:
        free_idx = slice(None)
        rhs, A_free = b, A
    try:
        theta[free_idx] = np.linalg.solve(A_free, rhs)
    except np.linalg.LinAlgError:
        raise EstimationError("mixture mean update is singular (covariate shift not identified)") from None
    means8 = Lm @ theta[:q]
    delta = theta[q:]
    resid = y - X @ delta
    e1 = resid - means8[lay.j1]
    e2 = resid - means8[lay.j2]
    sq1, sq2 = r1 * e1 * e1, r2 * e2 * e2
    if previous is None and fixed.any():
        means8 = means8.copy()
        means8[(Lm[:, fixed[:q]] != 0).any(axis=1)] = np.nan
    means = means8.reshape(2, 4)
    degenerate = tuple(
        f"a={c // 4},{LABELS[c % 4]}" for c in range(8) if raw_w[c] < DEGENERATE_WEIGHT
    )
    if per_cell_sigma:
        ss = _cell_sums(lay, sq1, sq2).reshape(2, 4)
        w8 = raw_w.reshape(2, 4)
        with np.errstate(invalid="ignore", divide="ignore"):
            sigma = np.sqrt(ss / w8)
        if previous is not None:
            fallback = _sigma_cells(previous)
        else:
            fallback = np.full((2, 4), np.sqrt((sq1.sum() + sq2.sum()) / n))
        sigma = np.where(w8 < DEGENERATE_WEIGHT, fallback, np.maximum(sigma, SIGMA_FLOOR))
    else:
        sigma = max(float(np.sqrt((sq1.sum() + sq2.sum()) / n)), SIGMA_FLOOR)
    return PsModel(variant, lay.levels, pi, means, delta, sigma, degenerate)


def m_step(
    d: Dataset,
    resp: np.ndarray,
    variant: str,
    levels: np.ndarray | None = None,
    lev: np.ndarray | None = None,
    previous: PsModel | None = None,
    per_cell_sigma: bool = False,
) -> PsModel:
    """Weighted maximum-likelihood update given responsibilities (n, 4).

    Stratum probabilities are responsibility-weighted proportions within each
    covariate pattern; the mean structure is weighted least squares on the
    design implied by ``variant``; sigma is the weighted root mean squared
    residual.  Mean parameters carried by cells with total responsibility
    below 1e-8 are held at their previous values (NaN without one) and
    listed as degenerate.  Responsibility placed on strata incompatible with
    a unit's (a, s) is ignored.
    """
    if variant not in _MAPS:
        raise DataError(f"unknown variant {variant!r}")
    lay = _layout(d, levels, lev)
    idx = np.arange(lay.n)
    return _m_pair(lay, resp[idx, lay.k1], resp[idx, lay.k2], variant, previous, per_cell_sigma)


# --- starts -----------------------------------------------------------------------


def default_start(d: Dataset, variant: str = "I", monotone: bool = False, per_cell_sigma: bool = False) -> PsModel:
    """Deterministic data-driven start.

    Uniform stratum probabilities within each covariate pattern; means from an
    OLS of y on the four (a, s) cell indicators and x, with the two strata
    sharing a cell placed at -/+ half the residual sd around the cell mean.
    """
    levels, lev = covariate_levels(d.x)
    cell = d.a * 2 + d.s
    present = np.unique(cell)
    dummies = (cell[:, None] == present[None, :]).astype(float)
    design = np.hstack([dummies, d.x])
    coef, *_ = np.linalg.lstsq(design, d.y, rcond=None)
    resid = d.y - design @ coef
    sd = float(np.sqrt(resid @ resid / max(d.n - design.shape[1], 1))) or 1.0
    cm = dict(zip(present.tolist(), coef[: len(present)]))
    grand = float(np.mean(coef[: len(present)]))
    means = np.zeros((2, 4))
    for arm in (0, 1):
        for s in (0, 1):
            ks = [k for k in range(4) if COMPAT[arm, s, k]]
            centre = cm.get(arm * 2 + s, grand)
            means[arm, ks[0]] = centre - 0.5 * sd
            means[arm, ks[1]] = centre + 0.5 * sd
    pi = np.full((len(levels), 4), 0.25)
    if monotone:
        pi[:, 2] = 0.0
        pi /= pi.sum(axis=1, keepdims=True)
    model = PsModel("I", levels, pi, means, coef[len(present) :], np.full((2, 4), sd) if per_cell_sigma else sd)
    return constrain(model, variant)


def constrain(model: PsModel, variant: str) -> PsModel:
    """Project the means of ``model`` onto the mean structure of ``variant``."""
    if variant == "I":
        return replace(model, variant="I")
    base = model.means[0]
    eff = model.means[1] - model.means[0]
    tau = np.array([eff[:2].mean()] * 2 + [eff[2:].mean()] * 2)
    return replace(model, variant="II", means=np.vstack([base, base + tau]))


def start_from_world(cfg, d: Dataset, variant: str = "I", per_cell_sigma: bool = False) -> PsModel:
    """Start at the generating parameters of a continuous world."""
    levels, _ = covariate_levels(d.x)
    if levels.shape[1] != 1:
        raise DataError("truth starts need the single binary covariate of a continuous world")
    px = np.where(levels[:, :1] == 1, cfg.px1[None, :], 1 - cfg.px1[None, :])
    joint = cfg.probs[None, :] * px
    pi = joint / joint.sum(axis=1, keepdims=True)
    sigma = np.full((2, 4), cfg.sd) if per_cell_sigma else float(cfg.sd)
    model = PsModel("I", levels, pi, cfg.means.astype(float), np.array([cfg.x_shift]), sigma)
    return constrain(model, variant)


# --- fitting ----------------------------------------------------------------------


@dataclass
class EmFit:
    model: PsModel
    loglik_trace: list[float]
    converged: bool
    iterations: int
    responsibility_means: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def effects(self) -> dict:
        return self.model.effects()

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    def to_dict(self) -> dict:
        return {
            "variant": self.model.variant,
            "effects": self.effects,
            "converged": self.converged,
            "iterations": self.iterations,
            "loglik": self.loglik,
            "loglik_trace_length": len(self.loglik_trace),
            "model": self.model.to_dict(),
            "responsibility_means": self.responsibility_means,
            "warnings": list(self.warnings),
        }


def _valid(model: PsModel) -> bool:
    pi = model.pi
    return (
        np.all(pi >= 0)
        and np.all(np.isfinite(model.vector()))
        and np.all(np.asarray(model.sigma) > SIGMA_FLOOR / 2)
    )


def _align_levels(model: PsModel, levels: np.ndarray) -> PsModel:
    rows = {tuple(r): i for i, r in enumerate(model.levels)}
    missing = [tuple(r) for r in levels if tuple(r) not in rows]
    if missing:
        raise DataError(f"start has no stratum probabilities for covariate pattern {missing[0]}")
    return replace(model, levels=levels, pi=model.pi[[rows[tuple(r)] for r in levels]])


def _run_em(d, start, variant, tol, max_iter, accelerate, per_cell_sigma):
    lay = _layout(d)
    if not np.array_equal(start.levels, lay.levels):
        start = _align_levels(start, lay.levels)

    def step(m, r):
        return _m_pair(lay, r[0], r[1], variant, m, per_cell_sigma)

    def estep(m):
        r1, r2, ll = _e_pair(lay, m)
        return (r1, r2), ll

    model = start
    resp, ll = estep(model)
    trace = [ll]
    evals = 0
    converged = False
    while evals < max_iter:
        m1 = step(model, resp)
        r1, ll1 = estep(m1)
        evals += 1
        new, new_r, new_ll = m1, r1, ll1
        if accelerate and evals < max_iter:
            m2 = step(m1, r1)
            r2, ll2 = estep(m2)
            evals += 1
            new, new_r, new_ll = m2, r2, ll2
            v0, v1, v2 = model.vector(), m1.vector(), m2.vector()
            rr = v1 - v0
            vv = v2 - v1 - rr
            nv = np.linalg.norm(vv)
            if nv > 0 and evals < max_iter:
                alpha = min(-1.0, -np.linalg.norm(rr) / nv)
                for _ in range(8):
                    try:
                        cand = model.from_vector(v0 - 2 * alpha * rr + alpha * alpha * vv)
                    except DataError:  # non-positive sigma
                        cand = None
                    if cand is not None and _valid(cand):
                        break
                    alpha = (alpha - 1) / 2
                else:
                    cand = None
                if cand is not None and alpha < -1.0:
                    try:
                        rc, _ = estep(cand)
                        m3 = step(cand, rc)
                        r3, ll3 = estep(m3)
                        evals += 1
                        if ll3 >= ll2:
                            new, new_r, new_ll = m3, r3, ll3
                    except EstimationError:
                        pass
        if new_ll < ll:
            # ascent is exhausted at machine precision
            converged = True
            break
        done = abs(new_ll - ll) < tol * abs(ll)
        model, resp, ll = new, new_r, new_ll
        trace.append(ll)
        if done:
            converged = True
            break
    return model, _pair_to_full(lay, *resp), trace, converged, evals


def fit(
    d: Dataset,
    variant: str = "I",
    start: PsModel | str = "default",
    tol: float = 1e-8,
    max_iter: int = 5000,
    accelerate: bool = True,
    per_cell_sigma: bool = False,
    monotone: bool = False,
    check_identifiability: bool = False,
) -> EmFit:
    """Maximum-likelihood fit by EM.

    Stops when the relative change in log-likelihood drops below ``tol`` or
    after ``max_iter`` EM updates (non-convergence is flagged, not raised).
    ``accelerate`` applies a safeguarded squared-extrapolation step (SQUAREM)
    that is kept only when it does not lower the likelihood, so the recorded
    trace stays nondecreasing and the fixed points are those of plain EM.
    """
    if variant not in ("I", "II"):
        raise DataError(f"unknown variant {variant!r}")
    if not tol > 0:
        raise DataError("tol must be positive")
    if d.n_treated == 0 or d.n_treated == d.n:
        raise DataError("both arms must be present")
    if isinstance(start, str):
        if start != "default":
            raise DataError(f"unknown start {start!r}")
        start = default_start(d, variant, monotone, per_cell_sigma)
    else:
        start = constrain(start, variant)
        if monotone:
            pi = start.pi.copy()
            pi[:, 2] = 0.0
            start = replace(start, pi=pi / pi.sum(axis=1, keepdims=True))
    model, resp, trace, converged, evals = _run_em(d, start, variant, tol, max_iter, accelerate, per_cell_sigma)
    warnings = []
    if not converged:
        warnings.append(f"EM did not converge in {max_iter} iterations")
    if model.degenerate:
        warnings.append("degenerate cells: " + ", ".join(model.degenerate))
    if check_identifiability:
        alt_start = swap_start(model)
        alt, *_ = _run_em(d, alt_start, variant, tol, max_iter, accelerate, per_cell_sigma)
        _, alt_ll = e_step(d, alt)
        gap = max(
            abs((v or 0.0) - (alt.effects().get(k) or 0.0)) for k, v in model.effects().items()
        )
        if abs(alt_ll - trace[-1]) < 1e-6 and gap > 1e-3:
            warnings.append(
                "components not identifiable: a stratum-swapped stationary point has the same "
                f"log-likelihood (difference {abs(alt_ll - trace[-1]):.2e}) but effects differing by {gap:.3f}"
            )
    rm = dict(zip(LABELS, map(float, resp.mean(axis=0))))
    return EmFit(model, trace, converged, evals, rm, warnings)


def swap_start(model: PsModel) -> PsModel:
    """Start with the means of the two strata sharing each (a, s) cell exchanged."""
    perm = {1: [1, 0, 3, 2], 0: [2, 3, 0, 1]}  # arm 1: I<->TP, TH<->D; arm 0: I<->TH, TP<->D
    means = np.vstack([model.means[0, perm[0]], model.means[1, perm[1]]])
    sigma = model.sigma
    if np.ndim(sigma):
        sigma = np.vstack([sigma[0, perm[0]], sigma[1, perm[1]]])
    return constrain(replace(model, means=means, sigma=sigma), model.variant)
