"""Ground truth computed directly from potential outcomes.

Two entry points for each estimand: sample-level functions take a
``CompleteDataset`` and return exact sample means; ``*_population`` functions
take a world config and return closed-form population values.
"""

from __future__ import annotations

import numpy as np

from .data import STRATA, CompleteDataset, Dataset
from .errors import DataError
from .synth import (
    S0,
    S1,
    BinaryWorldConfig,
    ContinuousWorldConfig,
    MechanisticWorldConfig,
    _stratum_vector,
)

LABELS = tuple(k.value for k in STRATA)


# --- sample level -----------------------------------------------------------------


def ps_effects(d: CompleteDataset, by_x: bool = False) -> dict:
    """Mean of y1 - y0 within each principal stratum.

    Empty strata map to ``None`` (absent, not zero).  With ``by_x`` the keys
    are (stratum, x-row tuple) pairs over observed covariate patterns.
    """
    codes = d.stratum_codes
    diff = d.y1 - d.y0
    if not by_x:
        out = {}
        for k, lab in enumerate(LABELS):
            m = codes == k
            out[lab] = float(diff[m].mean()) if m.any() else None
        return out
    patterns, inv = np.unique(d.x, axis=0, return_inverse=True)
    inv = inv.ravel()
    out = {}
    for k, lab in enumerate(LABELS):
        for j, pat in enumerate(patterns):
            m = (codes == k) & (inv == j)
            out[(lab, tuple(float(v) for v in pat))] = float(diff[m].mean()) if m.any() else None
    return out


def single_potential_effects(d: CompleteDataset, a: int, s: int) -> float:
    """Mean of y1 - y0 among units whose potential auxiliary under arm ``a`` is ``s``."""
    sa = d.s1 if a == 1 else d.s0
    m = sa == s
    if not m.any():
        raise DataError(f"empty subgroup s{a} = {s}")
    return float((d.y1 - d.y0)[m].mean())


def realized_effects(masked: Dataset, complete: CompleteDataset) -> tuple:
    """(Psi0*, Psi1*): mean of y1 - y0 among treated units with s = 0 and s = 1.

    ``masked`` must be the observed version of ``complete`` (same unit order).
    An empty cell yields ``None`` in its slot.
    """
    if masked.n != complete.n:
        raise DataError("masked and complete datasets differ in size")
    diff = complete.y1 - complete.y0
    out = []
    for s in (0, 1):
        m = (masked.a == 1) & (masked.s == s)
        out.append(float(diff[m].mean()) if m.any() else None)
    return tuple(out)


def _require_binary(y):
    if not np.all((y == 0) | (y == 1)):
        raise DataError("naive contrast expectation needs a binary outcome")


def naive_contrast_expectation(d: CompleteDataset, p_treat: float = 0.5) -> float:
    """pr(y=1 | a=1, s=1) - pr(y=1 | a=0, s=1) implied by the sample's stratum table.

    Under randomization the arm-specific conditional probabilities do not
    depend on ``p_treat``; the argument is accepted for symmetry with
    ``mask`` and checked for range only.
    """
    if not 0 < p_treat < 1:
        raise DataError("p_treat must lie strictly between 0 and 1")
    _require_binary(d.y0)
    _require_binary(d.y1)
    m1 = d.s1 == 1
    m0 = d.s0 == 1
    if not (m1.any() and m0.any()):
        raise DataError("no units with s = 1 in one of the arms")
    return float(d.y1[m1].mean() - d.y0[m0].mean())


def mediation_truth(d: CompleteDataset, gamma) -> dict:
    """Implied realized effects of a mechanistic world and their sample check.

    q = pr(s0 = 1 | s1 = 0) is computed from the sample's strata; the implied
    Psi0 = g1 - q g2 and Psi1 = g1 + g3 are compared with the realized-effect
    subgroup means (which use the a = 1 potential auxiliary).
    """
    g1, g2, g3 = (float(g) for g in gamma)
    codes = d.stratum_codes
    if np.any(codes == 2):
        raise DataError("mediation identities need monotone strata (no treatment-harmful units)")
    s1_zero = d.s1 == 0
    q = float(d.s0[s1_zero].mean())
    psi0 = g1 - q * g2
    psi1 = g1 + g3
    real0 = single_potential_effects(d, 1, 0)
    real1 = single_potential_effects(d, 1, 1)
    return {
        "gamma": [g1, g2, g3],
        "q": q,
        "psi0": psi0,
        "psi1": psi1,
        "realized": [real0, real1],
        "residuals": [real0 - psi0, real1 - psi1],
        "stratum_effects": ps_effects(d),
    }


# --- population level -------------------------------------------------------------


def stratum_table(cfg) -> tuple[np.ndarray, np.ndarray]:
    """Stratum probabilities (4,) and arm-by-stratum outcome means (2, 4)."""
    if isinstance(cfg, BinaryWorldConfig):
        w = cfg.weights
        return w, np.vstack([cfg.risk, cfg.risk])
    if isinstance(cfg, ContinuousWorldConfig):
        shift = cfg.x_shift * cfg.px1
        return cfg.probs, cfg.means + shift[None, :]
    if isinstance(cfg, MechanisticWorldConfig):
        base = np.full(4, cfg.intercept)
        for beta, px in zip(cfg.beta_x, cfg.px_given_stratum):
            base = base + beta * _stratum_vector(px, "px_given_stratum", default=0.5)
        g1, g2, g3 = cfg.gamma
        m0 = base + S0 * g2
        m1 = base + g1 + S1 * g2 + S1 * g3
        return cfg.probs, np.vstack([m0, m1])
    raise TypeError(f"no population table for {type(cfg).__name__}")


def ps_effects_population(cfg) -> dict:
    w, m = stratum_table(cfg)
    eff = m[1] - m[0]
    return {lab: (float(eff[k]) if w[k] > 0 else None) for k, lab in enumerate(LABELS)}


def single_potential_effects_population(cfg, a: int, s: int) -> float:
    w, m = stratum_table(cfg)
    sel = (S1 if a == 1 else S0) == s
    tot = w[sel].sum()
    if tot <= 0:
        raise DataError(f"subgroup s{a} = {s} has zero probability")
    return float(np.dot(w[sel], (m[1] - m[0])[sel]) / tot)


def realized_effects_population(cfg) -> tuple[float, float]:
    return single_potential_effects_population(cfg, 1, 0), single_potential_effects_population(cfg, 1, 1)


def average_effect_population(cfg) -> float:
    w, m = stratum_table(cfg)
    return float(np.dot(w, m[1] - m[0]))


def cell_means_population(cfg) -> dict:
    """E(y | a, s) in a randomized trial, keyed by (a, s); zero-probability cells omitted."""
    w, m = stratum_table(cfg)
    out = {}
    for a in (0, 1):
        sa = S1 if a == 1 else S0
        for s in (0, 1):
            sel = sa == s
            tot = w[sel].sum()
            if tot > 0:
                out[(a, s)] = float(np.dot(w[sel], m[a][sel]) / tot)
    return out


def naive_contrast_population(cfg) -> float:
    """pr(y=1 | a=1, s=1) - pr(y=1 | a=0, s=1) from closed-form weighted sums."""
    cells = cell_means_population(cfg)
    return cells[(1, 1)] - cells[(0, 1)]


def mediation_truth_population(cfg: MechanisticWorldConfig) -> dict:
    """Implied Psi from the gamma identities next to the direct stratum-weighted values."""
    g1, g2, g3 = cfg.gamma
    q = cfg.q
    psi0, psi1 = g1 - q * g2, g1 + g3
    real0, real1 = realized_effects_population(cfg)
    return {
        "gamma": [g1, g2, g3],
        "q": q,
        "psi0": psi0,
        "psi1": psi1,
        "realized": [real0, real1],
        "residuals": [real0 - psi0, real1 - psi1],
        "stratum_effects": ps_effects_population(cfg),
    }


def principal_score_population(cfg: ContinuousWorldConfig, a: int) -> np.ndarray:
    """pr(s_a = 1 | x) for x = 0, 1."""
    sa = S1 if a == 1 else S0
    px = np.vstack([1 - cfg.px1, cfg.px1])  # [x, k]
    joint = cfg.probs[None, :] * px
    return (joint[:, sa == 1]).sum(axis=1) / joint.sum(axis=1)


def effect_by_x_population(cfg: ContinuousWorldConfig) -> np.ndarray:
    """E(y1 - y0 | x) for x = 0, 1."""
    px = np.vstack([1 - cfg.px1, cfg.px1])
    joint = cfg.probs[None, :] * px
    eff = cfg.means[1] - cfg.means[0]
    return joint @ eff / joint.sum(axis=1)


def eas_population(cfg: ContinuousWorldConfig, score_arm="received") -> dict:
    """Population least-squares fit of y on {1, m, a, m a} with m a principal score.

    ``score_arm`` is 0 or 1 (the same score for every unit) or "received"
    (each unit's score for the arm it was assigned).  The fit is over the four
    (a, x) cells weighted by their probabilities, so it is exact.
    """
    pxs = np.array([1 - cfg.px1 @ cfg.probs, cfg.px1 @ cfg.probs])
    px = np.vstack([1 - cfg.px1, cfg.px1])
    joint = cfg.probs[None, :] * px
    post = joint / joint.sum(axis=1, keepdims=True)  # pr(k | x)
    mu = {a: principal_score_population(cfg, a) for a in (0, 1)}
    rows, ys, ws = [], [], []
    for a in (0, 1):
        for x in (0, 1):
            arm = a if score_arm == "received" else int(score_arm)
            m = mu[arm][x]
            rows.append([1.0, m, a, m * a])
            ys.append(post[x] @ cfg.means[a] + cfg.x_shift * x)
            ws.append((cfg.p_treat if a else 1 - cfg.p_treat) * pxs[x])
    Z, y, w = np.array(rows), np.array(ys), np.array(ws)
    beta = np.linalg.lstsq(Z * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]
    return {"coef": beta, "extrapolated": float(beta[2] + beta[3])}


def score_regression_population(cfg: ContinuousWorldConfig, a: int = 1) -> tuple[float, float]:
    """(intercept, slope) of the population regression of E(y1 - y0 | x) on mu^a(x)."""
    mu = principal_score_population(cfg, a)
    tau = effect_by_x_population(cfg)
    if mu[0] == mu[1]:
        raise DataError("score does not vary with x")
    slope = (tau[1] - tau[0]) / (mu[1] - mu[0])
    return float(tau[0] - slope * mu[0]), float(slope)


# --- report -----------------------------------------------------------------------


def truth_report(cfg=None, complete: CompleteDataset | None = None) -> dict:
    """Collect every applicable ground-truth quantity into a JSON-ready dict."""
    out: dict = {}
    if cfg is not None and not hasattr(cfg, "psi_true"):
        pop: dict = {"ps_effects": ps_effects_population(cfg)}
        try:
            pop["realized"] = list(realized_effects_population(cfg))
        except DataError:
            pop["realized"] = None
        pop["average_effect"] = average_effect_population(cfg)
        pop["cell_means"] = {f"a{a}s{s}": v for (a, s), v in cell_means_population(cfg).items()}
        if isinstance(cfg, BinaryWorldConfig):
            pop["naive_contrast"] = naive_contrast_population(cfg)
        if isinstance(cfg, ContinuousWorldConfig):
            pop["eas_extrapolated"] = eas_population(cfg)["extrapolated"]
        if isinstance(cfg, MechanisticWorldConfig):
            pop["mediation"] = mediation_truth_population(cfg)
        out["population"] = pop
    elif cfg is not None:
        out["population"] = {"psi_true": cfg.psi_true}
    if complete is not None:
        sample: dict = {"n": complete.n, "ps_effects": ps_effects(complete)}
        codes = complete.stratum_codes
        sample["stratum_counts"] = {lab: int((codes == k).sum()) for k, lab in enumerate(LABELS)}
        sub = {}
        for a in (0, 1):
            for s in (0, 1):
                try:
                    sub[f"s{a}={s}"] = single_potential_effects(complete, a, s)
                except DataError:
                    sub[f"s{a}={s}"] = None
        sample["single_potential_effects"] = sub
        sample["average_effect"] = float((complete.y1 - complete.y0).mean())
        if isinstance(cfg, MechanisticWorldConfig):
            sample["mediation"] = mediation_truth(complete, cfg.gamma)
        out["sample"] = sample
    return out
