"""Shared numerical kernels: least squares, logistic regression, Kaplan-Meier
censoring weights, sandwich covariance, bootstrap and seeded random streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .data import Event, SurvivalDataset
from .errors import (
    EstimationError,
    InestimableWeightError,
    RankDeficientError,
    SeparationError,
)

log = logging.getLogger(__name__)

RANK_TOL = 1e-10


# --- random streams -----------------------------------------------------------


def child_rng(seed, *keys) -> np.random.Generator:
    """Generator for the stream identified by ``keys`` under master ``seed``.

    The stream depends only on (seed, keys), never on the order in which
    streams are requested, so replicate r always sees the same draws.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)))


def normal_errors(rng, size, sd=1.0):
    return sd * rng.standard_normal(size)


def gamma_with_moments(rng, mean, sd=1.0):
    """Gamma draws with the given mean(s) and standard deviation.

    shape = (mean/sd)**2, scale = sd**2/mean, so both moments match exactly and
    the support stays on (0, inf).
    """
    mean = np.asarray(mean, dtype=float)
    if np.any(mean <= 0):
        raise ValueError("gamma errors need strictly positive means")
    return rng.gamma(shape=(mean / sd) ** 2, scale=sd**2 / mean)


# --- least squares ------------------------------------------------------------


@dataclass
class LinearFit:
    coef: np.ndarray
    cov: np.ndarray
    cov_robust: np.ndarray
    resid: np.ndarray
    rank: int
    sigma2: float
    names: tuple[str, ...] = ()

    def __getitem__(self, name):
        return self.coef[self.names.index(name)]

    def se(self, robust=False):
        return np.sqrt(np.diag(self.cov_robust if robust else self.cov))


def _column_names(names, p):
    return tuple(names) if names is not None else tuple(f"col{j}" for j in range(p))


def ols(design, y, weights=None, names: Sequence[str] | None = None) -> LinearFit:
    """Weighted least squares by pivoted QR.

    Raises ``RankDeficientError`` naming the collinear columns instead of
    falling back to a pseudo-inverse.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if len(y) != n:
        raise ValueError(f"design has {n} rows but y has {len(y)}")
    names = _column_names(names, p)
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)
        if np.any(w <= 0) or len(w) != n:
            raise ValueError("weights must be positive, one per row")
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = y * sw
    Q, R, piv = scipy.linalg.qr(Xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(diag[0] if diag.size else 0.0, 1e-300)))
    if rank < p:
        bad = [names[j] for j in piv[rank:]]
        raise RankDeficientError(f"design is rank deficient; collinear columns: {', '.join(bad)}", bad)
    beta_p = scipy.linalg.solve_triangular(R, Q.T @ yw)
    coef = np.empty(p)
    coef[piv] = beta_p
    resid = y - X @ coef
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p))
    bread_p = Rinv @ Rinv.T
    bread = np.empty((p, p))
    bread[np.ix_(piv, piv)] = bread_p
    dof = max(n - p, 1)
    sigma2 = float(np.sum(w * resid**2) / dof)
    cov = sigma2 * bread
    meat = (X * (w * resid)[:, None]).T @ (X * (w * resid)[:, None])
    cov_robust = bread @ meat @ bread
    return LinearFit(coef, (cov + cov.T) / 2, (cov_robust + cov_robust.T) / 2, resid, rank, sigma2, names)


def residualize(design, v) -> np.ndarray:
    """Residuals of the least-squares projection of each column of ``v`` on ``design``."""
    X = np.asarray(design, dtype=float)
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(diag[0], 1e-300)))
    if rank < X.shape[1]:
        raise RankDeficientError("projection design is rank deficient", [int(j) for j in piv[rank:]])
    v = np.asarray(v, dtype=float)
    return v - Q @ (Q.T @ v)


# --- logistic regression ------------------------------------------------------


@dataclass
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int
    loglik_trace: list[float] = field(default_factory=list)
    names: tuple[str, ...] = ()

    def predict(self, design) -> np.ndarray:
        return expit(np.asarray(design, dtype=float) @ self.coef)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


def _logistic_loglik(eta, y):
    # log p = -log(1+e^-eta); log(1-p) = -log(1+e^eta)
    return float(np.sum(y * -np.logaddexp(0, -eta) + (1 - y) * -np.logaddexp(0, eta)))


def logistic_fit(design, y, tol=1e-10, max_iter=100, names=None, separation_eta=20.0) -> LogisticFit:
    """Maximum likelihood logistic regression by Newton-Raphson (IRLS).

    Steps are halved whenever the log-likelihood would decrease, so the
    recorded trace is nondecreasing.  Iterates until the score norm is below
    ``tol``.  Separated data (fitted probabilities driven to 0 or 1) raise
    ``SeparationError``.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = _column_names(names, p)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be binary")
    if np.all(y == y[0]):
        raise SeparationError(f"response is constant ({int(y[0])}); logistic fit is not defined")
    # rank check on the design up front
    ols(X, np.zeros(n), names=names)
    beta = np.zeros(p)
    eta = X @ beta
    ll = _logistic_loglik(eta, y)
    trace = [ll]
    converged = False
    it = 0
    while True:
        mu = expit(eta)
        grad = X.T @ (y - mu)
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        if it >= max_iter:
            break
        W = mu * (1 - mu)
        H = (X * W[:, None]).T @ X
        try:
            step = scipy.linalg.solve(H, grad, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = _logistic_loglik(eta_c, y)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t /= 2
        if ll_c < ll:
            # no ascent possible: at the numerical optimum
            converged = np.linalg.norm(grad) < max(tol, 1e-6)
            break
        beta, eta, ll = cand, eta_c, ll_c
        trace.append(ll)
        it += 1
        if np.max(np.abs(eta)) > 2 * separation_eta:
            break
    if np.max(np.abs(eta)) > separation_eta:
        raise SeparationError(
            "complete or quasi-complete separation: fitted probabilities reached 0 or 1 "
            f"(max |linear predictor| = {np.max(np.abs(eta)):.1f}, coefficient norm = {np.linalg.norm(beta):.1f})"
        )
    mu = expit(eta)
    H = (X * (mu * (1 - mu))[:, None]).T @ X
    cov = np.linalg.inv(H)
    return LogisticFit(beta, (cov + cov.T) / 2, converged, it, trace, names)


# --- censoring weights --------------------------------------------------------


def km_survivor_left(times, is_event, at) -> np.ndarray:
    """Kaplan-Meier survivor function S(t-) evaluated at each point of ``at``."""
    times = np.asarray(times, dtype=float)
    is_event = np.asarray(is_event, dtype=bool)
    ev_times = np.unique(times[is_event])
    if ev_times.size == 0:
        return np.ones(len(np.atleast_1d(at)))
    sorted_t = np.sort(times)
    at_risk = len(times) - np.searchsorted(sorted_t, ev_times, side="left")
    deaths = np.bincount(np.searchsorted(ev_times, times[is_event]), minlength=ev_times.size)
    factors = 1.0 - deaths / at_risk
    surv = np.concatenate([[1.0], np.cumprod(factors)])
    # number of event times strictly before each query point
    k = np.searchsorted(ev_times, np.asarray(at, dtype=float), side="left")
    return surv[k]


def km_censoring_weights(sd: SurvivalDataset) -> np.ndarray:
    """Inverse probability of remaining free of competing events.

    Kaplan-Meier treats competing events as the "event" and everything else as
    censoring; unit i gets 1 / S(t_i-) unless it had a competing event, in
    which case it gets 0.
    """
    competing = sd.event == Event.COMPETING
    surv = km_survivor_left(sd.t, competing, sd.t)
    keep = ~competing
    if np.any(keep & (surv <= 0)):
        raise InestimableWeightError(
            "inestimable weight: competing-risk survivor estimate reached 0 before a retained unit's time"
        )
    w = np.zeros(sd.n)
    w[keep] = 1.0 / surv[keep]
    return w


# --- sandwich covariance ------------------------------------------------------


def sandwich_variance(
    moment_fn: Callable[[np.ndarray], np.ndarray],
    solution,
    jacobian_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    step: float = 1e-5,
) -> np.ndarray:
    """Sandwich covariance B^-1 M B^-T / n of an M-estimator.

    ``moment_fn(theta)`` returns the (n, k) per-unit estimating-function
    contributions; ``jacobian_fn(theta)`` returns the (k, k) Jacobian of their
    mean.  Without ``jacobian_fn`` central differences with step
    ``step * max(1, |theta_j|)`` are used.
    """
    theta = np.atleast_1d(np.asarray(solution, dtype=float))
    U = np.asarray(moment_fn(theta), dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    n, k = U.shape
    if jacobian_fn is not None:
        B = np.atleast_2d(np.asarray(jacobian_fn(theta), dtype=float))
    else:
        B = np.empty((k, len(theta)))
        for j in range(len(theta)):
            h = step * max(1.0, abs(theta[j]))
            e = np.zeros_like(theta)
            e[j] = h
            up = np.asarray(moment_fn(theta + e)).reshape(n, k).mean(axis=0)
            dn = np.asarray(moment_fn(theta - e)).reshape(n, k).mean(axis=0)
            B[:, j] = (up - dn) / (2 * h)
    if B.shape[0] != B.shape[1]:
        raise ValueError("sandwich needs as many estimating functions as parameters")
    sv = np.linalg.svd(B, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise EstimationError("singular Jacobian in sandwich variance")
    M = U.T @ U / n
    Binv = np.linalg.inv(B)
    V = Binv @ M @ Binv.T / n
    return (V + V.T) / 2


# --- bootstrap ----------------------------------------------------------------


@dataclass
class BootstrapResult:
    estimate: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    failures: int


def bootstrap(estimator, d, reps: int, seed, level=0.95) -> BootstrapResult:
    """Nonparametric bootstrap: resample units, refit, summarise.

    ``estimator(dataset)`` returns a scalar or vector.  Replicates that raise
    ``EstimationError`` are counted as failures; more than 20% failures is an
    error.
    """
    if reps < 50:
        raise ValueError(f"bootstrap needs at least 50 replicates, got {reps}")
    point = np.atleast_1d(np.asarray(estimator(d), dtype=float))
    n = len(d)
    draws = []
    failures = 0
    for r in range(reps):
        idx = child_rng(seed, r).integers(0, n, size=n)
        try:
            draws.append(np.atleast_1d(np.asarray(estimator(d.take(idx)), dtype=float)))
        except EstimationError as exc:
            log.debug("bootstrap replicate %d failed: %s", r, exc)
            failures += 1
    if failures > 0.2 * reps:
        raise EstimationError(f"{failures} of {reps} bootstrap replicates failed")
    draws = np.vstack(draws)
    tail = 100 * (1 - level) / 2
    return BootstrapResult(
        estimate=point,
        se=draws.std(axis=0, ddof=1),
        lower=np.percentile(draws, tail, axis=0),
        upper=np.percentile(draws, 100 - tail, axis=0),
        replicates=draws,
        failures=failures,
    )
