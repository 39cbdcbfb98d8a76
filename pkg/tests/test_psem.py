import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auxeffects import DataError, Dataset, Stratum, psem, synth
from auxeffects.psem import LABELS, PsModel
from auxeffects.synth import ContinuousWorldConfig


def _observed(cfg, seed=1):
    return synth.mask(synth.generate(cfg, seed), cfg.p_treat, seed + 300)


class TestCompatibleStrata:
    def test_cells(self):
        assert psem.compatible_strata(1, 1) == {Stratum.TH, Stratum.D}
        assert psem.compatible_strata(1, 0) == {Stratum.I, Stratum.TP}
        assert psem.compatible_strata(0, 1) == {Stratum.TP, Stratum.D}
        assert psem.compatible_strata(0, 0) == {Stratum.I, Stratum.TH}

    def test_monotone(self):
        assert psem.compatible_strata(1, 1, monotone=True) == {Stratum.D}


def _model(pi, means, sigma=1.0, delta=(0.0,), levels=((0.0,),)):
    return PsModel("I", np.array(levels), np.atleast_2d(pi), np.array(means, dtype=float), np.array(delta), sigma)


class TestEStep:
    def test_symmetric_posterior(self):
        d = Dataset(np.zeros((1, 1)), [1], [0], [1.0])  # compatible with I and TP
        m = _model([0.25] * 4, [[0, 0, 0, 0], [0, 2, 0, 0]])
        r, _ = psem.e_step(d, m)
        np.testing.assert_allclose(r[0], [0.5, 0.5, 0, 0], atol=1e-15)

    def test_flat_likelihood(self):
        d = Dataset(np.zeros((2, 1)), [1, 0], [1, 0], [0.3, -0.2])
        m = _model([0.1, 0.2, 0.3, 0.4], [[0, 1, 2, 3], [3, 2, 1, 0]], sigma=1e8)
        r, _ = psem.e_step(d, m)
        np.testing.assert_allclose(r[0], [0, 0, 0.3 / 0.7, 0.4 / 0.7], atol=1e-9)
        np.testing.assert_allclose(r[1], [0.1 / 0.4, 0, 0.3 / 0.4, 0], atol=1e-9)

    def test_single_compatible_stratum(self):
        d = Dataset(np.zeros((1, 1)), [1], [1], [5.0])
        m = _model([0.5, 0.2, 0.0, 0.3], np.zeros((2, 4)))
        r, _ = psem.e_step(d, m)
        np.testing.assert_array_equal(r[0], [0, 0, 0, 1])

    def test_incompatible_strata_exactly_zero(self, data_1a):
        _, d = data_1a
        start = psem.default_start(d)
        r, _ = psem.e_step(d, start)
        assert np.all(r[~psem.COMPAT[d.a, d.s]] == 0.0)
        np.testing.assert_allclose(r.sum(axis=1), 1.0)

    def test_loglik_matches_direct_mixture(self):
        d = Dataset(np.array([[0.0], [1.0], [1.0]]), [1, 0, 1], [0, 1, 1], [0.4, 1.3, -0.2])
        pi = np.array([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]])
        means = np.array([[0, 1, 2, 3], [1, 0.5, 0, -1.0]])
        m = PsModel("I", np.array([[0.0], [1.0]]), pi, means, np.array([0.3]), 0.8)
        direct = 0.0
        for i in range(3):
            a, s, y, xi = d.a[i], d.s[i], d.y[i], int(d.x[i, 0])
            tot = 0.0
            for k in range(4):
                if psem.COMPAT[a, s, k]:
                    mu = means[a, k] + 0.3 * xi
                    tot += pi[xi, k] * np.exp(-0.5 * ((y - mu) / 0.8) ** 2) / (0.8 * np.sqrt(2 * np.pi))
            direct += np.log(tot)
        assert psem.loglik(d, m) == pytest.approx(direct, abs=1e-12)


def _revealed(seed=0, n=400):
    """Data whose strata are known, with responsibilities set to indicators."""
    rng = np.random.default_rng(seed)
    k = rng.integers(0, 4, n)
    a = rng.integers(0, 2, n)
    s = np.where(a == 1, psem.S1[k], psem.S0[k])
    x = np.zeros((n, 0))
    y = rng.normal(size=n) + k + 2 * a
    resp = np.zeros((n, 4))
    resp[np.arange(n), k] = 1.0
    return Dataset(x, a, s, y), resp, k


class TestMStep:
    def test_revealed_strata_give_cell_means(self):
        d, resp, k = _revealed()
        m = psem.m_step(d, resp, "I")
        for a in (0, 1):
            for kk in range(4):
                sel = (d.a == a) & (k == kk)
                assert m.means[a, kk] == pytest.approx(d.y[sel].mean(), abs=1e-10)
        np.testing.assert_allclose(m.pi[0], np.bincount(k, minlength=4) / d.n)

    def test_revealed_sigma_is_pooled_residual_sd(self):
        d, resp, k = _revealed(seed=1)
        m = psem.m_step(d, resp, "I")
        fitted = m.means[d.a, k]
        assert m.sigma == pytest.approx(np.sqrt(np.mean((d.y - fitted) ** 2)), rel=1e-10)

    def test_variant_ii_weighted_contrast(self):
        # 12-unit fixture, strata revealed, no covariate
        k = np.array([0, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1])
        a = np.array([1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 0])
        y = np.array([3.0, 2.0, 1.0, 4.0, 1.5, 0.5, 2.5, 0.0, 3.5, 5.0, 2.0, 1.0])
        s = np.where(a == 1, psem.S1[k], psem.S0[k])
        d = Dataset(np.zeros((12, 0)), a, s, y)
        resp = np.zeros((12, 4))
        resp[np.arange(12), k] = 1.0
        m = psem.m_step(d, resp, "II")
        # constrained WLS by hand: four mean parameters (arm 0 per stratum) and one shared
        # contrast; the normal equation for tau gives the pooled within-stratum contrast
        n1 = {kk: ((a == 1) & (k == kk)).sum() for kk in (0, 1)}
        ybar = {(aa, kk): y[(a == aa) & (k == kk)].mean() for aa in (0, 1) for kk in (0, 1)}
        n0 = {kk: ((a == 0) & (k == kk)).sum() for kk in (0, 1)}
        w = {kk: n1[kk] * n0[kk] / (n1[kk] + n0[kk]) for kk in (0, 1)}
        tau = sum(w[kk] * (ybar[1, kk] - ybar[0, kk]) for kk in (0, 1)) / (w[0] + w[1])
        assert m.effects()["I=TP"] == pytest.approx(tau, abs=1e-12)
        eff = m.means[1] - m.means[0]
        assert eff[0] == pytest.approx(eff[1])
        assert np.isnan(eff[2]) and np.isnan(eff[3])  # no TH or D units

    def test_degenerate_cell_keeps_previous(self):
        d, resp, k = _revealed(seed=2)
        keep = k != 2
        d2 = d.take(np.flatnonzero(keep))
        prev = psem.m_step(d, resp, "I")
        m = psem.m_step(d2, resp[keep], "I", previous=prev)
        assert m.means[0, 2] == prev.means[0, 2] and m.means[1, 2] == prev.means[1, 2]
        assert "a=0,TH" in m.degenerate and "a=1,TH" in m.degenerate
        fresh = psem.m_step(d2, resp[keep], "I")
        assert np.isnan(fresh.means[0, 2])


def _fit_random(seed, variant):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(4) * 2)
    means = {a: dict(zip(LABELS, rng.normal(size=4) * 1.5 + a)) for a in (0, 1)}
    cfg = ContinuousWorldConfig(
        means_at_x0=means,
        stratum_probs=dict(zip(LABELS, probs)),
        px1_given_stratum=dict(zip(LABELS, rng.uniform(0.2, 0.8, 4))),
        n=int(rng.integers(200, 800)),
    )
    d = _observed(cfg, seed)
    return psem.fit(d, variant, max_iter=int(rng.integers(20, 400)), accelerate=bool(seed % 2))


@pytest.mark.parametrize("seed", range(100))
def test_loglik_monotone(seed):
    f = _fit_random(seed, "I" if seed % 3 else "II")
    tr = np.array(f.loglik_trace)
    assert np.all(np.diff(tr) >= -1e-9 * np.maximum(1.0, np.abs(tr[:-1])))


class TestFit:
    def test_truth_start_recovers_effects(self):
        cfg = ContinuousWorldConfig.setting("1a", n=20_000)
        d = _observed(cfg, 4)
        f = psem.fit(d, "II", start=psem.start_from_world(cfg, d, "II"))
        assert f.converged
        assert f.effects["I=TP"] == pytest.approx(1.0, abs=0.15)
        assert f.effects["TH=D"] == pytest.approx(0.5, abs=0.25)

    def test_no_latent_mixing_converges_immediately(self):
        probs = {"I": 0.6, "TP": 0.0, "TH": 0.0, "D": 0.4}
        cfg = ContinuousWorldConfig(stratum_probs=probs, n=3000)
        d = _observed(cfg, 5)
        start = psem.default_start(d, "I")
        pi = start.pi.copy()
        pi[:, [1, 2]] = 0.0
        pi /= pi.sum(axis=1, keepdims=True)
        start = PsModel("I", start.levels, pi, start.means, start.delta, start.sigma)
        f = psem.fit(d, "I", start=start, monotone=True, accelerate=False)
        assert f.converged and f.iterations <= 2
        # every unit's stratum is revealed by s; the fit is the stratified OLS
        for a in (0, 1):
            for s, k in ((0, 0), (1, 3)):
                sel = (d.a == a) & (d.s == s)
                pred = f.model.means[a, k] + d.x[sel] @ f.model.delta
                assert pred.mean() == pytest.approx(d.y[sel].mean(), abs=1e-6)

    def test_permutation_invariance(self, data_1a):
        _, d = data_1a
        start = psem.default_start(d)
        perm = np.random.default_rng(0).permutation(d.n)
        f1 = psem.fit(d, "I", start=start, max_iter=50)
        f2 = psem.fit(d.take(perm), "I", start=start, max_iter=50)
        np.testing.assert_allclose(f1.model.vector(), f2.model.vector(), rtol=1e-9, atol=1e-12)
        assert f1.iterations == f2.iterations

    def test_nonconvergence_flagged(self, data_1a):
        f = psem.fit(data_1a[1], "I", max_iter=3, accelerate=False)
        assert not f.converged
        assert any("did not converge" in w for w in f.warnings)

    def test_identifiability_warning(self):
        # only TP and D occur, in equal numbers; arm 0 mixes them in one cell as mirror-image
        # components and arm 1 gives both strata the same outcomes, so exchanging the arm-0
        # labels leaves the likelihood unchanged
        rng = np.random.default_rng(6)
        m = 1000
        e = rng.normal(scale=0.5, size=m)
        z = rng.normal(size=m)
        k = np.concatenate([np.full(m, 1), np.full(m, 3), np.full(m, 1), np.full(m, 3)])
        a = np.repeat([0, 0, 1, 1], m)
        y = np.concatenate([-2 + e, 2 - e, z, z])
        s = np.where(a == 1, psem.S1[k], psem.S0[k])
        d = Dataset(np.zeros((4 * m, 0)), a, s, y)
        start = PsModel("I", np.zeros((1, 0)), np.array([[0, 0.5, 0, 0.5]]),
                        np.array([[0, -1.0, 0, 1.0], [0, 0, 0, 0]]), np.zeros(0), 1.0)
        f = psem.fit(d, "I", start=start, check_identifiability=True, tol=1e-12)
        assert any("not identifiable" in w for w in f.warnings)

    def test_identifiable_fit_has_no_warning(self, data_1a):
        f = psem.fit(data_1a[1], "II", check_identifiability=True, max_iter=200)
        assert not any("not identifiable" in w for w in f.warnings)

    def test_per_cell_sigma(self, data_1a):
        f = psem.fit(data_1a[1], "I", per_cell_sigma=True, max_iter=200)
        assert np.shape(f.model.sigma) == (2, 4)
        assert np.all(np.diff(f.loglik_trace) >= -1e-9 * np.abs(f.loglik_trace[:-1]))

    def test_report_round_trip(self, data_1a):
        f = psem.fit(data_1a[1], "II", max_iter=100)
        rep = f.to_dict()
        again = PsModel.from_dict(rep["model"])
        np.testing.assert_allclose(again.vector(), f.model.vector())
        assert rep["loglik_trace_length"] == len(f.loglik_trace)

    def test_validation(self, data_1a):
        with pytest.raises(DataError):
            psem.fit(data_1a[1], "III")
        with pytest.raises(DataError):
            psem.fit(data_1a[1], "I", tol=0)
        with pytest.raises(DataError, match="discrete covariates"):
            d = data_1a[1]
            psem.fit(Dataset(np.random.default_rng(0).normal(size=(d.n, 1)), d.a, d.s, d.y))

    def test_swap_start_exchanges_within_cells(self):
        m = _model([0.25] * 4, [[0, 1, 2, 3], [4, 5, 6, 7]])
        sw = psem.swap_start(m)
        np.testing.assert_array_equal(sw.means, [[2, 3, 0, 1], [5, 4, 7, 6]])
