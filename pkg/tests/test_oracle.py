from fractions import Fraction

import numpy as np
import pytest

from auxeffects import DataError, oracle, synth
from auxeffects.synth import BinaryWorldConfig, ContinuousWorldConfig, MechanisticWorldConfig


def _exact_risk_table():
    # hand computation in rationals: counts I 500, TP 300, D 200; risks .1, .2, .3
    w = {"I": Fraction(500), "TP": Fraction(300), "D": Fraction(200)}
    r = {"I": Fraction(1, 10), "TP": Fraction(2, 10), "D": Fraction(3, 10)}
    cell = lambda ks: sum(w[k] * r[k] for k in ks) / sum(w[k] for k in ks)  # noqa: E731
    # arm 0 groups by s0 (s0 = 1 for TP, D); arm 1 by s1 (s1 = 1 only for D)
    return {(0, 0): cell(["I"]), (0, 1): cell(["TP", "D"]), (1, 0): cell(["I", "TP"]), (1, 1): cell(["D"])}


class TestBinaryPopulation:
    def test_cell_means_exact(self, binary_world):
        got = oracle.cell_means_population(binary_world)
        for key, val in _exact_risk_table().items():
            assert got[key] == pytest.approx(float(val), abs=1e-12)
        assert _exact_risk_table()[(0, 1)] == Fraction(24, 100)
        assert _exact_risk_table()[(1, 0)] == Fraction(1375, 10000)

    def test_naive_contrast(self, binary_world):
        assert oracle.naive_contrast_population(binary_world) == pytest.approx(0.06, abs=1e-12)

    def test_all_effects_zero(self, binary_world):
        eff = oracle.ps_effects_population(binary_world)
        assert eff == {"I": 0.0, "TP": 0.0, "TH": None, "D": 0.0}
        assert oracle.realized_effects_population(binary_world) == (0.0, 0.0)

    def test_no_selection_without_switchers(self):
        cfg = BinaryWorldConfig(stratum_counts={"I": 600, "TP": 0, "TH": 0, "D": 400})
        assert oracle.naive_contrast_population(cfg) == pytest.approx(0.0, abs=1e-15)

    def test_shared_risk_removes_bias(self):
        cfg = BinaryWorldConfig(mi_prob={"I": 0.2, "TP": 0.2, "TH": 0.2, "D": 0.2})
        assert oracle.naive_contrast_population(cfg) == pytest.approx(0.0, abs=1e-15)

    def test_selection_bias_decomposition(self, binary_world):
        bias = oracle.naive_contrast_population(binary_world) - oracle.realized_effects_population(binary_world)[1]
        assert bias == pytest.approx(0.06, abs=1e-12)


class TestContinuousPopulation:
    def test_setting_1a_effects(self, world_1a):
        assert oracle.ps_effects_population(world_1a) == pytest.approx({"I": 1, "TP": 1, "TH": 0.5, "D": 0.5})

    def test_setting_2a_effects(self, world_2a):
        assert oracle.ps_effects_population(world_2a) == pytest.approx({"I": 1, "TP": 1.5, "TH": 0.5, "D": 1})

    def test_setting_2a_single_potential(self, world_2a):
        assert oracle.single_potential_effects_population(world_2a, 1, 1) == pytest.approx(
            (0.05 * 0.5 + 0.3 * 1) / 0.35, abs=1e-12
        )
        assert oracle.single_potential_effects_population(world_2a, 1, 0) == pytest.approx(
            (0.25 * 1 + 0.4 * 1.5) / 0.65, abs=1e-12
        )
        assert oracle.realized_effects_population(world_2a) == pytest.approx((1.3077, 0.9286), abs=5e-5)

    def test_average_effect(self, world_1a):
        assert oracle.average_effect_population(world_1a) == pytest.approx(0.825, abs=1e-12)

    def test_principal_score(self, world_1a):
        mu1 = oracle.principal_score_population(world_1a, 1)
        expect = [(0.05 * 0.75 + 0.3 * 0.5) / 0.4125, (0.0125 + 0.15) / 0.5875]
        np.testing.assert_allclose(mu1, expect, atol=1e-12)
        np.testing.assert_allclose(mu1, [0.4545, 0.2766], atol=1e-4)

    def test_eas_population_single_arm_matches_score_regression(self, world_1a):
        # with one score per x the four-cell fit is exact; beta_a + m beta_mua is the
        # regression of the x-specific effect on the score
        fit = oracle.eas_population(world_1a, score_arm=1)
        b0, b1 = oracle.score_regression_population(world_1a, 1)
        assert fit["coef"][2] == pytest.approx(b0, abs=1e-10)
        assert fit["coef"][3] == pytest.approx(b1, abs=1e-10)

    def test_eas_population_received(self, world_1a, world_2a):
        assert oracle.eas_population(world_1a)["extrapolated"] == pytest.approx(-2.952, abs=1e-3)
        assert oracle.eas_population(world_2a)["extrapolated"] == pytest.approx(-2.153, abs=1e-3)


class TestSampleLevel:
    def test_large_sample_realized_1a(self, world_1a):
        cfg = ContinuousWorldConfig.setting("1a", n=1_000_000)
        complete = synth.generate(cfg, 1)
        d = synth.mask(complete, 0.5, 2)
        r0, r1 = oracle.realized_effects(d, complete)
        assert r0 == pytest.approx(1.0, abs=0.01)
        assert r1 == pytest.approx(0.5, abs=0.01)

    def test_large_sample_realized_2a(self):
        cfg = ContinuousWorldConfig.setting("2a", n=1_000_000)
        complete = synth.generate(cfg, 1)
        _, r1 = oracle.realized_effects(synth.mask(complete, 0.5, 2), complete)
        assert r1 == pytest.approx(0.93, abs=0.01)

    def test_binary_realized_null(self, binary_world):
        complete = synth.generate(binary_world, 3)
        assert oracle.realized_effects(synth.mask(complete, 0.5, 4), complete) == (0.0, 0.0)

    def test_randomization_consistency(self, data_1a):
        complete, d = data_1a
        diff = complete.y1 - complete.y0
        for s in (0, 1):
            target = oracle.single_potential_effects(complete, 1, s)
            got = oracle.realized_effects(d, complete)[s]
            m = (d.a == 1) & (d.s == s)
            assert abs(got - target) < 4 * diff.std() / np.sqrt(m.sum())

    @pytest.mark.parametrize("setting", ["1a", "2b"])
    def test_law_of_total_expectation(self, setting):
        complete = synth.generate(ContinuousWorldConfig.setting(setting, n=5000), 8)
        eff = oracle.ps_effects(complete)
        codes = complete.stratum_codes
        total = sum(eff[lab] * np.sum(codes == k) for k, lab in enumerate(oracle.LABELS) if eff[lab] is not None)
        assert total / complete.n == pytest.approx(float(np.mean(complete.y1 - complete.y0)), rel=1e-12, abs=1e-12)

    def test_law_of_total_expectation_population(self, world_2a):
        w, _ = oracle.stratum_table(world_2a)
        eff = oracle.ps_effects_population(world_2a)
        total = sum(w[k] * eff[lab] for k, lab in enumerate(oracle.LABELS))
        assert total == pytest.approx(oracle.average_effect_population(world_2a), abs=1e-14)

    def test_empty_strata_are_absent(self, binary_world):
        eff = oracle.ps_effects(synth.generate(binary_world, 0))
        assert eff["TH"] is None

    def test_by_x(self, data_1a):
        complete, _ = data_1a
        eff = oracle.ps_effects(complete, by_x=True)
        assert set(eff) == {(lab, (xv,)) for lab in oracle.LABELS for xv in (0.0, 1.0)}

    def test_naive_expectation_sample(self, binary_world):
        cfg = synth.world_from_dict({**synth.world_to_dict(binary_world), "n": 200_000})
        got = oracle.naive_contrast_expectation(synth.generate(cfg, 1))
        assert got == pytest.approx(0.06, abs=0.005)

    def test_naive_needs_binary(self, data_1a):
        with pytest.raises(DataError, match="binary"):
            oracle.naive_contrast_expectation(data_1a[0])

    def test_single_potential_empty(self, binary_world):
        complete = synth.generate(BinaryWorldConfig(stratum_counts={"I": 1, "TP": 0, "TH": 0, "D": 0}, n=20), 0)
        with pytest.raises(DataError, match="empty subgroup"):
            oracle.single_potential_effects(complete, 1, 1)


class TestMediation:
    def test_identity_population(self):
        cfg = MechanisticWorldConfig(gamma=(1, 2, 0))
        t = oracle.mediation_truth_population(cfg)
        assert t["q"] == pytest.approx(0.25)
        assert (t["psi0"], t["psi1"]) == pytest.approx((0.5, 1.0))
        assert t["residuals"] == pytest.approx([0.0, 0.0], abs=1e-12)

    def test_no_mediation(self):
        t = oracle.mediation_truth_population(MechanisticWorldConfig(gamma=(0.7, 0, 0)))
        assert (t["psi0"], t["psi1"]) == pytest.approx((0.7, 0.7))

    def test_stratum_effects(self):
        g1, g2, g3 = 0.4, 1.3, -0.6
        eff = oracle.ps_effects_population(MechanisticWorldConfig(gamma=(g1, g2, g3)))
        assert eff["D"] == pytest.approx(g1 + g3)
        assert eff["I"] == pytest.approx(g1)
        assert eff["TP"] == pytest.approx(g1 - g2)

    def test_identity_sample(self):
        cfg = MechanisticWorldConfig(gamma=(1, 2, 0), n=1_000_000)
        t = oracle.mediation_truth(synth.generate(cfg, 1), cfg.gamma)
        # exact in-sample: q is the sample share, so the residuals vanish
        assert t["residuals"] == pytest.approx([0.0, 0.0], abs=1e-10)
        assert t["psi0"] == pytest.approx(0.5, abs=0.01)


def test_truth_report_keys(world_1a, data_1a):
    rep = oracle.truth_report(world_1a, data_1a[0])
    assert set(rep) == {"population", "sample"}
    assert rep["population"]["realized"] == pytest.approx([1.0, 0.5])
    assert sum(rep["sample"]["stratum_counts"].values()) == data_1a[0].n
