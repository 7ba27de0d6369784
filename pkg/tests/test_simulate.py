import numpy as np
import pytest
from scipy.stats import ks_2samp

from bgcomp.simulate import (DgpConfig, dgp_model_spec, dgp_truth,
                             simulate_dgp, simulate_mglmm, warn_if_rho_ignored)


class TestDgpConfig:
    def test_rho_bound_enforced_when_heterogeneous(self):
        with pytest.raises(ValueError):
            DgpConfig(n=10, s_A=0.5, rho=1.0)

    def test_rho_free_when_no_heterogeneity(self):
        cfg = DgpConfig(n=10, s_A=0.0, rho=0.9)
        assert cfg.G2()[0, 1] == 0.0

    def test_rho_ignored_warning(self):
        with pytest.warns(UserWarning):
            assert warn_if_rho_ignored(DgpConfig(n=5, s_A=0.0, rho=0.5))

    def test_bad_scenario(self):
        with pytest.raises(ValueError):
            DgpConfig(n=10, nu="quadratic")


class TestSimulateDgp:
    def test_shape_and_monotonicity(self):
        data = simulate_dgp(DgpConfig(n=300, s_A=0.8, rho=0.4, seed=3))
        assert len(data) == 300
        for rec in data:
            assert rec.T == 2
            assert rec.m == (1, 1)
            assert rec.a[1] >= rec.a[0]

    def test_determinism(self):
        a = simulate_dgp(DgpConfig(n=50, s_A=0.5, rho=0.2, seed=11))
        b = simulate_dgp(DgpConfig(n=50, s_A=0.5, rho=0.2, seed=11))
        assert a == b

    def test_subject_streams_are_order_independent(self):
        big = simulate_dgp(DgpConfig(n=40, s_A=0.5, rho=0.2, seed=11))
        small = simulate_dgp(DgpConfig(n=10, s_A=0.5, rho=0.2, seed=11))
        assert big.subjects[:10] == small.subjects

    def test_null_scenario_removes_treatment_effect(self):
        # identical seeds, identical draws; outcomes differ only through nu
        per = simulate_dgp(DgpConfig(n=2000, s_A=0.0, seed=5, nu="per_dose"))
        nul = simulate_dgp(DgpConfig(n=2000, s_A=0.0, seed=5, nu="null"))
        dy = [p.y[1] - q.y[1] for p, q in zip(per, nul) if p.a == q.a]
        assert min(dy) >= 0.0

    def test_moments_match_truth(self):
        data = simulate_dgp(DgpConfig(n=20000, s_A=0.0, seed=9, nu="null"))
        y0 = np.array([r.y0 for r in data])
        V = np.array([r.V[0] for r in data])
        assert abs(y0.mean()) < 0.03
        assert abs(y0.std() - 1.0) < 0.03
        assert abs(V.mean() - 0.5) < 0.02


class TestSimulateMglmm:
    def test_matches_direct_dgp_distribution(self):
        # the benchmark process written as a ModelSpec must generate the same
        # law as the direct simulator: two-sample KS on the horizon outcome
        cfg = DgpConfig(n=10 ** 5, s_A=0.5, rho=0.5, seed=21)
        direct = simulate_dgp(cfg)
        generic = simulate_mglmm(dgp_model_spec(cfg), dgp_truth(cfg),
                                 cfg.n, 2, seed=10 ** 6 + 21)
        y2_direct = np.array([r.y[1] for r in direct])
        y2_generic = np.array([r.y[1] for r in generic])
        assert ks_2samp(y2_direct, y2_generic).pvalue > 0.01
        a_direct = np.array([r.a for r in direct]).mean(0)
        a_generic = np.array([r.a for r in generic]).mean(0)
        assert np.allclose(a_direct, a_generic, atol=0.01)

    def test_determinism(self):
        cfg = DgpConfig(n=30, s_A=0.5, rho=0.5, seed=2)
        spec, truth = dgp_model_spec(cfg), dgp_truth(cfg)
        assert simulate_mglmm(spec, truth, 30, 2, 4) == \
            simulate_mglmm(spec, truth, 30, 2, 4)

    def test_truth_validates_against_spec(self):
        cfg = DgpConfig(n=1, s_A=0.7, rho=-0.3)
        truth = dgp_truth(cfg)
        assert truth.G.shape == (2, 2)
        assert truth.G[1, 1] == pytest.approx(0.49)
        cfg0 = DgpConfig(n=1, s_A=0.0)
        assert dgp_truth(cfg0).G.shape == (1, 1)
