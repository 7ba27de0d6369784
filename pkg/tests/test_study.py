import numpy as np
import pytest

from bgcomp.inference import McmcConfig
from bgcomp.simulate import DgpConfig
from bgcomp.study import (GridError, GridSpec, closed_form_ate, oracle_ate_mc,
                          run_grid)


class TestClosedFormAte:
    def test_paper_values(self):
        assert closed_form_ate(1, 1) == pytest.approx(1.2)
        assert closed_form_ate(0, 1) == pytest.approx(0.5)
        assert closed_form_ate(0, 0) == 0.0

    def test_null_scenario(self):
        assert closed_form_ate(1, 1, "null") == 0.0

    def test_nonmonotone_pair_rejected(self):
        with pytest.raises(ValueError):
            closed_form_ate(1, 0)


class TestOracleAteMc:
    def test_agrees_with_closed_form(self):
        for pair in ((1, 1), (0, 1), (0, 0)):
            est, se = oracle_ate_mc(DgpConfig(n=1, s_A=0.5, rho=0.5),
                                    pair, (0, 0), 10 ** 5, seed=4)
            assert abs(est - closed_form_ate(*pair)) < 3 * se + 1e-12

    def test_invariant_to_heterogeneity_setting(self):
        est, se = oracle_ate_mc(DgpConfig(n=1, s_A=1.0, rho=0.9),
                                (1, 1), (0, 0), 10 ** 5, seed=5)
        assert abs(est - 1.2) < 3 * se

    def test_null_scenario_is_zero(self):
        est, se = oracle_ate_mc(DgpConfig(n=1, s_A=0.5, rho=0.5, nu="null"),
                                (1, 1), (0, 0), 10 ** 5, seed=6)
        assert abs(est) < 3 * se

    def test_minimum_sample_size(self):
        with pytest.raises(ValueError):
            oracle_ate_mc(DgpConfig(n=1), (1, 1), (0, 0), 100)


def tiny_grid(**kw):
    base = dict(settings=((0.0, 0.0),), shat_list=(0.0, 0.3), replicates=2,
                n=120, mcmc=McmcConfig(150, 150), seed=42)
    base.update(kw)
    return GridSpec(**base)


@pytest.fixture(scope="module")
def result():
    return run_grid(tiny_grid())


class TestRunGrid:

    def test_table_shapes(self, result):
        for table in (result.mse(), result.coverage(), result.mse_ratio()):
            assert len(table) == 2
            assert not table.duplicated(["s_A", "rho", "shat_A"]).any()
        assert (result.coverage()["value"].between(0, 1)).all()
        assert (result.mse()["value"] >= 0).all()

    def test_ratio_reference_is_largest_assumed_scale(self, result):
        ratios = result.mse_ratio()
        ref = ratios[ratios["shat_A"] == ratios["shat_A"].max()]
        assert np.allclose(ref["value"], 1.0)

    def test_deterministic(self, result):
        again = run_grid(tiny_grid())
        assert result.rows.equals(again.rows)

    def test_same_data_across_assumed_scales(self, result):
        # the dataset seed ignores shat, so estimates across shat values are
        # computed on identical replicate datasets (correlated, same count)
        rows = result.rows
        assert len(rows[rows.shat_A == 0.0]) == len(rows[rows.shat_A == 0.3])

    def test_csv_emission(self, result, tmp_path):
        result.save(tmp_path, manifest={"seed": 42})
        for name in ("grid_mse.csv", "grid_coverage.csv",
                     "grid_mse_ratio.csv", "grid_manifest.json"):
            assert (tmp_path / name).exists()

    def test_failure_policy(self, monkeypatch):
        import bgcomp.study as study

        def boom(*a, **kw):
            raise RuntimeError("synthetic replicate failure")

        monkeypatch.setattr(study, "run_replicate", boom)
        with pytest.raises(GridError):
            study.run_grid(tiny_grid())

    def test_invalid_scenario(self):
        with pytest.raises(ValueError):
            tiny_grid(scenario="cubic")
