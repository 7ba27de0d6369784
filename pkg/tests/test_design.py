import numpy as np
import pytest

from bgcomp.design import (History, HistoryBatch, build_design_row,
                           likelihood_data)
from bgcomp.model import (ModelSpec, SpecError, SubjectRecord, baseline,
                          dose_indicator, intercept, interaction,
                          lagged_confounder, lagged_outcome, time_term,
                          treatment_indicator)


def benchmark_spec(v=0.25):
    return ModelSpec(
        outcome_features=(intercept(), baseline(0), time_term(),
                          dose_indicator(1), dose_indicator(2), lagged_outcome()),
        treatment_features=(baseline(0), time_term(), lagged_outcome()),
        v=v,
    )


class TestBuildDesignRow:
    def test_outcome_row_hand_case(self):
        # V=1, t=2, Y_1=0.5, dose reaches 1 at t=2
        spec = benchmark_spec()
        h = History(V=(1.0,), y0=0.0, y=(0.5, None), m=(1, 1), a=(0, 1), h=2)
        row = build_design_row(spec, "Y", h, 2)
        assert np.allclose(row, [1, 1, 2, 1, 0, 0.5])

    def test_treatment_row_hand_case(self):
        # V=0, t=1, Y_0=0
        spec = benchmark_spec()
        h = History(V=(0.0,), y0=0.0, y=(), m=(), a=(0,), h=0)
        row = build_design_row(spec, "A", h, 1)
        assert np.allclose(row, [0, 1, 0])

    def test_carry_forward_of_absent_outcome(self):
        spec = benchmark_spec()
        h = History(V=(0.0,), y0=0.7, y=(None, None), m=(0, 0), a=(0, 0), h=2)
        row = build_design_row(spec, "Y", h, 2)
        # lagged outcome falls back to the last present value, here y0
        assert row[-1] == 0.7

    def test_dose_capped_at_spec_max(self):
        spec = benchmark_spec()
        h = History(V=(0.0,), y0=0.0, y=(0.1, 0.2, 0.3), m=(1, 1, 1),
                    a=(1, 1, 1), h=3)
        row = build_design_row(spec, "Y", h, 3)
        # cumulative dose is 3 but the largest declared indicator is 2
        assert row[3] == 0 and row[4] == 1

    def test_disabled_confounder_channel_raises(self):
        spec = benchmark_spec()
        h = History(V=(0.0,), y0=0.0, y=(0.1,), m=(1,), a=(0,), h=1)
        with pytest.raises(SpecError):
            build_design_row(spec, "M", h, 1)

    def test_interaction_term(self):
        spec = ModelSpec(
            outcome_features=(intercept(), interaction(baseline(0), time_term())),
            treatment_features=(intercept(),))
        h = History(V=(2.0,), y0=0.0, y=(0.1, 0.2), m=(1, 1), a=(0, 0), h=2)
        row = build_design_row(spec, "Y", h, 2)
        assert row[1] == 4.0

    def test_future_interval_raises(self):
        spec = benchmark_spec()
        h = History(V=(0.0,), y0=0.0, y=(0.1,), m=(1,), a=(0,), h=1)
        with pytest.raises(ValueError):
            build_design_row(spec, "Y", h, 5)


class TestHistory:
    def test_from_record_truncation(self):
        rec = SubjectRecord("a", (1.0,), 0.2, (0.3, 0.4), (1, 1), (0, 1))
        h = History.from_record(rec, t=1, h=1)
        assert h.t == 1
        assert h.y == (0.3,)
        assert h.a == (0,)

    def test_treatment_path_may_extend_beyond_t(self):
        h = History(V=(0.0,), y0=0.0, y=(0.1,), m=(1,), a=(0, 1, 1), h=1)
        assert h.t == 1 and len(h.a) == 3

    def test_h_bounds(self):
        with pytest.raises(ValueError):
            History(V=(0.0,), y0=0.0, y=(0.1,), m=(1,), a=(0,), h=2)


class TestLikelihoodData:
    def spec(self):
        return ModelSpec(
            outcome_features=(intercept(), lagged_confounder(), lagged_outcome()),
            treatment_features=(intercept(),),
            confounder_features=(intercept(), lagged_confounder()),
            confounder_reff=(intercept(),),
            confounder_enabled=True,
            v=0.25,
        )

    def test_treatment_mask_stops_at_initiation(self):
        spec = self.spec()
        h = History(V=(), y0=0.0, y=(0.1, 0.2, 0.3), m=(1, 1, 1),
                    a=(0, 1, 1), h=3)
        ld = likelihood_data(spec, HistoryBatch.from_histories([h]))
        # intervals 1 and 2 contribute (decision at s=2 included), 3 does not
        assert ld.wA[0].tolist() == [1, 1, 0]
        assert ld.av[0].tolist() == [0, 1, 0]

    def test_treatment_mask_capped_at_h(self):
        spec = self.spec()
        h = History(V=(), y0=0.0, y=(0.1, 0.2), m=(1, 1), a=(0, 0, 1), h=1)
        ld = likelihood_data(spec, HistoryBatch.from_histories([h]))
        assert ld.wA[0].tolist() == [1, 0]

    def test_outcome_mask_follows_presence(self):
        spec = self.spec()
        h = History(V=(), y0=0.0, y=(0.1, None), m=(1, 0), a=(0, 0), h=2)
        ld = likelihood_data(spec, HistoryBatch.from_histories([h]))
        assert ld.wY[0].tolist() == [1, 0]
        assert ld.wM[0].tolist() == [1, 1]

    def test_padding_across_subjects(self):
        spec = self.spec()
        h1 = History(V=(), y0=0.0, y=(0.1,), m=(1,), a=(0,), h=1)
        h2 = History(V=(), y0=0.0, y=(0.1, 0.2, 0.3), m=(1, 1, 1),
                     a=(0, 0, 0), h=3)
        ld = likelihood_data(spec, HistoryBatch.from_histories([h1, h2]))
        assert ld.wY.shape == (2, 3)
        assert ld.wY[0].tolist() == [1, 0, 0]
        assert ld.wY[1].tolist() == [1, 1, 1]

    def test_lagged_confounder_uses_previous_interval(self):
        spec = self.spec()
        h = History(V=(), y0=0.0, y=(0.1, 0.2), m=(0, 1), a=(0, 0), h=2)
        ld = likelihood_data(spec, HistoryBatch.from_histories([h]))
        # interval 1 sees the structural M_0 = 1; interval 2 sees M_1 = 0
        assert ld.XM[0, 0, 1] == 1.0
        assert ld.XM[0, 1, 1] == 0.0


class TestHistoryBatch:
    def test_append_step(self):
        hb = HistoryBatch(np.zeros((2, 1)), np.zeros(2), 3)
        hb.append_step(np.array([1, 0]), np.array([1, 1]),
                       np.array([0.5, 0.6]), present=np.array([True, False]))
        assert hb.t.tolist() == [1, 1]
        assert hb.a[:, 0].tolist() == [1, 0]
        assert np.isnan(hb.y[1, 0]) and hb.y[0, 0] == 0.5

    def test_copy_is_independent(self):
        hb = HistoryBatch(np.zeros((1, 1)), np.zeros(1), 2)
        cp = hb.copy(extra=1)
        cp.a[0, 0] = 1
        assert hb.a[0, 0] == 0
        assert cp.a.shape[1] == 3
