import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from eevo.errors import ConfigError, InvalidInputError
from eevo.model import ModelConfig
from eevo.policy import (
    ConfidenceMeasure,
    ExitPolicy,
    ScheduleKind,
    ThresholdSchedule,
    confidence,
    should_exit,
    threshold_at,
)

MAX, TOP2 = ConfidenceMeasure.MAX_SOFTMAX, ConfidenceMeasure.TOP2_DIFF


def simplex(min_size=2, max_size=30):
    return hnp.arrays(np.float64, st.integers(min_size, max_size), elements=st.floats(0.0, 1.0)).filter(
        lambda w: w.sum() > 1e-3
    ).map(lambda w: w / w.sum())


class TestConfidence:
    def test_max_softmax_one_hot(self):
        assert confidence(np.array([0.0, 1.0, 0.0]), MAX) == 1.0

    def test_top2_diff(self):
        assert confidence(np.array([0.6, 0.3, 0.1]), TOP2) == pytest.approx(0.3)

    @pytest.mark.parametrize("n", [2, 5, 64])
    def test_top2_uniform_is_zero(self, n):
        assert confidence(np.full(n, 1.0 / n), TOP2) == 0.0

    def test_top2_needs_two_entries(self):
        with pytest.raises(InvalidInputError):
            confidence(np.array([1.0]), TOP2)

    def test_single_entry_max_softmax(self):
        assert confidence(np.array([1.0]), MAX) == 1.0

    def test_off_simplex_rejected(self):
        with pytest.raises(InvalidInputError):
            confidence(np.array([0.5, 0.6]), MAX)

    def test_string_measure(self):
        assert confidence(np.array([0.7, 0.3]), "top2_diff") == pytest.approx(0.4)

    def test_unknown_measure(self):
        with pytest.raises(ValueError):
            confidence(np.array([0.7, 0.3]), "entropy")

    @settings(max_examples=200, deadline=None)
    @given(simplex(), st.randoms(use_true_random=False))
    def test_properties(self, probs, rnd):
        perm = list(range(probs.size))
        rnd.shuffle(perm)
        for m in (MAX, TOP2):
            c = confidence(probs, m)
            assert 0.0 <= c <= 1.0
            assert confidence(probs[perm], m) == c
        assert confidence(probs, TOP2) <= confidence(probs, MAX)


class TestThreshold:
    def test_static_table_value(self):
        s = ThresholdSchedule(ScheduleKind.STATIC, lam=0.6)
        assert all(threshold_at(s, t, 20) == 0.6 for t in range(20))

    def test_decaying_first_token(self):
        s = ThresholdSchedule(ScheduleKind.DECAYING, lam=0.9, tau=4)
        assert threshold_at(s, 0, 10) == pytest.approx(0.91, abs=1e-12)

    def test_decaying_last_token_large_n(self):
        s = ThresholdSchedule(ScheduleKind.DECAYING, lam=0.9, tau=4)
        n = 100_000
        assert threshold_at(s, n - 1, n) == pytest.approx(0.81 + 0.1 * math.exp(-4), abs=1e-6)
        assert threshold_at(s, n - 1, n) == pytest.approx(0.8118, abs=1e-4)

    def test_tau_zero_constant(self):
        s = ThresholdSchedule(ScheduleKind.DECAYING, lam=0.5, tau=0)
        assert {threshold_at(s, t, 30) for t in range(30)} == {0.9 * 0.5 + 0.1}

    def test_clamped_to_unit_interval(self):
        s = ThresholdSchedule(ScheduleKind.DECAYING, lam=1.0, tau=0)
        assert threshold_at(s, 0, 1) == 1.0

    @pytest.mark.parametrize("t", [-1, 10, 11])
    def test_index_out_of_range(self, t):
        with pytest.raises(InvalidInputError):
            threshold_at(ThresholdSchedule(), t, 10)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 20), st.integers(1, 200))
    def test_decaying_non_increasing(self, lam, tau, n):
        s = ThresholdSchedule(ScheduleKind.DECAYING, lam=lam, tau=tau)
        values = [threshold_at(s, t, n) for t in range(n)]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert all(b <= a for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("kwargs", [dict(lam=-0.1), dict(lam=1.01), dict(tau=-1.0), dict(tau=float("inf"))])
    def test_invalid_schedule(self, kwargs):
        with pytest.raises(ConfigError):
            ThresholdSchedule(**kwargs)


class TestShouldExit:
    def test_inclusive_boundary(self):
        assert should_exit(0.99, 0.99)

    def test_zero_boundary(self):
        assert should_exit(0.0, 0.0)

    def test_below(self):
        assert not should_exit(0.5, 0.6)


class TestExitPolicy:
    def test_defaults(self):
        p = ExitPolicy()
        assert (p.measure, p.prune_exit, p.schedule.tau) == (TOP2, 2, 4.0)
        assert p.schedule.lam == 0.6

    def test_validate_for_model(self):
        c = ModelConfig(L=4, d_model=16, d_vocab=32, n_heads=2, d_ff=32)
        ExitPolicy(prune_exit=3, prune_size=32).validate_for(c)
        with pytest.raises(ConfigError):
            ExitPolicy(prune_exit=4, prune_size=8).validate_for(c)
        with pytest.raises(ConfigError):
            ExitPolicy(prune_exit=2, prune_size=33).validate_for(c)
        ExitPolicy(prune_exit=None, prune_size=999).validate_for(c)

    def test_top2_needs_two_pruned_rows(self):
        with pytest.raises(ConfigError):
            ExitPolicy(measure="top2_diff", prune_size=1)
        ExitPolicy(measure="max_softmax", prune_size=1)
        ExitPolicy(measure="top2_diff", prune_exit=None, prune_size=1)

    @pytest.mark.parametrize("kwargs", [dict(prune_exit=0), dict(prune_size=0), dict(max_new_tokens=-1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ExitPolicy(**kwargs)
