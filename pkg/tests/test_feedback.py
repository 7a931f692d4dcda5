import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdlink.codes import SyncCodeConfig
from qkdlink.feedback import (
    TRACE_HEADER,
    CompensatorState,
    EstimateUnavailable,
    FeedbackConfig,
    FeedbackStalled,
    QberEstimate,
    StatisticalLink,
    compensation_matrix,
    estimate_qber,
    feedback_step,
    recovery_times,
    run_feedback_loop,
)
from qkdlink.link import ChannelDriftModel, DriftMode, LinkConfig
from qkdlink.optics import extinction_error
from qkdlink.sifting import PublicTally

LINK = LinkConfig(fiber_length=50.0, fiber_attenuation=0.19914)
FLOOR = extinction_error(LINK.polarization_extinction)
phase = st.floats(-50, 50, allow_nan=False)


def one_step_link(magnitude, seed=0):
    drift = ChannelDriftModel(DriftMode.SCRAMBLER_STEPS, 300.0, magnitude, seed)
    return StatisticalLink(LINK, SyncCodeConfig(), drift)


def exact_estimator(link, t):
    def est(p):
        qz, qx = link.error_probabilities(p, t)
        return QberEstimate(qz, qx, 10**9, 10**9)

    return est


class TestCompensator:
    @given(st.tuples(phase, phase, phase, phase))
    def test_phases_stay_in_bounds_and_unitary(self, p):
        s = CompensatorState(phases=p)
        assert all(0 <= x < 2 * math.pi for x in s.phases)
        m = compensation_matrix(s.phases)
        np.testing.assert_allclose(m.conj().T @ m, np.eye(2), atol=1e-12)

    @given(st.tuples(phase, phase, phase, phase))
    def test_wrapping_does_not_change_matrix_up_to_sign(self, p):
        a = compensation_matrix(p)
        b = compensation_matrix(CompensatorState(phases=p).phases)
        assert min(np.abs(a - b).max(), np.abs(a + b).max()) < 1e-9

    def test_clipped_bounds(self):
        s = CompensatorState(phases=(5, -1, 0.5, 2), bounds=(0.0, 3.0))
        assert s.phases == (3.0, 0.0, 0.5, 2.0)

    def test_zero_phases_identity(self):
        np.testing.assert_allclose(compensation_matrix((0, 0, 0, 0)), np.eye(2))


class TestEstimate:
    def test_no_detections_unavailable(self):
        with pytest.raises(EstimateUnavailable):
            estimate_qber(PublicTally(), 1)

    def test_below_minimum_unavailable(self):
        with pytest.raises(EstimateUnavailable):
            estimate_qber(PublicTally(50, 1, 500, 3), 100)

    def test_aligned_link_at_floor(self, rng):
        link = one_step_link(0.0)
        est = estimate_qber(link.measure((0, 0, 0, 0), 0.0, 60.0, rng), 100)
        assert abs(est.qber_z - FLOOR) <= 3 * est.stderr_z
        assert abs(est.qber_x - FLOOR) <= 3 * est.stderr_x

    def test_rotation_error_follows_sin_squared(self):
        # rotation about the Y axis by angle e: Z error sin^2(e), X untouched
        eps = 0.2
        drift = ChannelDriftModel()
        link = StatisticalLink(LINK, SyncCodeConfig(), drift)
        qz, qx = link.error_probabilities((2 * eps, 0, 0, 0), 0.0)
        s2 = math.sin(eps) ** 2
        assert qz == pytest.approx((1 - FLOOR) * s2 + FLOOR * (1 - s2), rel=1e-9)
        assert qx == pytest.approx(FLOOR, abs=1e-12)


class TestStep:
    def test_no_update_below_threshold(self):
        cfg = FeedbackConfig()
        state = CompensatorState.from_config(cfg, (0.3, 0.2, 0.1, 0.0))
        calls = []

        def est(p):
            calls.append(p)
            return QberEstimate(0.005, 0.005, 1000, 1000)

        assert feedback_step(state, est, cfg) is state
        assert len(calls) == 1

    def test_noiseless_descent_is_monotone(self):
        cfg = FeedbackConfig()
        link = one_step_link(0.2, seed=3)
        est = exact_estimator(link, 300.0)
        state = CompensatorState.from_config(cfg)
        costs = [est(np.asarray(state.phases)).cost]
        for _ in range(50):
            new = feedback_step(state, est, cfg)
            if new is state:
                break
            state = new
            costs.append(est(np.asarray(state.phases)).cost)
        final = est(np.asarray(state.phases))
        assert final.qber_z < cfg.qber_threshold and final.qber_x < cfg.qber_threshold
        assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))

    def test_slew_limit(self):
        cfg = FeedbackConfig(learning_rate=100.0)
        link = one_step_link(0.6, seed=1)
        state = CompensatorState.from_config(cfg)
        new = feedback_step(state, exact_estimator(link, 300.0), cfg)
        d = np.angle(np.exp(1j * (np.array(new.phases) - np.array(state.phases))))
        assert np.all(np.abs(d) <= cfg.slew_limit + 1e-12)

    def test_rising_cost_halves_then_stalls(self):
        cfg = FeedbackConfig()
        cost = [0.1]

        def est(p):
            cost[0] += 0.001
            return QberEstimate(cost[0], cost[0], 1000, 1000)

        state = CompensatorState.from_config(cfg)
        lrs = []
        with pytest.raises(FeedbackStalled):
            for _ in range(100):
                state = feedback_step(state, est, cfg)
                lrs.append(state.learning_rate)
        # the first step sets the baseline; the third rise after it halves
        assert lrs[:4] == [0.8, 0.8, 0.8, 0.4]
        assert state.halvings == cfg.max_halvings - 1


class TestLoop:
    def test_trace_csv_header(self, rng):
        link = one_step_link(0.0)
        trace, _ = run_feedback_loop(link, CompensatorState(), FeedbackConfig(), 5.0, rng)
        lines = trace.to_csv().splitlines()
        assert lines[0] == ",".join(TRACE_HEADER)
        assert len(lines) == 6

    def test_static_channel_on_off_identical(self):
        link = StatisticalLink(LINK, SyncCodeConfig(), ChannelDriftModel())
        cfg = FeedbackConfig()
        kw = dict(duration=600.0, block_duration=10.0)
        on, _ = run_feedback_loop(link, CompensatorState(), cfg, rng=np.random.default_rng(5), enabled=True, **kw)
        off, _ = run_feedback_loop(link, CompensatorState(), cfg, rng=np.random.default_rng(5), enabled=False, **kw)
        assert on.to_csv() == off.to_csv()
        assert np.mean(on.qber_z) == pytest.approx(FLOOR, abs=5e-4)
        assert np.mean(on.qber_x) == pytest.approx(FLOOR, abs=5e-4)

    def test_static_channel_short_blocks_stay_at_floor(self):
        link = StatisticalLink(LINK, SyncCodeConfig(), ChannelDriftModel())
        cfg = FeedbackConfig()
        for enabled in (True, False):
            trace, _ = run_feedback_loop(link, CompensatorState(), cfg, 300.0, np.random.default_rng(6),
                                         enabled=enabled)
            worst = np.maximum(trace.qber_z, trace.qber_x)
            assert np.mean(worst) < 0.008 and np.max(worst) < 0.02

    def test_single_large_step_recovers(self):
        link = one_step_link(0.3, seed=2)
        cfg = FeedbackConfig()
        trace, _ = run_feedback_loop(link, CompensatorState.from_config(cfg), cfg, 600.0,
                                     np.random.default_rng(8))
        assert trace.step_times == [300.0]
        assert trace.recovery_times[0] is not None and trace.recovery_times[0] <= 60.0

    @pytest.mark.parametrize("seed", range(20))
    def test_random_walk_never_stalls(self, seed):
        drift = ChannelDriftModel(DriftMode.RANDOM_WALK, 60.0, 0.1, seed)
        link = StatisticalLink(LINK, SyncCodeConfig(), drift)
        cfg = FeedbackConfig()
        trace, _ = run_feedback_loop(link, CompensatorState.from_config(cfg), cfg, 1200.0,
                                     np.random.default_rng(seed))
        assert not trace.stalled
        assert np.mean(np.maximum(trace.qber_z, trace.qber_x)) < 0.03

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            link = one_step_link(0.15, seed=4)
            trace, state = run_feedback_loop(link, CompensatorState(), FeedbackConfig(), 700.0,
                                             np.random.default_rng(9))
            runs.append((trace.to_csv(), state))
        assert runs[0] == runs[1]


class TestRecovery:
    def test_recovery_times(self):
        t = [1, 2, 3, 4, 5, 6]
        qz = [0.005, 0.05, 0.03, 0.008, 0.05, 0.05]
        qx = [0.005] * 6
        assert recovery_times(t, qz, qx, [1.5, 4.5], 0.01) == [2.5, None]
