import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_stream, true_offset
from oracles import brute_correlation
from qkdlink.codes import SyncCodeConfig
from qkdlink.events import EventStream
from qkdlink.link import LinkConfig, config_for_sync_probability
from qkdlink.sync import (
    AmbiguousLock,
    NoLock,
    SyncFailed,
    SyncSolution,
    admissibility_check,
    brute_force_correlation,
    circular_correlation,
    lock_threshold,
    recover_offset,
    recover_period_fft,
    refine_period_lts,
    synchronize,
)

FFT_BOUND = 4 * 20e-9 / 1_000_000


def bench_link(**kw):
    base = dict(timing_jitter_sigma=30e-12)
    base.update(kw)
    return LinkConfig(**base)


class TestAdmissibility:
    def test_boundary(self):
        assert admissibility_check(50_000, 2e-3) == "ok"

    def test_repeat(self):
        assert admissibility_check(50_000, 5e-4) == ("repeat", 4)

    def test_trivial(self):
        assert admissibility_check(100, 1.0) == "ok"

    @given(st.integers(1, 10**6), st.floats(1e-7, 1.0))
    def test_prescribed_count_is_minimal(self, L, eta):
        res = admissibility_check(L, eta)
        if res == "ok":
            assert math.sqrt(L * eta) >= 10 - 1e-9
        else:
            k = res[1]
            assert math.sqrt(L * k * eta) >= 10 - 1e-9
            assert math.sqrt(L * (k - 1) * eta) < 10

    def test_invalid(self):
        with pytest.raises(ValueError):
            admissibility_check(0, 0.5)
        with pytest.raises(ValueError):
            admissibility_check(10, 0.0)


class TestPeriodFFT:
    def test_noiseless_exact_period(self, code):
        cfg = bench_link(timing_jitter_sigma=0.0, dark_count_rate=0.0, fiber_length=60)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=1)
        est = recover_period_fft(ev, cfg.tau_a)
        assert abs(est.tau_b - cfg.tau_a) <= FFT_BOUND

    def test_skewed_clock(self, code):
        cfg = bench_link(clock_skew_ppm=10.0, fiber_length=50)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=2)
        est = recover_period_fft(ev, cfg.tau_a)
        assert abs(est.tau_b - 20e-9 * (1 + 1e-5)) <= FFT_BOUND

    def test_dark_counts_only(self, code):
        cfg = bench_link(fiber_length=2000.0, dark_count_rate=20_000.0)
        ev, _ = make_stream(cfg, code, 5 * code.frame_length, seed=3)
        assert len(ev) > 1000
        with pytest.raises(NoLock):
            recover_period_fft(ev, cfg.tau_a)

    def test_too_few_events(self):
        ev = EventStream([0, 100, 200], [0, 0, 0], 1e-12)
        with pytest.raises(NoLock):
            recover_period_fft(ev, 20e-9)

    def test_threshold_falls_with_averaging(self):
        assert lock_threshold(1, 400) > lock_threshold(16, 400) > lock_threshold(64, 400) > 1


class TestPeriodLTS:
    def test_noiseless_exact(self, code):
        cfg = bench_link(timing_jitter_sigma=0.0, dark_count_rate=0.0, fiber_length=40)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=4)
        fit = refine_period_lts(ev, cfg.tau_a * (1 + 2e-9))
        assert fit.residual_sigma <= ev.resolution
        assert abs(fit.tau_b - cfg.tau_b) * code.frame_length < ev.resolution

    def test_jitter_only(self, code):
        cfg = bench_link(dark_count_rate=0.0, fiber_length=50, clock_skew_ppm=7.0)
        ev, _ = make_stream(cfg, code, code.frame_length * 2, seed=5)
        est = recover_period_fft(ev, cfg.tau_a)
        fit = refine_period_lts(ev, est.tau_b)
        assert 0.8 * 30e-12 <= fit.residual_sigma <= 1.2 * 30e-12
        assert fit.converged
        k = np.rint((ev.times() - fit.phase) / fit.tau_b).astype(np.int64)
        np.testing.assert_array_equal(k - k[0], ev.true_slots - ev.true_slots[0])

    def test_long_haul_with_dark_counts(self, code):
        cfg = bench_link(fiber_length=150, fiber_attenuation=0.19328, clock_skew_ppm=-12.0)
        ev, _ = make_stream(cfg, code, code.frame_length * 30, seed=6)
        assert np.any(ev.true_slots < 0)
        est = recover_period_fft(ev, cfg.tau_a)
        fit = refine_period_lts(ev, est.tau_b)
        sig = ev.true_slots >= 0
        k = np.rint((ev.times() - fit.phase) / fit.tau_b).astype(np.int64)
        ref = k[sig][0] - ev.true_slots[sig][0]
        assert np.mean(k[sig] - ev.true_slots[sig] == ref) >= 0.999
        assert 0.8 * 30e-12 <= fit.residual_sigma <= 1.2 * 30e-12

    def test_translation_invariance(self, code):
        cfg = bench_link(fiber_length=30)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=7)
        shift = 123_456_789
        a = synchronize(ev, cfg.tau_a, code)
        b = synchronize(ev.shifted(shift), cfg.tau_a, code)
        assert b.tau_b == pytest.approx(a.tau_b, abs=1e-21)
        assert b.t0_estimate - a.t0_estimate == pytest.approx(shift * ev.resolution, abs=1e-12)
        assert a.offset_slots == b.offset_slots


class TestCorrelation:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 256), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, L, rows, seed):
        rng = np.random.default_rng(seed)
        code = rng.choice([-1, 1], size=L)
        data = rng.integers(-5, 6, size=(rows, L))
        got = circular_correlation(data, code)
        np.testing.assert_array_equal(got, brute_correlation(data, code))

    def test_library_brute_force_agrees(self):
        rng = np.random.default_rng(0)
        code = rng.choice([-1, 1], size=31)
        data = rng.integers(-1, 2, size=(3, 31))
        np.testing.assert_array_equal(brute_force_correlation(data, code), brute_correlation(data, code))


class TestOffset:
    def test_lossless_exact(self, code):
        cfg = bench_link(fiber_length=0.0, dark_count_rate=0.0)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=8, start=0)
        sol = synchronize(ev, cfg.tau_a, code, t0_hint=ev.t0_true + 4e-4)
        assert sol.status == "locked" and sol.absolute
        assert sol.frames_used == 1
        assert sol.offset_slots == true_offset(ev, sol.t_ref, cfg.tau_b)
        assert sol.t0_estimate == pytest.approx(ev.t0_true, abs=1e-10)
        assert sol.correlation_peak >= 6 * sol.correlation_noise_sigma

    def test_offset_known_modulo_frame_without_hint(self, code):
        cfg = bench_link(fiber_length=20)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=9, start=7 * code.frame_length + 1234)
        sol = synchronize(ev, cfg.tau_a, code)
        assert not sol.absolute
        truth = true_offset(ev, sol.t_ref, cfg.tau_b)
        assert sol.offset_slots == truth % code.frame_length

    def test_boundary_single_frame(self, code):
        cfg = config_for_sync_probability(bench_link(), 2e-3)
        wins = 0
        for seed in range(100):
            ev, _ = make_stream(cfg, code, code.frame_length, seed=1000 + seed)
            try:
                sol = synchronize(ev, cfg.tau_a, code, t0_hint=ev.t0_true, frames=1)
            except (NoLock, SyncFailed, AmbiguousLock):
                continue
            assert sol.offset_slots == true_offset(ev, sol.t_ref, cfg.tau_b)
            wins += 1
        assert wins >= 95

    def test_long_haul_needs_repetition(self, code):
        cfg = bench_link(fiber_length=150, fiber_attenuation=0.19328)
        from qkdlink.link import sync_detection_probability

        res = admissibility_check(code.L, sync_detection_probability(cfg))
        assert res != "ok"
        k = res[1]
        ev, _ = make_stream(cfg, code, code.frame_length * (k + 2), seed=10)
        est = recover_period_fft(ev, cfg.tau_a)
        fit = refine_period_lts(ev, est.tau_b)
        with pytest.raises((SyncFailed, AmbiguousLock)):
            recover_offset(ev, fit, code, t0_hint=ev.t0_true, frames=1)
        sol = recover_offset(ev, fit, code, t0_hint=ev.t0_true, frames=k)
        assert sol.offset_slots == true_offset(ev, sol.t_ref, cfg.tau_b)
        inc = recover_offset(ev, fit, code, t0_hint=ev.t0_true)
        assert inc.frames_used > 1
        assert inc.offset_slots == sol.offset_slots

    def test_ambiguous_double_peak(self):
        # two equally strong copies of the code at different lags
        code = SyncCodeConfig(L=2000, M=1)
        cfg = bench_link(fiber_length=0.0, dark_count_rate=0.0, timing_jitter_sigma=0.0)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=11, start=0, force_photon=True)
        keep = ev.detectors < 2
        ev = ev.select(keep)
        fit = refine_period_lts(ev, cfg.tau_a)
        t = ev.timestamps
        half = code.frame_length // 2 * round(cfg.tau_a / ev.resolution)
        # make the second half a copy of the first half shifted by one code period of ~L/2 bits
        first = t < t[0] + half
        mirror = EventStream(np.concatenate([t[first], t[first] + half]),
                             np.concatenate([ev.detectors[first], ev.detectors[first]]), ev.resolution)
        with pytest.raises(AmbiguousLock):
            recover_offset(mirror, fit, code, frames=1)

    def test_solution_json_round_trip(self, code):
        cfg = bench_link(fiber_length=10)
        ev, _ = make_stream(cfg, code, code.frame_length, seed=12)
        sol = synchronize(ev, cfg.tau_a, code, t0_hint=ev.t0_true)
        again = SyncSolution.from_dict(json.loads(sol.to_json()))
        assert again == sol
