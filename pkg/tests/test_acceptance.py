"""Acceptance criteria 1-6; each test prints one PASS/FAIL line."""

import math
import time
from dataclasses import replace
from importlib.resources import files
from pathlib import Path

import numpy as np

from oracles import brute_correlation
from qkdlink.cli import keyrate_from_file
from qkdlink.config import load_config
from qkdlink.finite_key import tau_n
from qkdlink.harness import feedback_bench, simulate, sync_bench, sync_trial
from qkdlink.link import config_for_sync_probability
from qkdlink.optics import (
    IntensitySetting,
    binary_entropy,
    random_unitary,
    state_vectors,
)
from qkdlink.sync import admissibility_check, circular_correlation
from test_finite_key import brackets, random_instance

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
DATA = files("qkdlink") / "data"

REFERENCE_ROWS = {
    "counts_50km.json": dict(s1=5280589, phi=0.0224, l=3787713, skr=8.96e4),
    "counts_100km.json": dict(s1=5155932, phi=0.0177, l=3742736, skr=1.18e4),
    "counts_150km.json": dict(s1=5317027, phi=0.0270, l=3152614, skr=8.66e2),
}


def verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def rel(a, b):
    return abs(a - b) / abs(b)


class TestAcceptance:
    def test_criterion_1_keyrate_reproduction(self, emit):
        start = time.perf_counter()
        details, ok = [], True
        for name, ref in REFERENCE_ROWS.items():
            r = keyrate_from_file(DATA / name)
            errs = (rel(r["s_z1_lower"], ref["s1"]), rel(r["phi_z_upper"], ref["phi"]),
                    rel(r["key_length"], ref["l"]), rel(r["skr"], ref["skr"]))
            ok &= errs[0] <= 0.02 and errs[1] <= 0.10 and errs[2] <= 0.05 and errs[3] <= 0.05
            details.append(f"{name.split('_')[1].split('.')[0]}: s1 {errs[0]:.2%} phi {errs[1]:.2%} "
                           f"l {errs[2]:.2%} skr {errs[3]:.2%}")
        elapsed = time.perf_counter() - start
        ok &= elapsed < 1.0
        emit(f"criterion 1 key-rate reproduction: {verdict(ok)} ({'; '.join(details)}; {elapsed:.2f} s)")
        assert ok

    def test_criterion_2_qber_floor(self, emit, tmp_path):
        start = time.perf_counter()
        cfg = load_config(CONFIGS / "simulate_0km.yaml")
        summary = simulate(cfg, tmp_path)
        agg = summary["aggregate"]
        n_sift = agg["n_z_mu"] + agg["n_z_nu"] + agg["n_x_mu"] + agg["n_x_nu"]
        q = summary["qber"]["total"]
        elapsed = time.perf_counter() - start
        ok = n_sift >= 1e6 and 0.0025 <= q <= 0.0075 and elapsed < 120
        emit(f"criterion 2 intrinsic QBER floor: {verdict(ok)} (total QBER {q:.3%} over {n_sift} sifted bits, "
             f"{elapsed:.1f} s)")
        assert ok

    def test_criterion_3_synchronization(self, emit):
        start = time.perf_counter()
        cfg = load_config(CONFIGS / "sync_bench.yaml")
        assert cfg.sync.L == 50_000 and cfg.sync.M == 9
        assert cfg.bench.jitter_sigma == 30e-12 and cfg.link.dark_count_rate == 25.0
        trials = sync_bench(cfg, 29)
        # extra runs right at the single-frame boundary
        base = replace(cfg.link, fiber_length=0.0, timing_jitter_sigma=cfg.bench.jitter_sigma)
        edge = config_for_sync_probability(base, 2e-3)
        edge_loss = edge.fiber_length * base.fiber_attenuation
        boundary = [sync_trial(base, cfg.sync, edge_loss, 10.0, 900_000 + i, cfg.bench.max_frames)
                    for i in range(100)]
        runs = trials + boundary
        n_samples = 1_000_000
        locked = [t for t in runs if t.locked]
        exact = all(t.correct for t in locked)
        fft_ok = all(t.fft_period_error <= 4 * cfg.link.tau_a / n_samples for t in runs)
        sigma_ok = all(0.8 <= t.residual_sigma / t.jitter_sigma <= 1.2 for t in runs if t.residual_sigma > 0)
        adm = [t for t in runs if admissibility_check(cfg.sync.L, t.eta) == "ok"]
        rep = [t for t in runs if admissibility_check(cfg.sync.L, t.eta) != "ok"]
        single_rate = np.mean([t.single_frame_lock for t in adm]) if adm else 1.0
        multi_rate = np.mean([t.prescribed_lock for t in rep]) if rep else 1.0
        elapsed = time.perf_counter() - start
        ok = (len(runs) >= 200 and exact and fft_ok and sigma_ok and single_rate >= 0.95
              and multi_rate >= 0.95 and elapsed < 900)
        emit(f"criterion 3 synchronization: {verdict(ok)} ({len(runs)} runs, {len(locked)} locked, "
             f"wrong locks {sum(not t.correct for t in locked)}, single-frame {single_rate:.1%} of {len(adm)}, "
             f"prescribed multi-frame {multi_rate:.1%} of {len(rep)}, "
             f"max FFT error {max(t.fft_period_error for t in runs):.2e} s, {elapsed:.0f} s)")
        assert ok

    def test_criterion_4_feedback(self, emit, tmp_path):
        start = time.perf_counter()
        cfg = load_config(CONFIGS / "feedback_bench_50km.yaml")
        assert cfg.total_duration >= 2.4 * 3600
        res = feedback_bench(cfg, tmp_path)
        on, off = res["on"], res["off"]
        rec = on.get("recovery_times_s", [None])
        elapsed = time.perf_counter() - start
        ok = (not on["stalled"] and on["mean_qber_z"] <= 0.015 and on["mean_qber_x"] <= 0.015
              and all(r is not None and r <= 60 for r in rec) and off["max_qber"] > 0.30 and elapsed < 600)
        worst = max((r for r in rec if r is not None), default=math.nan)
        emit(f"criterion 4 polarization feedback: {verdict(ok)} (on: mean Z {on['mean_qber_z']:.2%} "
             f"X {on['mean_qber_x']:.2%}, {len(rec)} steps, slowest recovery {worst:.0f} s; "
             f"off: max {off['max_qber']:.1%}, final {off['final_qber']:.1%}; {elapsed:.0f} s)")
        assert ok

    def test_criterion_5_properties(self, emit, tmp_path):
        start = time.perf_counter()
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, 10_000)
        entropy = (np.max(np.abs(binary_entropy(x) - binary_entropy(1 - x))) <= 1e-12
                   and binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0
                   and abs(binary_entropy(0.5) - 1.0) <= 1e-12)
        norm = 0.0
        for _ in range(200):
            mu = rng.uniform(0.05, 1.0)
            it = IntensitySetting(mu, rng.uniform(0.01, 0.99) * mu, rng.uniform(0.05, 0.95), 0.5)
            norm = max(norm, abs(sum(tau_n(n, it) for n in range(60)) - 1.0))
        unit = 0.0
        states = state_vectors(np.arange(4) * 0.5 * np.pi)
        for _ in range(200):
            u = random_unitary(rng).matrix
            out = states @ u.T
            unit = max(unit, np.max(np.abs(np.linalg.norm(out, axis=1) - 1.0)))
        brng = np.random.default_rng(2024)
        bracket = sum(brackets(*random_instance(brng)) for _ in range(1000))
        corr_ok = True
        for _ in range(50):
            L = int(rng.integers(1, 257))
            code = rng.choice([-1, 1], size=L)
            rows = rng.integers(-3, 4, size=(int(rng.integers(1, 4)), L))
            corr_ok &= bool(np.array_equal(circular_correlation(rows, code), brute_correlation(rows, code)))
        cfg = replace(load_config(CONFIGS / "simulate_0km.yaml"), total_duration=2.0)
        simulate(cfg, tmp_path / "a")
        simulate(cfg, tmp_path / "b")
        det = (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
        elapsed = time.perf_counter() - start
        ok = entropy and norm <= 1e-9 and unit <= 1e-10 and bracket == 1000 and corr_ok and det and elapsed < 300
        emit(f"criterion 5 property suites: {verdict(ok)} (entropy {verdict(entropy)}, tau_n {norm:.1e}, "
             f"unitarity {unit:.1e}, bracketing {bracket}/1000, correlation {verdict(corr_ok)}, "
             f"determinism {verdict(det)}, {elapsed:.0f} s)")
        assert ok

    def test_criterion_6_end_to_end(self, emit, tmp_path):
        start = time.perf_counter()
        cfg = load_config(CONFIGS / "simulate_50km.yaml")
        summary = simulate(cfg, tmp_path)
        report = summary["keyrate"]
        ratio = report["skr"] / 8.96e4
        elapsed = time.perf_counter() - start
        ok = 0.5e7 <= report["n_z"] <= 2e7 and 0.5 <= ratio <= 2.0
        emit(f"criterion 6 end-to-end sanity: {verdict(ok)} (n_z {report['n_z']:.3g}, SKR {report['skr']:.4g} bps, "
             f"{ratio:.2f}x target, {elapsed:.0f} s)")
        assert ok
