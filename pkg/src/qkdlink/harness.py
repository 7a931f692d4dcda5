"""End-to-end runs: simulate, replay, and the sync/feedback benchmarks.

Every random draw descends from the run seed through fixed stream labels,
so identical configs give byte-identical ``summary.json`` files. Wall-clock
timing goes to a separate ``timing.json`` for the same reason.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .events import EventStream, atomic_write_bytes, config_hash, read_dump, write_dump
from .feedback import (
    CompensatorState,
    FeedbackStalled,
    FeedbackTrace,
    StatisticalLink,
    _probe_estimator,
    _safe_estimate,
    feedback_step,
    recovery_times,
    run_feedback_loop,
)
from .finite_key import KeyRateReport, SiftedCounts, key_rate_report
from .link import ChannelDriftModel, LinkConfig, PulseTrain, sync_detection_probability, transmit
from .optics import IntensitySetting
from .sifting import PublicTally, sift
from .sync import (
    SyncError,
    admissibility_check,
    recover_offset,
    recover_period_fft,
    refine_period_lts,
)

# stream labels for np.random.default_rng([seed, label, ...])
_T0_STREAM = 0
_BLOCK_STREAM = 1
_FEEDBACK_STREAM = 2
_BENCH_STREAM = 3

TABLE_HEADER = ("L_km", "loss_db", "mu", "nu", "n_z", "t_s", "qber_z", "phi_z_upper", "s_z1_lower", "skr_bps")


def table_row(report: KeyRateReport, length_km: float, loss_db: float, it: IntensitySetting) -> str:
    """One CSV line in the usual overview column order."""
    vals = (f"{length_km:g}", f"{loss_db:.3f}", f"{it.mu:g}", f"{it.nu:g}", str(report.n_z),
            f"{report.t:.6g}", f"{report.qber_z:.6f}", f"{report.phi_z_upper:.6f}",
            f"{report.s_z1_lower:.1f}", f"{report.skr:.6g}")
    return ",".join(vals)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def run_t0(cfg: RunConfig) -> tuple[float, float]:
    """Bob's clock at Alice's slot 0 and the coarse classical announcement of it."""
    rng = np.random.default_rng([cfg.seed, _T0_STREAM])
    t0 = float(rng.uniform(0.0, 1e6 * cfg.link.tau_a))
    err = cfg.link.coarse_timing_error
    hint = t0 + float(rng.uniform(-err, err))
    return t0, hint


def block_train(cfg: RunConfig, b: int) -> PulseTrain:
    return PulseTrain(cfg.seed, b * cfg.slots_per_block, cfg.slots_per_sample, cfg.sync,
                      cfg.link.intensities, cfg.link.probe_fraction)


def _check_sampling(cfg: RunConfig) -> None:
    if cfg.slots_per_sample < cfg.sync.frame_length:
        raise ConfigError(
            f"sample_duration: {cfg.sample_duration} s holds fewer slots than one sync frame "
            f"({cfg.sync.frame_length * cfg.link.tau_a:g} s)"
        )


@dataclass
class BlockResult:
    index: int
    time: float
    status: str
    counts: SiftedCounts
    public: PublicTally
    categories: dict
    sync: dict | None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "time_s": self.time,
            "status": self.status,
            "counts": asdict(self.counts),
            "public": asdict(self.public),
            "categories": self.categories,
            "sync": self.sync,
            "error": self.error,
        }


def process_block(events: EventStream, cfg: RunConfig, b: int, hint: float) -> BlockResult:
    """Synchronize and sift one block of events."""
    t_credit = cfg.sample_duration
    train = block_train(cfg, b)
    try:
        est = recover_period_fft(events, cfg.link.tau_a)
        fit = refine_period_lts(events, est.tau_b)
        sol = recover_offset(events, fit, cfg.sync, t0_hint=hint)
    except SyncError as exc:
        return BlockResult(b, b * cfg.block_duration, "failed", SiftedCounts.zero(t_credit), PublicTally(),
                           {}, None, f"{type(exc).__name__}: {exc}")
    sol = replace(sol, tau_b_fft=est.tau_b)
    res = sift(events, sol, train, t_credit)
    return BlockResult(b, b * cfg.block_duration, "locked", res.counts, res.public, res.categories, sol.to_dict())


def _aggregate(blocks: list[BlockResult], t_total: float) -> SiftedCounts:
    """Sum of per-block counts, credited with the total sampled time."""
    sums = dict.fromkeys(("n_z_mu", "n_z_nu", "n_x_mu", "n_x_nu", "m_z_mu", "m_z_nu", "m_x_mu", "m_x_nu"), 0)
    for blk in blocks:
        for k in sums:
            sums[k] += getattr(blk.counts, k)
    return SiftedCounts(**sums, t=t_total)


def _summary(cfg: RunConfig, blocks: list[BlockResult], trace: FeedbackTrace, stalls: list) -> dict:
    t_total = cfg.sample_duration * len(blocks)
    agg = _aggregate(blocks, t_total)
    report = key_rate_report(agg, cfg.link.intensities, cfg.security)
    locked = [b for b in blocks if b.status == "locked"]
    sigma = [b.sync["residual_sigma"] for b in locked]
    n_sift = agg.n_z + agg.n_x
    total_qber = (agg.m_z + agg.m_x) / n_sift if n_sift else 0.0
    return {
        "name": cfg.name,
        "seed": cfg.seed,
        "config_sha256": config_hash(cfg.to_yaml()).hex(),
        "n_blocks": len(blocks),
        "acquisition_time_s": t_total,
        "aggregate": asdict(agg),
        "qber": {"z": agg.qber_z, "x": agg.qber_x, "total": total_qber},
        "keyrate": report.to_dict(),
        "sync": {
            "locked_blocks": len(locked),
            "failed_blocks": [{"index": b.index, "error": b.error} for b in blocks if b.status != "locked"],
            "max_frames_used": max((b.sync["frames_used"] for b in locked), default=0),
            "mean_residual_sigma": float(np.mean(sigma)) if sigma else 0.0,
        },
        "feedback": {
            "enabled": cfg.feedback_enabled,
            "stalls": stalls,
            "recovery_times_s": trace.recovery_times,
        },
        "table_header": ",".join(TABLE_HEADER),
        "table_row": table_row(report, cfg.link.fiber_length, cfg.link.channel_loss_db, cfg.link.intensities),
        "blocks": [b.to_dict() for b in blocks],
    }


def simulate(cfg: RunConfig, out_dir=None, progress=None) -> dict:
    """Run the block pipeline and write ``summary.json``, ``qber_trace.csv`` and ``keyrate.json``.

    Returns the summary dictionary.
    """
    _check_sampling(cfg)
    wall = time.perf_counter()
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0, hint = run_t0(cfg)
    drift = cfg.drift.build()
    stat_link = StatisticalLink(cfg.link, cfg.sync, drift)
    probe_rng = np.random.default_rng([cfg.seed, _FEEDBACK_STREAM])
    fcfg = cfg.feedback
    state = CompensatorState.from_config(fcfg)
    trace = FeedbackTrace()
    blocks, dumps, stalls = [], [], []
    pending = PublicTally()
    last = (0.0, 0.0)
    sub = cfg.block_duration / 9

    for b in range(cfg.n_blocks):
        rng = np.random.default_rng([cfg.seed, _BLOCK_STREAM, b])
        train = block_train(cfg, b)
        events = transmit(train, cfg.link, drift, state.unitary(), rng, t0=t0)
        if cfg.dump_events:
            dumps.append(events)
        blk = process_block(events, cfg, b, hint)
        blocks.append(blk)
        t_end = (b + 1) * cfg.block_duration
        recorded = state.phases

        tally = pending + blk.public
        est = _safe_estimate(tally, fcfg)
        if est is None:
            pending = tally
        else:
            pending = PublicTally()
            last = (est.qber_z, est.qber_x)
            if cfg.feedback_enabled:
                below = est.qber_z < fcfg.qber_threshold and est.qber_x < fcfg.qber_threshold
                if below:
                    state = replace(state, learning_rate=fcfg.learning_rate, increases=0, halvings=0, last_cost=None)
                else:
                    try:
                        probe = _probe_estimator(stat_link, est, b * cfg.block_duration, sub, probe_rng)
                        state = feedback_step(state, probe, fcfg)
                    except FeedbackStalled as exc:
                        stalls.append({"index": b, "error": str(exc)})
                        state = replace(state, learning_rate=fcfg.learning_rate, increases=0,
                                        halvings=0, last_cost=None)
        trace.append(t_end, *last, recorded)
        if progress:
            progress(b, blk)

    trace.step_times = [float(s) for s in drift.step_times(cfg.n_blocks * cfg.block_duration)
                        if s < cfg.n_blocks * cfg.block_duration]
    trace.recovery_times = recovery_times(trace.times, trace.qber_z, trace.qber_x, trace.step_times,
                                          fcfg.qber_threshold)
    summary = _summary(cfg, blocks, trace, stalls)
    atomic_write_bytes(out / "summary.json", _json_bytes(summary))
    atomic_write_bytes(out / "keyrate.json", _json_bytes(summary["keyrate"]))
    trace.write_csv(out / "qber_trace.csv")
    if cfg.dump_events:
        write_dump(out / "events.bin", dumps, config_hash(cfg.to_yaml()))
    atomic_write_bytes(out / "timing.json", _json_bytes({"wall_clock_s": time.perf_counter() - wall}))
    return summary


def replay(dump_path, cfg: RunConfig) -> dict:
    """Re-synchronize and re-sift a dumped run; returns aggregate counts and key-rate report.

    Alice's pulse records are regenerated from the run seed, as she would
    read them from her own memory.
    """
    streams, stored = read_dump(dump_path)
    if stored != config_hash(cfg.to_yaml()):
        raise ConfigError("event dump was recorded with a different configuration")
    _, hint = run_t0(cfg)
    blocks = [process_block(ev, cfg, b, hint) for b, ev in enumerate(streams)]
    agg = _aggregate(blocks, cfg.sample_duration * len(blocks))
    report = key_rate_report(agg, cfg.link.intensities, cfg.security)
    return {"aggregate": asdict(agg), "keyrate": report.to_dict()}


@dataclass(frozen=True)
class SyncTrial:
    loss_db: float
    seed: int
    eta: float
    prescribed_frames: int
    skew_ppm: float
    n_events: int
    single_frame_lock: bool
    prescribed_lock: bool
    locked: bool
    correct: bool
    frames_used: int
    fft_period_error: float
    period_error: float
    residual_sigma: float
    jitter_sigma: float
    error: str = ""


def _slot_truth(events: EventStream, t_ref: float, tau_b: float) -> int:
    return int(round((t_ref - events.t0_true) / tau_b))


def sync_trial(base: LinkConfig, sync_cfg, loss_db: float, skew_ppm: float, seed: int,
               max_frames: int = 64, frames: int | None = None) -> SyncTrial:
    """One Monte Carlo sync run against simulator ground truth.

    Runs single-frame recovery, recovery with the prescribed frame count,
    and incremental accumulation; ``correct`` refers to the incremental
    result, which is what a live receiver would use.
    """
    link = replace(base, fiber_length=loss_db / base.fiber_attenuation, clock_skew_ppm=skew_ppm)
    eta = sync_detection_probability(link)
    adm = admissibility_check(sync_cfg.L, eta)
    k = 1 if adm == "ok" else adm[1]
    n_frames = frames if frames is not None else min(max_frames, k + 1)
    rng = np.random.default_rng([seed, _BENCH_STREAM])
    start = int(rng.integers(0, 2**40))
    train = PulseTrain(seed, start, n_frames * sync_cfg.frame_length, sync_cfg, link.intensities, link.probe_fraction)
    events = transmit(train, link, ChannelDriftModel(), CompensatorState().unitary(), rng)
    hint = events.t0_true + rng.uniform(-link.coarse_timing_error, link.coarse_timing_error)
    blank = dict(single_frame_lock=False, prescribed_lock=False, locked=False, correct=False, frames_used=0,
                 fft_period_error=math.inf, period_error=math.inf, residual_sigma=0.0)
    common = dict(loss_db=loss_db, seed=seed, eta=eta, prescribed_frames=k, skew_ppm=skew_ppm,
                  n_events=len(events), jitter_sigma=link.timing_jitter_sigma)
    try:
        est = recover_period_fft(events, link.tau_a)
        fit = refine_period_lts(events, est.tau_b)
    except SyncError as exc:
        return SyncTrial(**common, **blank, error=f"{type(exc).__name__}: {exc}")

    def attempt(n):
        try:
            sol = recover_offset(events, fit, sync_cfg, t0_hint=hint, frames=n)
        except SyncError:
            return False
        return sol.offset_slots == _slot_truth(events, sol.t_ref, link.tau_b)

    single = attempt(1)
    prescribed = attempt(k) if k <= n_frames else False
    locked = correct = False
    used = 0
    err = ""
    try:
        sol = recover_offset(events, fit, sync_cfg, t0_hint=hint)
        locked = True
        used = sol.frames_used
        correct = sol.offset_slots == _slot_truth(events, sol.t_ref, link.tau_b)
    except SyncError as exc:
        err = f"{type(exc).__name__}: {exc}"
    return SyncTrial(**common, single_frame_lock=single, prescribed_lock=prescribed, locked=locked,
                     correct=correct, frames_used=used, fft_period_error=abs(est.tau_b - link.tau_b),
                     period_error=abs(fit.tau_b - link.tau_b), residual_sigma=fit.residual_sigma, error=err)


def sync_bench(cfg: RunConfig, trials: int) -> list[SyncTrial]:
    """Monte Carlo over seeds at every loss point of ``cfg.bench``."""
    bench = cfg.bench
    base = replace(cfg.link, fiber_length=0.0, timing_jitter_sigma=bench.jitter_sigma)
    out = []
    for li, loss in enumerate(bench.losses):
        for i in range(trials):
            seed = cfg.seed * 1_000_003 + li * 10_007 + i
            skew = float(np.random.default_rng([seed, 7]).uniform(*bench.skew_ppm))
            out.append(sync_trial(base, cfg.sync, loss, skew, seed, bench.max_frames))
    return out


BENCH_HEADER = ("loss_dB", "trials", "eta", "prescribed_frames", "frames_needed", "lock_rate",
                "single_frame_lock_rate", "prescribed_lock_rate", "wrong_locks", "period_error")


def sync_bench_csv(trials: list[SyncTrial]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    losses = sorted({t.loss_db for t in trials})
    for loss in losses:
        group = [t for t in trials if t.loss_db == loss]
        locked = [t for t in group if t.locked]
        w.writerow([
            f"{loss:g}", len(group), f"{group[0].eta:.4g}", group[0].prescribed_frames,
            f"{np.mean([t.frames_used for t in locked]) if locked else 0:.2f}",
            f"{sum(t.correct for t in group) / len(group):.3f}",
            f"{sum(t.single_frame_lock for t in group) / len(group):.3f}",
            f"{sum(t.prescribed_lock for t in group) / len(group):.3f}",
            sum(t.locked and not t.correct for t in group),
            f"{max(t.fft_period_error for t in group):.3e}",
        ])
    return buf.getvalue()


def feedback_bench(cfg: RunConfig, out_dir=None) -> dict:
    """Paired feedback-on/off traces over one drift realization."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for label, enabled in (("on", True), ("off", False)):
        link = StatisticalLink(cfg.link, cfg.sync, cfg.drift.build())
        rng = np.random.default_rng([cfg.seed, _FEEDBACK_STREAM])
        state = CompensatorState.from_config(cfg.feedback)
        try:
            trace, _ = run_feedback_loop(link, state, cfg.feedback, cfg.total_duration, rng,
                                         cfg.block_duration, enabled=enabled)
            stalled = False
        except FeedbackStalled:
            trace, stalled = None, True
        if trace is None:
            results[label] = {"stalled": True}
            continue
        trace.write_csv(out / f"feedback_{label}.csv")
        worst = np.maximum(trace.qber_z, trace.qber_x)
        results[label] = {
            "stalled": stalled,
            "mean_qber_z": float(np.mean(trace.qber_z)),
            "mean_qber_x": float(np.mean(trace.qber_x)),
            "max_qber": float(worst.max()),
            "final_qber": float(worst[-1]),
            "step_times_s": trace.step_times,
            "recovery_times_s": trace.recovery_times,
        }
    summary = {"name": cfg.name, "seed": cfg.seed, "duration_s": cfg.total_duration, **results}
    atomic_write_bytes(out / "feedback_bench.json", _json_bytes(summary))
    return summary
