"""Closed-loop polarization compensation driven by public-slot QBER.

The compensator is modeled as four phase shifters, each rotating the
polarization about a fixed axis by half its phase (the usual relation
between a retarder's phase and its Jones matrix):

    C(p) = R_y(p4) R_z(p3) R_x(p2) R_y(p1),   R_a(p) = exp(-i p sigma_a / 2)

With all phases at zero the four generators span every direction, so the
finite-difference gradient sees all three components of a residual error.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .codes import SyncCodeConfig
from .events import atomic_write_bytes
from .link import ChannelDriftModel, LinkConfig
from .optics import SIGMA_X, SIGMA_Y, SIGMA_Z, PolarizationUnitary, axis_rotation, bit0_probability, state_vectors
from .sifting import PublicTally

TWO_PI = 2.0 * math.pi
_AXES = (SIGMA_Y, SIGMA_X, SIGMA_Z, SIGMA_Y)
_ORDER = (0, 1, 2, 3)
TRACE_HEADER = ("time_s", "qber_z", "qber_x", "p1", "p2", "p3", "p4")


class EstimateUnavailable(RuntimeError):
    pass


class FeedbackStalled(RuntimeError):
    pass


@dataclass(frozen=True)
class FeedbackConfig:
    qber_threshold: float = 0.01
    probe_step: float = 0.05
    learning_rate: float = 0.8
    min_samples_per_estimate: int = 100
    max_iterations: int = 100_000
    slew_limit: float = 0.2
    increase_patience: int = 3
    max_halvings: int = 5

    def __post_init__(self):
        for name in ("qber_threshold", "probe_step", "learning_rate", "min_samples_per_estimate",
                     "max_iterations", "slew_limit", "increase_patience", "max_halvings"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.qber_threshold < 0.5:
            raise ValueError("qber_threshold must be below 0.5")

    @property
    def n_probes(self) -> int:
        return 8


def compensation_matrix(phases) -> np.ndarray:
    m = np.eye(2, dtype=complex)
    for axis, p in zip(_AXES, phases):
        m = axis_rotation(axis, 0.5 * float(p)) @ m
    return m


@dataclass(frozen=True)
class CompensatorState:
    phases: tuple = (0.0, 0.0, 0.0, 0.0)
    # (min, max); the default full period wraps instead of clipping
    bounds: tuple = (0.0, TWO_PI)
    slew_limit: float = 0.2
    learning_rate: float = 0.8
    increases: int = 0
    halvings: int = 0
    last_cost: float | None = None
    steps: int = 0

    def __post_init__(self):
        if len(self.phases) != 4:
            raise ValueError("the compensator has four phase shifters")
        lo, hi = self.bounds
        if not hi > lo:
            raise ValueError("empty bounds")
        object.__setattr__(self, "phases", tuple(float(p) for p in self.constrain(self.phases)))

    @property
    def wraps(self) -> bool:
        lo, hi = self.bounds
        return math.isclose(hi - lo, TWO_PI)

    def constrain(self, phases) -> np.ndarray:
        lo, hi = self.bounds
        p = np.asarray(phases, dtype=float)
        if self.wraps:
            p = lo + np.mod(p - lo, TWO_PI)
            # np.mod can return the period itself for tiny negatives
            return np.where(p >= hi, lo, p)
        return np.clip(p, lo, hi)

    def unitary(self) -> PolarizationUnitary:
        return PolarizationUnitary(compensation_matrix(self.phases))

    @classmethod
    def from_config(cls, config: FeedbackConfig, phases=(0.0, 0.0, 0.0, 0.0)) -> "CompensatorState":
        return cls(phases=tuple(phases), slew_limit=config.slew_limit, learning_rate=config.learning_rate)


@dataclass(frozen=True)
class QberEstimate:
    qber_z: float
    qber_x: float
    n_z: int
    n_x: int

    @property
    def stderr_z(self) -> float:
        return math.sqrt(self.qber_z * (1 - self.qber_z) / self.n_z)

    @property
    def stderr_x(self) -> float:
        return math.sqrt(self.qber_x * (1 - self.qber_x) / self.n_x)

    @property
    def cost(self) -> float:
        return self.qber_z + self.qber_x


def estimate_qber(tally: PublicTally, min_samples: int = 1) -> QberEstimate:
    """Error fractions of the public Z (sync) and X (probe) detections."""
    if tally.z_total < max(min_samples, 1) or tally.x_total < max(min_samples, 1):
        raise EstimateUnavailable(
            f"need {min_samples} detections per basis, have Z={tally.z_total}, X={tally.x_total}"
        )
    return QberEstimate(tally.z_errors / tally.z_total, tally.x_errors / tally.x_total,
                        tally.z_total, tally.x_total)


Estimator = Callable[[np.ndarray], QberEstimate]


def feedback_step(state: CompensatorState, estimator: Estimator, config: FeedbackConfig) -> CompensatorState:
    """One descent update from 1 + 8 estimator calls.

    Returns ``state`` itself when both QBERs are already below threshold.
    Three consecutive rises of the base cost halve the learning rate; once
    ``config.max_halvings`` halvings have been spent, ``FeedbackStalled``
    is raised.
    """
    p = np.asarray(state.phases)
    base = estimator(p)
    if base.qber_z < config.qber_threshold and base.qber_x < config.qber_threshold:
        return state
    cost = base.cost
    lr, increases, halvings = state.learning_rate, state.increases, state.halvings
    if state.last_cost is not None and cost > state.last_cost:
        increases += 1
    else:
        increases = 0
    if increases >= config.increase_patience:
        lr *= 0.5
        halvings += 1
        increases = 0
        if halvings >= config.max_halvings:
            raise FeedbackStalled(f"cost kept rising after {halvings} learning-rate halvings")

    h = config.probe_step
    grad = np.zeros(4)
    for i in _ORDER:
        e = np.zeros(4)
        e[i] = h
        grad[i] = (estimator(p + e).cost - estimator(p - e).cost) / (2 * h)
    delta = np.clip(-lr * grad, -state.slew_limit, state.slew_limit)
    return replace(state, phases=tuple(p + delta), learning_rate=lr, increases=increases,
                   halvings=halvings, last_cost=cost, steps=state.steps + 1)


class StatisticalLink:
    """Public-slot detection statistics without simulating individual photons.

    Counts per basis are Poisson with the expected number of usable clicks;
    errors are binomial with the Born-rule error of the current total
    rotation mixed with the extinction floor, plus dark clicks at 50% error.
    """

    def __init__(self, config: LinkConfig, sync: SyncCodeConfig, drift: ChannelDriftModel,
                 gate: float = 6 * 30e-12):
        self.config = config
        self.sync = sync
        self.drift = drift
        slots_per_s = 1.0 / config.tau_a
        click = config.mean_click_probability()
        sync_frac = 1.0 / sync.block
        probe_frac = (1.0 - sync_frac) * config.probe_fraction
        # half of the clicks land in the basis the slot was prepared in
        self.z_rate = 0.5 * click * sync_frac * slots_per_s
        self.x_rate = 0.5 * click * probe_frac * slots_per_s
        dark = 2 * config.dark_count_rate * gate
        self.z_dark_rate = dark * sync_frac * slots_per_s
        self.x_dark_rate = dark * probe_frac * slots_per_s

    def error_probabilities(self, phases, t: float) -> tuple[float, float]:
        total = compensation_matrix(phases) @ self.drift.matrices_at(np.array([t]))[0]
        theta = np.array([0.0, math.pi, 0.5 * math.pi, 1.5 * math.pi])
        out = state_vectors(theta) @ total.T
        p0 = bit0_probability(out, np.array([0, 0, 1, 1]))
        pe = self.config.polarization_error
        p0 = (1 - pe) * p0 + pe * (1 - p0)
        err = np.array([1 - p0[0], p0[1], 1 - p0[2], p0[3]])
        return float(err[:2].mean()), float(err[2:].mean())

    def measure(self, phases, t: float, duration: float, rng: np.random.Generator) -> PublicTally:
        ez, ex = self.error_probabilities(phases, t)
        nz_sig = rng.poisson(self.z_rate * duration)
        nz_dark = rng.poisson(self.z_dark_rate * duration)
        nx_sig = rng.poisson(self.x_rate * duration)
        nx_dark = rng.poisson(self.x_dark_rate * duration)
        mz = rng.binomial(nz_sig, ez) + rng.binomial(nz_dark, 0.5)
        mx = rng.binomial(nx_sig, ex) + rng.binomial(nx_dark, 0.5)
        return PublicTally(int(nz_sig + nz_dark), int(mz), int(nx_sig + nx_dark), int(mx))


@dataclass
class FeedbackTrace:
    times: list = field(default_factory=list)
    qber_z: list = field(default_factory=list)
    qber_x: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    step_times: list = field(default_factory=list)
    recovery_times: list = field(default_factory=list)
    stalled: bool = False

    def append(self, t, qz, qx, phases):
        self.times.append(float(t))
        self.qber_z.append(float(qz))
        self.qber_x.append(float(qx))
        self.phases.append(tuple(float(p) for p in phases))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for t, qz, qx, p in zip(self.times, self.qber_z, self.qber_x, self.phases):
            w.writerow([f"{t:.6g}", f"{qz:.6f}", f"{qx:.6f}"] + [f"{v:.6f}" for v in p])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_bytes(path, self.to_csv().encode())

    def mean_qber(self) -> tuple[float, float]:
        return float(np.mean(self.qber_z)), float(np.mean(self.qber_x))


def recovery_times(times, qber_z, qber_x, step_times, threshold: float) -> list:
    """Seconds from each drift step until both estimates are back under threshold.

    ``None`` marks a step that never recovered within the trace.
    """
    times = np.asarray(times)
    ok = (np.asarray(qber_z) < threshold) & (np.asarray(qber_x) < threshold)
    out = []
    for s in step_times:
        idx = np.nonzero((times > s) & ok)[0]
        out.append(float(times[idx[0]] - s) if len(idx) else None)
    return out


def run_feedback_loop(
    link: StatisticalLink,
    state: CompensatorState,
    config: FeedbackConfig,
    duration: float,
    rng: np.random.Generator,
    block_duration: float = 1.0,
    enabled: bool = True,
    probe_rng: np.random.Generator | None = None,
) -> tuple[FeedbackTrace, CompensatorState]:
    """Run one feedback update per block and record the QBER trace.

    Each block is split into nine equal parts. The first is measured at the
    current setting; if an update is needed the other eight hold the
    gradient probes, otherwise the whole block counts toward the trace
    point. Probe counts come from ``probe_rng`` (by default a child stream
    of ``rng``), so with feedback disabled or idle the main stream sees
    exactly the same draws. Trace entries are stamped at block end; blocks
    without enough detections carry their tally forward.
    """
    if probe_rng is None:
        probe_rng = rng.spawn(1)[0]
    trace = FeedbackTrace()
    n_blocks = int(round(duration / block_duration))
    sub = block_duration / (2 * 4 + 1)
    pending = PublicTally()
    last = (0.0, 0.0)
    for b in range(n_blocks):
        t = b * block_duration
        recorded = state.phases
        base_tally = pending + link.measure(state.phases, t, sub, rng)
        rest = link.measure(state.phases, t, block_duration - sub, rng)
        base = _safe_estimate(base_tally, config)
        if base is None:
            pending = base_tally + rest
            trace.append(t + block_duration, *last, recorded)
            continue
        pending = PublicTally()
        needs_update = enabled and not (base.qber_z < config.qber_threshold and base.qber_x < config.qber_threshold)
        if not needs_update:
            full = estimate_qber(base_tally + rest, 1)
            last = (full.qber_z, full.qber_x)
            if enabled:
                state = replace(state, learning_rate=config.learning_rate, increases=0, halvings=0, last_cost=None)
            trace.append(t + block_duration, *last, recorded)
            continue
        last = (base.qber_z, base.qber_x)
        try:
            state = feedback_step(state, _probe_estimator(link, base, t, sub, probe_rng), config)
        except FeedbackStalled:
            trace.stalled = True
            trace.append(t + block_duration, *last, recorded)
            raise
        trace.append(t + block_duration, *last, recorded)
    trace.step_times = [float(s) for s in link.drift.step_times(duration) if s < duration]
    trace.recovery_times = recovery_times(trace.times, trace.qber_z, trace.qber_x,
                                          trace.step_times, config.qber_threshold)
    return trace, state


def _probe_estimator(link: StatisticalLink, base: QberEstimate, t: float, duration: float,
                     rng: np.random.Generator) -> Estimator:
    """Estimator whose first answer is the already-measured base point."""
    queued = [base]

    def estimate(p):
        if queued:
            return queued.pop()
        tally = link.measure(p, t, duration, rng)
        if tally.z_total == 0 or tally.x_total == 0:
            return QberEstimate(0.5, 0.5, 1, 1)
        return estimate_qber(tally, 1)

    return estimate


def _safe_estimate(tally: PublicTally, config: FeedbackConfig, floor: int | None = None) -> QberEstimate | None:
    try:
        return estimate_qber(tally, config.min_samples_per_estimate if floor is None else floor)
    except EstimateUnavailable:
        return None
