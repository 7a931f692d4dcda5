"""Clock and frame recovery from detection timestamps alone.

Three stages, each usable on its own:

1. ``recover_period_fft`` bins arrival times at four samples per nominal
   slot and picks the spectral line next to the nominal repetition rate.
2. ``refine_period_lts`` assigns every click to a slot and fits period and
   phase by least trimmed squares, growing the fitted span geometrically so
   the slot assignment never slips.
3. ``recover_offset`` folds the three-valued detection string into
   ``(M + 1)`` candidate rows and circularly correlates each against the
   public code; the winning (row, lag) pins down Alice's slot index.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .codes import SyncCodeConfig
from .events import DetectorId, EventStream

N_SAMPLES = 1_000_000
SAMPLES_PER_SLOT = 4
CORRELATION_THRESHOLD = 6.0
AMBIGUITY_DB = 3.0
LTS_KEEP = 0.9
MIN_EVENTS = 8


class SyncError(RuntimeError):
    """Base class for synchronization failures."""


class NoLock(SyncError):
    pass


class SyncFailed(SyncError):
    pass


class AmbiguousLock(SyncError):
    pass


@dataclass(frozen=True)
class PeriodEstimate:
    tau_b: float
    peak_ratio: float
    windows: int
    n_events: int


@dataclass(frozen=True)
class PeriodFit:
    tau_b: float
    # time of Bob's reference slot, seconds after the first event
    phase: float
    residual_sigma: float
    interval_error_rms: float
    n_inliers: int
    n_events: int
    converged: bool


@dataclass(frozen=True)
class SyncSolution:
    tau_b: float
    offset_slots: int
    t0_estimate: float
    correlation_peak: float
    correlation_noise_sigma: float
    residual_sigma: float
    status: str
    frames_used: int = 1
    frame_length: int = 0
    row: int = 0
    lag: int = 0
    absolute: bool = False
    t_ref: float = 0.0
    tau_b_fft: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SyncSolution":
        return cls(**d)

    def slot_of(self, abs_times: np.ndarray) -> np.ndarray:
        """Alice slot index nearest each absolute timestamp (seconds)."""
        return self.offset_slots + np.rint((abs_times - self.t_ref) / self.tau_b).astype(np.int64)


def admissibility_check(L: int, eta: float):
    """``"ok"`` if sqrt(L*eta) >= 10, else ``("repeat", k)`` with the minimal frame count k."""
    if L < 1:
        raise ValueError("L must be >= 1")
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    # exact products can land a hair under 100 in floating point
    need = 100.0 / (L * eta)
    if need <= 1 + 1e-12:
        return "ok"
    k = math.ceil(need - 1e-9)
    return ("repeat", k)


def recover_period_fft(
    events: EventStream,
    tau_a_nominal: float,
    n_samples: int = N_SAMPLES,
    max_skew_ppm: float = 200.0,
    target_events: int = 2000,
    max_windows: int = 64,
    false_alarm: float = 1e-6,
) -> PeriodEstimate:
    """Coarse period from the spectrum of the binned arrival-time series.

    Power spectra of consecutive ``n_samples`` windows are averaged until
    ``target_events`` clicks have been used, which keeps the frequency
    resolution fixed while lifting weak links above the shot-noise floor.
    """
    t = events.times()
    if len(t) < MIN_EVENTS:
        raise NoLock(f"only {len(t)} events")
    dt = tau_a_nominal / SAMPLES_PER_SLOT
    span = n_samples * dt
    n_windows = min(int(t[-1] // span) + 1, max_windows)
    power = np.zeros(n_samples // 2 + 1)
    used = windows = 0
    bounds = np.searchsorted(t, np.arange(n_windows + 1) * span)
    for w in range(n_windows):
        tw = t[bounds[w] : bounds[w + 1]]
        if len(tw) == 0:
            continue
        bins = ((tw - w * span) / dt).astype(np.int64)
        series = np.bincount(np.minimum(bins, n_samples - 1), minlength=n_samples)
        power += np.abs(np.fft.rfft(series)) ** 2
        used += len(tw)
        windows += 1
        if used >= target_events:
            break
    if used < MIN_EVENTS:
        raise NoLock(f"only {used} events in the FFT windows")

    k0 = n_samples / SAMPLES_PER_SLOT
    half = int(math.ceil(k0 * max_skew_ppm * 1e-6)) + 2
    lo, hi = int(k0) - half, int(k0) + half + 1
    band = power[lo:hi]
    # harmonics alias next to the fundamental; estimate the floor further out
    gap = 6 * half + 64
    noise_region = np.concatenate(
        [power[max(int(k0) - gap - 4096, 1) : int(k0) - gap], power[int(k0) + gap : int(k0) + gap + 4096]]
    )
    noise = float(np.mean(noise_region))
    kpk = lo + int(np.argmax(band))
    ratio = power[kpk] / noise if noise > 0 else math.inf
    lock_ratio = lock_threshold(windows, len(band), false_alarm)
    if not ratio >= lock_ratio:
        raise NoLock(f"no spectral line above the noise floor (peak/noise = {ratio:.1f} < {lock_ratio:.1f})")
    a, b, c = np.sqrt(power[kpk - 1 : kpk + 2])
    denom = a - 2 * b + c
    frac = 0.5 * (a - c) / denom if denom != 0 else 0.0
    freq = (kpk + frac) / (n_samples * dt)
    return PeriodEstimate(1.0 / freq, float(ratio), windows, used)


def lock_threshold(windows: int, n_bins: int, false_alarm: float = 1e-6) -> float:
    """Peak-to-floor ratio that pure noise exceeds with probability ``false_alarm``."""
    per_bin = false_alarm / max(n_bins, 1)
    return float(stats.gamma.isf(per_bin, windows, scale=1.0 / windows))


def _trimmed_variance_factor(fraction: float) -> float:
    """Variance of a standard normal truncated to its central ``fraction``."""
    q = stats.norm.ppf(0.5 + fraction / 2)
    return 1.0 - 2.0 * q * stats.norm.pdf(q) / fraction


def _line_fit(k: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    kc = k.mean()
    tc = t.mean()
    dk = k - kc
    sxx = float(dk @ dk)
    if sxx == 0:
        raise NoLock("all fitted events fall in one slot")
    slope = float(dk @ (t - tc)) / sxx
    return slope, tc - slope * kc


def _lts(t, tau, phase, keep, max_iter):
    n = len(t)
    h = max(2, int(math.ceil(keep * n)))
    prev = None
    for _ in range(max_iter):
        k = np.rint((t - phase) / tau)
        r = t - phase - k * tau
        if h < n:
            idx = np.sort(np.argpartition(np.abs(r), h - 1)[:h])
        else:
            idx = np.arange(n)
        if prev is not None and np.array_equal(idx, prev):
            break
        prev = idx
        if np.ptp(k[idx]) == 0:
            break
        tau, phase = _line_fit(k[idx], t[idx])
    return tau, phase


def refine_period_lts(
    events: EventStream,
    tau_b0: float,
    keep_fraction: float = LTS_KEEP,
    initial_slots: int = 25_000,
    growth: float = 4.0,
    max_iter: int = 50,
    tolerance: float = 0.25,
    max_fit_events: int = 100_000,
) -> PeriodFit:
    """Least-trimmed-squares slot assignment and period/phase fit.

    Residual scale comes from a reweighting pass: inliers within 3 LTS
    sigmas are refitted by ordinary least squares and their spread is
    corrected for the truncation. Convergence requires the mean squared
    interval error between consecutive inliers to match ``2 sigma^2``
    within ``tolerance``. Dense streams are thinned to ``max_fit_events``
    for the trimmed stages; the reweighting pass always uses every event.
    """
    t = events.times()
    n = len(t)
    if n < MIN_EVENTS:
        raise NoLock(f"only {n} events")
    stride = max(1, n // max_fit_events)
    tau = tau_b0
    span = max(initial_slots * tau, t[min(n - 1, 31)])
    sub = t[t <= span]
    phase = tau / (2 * math.pi) * np.angle(np.exp(2j * math.pi * sub / tau).sum())
    while True:
        sub = t[t <= span]
        if len(sub) > 4 * max_fit_events:
            sub = sub[::stride]
        tau, phase = _lts(sub, tau, phase, keep_fraction, max_iter)
        if span >= t[-1]:
            break
        span *= growth

    k = np.rint((t - phase) / tau)
    r = t - phase - k * tau
    h = max(2, int(math.ceil(keep_fraction * n)))
    core = np.sort(np.abs(r))[:h]
    sigma_lts = math.sqrt(float(core @ core) / h / _trimmed_variance_factor(keep_fraction))
    inlier = np.abs(r) <= 3 * max(sigma_lts, 1e-15)
    if inlier.sum() >= 2 and np.ptp(k[inlier]) > 0:
        tau, phase = _line_fit(k[inlier], t[inlier])
        k = np.rint((t - phase) / tau)
        r = t - phase - k * tau
        inlier = np.abs(r) <= 3 * max(sigma_lts, 1e-15)
    r_in = r[inlier]
    sigma = float(np.std(r_in) / math.sqrt(_trimmed_variance_factor(stats.norm.cdf(3) * 2 - 1))) if len(r_in) > 1 else 0.0
    if len(r_in) > 2:
        interval = np.diff(r_in)
        ms = float(interval @ interval) / len(interval)
    else:
        ms = 0.0
    if sigma > 0:
        converged = abs(ms / (2 * sigma**2) - 1.0) <= tolerance
    else:
        converged = ms == 0.0
    if sigma > tau / 8:
        raise NoLock(f"residual spread {sigma:.3e} s is not slot-like")
    return PeriodFit(tau, float(phase), sigma, math.sqrt(ms), int(inlier.sum()), n, converged)


def detection_values(detectors: np.ndarray) -> np.ndarray:
    """+1 for the Z bit-0 detector, -1 for Z bit-1, 0 for X clicks."""
    vals = np.zeros(len(detectors), dtype=np.int64)
    vals[detectors == DetectorId.Z0] = 1
    vals[detectors == DetectorId.Z1] = -1
    return vals


def frame_strings(events: EventStream, fit: PeriodFit, frame_length: int, max_frames: int | None = None) -> np.ndarray:
    """Per-frame three-valued detection strings, shape (frames, frame_length)."""
    t = events.times()
    k = np.rint((t - fit.phase) / fit.tau_b).astype(np.int64)
    keep = k >= 0
    k, det = k[keep], events.detectors[keep]
    vals = detection_values(det)
    uniq, inv, counts = np.unique(k, return_inverse=True, return_counts=True)
    vals[counts[inv] > 1] = 0
    n_frames = int(k.max() // frame_length) + 1 if len(k) else 1
    if max_frames is not None:
        n_frames = min(n_frames, max_frames)
    sel = k < n_frames * frame_length
    flat = np.bincount(k[sel], weights=vals[sel], minlength=n_frames * frame_length)
    return flat.astype(np.int64).reshape(n_frames, frame_length)


def circular_correlation(rows: np.ndarray, code: np.ndarray) -> np.ndarray:
    """``C[i, lag] = sum_l rows[i, l] * code[(l + lag) % L]``, exact for integer inputs."""
    rows = np.atleast_2d(rows).astype(float)
    L = rows.shape[1]
    fc = np.fft.rfft(np.asarray(code, dtype=float))
    fr = np.fft.rfft(rows, axis=1)
    return np.rint(np.fft.irfft(fr.conj() * fc[None, :], n=L, axis=1)).astype(np.int64)


def brute_force_correlation(rows: np.ndarray, code: np.ndarray) -> np.ndarray:
    rows = np.atleast_2d(rows)
    L = rows.shape[1]
    out = np.zeros((rows.shape[0], L), dtype=np.int64)
    for i in range(rows.shape[0]):
        for lag in range(L):
            out[i, lag] = sum(int(rows[i, l]) * int(code[(l + lag) % L]) for l in range(L))
    return out


def _score(acc: np.ndarray, code: SyncCodeConfig):
    rows = acc.reshape(code.L, code.block).T
    corr = circular_correlation(rows, code.code)
    flat = corr.ravel()
    best = int(np.argmax(flat))
    peak = int(flat[best])
    rest = np.delete(flat, best)
    med = np.median(rest)
    sigma = 1.4826 * float(np.median(np.abs(rest - med)))
    if sigma == 0:
        sigma = float(np.std(rest)) or 1.0
    second = int(rest.max()) if len(rest) else 0
    row, lag = divmod(best, code.L)
    return peak, sigma, second, row, lag


def recover_offset(
    events: EventStream,
    fit: PeriodFit,
    code: SyncCodeConfig,
    t0_hint: float | None = None,
    frames: int | None = None,
    max_frames: int | None = None,
    threshold: float = CORRELATION_THRESHOLD,
) -> SyncSolution:
    """Locate the code in the detection string and convert it to a slot index.

    With ``frames`` given, exactly that many frames are summed; otherwise
    frames are added one at a time until a significant, unambiguous peak
    appears. The index is known modulo the frame length unless ``t0_hint``
    (a coarse announcement of when Alice's slot 0 left, on Bob's clock)
    resolves the frame count.
    """
    strings = frame_strings(events, fit, code.frame_length, max_frames=frames or max_frames)
    if frames is not None and strings.shape[0] < frames:
        raise SyncFailed(f"events span {strings.shape[0]} frames, {frames} requested")
    attempts = [frames] if frames is not None else range(1, strings.shape[0] + 1)
    acc = np.zeros(code.frame_length, dtype=np.int64)
    done = 0
    last = None
    ratio_db = 10 ** (-AMBIGUITY_DB / 20)
    for n in attempts:
        acc += strings[done:n].sum(axis=0)
        done = n
        peak, sigma, second, row, lag = _score(acc, code)
        last = (peak, sigma, second, n)
        if peak >= threshold * sigma and second < ratio_db * peak:
            break
    else:
        peak, sigma, second, n = last
        if peak >= threshold * sigma:
            raise AmbiguousLock(f"second peak {second} within {AMBIGUITY_DB} dB of {peak}")
        raise SyncFailed(f"peak {peak} below {threshold} x sigma ({sigma:.2f}) after {n} frames")

    n_f = code.frame_length
    offset = (lag * code.block - row) % n_f
    t_ref = float(events.timestamps[0]) * events.resolution + fit.phase
    absolute = False
    if t0_hint is not None:
        j = round((t_ref - offset * fit.tau_b - t0_hint) / (n_f * fit.tau_b))
        offset += j * n_f
        absolute = True
    t0_est = t_ref - offset * fit.tau_b
    return SyncSolution(
        tau_b=fit.tau_b,
        offset_slots=int(offset),
        t0_estimate=t0_est,
        correlation_peak=float(peak),
        correlation_noise_sigma=float(sigma),
        residual_sigma=fit.residual_sigma,
        status="locked",
        frames_used=int(n),
        frame_length=n_f,
        row=int(row),
        lag=int(lag),
        absolute=absolute,
        t_ref=t_ref,
    )


def synchronize(
    events: EventStream,
    tau_a_nominal: float,
    code: SyncCodeConfig,
    t0_hint: float | None = None,
    frames: int | None = None,
    max_frames: int | None = None,
    n_samples: int = N_SAMPLES,
) -> SyncSolution:
    """Full chain: FFT period, LTS refinement, correlation offset."""
    est = recover_period_fft(events, tau_a_nominal, n_samples=n_samples)
    fit = refine_period_lts(events, est.tau_b)
    sol = recover_offset(events, fit, code, t0_hint=t0_hint, frames=frames, max_frames=max_frames)
    return SyncSolution(**{**sol.to_dict(), "tau_b_fft": est.tau_b})
