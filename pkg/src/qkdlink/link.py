"""Alice's pulse train and the photon-level channel/detector model.

Pulse attributes are a pure function of ``(train seed, slot index)``, so a
train of any length is addressable without materializing it. ``transmit``
draws only the slots that produce a click (geometric thinning), which keeps
the cost proportional to the number of detections rather than slots.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize

from .codes import SyncCodeConfig
from .events import EventStream
from .optics import (
    Basis,
    Bb84Symbol,
    IntensitySetting,
    PolarizationUnitary,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    bit0_probability,
    extinction_error,
    state_vectors,
    symbol_theta,
)

DEFAULT_INTENSITIES = IntensitySetting(mu=0.568, nu=0.144, p_mu=0.799, p_z=0.944)
JITTER_FWHM_TO_SIGMA = 2.355


@dataclass(frozen=True)
class LinkConfig:
    tau_a: float = 20e-9
    intensities: IntensitySetting = DEFAULT_INTENSITIES
    fiber_length: float = 0.0
    fiber_attenuation: float = 0.2
    decoder_insertion_loss: float = 4.6
    detector_efficiency: float = 0.75
    dark_count_rate: float = 25.0
    dead_time: float = 40e-9
    timing_jitter_sigma: float = 70e-12 / JITTER_FWHM_TO_SIGMA
    im_dynamic_extinction: float = 18.0
    polarization_extinction: float = 23.0
    clock_skew_ppm: float = 0.0
    timestamp_resolution: float = 1e-12
    decoy_leakage: bool = False
    # fraction of non-sync slots sent as public X-basis probes for feedback
    probe_fraction: float = 0.05
    # accuracy of the classical start-of-transmission announcement
    coarse_timing_error: float = 1e-3

    def __post_init__(self):
        positive = ("tau_a", "fiber_attenuation", "timestamp_resolution",
                    "im_dynamic_extinction", "polarization_extinction")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        non_negative = ("fiber_length", "decoder_insertion_loss", "dark_count_rate",
                        "dead_time", "timing_jitter_sigma", "coarse_timing_error")
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.detector_efficiency <= 1:
            raise ValueError(f"detector_efficiency must lie in (0, 1], got {self.detector_efficiency}")
        if not 0 <= self.probe_fraction < 1:
            raise ValueError(f"probe_fraction must lie in [0, 1), got {self.probe_fraction}")
        if abs(self.clock_skew_ppm) >= 1e4:
            raise ValueError("clock skew is unreasonably large")

    @property
    def channel_loss_db(self) -> float:
        return channel_loss_db(self.fiber_length, self.fiber_attenuation)

    @property
    def transmittance(self) -> float:
        """Probability that one photon leaving Alice produces a click."""
        total_db = self.channel_loss_db + self.decoder_insertion_loss
        return 10.0 ** (-total_db / 10.0) * self.detector_efficiency

    @property
    def tau_b(self) -> float:
        """True slot period as read on Bob's clock."""
        return self.tau_a * (1.0 + 1e-6 * self.clock_skew_ppm)

    @property
    def polarization_error(self) -> float:
        return extinction_error(self.polarization_extinction)

    @property
    def decoy_mean(self) -> float:
        nu = self.intensities.nu
        if self.decoy_leakage:
            nu += self.intensities.mu * 10.0 ** (-self.im_dynamic_extinction / 10.0)
        return nu

    def click_probability(self, mean: float) -> float:
        return -math.expm1(-mean * self.transmittance)

    def mean_click_probability(self) -> float:
        it = self.intensities
        return it.p_mu * self.click_probability(it.mu) + it.p_nu * self.click_probability(self.decoy_mean)


def channel_loss_db(length_km: float, attenuation_db_per_km: float) -> float:
    return length_km * attenuation_db_per_km


def sync_detection_probability(config: LinkConfig) -> float:
    """Chance that one sync pulse yields a usable (Z-basis) detection at Bob.

    This is the transmittance entering the code-length admissibility rule:
    it folds in the pulse intensity and Bob's passive 50/50 basis split.
    """
    return 0.5 * config.mean_click_probability()


def config_for_sync_probability(base: LinkConfig, eta: float) -> LinkConfig:
    """Copy of ``base`` with the fiber length set so the sync detection probability equals ``eta``."""
    if not 0 < eta < sync_detection_probability(replace(base, fiber_length=0.0)):
        raise ValueError(f"sync detection probability {eta} is out of reach for this link")

    def gap(length):
        return sync_detection_probability(replace(base, fiber_length=length)) - eta

    hi = 10.0
    while gap(hi) > 0:
        hi *= 2
    length = optimize.brentq(gap, 0.0, hi, xtol=1e-12, rtol=1e-14)
    return replace(base, fiber_length=length)


class IntensityClass(enum.IntEnum):
    SIGNAL = 0
    DECOY = 1


@dataclass(frozen=True)
class PulseRecord:
    index: int
    symbol: Bb84Symbol
    intensity_class: IntensityClass
    is_sync: bool
    sync_code_position: int | None = None
    is_probe: bool = False

    def __post_init__(self):
        if self.is_sync != (self.sync_code_position is not None):
            raise ValueError("sync slots, and only sync slots, carry a code position")
        if self.is_sync and self.symbol.basis != Basis.Z:
            raise ValueError("sync slots are Z-basis")


@dataclass(frozen=True)
class SlotAttributes:
    basis: np.ndarray
    bit: np.ndarray
    decoy: np.ndarray
    is_sync: np.ndarray
    is_probe: np.ndarray
    code_position: np.ndarray


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def _hash_uniform(seed: int, lane: int, slots: np.ndarray) -> np.ndarray:
    key = _splitmix64(np.array([(seed * 8 + lane) % 2**64], dtype=np.uint64))
    h = _splitmix64(np.asarray(slots).astype(np.uint64) ^ key)
    h = _splitmix64(h)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


class PulseTrain:
    """Slots ``[start, start + count)`` of Alice's transmission."""

    def __init__(self, seed: int, start: int, count: int, sync: SyncCodeConfig,
                 intensities: IntensitySetting, probe_fraction: float = 0.0):
        self.seed = int(seed)
        self.start = int(start)
        self.count = int(count)
        self.sync = sync
        self.intensities = intensities
        self.probe_fraction = probe_fraction

    def __len__(self):
        return self.count

    @property
    def stop(self) -> int:
        return self.start + self.count

    def attributes(self, slots) -> SlotAttributes:
        slots = np.asarray(slots, dtype=np.int64)
        block = self.sync.block
        is_sync = slots % block == 0
        code_pos = np.where(is_sync, (slots // block) % self.sync.L, -1)
        u_basis = _hash_uniform(self.seed, 0, slots)
        u_bit = _hash_uniform(self.seed, 1, slots)
        u_int = _hash_uniform(self.seed, 2, slots)
        u_probe = _hash_uniform(self.seed, 3, slots)
        is_probe = ~is_sync & (u_probe < self.probe_fraction)
        basis = np.where(is_probe | (u_basis >= self.intensities.p_z), int(Basis.X), int(Basis.Z))
        basis = np.where(is_sync, int(Basis.Z), basis)
        code_bit = (self.sync.code[np.maximum(code_pos, 0)] < 0).astype(np.int64)
        bit = np.where(is_sync, code_bit, (u_bit < 0.5).astype(np.int64))
        decoy = u_int >= self.intensities.p_mu
        return SlotAttributes(basis.astype(np.int8), bit.astype(np.int8), decoy, is_sync, is_probe, code_pos)

    def __getitem__(self, i: int) -> PulseRecord:
        if not 0 <= i < self.count:
            raise IndexError(i)
        a = self.attributes(np.array([self.start + i]))
        pos = int(a.code_position[0])
        return PulseRecord(
            index=self.start + i,
            symbol=Bb84Symbol(Basis(int(a.basis[0])), int(a.bit[0])),
            intensity_class=IntensityClass(int(a.decoy[0])),
            is_sync=bool(a.is_sync[0]),
            sync_code_position=pos if pos >= 0 else None,
            is_probe=bool(a.is_probe[0]),
        )

    def __iter__(self):
        for i in range(self.count):
            yield self[i]


def build_pulse_train(config: LinkConfig, sync: SyncCodeConfig, count: int,
                      rng: np.random.Generator, start: int = 0) -> PulseTrain:
    if count < sync.frame_length:
        raise ValueError(f"train of {count} slots is shorter than one frame ({sync.frame_length})")
    seed = int(rng.integers(0, 2**62))
    return PulseTrain(seed, start, count, sync, config.intensities, config.probe_fraction)


class DriftMode(str, enum.Enum):
    STATIC = "static"
    RANDOM_WALK = "random_walk"
    SCRAMBLER_STEPS = "scrambler_steps"


@dataclass
class ChannelDriftModel:
    """Piecewise-constant fiber rotation, changing every ``step_interval``.

    ``scrambler_steps`` applies a rotation of exactly ``step_magnitude`` about
    a random axis at each step; ``random_walk`` draws the angle from a
    half-normal of scale ``step_magnitude``. Angles are Jones-matrix angles,
    i.e. ``exp(-i * angle * n.sigma)``.
    """

    mode: DriftMode = DriftMode.STATIC
    step_interval: float = 300.0
    step_magnitude: float = 0.15
    seed: int = 0
    _table: list = field(default_factory=list, init=False, repr=False)
    _rng: np.random.Generator | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.mode = DriftMode(self.mode)
        if self.step_interval <= 0:
            raise ValueError("step_interval must be positive")
        self._table = [np.eye(2, dtype=complex)]
        self._rng = np.random.default_rng(self.seed)

    def _extend(self, k: int) -> None:
        while len(self._table) <= k:
            axis = self._rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            if self.mode is DriftMode.RANDOM_WALK:
                angle = abs(self._rng.normal()) * self.step_magnitude
            else:
                angle = self.step_magnitude
            gen = axis[0] * SIGMA_X + axis[1] * SIGMA_Y + axis[2] * SIGMA_Z
            step = math.cos(angle) * np.eye(2) - 1j * math.sin(angle) * gen
            self._table.append(step @ self._table[-1])

    def step_index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.mode is DriftMode.STATIC:
            return np.zeros(t.shape, dtype=np.int64)
        return np.floor(t / self.step_interval).astype(np.int64)

    def matrices_at(self, t) -> np.ndarray:
        idx = self.step_index(t)
        if idx.size:
            self._extend(int(idx.max()))
        table = np.array(self._table)
        return table[idx]

    def unitary_at(self, t: float) -> PolarizationUnitary:
        return PolarizationUnitary(self.matrices_at(np.array([t]))[0], check=False)

    def step_times(self, t_end: float) -> np.ndarray:
        if self.mode is DriftMode.STATIC:
            return np.empty(0)
        return np.arange(1, int(t_end // self.step_interval) + 1) * self.step_interval


def _bernoulli_positions(count: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Indices in [0, count) selected independently with probability p."""
    if p <= 0 or count <= 0:
        return np.empty(0, dtype=np.int64)
    if p >= 1:
        return np.arange(count, dtype=np.int64)
    chunks = []
    pos = -1
    expected = count * p
    while True:
        n = int(expected + 6 * math.sqrt(expected) + 64)
        # clipping keeps the running sum far from int64 overflow for tiny p
        gaps = np.minimum(rng.geometric(p, size=n), count + 1)
        idx = pos + np.cumsum(gaps)
        chunks.append(idx[idx < count])
        if idx[-1] >= count:
            break
        pos = int(idx[-1])
    return np.concatenate(chunks).astype(np.int64)


def _zero_truncated_poisson(lam: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Photon numbers conditioned on at least one, by CDF inversion."""
    u = rng.random(lam.shape) * -np.expm1(-lam)
    k = np.ones(lam.shape, dtype=np.int64)
    term = lam * np.exp(-lam)
    cum = term.copy()
    n = 1
    while True:
        more = u > cum
        if not more.any() or n >= 100:
            return k
        n += 1
        term = term * lam / n
        cum = cum + term
        k[more] = n


def _apply_dead_time(ts: np.ndarray, dets: np.ndarray, dead_units: int) -> np.ndarray:
    """Boolean keep-mask; a click is lost within ``dead_units`` of the last kept click."""
    n = len(ts)
    keep = np.ones(n, dtype=bool)
    if n < 2 or dead_units <= 0:
        return keep
    order = np.lexsort((ts, dets))
    t_s, d_s = ts[order], dets[order]
    close = (d_s[1:] == d_s[:-1]) & (np.diff(t_s) < dead_units)
    keep_s = np.ones(n, dtype=bool)
    for j in np.nonzero(close)[0] + 1:
        k = j - 1
        while not keep_s[k]:
            k -= 1
        if t_s[j] - t_s[k] < dead_units:
            keep_s[j] = False
    keep[order] = keep_s
    return keep


def draw_t0(config: LinkConfig, rng: np.random.Generator) -> float:
    """Bob's clock reading at Alice's slot 0."""
    return float(rng.uniform(0.0, 1e6 * config.tau_a))


def transmit(train: PulseTrain, config: LinkConfig, drift: ChannelDriftModel,
             compensation: PolarizationUnitary, rng: np.random.Generator,
             t0: float | None = None, force_photon: bool = False) -> EventStream:
    """Simulate Bob's time-tagged clicks for every slot of ``train``.

    ``force_photon`` conditions every slot on at least one surviving photon;
    it exists for noiseless-limit checks.
    """
    if t0 is None:
        t0 = draw_t0(config, rng)
    eta = config.transmittance
    mu, nu = config.intensities.mu, config.decoy_mean
    res = config.timestamp_resolution
    period_units = config.tau_b / res
    t0_units = int(round(t0 / res))

    if force_photon:
        offsets = np.arange(train.count, dtype=np.int64)
        accept_p = None
    else:
        p_max = -math.expm1(-max(mu, nu) * eta)
        offsets = _bernoulli_positions(train.count, p_max, rng)
    slots = offsets + train.start
    attrs = train.attributes(slots)
    mean = np.where(attrs.decoy, nu, mu)
    lam = mean * eta
    if not force_photon:
        accept_p = -np.expm1(-lam) / p_max
        keep = rng.random(len(slots)) < accept_p
        slots, mean, lam = slots[keep], mean[keep], lam[keep]
        attrs = SlotAttributes(*(getattr(attrs, f)[keep] for f in SlotAttributes.__dataclass_fields__))

    photons = _zero_truncated_poisson(lam, rng)
    owner = np.repeat(np.arange(len(slots)), photons)

    psi = state_vectors(symbol_theta(attrs.basis.astype(float), attrs.bit))
    total = compensation.matrix[None, :, :] @ drift.matrices_at(slots * config.tau_a)
    out = np.einsum("nij,nj->ni", total, psi)

    bob_basis = (rng.random(len(owner)) >= 0.5).astype(np.int64)
    p0 = bit0_probability(out[owner], bob_basis)
    pe = config.polarization_error
    p0 = (1 - pe) * p0 + pe * (1 - p0)
    outcome = (rng.random(len(owner)) >= p0).astype(np.int64)
    det = 2 * bob_basis + outcome
    pair = np.unique(owner * 4 + det)
    click_slot = slots[pair // 4]
    click_det = (pair % 4).astype(np.uint8)

    jitter = rng.normal(0.0, config.timing_jitter_sigma / res, size=len(click_slot))
    ts = t0_units + np.rint(click_slot * period_units + jitter).astype(np.int64)
    truth = click_slot.copy()

    if config.dark_count_rate > 0:
        lo = t0_units + int(round((train.start - 0.5) * period_units))
        hi = t0_units + int(round((train.stop - 0.5) * period_units))
        span = (hi - lo) * res
        dark_ts, dark_det = [], []
        for d in range(4):
            n = rng.poisson(config.dark_count_rate * span)
            dark_ts.append(rng.integers(lo, hi, size=n))
            dark_det.append(np.full(n, d, dtype=np.uint8))
        ts = np.concatenate([ts] + dark_ts)
        click_det = np.concatenate([click_det] + dark_det)
        truth = np.concatenate([truth, np.full(len(ts) - len(truth), -1, dtype=np.int64)])

    keep = _apply_dead_time(ts, click_det, int(round(config.dead_time / res)))
    ts, click_det, truth = ts[keep], click_det[keep], truth[keep]
    order = np.lexsort((click_det, ts))
    return EventStream(ts[order], click_det[order], res, truth[order], t0_true=t0_units * res)
