import numpy as np

from qkdlink.link import ChannelDriftModel, LinkConfig, PulseTrain, transmit
from qkdlink.optics import PolarizationUnitary


def make_stream(cfg: LinkConfig, code, n_slots: int, seed: int, start: int | None = None,
                compensation=None, force_photon=False):
    """Simulated clicks for ``n_slots`` slots plus the pulse train they came from."""
    rng = np.random.default_rng(seed)
    if start is None:
        start = int(rng.integers(0, 10**9))
    train = PulseTrain(seed, start, n_slots, code, cfg.intensities, cfg.probe_fraction)
    comp = compensation if compensation is not None else PolarizationUnitary.identity()
    events = transmit(train, cfg, ChannelDriftModel(), comp, rng, force_photon=force_photon)
    return events, train


def true_offset(events, t_ref: float, tau_b: float) -> int:
    return int(round((t_ref - events.t0_true) / tau_b))
