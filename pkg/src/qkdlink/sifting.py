"""Map synchronized clicks back to Alice's slots and tally them.

Every event lands in exactly one category:

* ``unassigned``: outside the timing gate or outside the transmitted span
* ``double_click``: its slot holds more than one gated click
* ``public``: sync or probe slot, feeds the QBER estimator
* ``basis_mismatch``: key slot measured in the other basis
* ``kept``: key slot with matching bases, enters ``SiftedCounts``
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .events import EventStream
from .finite_key import SiftedCounts
from .link import PulseTrain
from .sync import SyncSolution

GATE_SIGMAS = 3.0


@dataclass(frozen=True)
class PublicTally:
    """Detections on public slots: sync Z clicks and X-basis probe clicks."""

    z_total: int = 0
    z_errors: int = 0
    x_total: int = 0
    x_errors: int = 0

    def __add__(self, other: "PublicTally") -> "PublicTally":
        return PublicTally(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))


@dataclass(frozen=True)
class SiftResult:
    counts: SiftedCounts
    public: PublicTally
    categories: dict

    def to_dict(self) -> dict:
        return {"counts": asdict(self.counts), "public": asdict(self.public), "categories": dict(self.categories)}


def assign_slots(events: EventStream, solution: SyncSolution, gate: float | None = None):
    """Alice slot index per event and a mask of events inside the timing gate."""
    abs_t = events.timestamps.astype(np.float64) * events.resolution
    slots = solution.slot_of(abs_t)
    if gate is None:
        gate = GATE_SIGMAS * max(solution.residual_sigma, events.resolution)
    expected = solution.t_ref + (slots - solution.offset_slots) * solution.tau_b
    inside = np.abs(abs_t - expected) <= gate
    return slots, inside


def sift(events: EventStream, solution: SyncSolution, train: PulseTrain, t: float,
         gate: float | None = None) -> SiftResult:
    """Sift one block of events against the pulse train it came from.

    ``t`` is the acquisition time credited to the resulting counts.
    """
    slots, ok = assign_slots(events, solution, gate)
    ok &= (slots >= train.start) & (slots < train.stop)
    n_unassigned = int((~ok).sum())
    slots, det = slots[ok], events.detectors[ok].astype(np.int64)

    _, inv, mult = np.unique(slots, return_inverse=True, return_counts=True)
    single = mult[inv] == 1
    n_double = int((~single).sum())
    slots, det = slots[single], det[single]

    a = train.attributes(slots)
    bob_basis = det // 2
    bob_bit = det % 2
    err = bob_bit != a.bit

    sync_z = a.is_sync & (bob_basis == 0)
    probe_x = a.is_probe & (bob_basis == 1)
    public = a.is_sync | a.is_probe
    tally = PublicTally(int(sync_z.sum()), int((sync_z & err).sum()),
                        int(probe_x.sum()), int((probe_x & err).sum()))

    key = ~public
    match = key & (bob_basis == a.basis)
    n_mismatch = int((key & ~match).sum())

    def count(basis, decoy):
        sel = match & (a.basis == basis) & (a.decoy == decoy)
        return int(sel.sum()), int((sel & err).sum())

    n_zm, m_zm = count(0, False)
    n_zn, m_zn = count(0, True)
    n_xm, m_xm = count(1, False)
    n_xn, m_xn = count(1, True)
    counts = SiftedCounts(n_zm, n_zn, n_xm, n_xn, m_zm, m_zn, m_xm, m_xn, t)
    categories = {
        "kept": int(match.sum()),
        "basis_mismatch": n_mismatch,
        "double_click": n_double,
        "unassigned": n_unassigned,
        "public": int(public.sum()),
    }
    return SiftResult(counts, tally, categories)
