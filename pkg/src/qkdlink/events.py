"""Detection events and the binary event-stream dump format.

Dump layout (all little-endian)::

    magic        8 bytes   b"QKDEVT01"
    resolution   float64   seconds per timestamp unit
    config_hash  32 bytes  SHA-256 of the generating config
    n_blocks     uint32
    block_sizes  uint64[n_blocks]   events per acquisition block
    records      n_events x (uint64 timestamp, uint8 detector_id)

Ground-truth slot labels are never written; a replayed stream carries only
what Bob's time tagger would have recorded.
"""

from __future__ import annotations

import enum
import hashlib
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"QKDEVT01"
RECORD_DTYPE = np.dtype([("timestamp", "<u8"), ("detector", "u1")])


class DetectorId(enum.IntEnum):
    Z0 = 0
    Z1 = 1
    X0 = 2
    X1 = 3


@dataclass(frozen=True)
class DetectionEvent:
    timestamp: float
    detector_id: DetectorId
    true_slot: int | None = None


class EventStream:
    """Column store of detection events sorted by timestamp.

    Timestamps are integers in units of ``resolution`` seconds. ``true_slot``
    is simulator ground truth (-1 for dark counts) and is only for test
    oracles.
    """

    def __init__(self, timestamps, detectors, resolution: float, true_slots=None, t0_true=None):
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.detectors = np.asarray(detectors, dtype=np.uint8)
        if self.timestamps.shape != self.detectors.shape:
            raise ValueError("timestamps and detectors must have the same length")
        self.resolution = float(resolution)
        self.true_slots = None if true_slots is None else np.asarray(true_slots, dtype=np.int64)
        self.t0_true = t0_true

    def __len__(self):
        return len(self.timestamps)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> DetectionEvent:
        slot = None
        if self.true_slots is not None and self.true_slots[i] >= 0:
            slot = int(self.true_slots[i])
        return DetectionEvent(
            float(self.timestamps[i]) * self.resolution, DetectorId(int(self.detectors[i])), slot
        )

    def select(self, mask) -> "EventStream":
        ts = None if self.true_slots is None else self.true_slots[mask]
        return EventStream(self.timestamps[mask], self.detectors[mask], self.resolution, ts, self.t0_true)

    def shifted(self, units: int) -> "EventStream":
        t0 = None if self.t0_true is None else self.t0_true + units * self.resolution
        return EventStream(self.timestamps + units, self.detectors, self.resolution, self.true_slots, t0)

    def times(self) -> np.ndarray:
        """Timestamps in seconds relative to the first event."""
        if len(self) == 0:
            return np.empty(0)
        return (self.timestamps - self.timestamps[0]).astype(float) * self.resolution

    @classmethod
    def concatenate(cls, streams) -> "EventStream":
        streams = list(streams)
        if not streams:
            raise ValueError("nothing to concatenate")
        res = streams[0].resolution
        with_truth = all(s.true_slots is not None for s in streams)
        return cls(
            np.concatenate([s.timestamps for s in streams]),
            np.concatenate([s.detectors for s in streams]),
            res,
            np.concatenate([s.true_slots for s in streams]) if with_truth else None,
            streams[0].t0_true,
        )


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dump(path, blocks: list[EventStream], cfg_hash: bytes = bytes(32)) -> None:
    if not blocks:
        raise ValueError("no blocks to dump")
    res = blocks[0].resolution
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    header = bytearray(MAGIC)
    header += np.float64(res).astype("<f8").tobytes()
    header += cfg_hash
    header += np.uint32(len(blocks)).astype("<u4").tobytes()
    header += np.array([len(b) for b in blocks], dtype="<u8").tobytes()
    total = sum(len(b) for b in blocks)
    rec = np.empty(total, dtype=RECORD_DTYPE)
    if total:
        rec["timestamp"] = np.concatenate([b.timestamps for b in blocks])
        rec["detector"] = np.concatenate([b.detectors for b in blocks])
    atomic_write_bytes(path, bytes(header) + rec.tobytes())


def read_dump(path) -> tuple[list[EventStream], bytes]:
    """Return the per-block event streams and the stored config hash."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an event dump (bad magic)")
    res = float(np.frombuffer(raw, "<f8", 1, 8)[0])
    cfg_hash = raw[16:48]
    n_blocks = int(np.frombuffer(raw, "<u4", 1, 48)[0])
    sizes = np.frombuffer(raw, "<u8", n_blocks, 52).astype(np.int64)
    offset = 52 + 8 * n_blocks
    rec = np.frombuffer(raw, RECORD_DTYPE, int(sizes.sum()), offset)
    blocks = []
    start = 0
    for n in sizes:
        part = rec[start : start + n]
        blocks.append(EventStream(part["timestamp"].astype(np.int64), part["detector"].copy(), res))
        start += n
    return blocks, cfg_hash
