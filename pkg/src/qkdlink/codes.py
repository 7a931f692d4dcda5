"""Public +-1 correlation codes for frame synchronization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# feedback taps of primitive polynomials, x^m + ... (Fibonacci LFSR)
_MLS_TAPS = {
    2: (2, 1), 3: (3, 2), 4: (4, 3), 5: (5, 3), 6: (6, 5), 7: (7, 6), 8: (8, 6, 5, 4),
    9: (9, 5), 10: (10, 7), 11: (11, 9), 12: (12, 11, 10, 4), 13: (13, 12, 11, 8),
    14: (14, 13, 12, 2), 15: (15, 14), 16: (16, 15, 13, 4), 17: (17, 14), 18: (18, 11),
    19: (19, 18, 17, 14), 20: (20, 17),
}

SIDELOBE_FACTOR = 5.0


def circular_autocorrelation(code) -> np.ndarray:
    c = np.asarray(code, dtype=float)
    f = np.fft.rfft(c)
    return np.rint(np.fft.irfft(f * f.conj(), n=len(c))).astype(np.int64)


def max_sidelobe(code) -> int:
    ac = circular_autocorrelation(code)
    return int(np.abs(ac[1:]).max()) if len(ac) > 1 else 0


def random_code(length: int, seed: int) -> np.ndarray:
    """Seeded uniform +-1 code meeting the sidelobe bound; reseeds on failure."""
    bound = SIDELOBE_FACTOR * math.sqrt(length)
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        code = rng.choice(np.array([-1, 1], dtype=np.int8), size=length)
        if length < 2 or max_sidelobe(code) <= bound:
            return code
    raise RuntimeError(f"no random code of length {length} met the sidelobe bound")


def mls_code(order: int) -> np.ndarray:
    """Maximal-length sequence of length 2**order - 1 mapped to +-1."""
    try:
        taps = _MLS_TAPS[order]
    except KeyError:
        raise ValueError(f"no MLS taps tabulated for order {order}") from None
    n = 2**order - 1
    state = [1] * order
    out = np.empty(n, dtype=np.int8)
    for i in range(n):
        out[i] = state[-1]
        fb = 0
        for t in taps:
            fb ^= state[t - 1]
        state = [fb] + state[:-1]
    return (1 - 2 * out).astype(np.int8)


@dataclass(frozen=True)
class SyncCodeConfig:
    """Length-``L`` code, one bit per block of ``M + 1`` slots."""

    L: int = 50_000
    M: int = 9
    seed: int = 0
    kind: str = "random"
    code: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.L < 1 or self.M < 0:
            raise ValueError(f"need L >= 1 and M >= 0, got L={self.L}, M={self.M}")
        code = self.code
        if code is None:
            if self.kind == "random":
                code = random_code(self.L, self.seed)
            elif self.kind == "mls":
                order = int(round(math.log2(self.L + 1)))
                if 2**order - 1 != self.L:
                    raise ValueError("an MLS code needs L = 2**m - 1")
                code = mls_code(order)
            else:
                raise ValueError(f"unknown code kind {self.kind!r}")
        code = np.asarray(code, dtype=np.int8)
        if code.shape != (self.L,) or not np.all(np.abs(code) == 1):
            raise ValueError("code must be a length-L sequence of +-1")
        if self.L > 1 and max_sidelobe(code) > SIDELOBE_FACTOR * math.sqrt(self.L):
            raise ValueError("code violates the autocorrelation sidelobe bound")
        code.setflags(write=False)
        object.__setattr__(self, "code", code)

    @property
    def block(self) -> int:
        return self.M + 1

    @property
    def frame_length(self) -> int:
        return (self.M + 1) * self.L

    def to_dict(self) -> dict:
        return {"L": self.L, "M": self.M, "seed": self.seed, "kind": self.kind}
