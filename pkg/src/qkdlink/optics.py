"""Polarization states, unitaries, measurement and photon statistics.

Encoding convention: every BB84 symbol is the state
``(|H> + exp(i*theta)|V>) / sqrt(2)`` with theta in {0, pi} for the Z basis
and {pi/2, 3pi/2} for the X basis. On the Poincare sphere the Z states sit on
the sigma_x axis and the X states on the sigma_y axis, so a real rotation
``exp(-i*eps*sigma_y)`` misaligns Z only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

NORM_TOL = 1e-12
UNITARY_TOL = 1e-10

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)


class Basis(enum.IntEnum):
    Z = 0
    X = 1


@dataclass(frozen=True)
class Bb84Symbol:
    basis: Basis
    bit: int

    def __post_init__(self):
        if self.bit not in (0, 1):
            raise ValueError(f"bit must be 0 or 1, got {self.bit!r}")
        object.__setattr__(self, "basis", Basis(self.basis))

    @property
    def theta(self) -> float:
        return symbol_theta(self.basis, self.bit)

    @classmethod
    def from_theta(cls, theta: float) -> "Bb84Symbol":
        quarters = (theta % (2 * math.pi)) / (math.pi / 2)
        q = int(round(quarters)) % 4
        if abs(quarters - round(quarters)) > 1e-9:
            raise ValueError(f"theta {theta!r} is not a BB84 phase")
        return cls(Basis(q % 2), q // 2)


def symbol_theta(basis, bit):
    """Phase theta for (basis, bit); works elementwise on integer arrays."""
    theta = (np.asarray(basis, dtype=float) + 2 * np.asarray(bit)) * (math.pi / 2)
    return float(theta) if theta.ndim == 0 else theta


@dataclass(frozen=True)
class PolarizationState:
    amplitude_h: complex
    amplitude_v: complex

    def __post_init__(self):
        norm = abs(self.amplitude_h) ** 2 + abs(self.amplitude_v) ** 2
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"state is not normalized (|psi|^2 = {norm!r})")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.amplitude_h, self.amplitude_v], dtype=complex)

    @classmethod
    def from_vector(cls, vec) -> "PolarizationState":
        vec = np.asarray(vec, dtype=complex)
        vec = vec / np.linalg.norm(vec)
        return cls(complex(vec[0]), complex(vec[1]))

    def overlap(self, other: "PolarizationState") -> float:
        """|<self|other>|, which ignores the unphysical global phase."""
        return float(abs(np.vdot(self.vector, other.vector)))


class PolarizationUnitary:
    """A 2x2 unitary acting on Jones vectors."""

    __slots__ = ("matrix",)

    def __init__(self, matrix, check: bool = True):
        m = np.array(matrix, dtype=complex)
        if m.shape != (2, 2):
            raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
        if check:
            if not np.allclose(m.conj().T @ m, np.eye(2), rtol=0, atol=UNITARY_TOL):
                raise ValueError("matrix is not unitary")
        self.matrix = m

    def __matmul__(self, other: "PolarizationUnitary") -> "PolarizationUnitary":
        return PolarizationUnitary(self.matrix @ other.matrix, check=False)

    def __repr__(self):
        return f"PolarizationUnitary({self.matrix.tolist()!r})"

    @classmethod
    def identity(cls) -> "PolarizationUnitary":
        return cls(np.eye(2, dtype=complex), check=False)

    @classmethod
    def rotation(cls, axis, angle: float) -> "PolarizationUnitary":
        return cls(axis_rotation(axis, angle), check=False)

    @classmethod
    def from_angles(cls, phase_a: float, rotation: float, phase_b: float) -> "PolarizationUnitary":
        """Phase-rotation-phase product; spans SU(2) up to a global phase."""
        m = axis_rotation(SIGMA_Z, phase_b) @ axis_rotation(SIGMA_Y, rotation) @ axis_rotation(SIGMA_Z, phase_a)
        return cls(m, check=False)

    @property
    def det(self) -> complex:
        return complex(np.linalg.det(self.matrix))


def axis_rotation(axis, angle: float) -> np.ndarray:
    """``exp(-i * angle * n.sigma)`` for a unit axis or a Pauli matrix."""
    axis = np.asarray(axis)
    if axis.shape == (2, 2):
        gen = axis.astype(complex)
    else:
        n = np.asarray(axis, dtype=float)
        n = n / np.linalg.norm(n)
        gen = n[0] * SIGMA_X + n[1] * SIGMA_Y + n[2] * SIGMA_Z
    return math.cos(angle) * np.eye(2, dtype=complex) - 1j * math.sin(angle) * gen


def random_unitary(rng: np.random.Generator) -> PolarizationUnitary:
    """Haar-distributed element of SU(2) via a uniform unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    m = np.array([[a + 1j * b, c + 1j * d], [-c + 1j * d, a - 1j * b]])
    return PolarizationUnitary(m, check=False)


def symbol_to_state(symbol: Bb84Symbol) -> PolarizationState:
    theta = symbol.theta
    s = 1 / math.sqrt(2)
    return PolarizationState(complex(s), complex(s * np.exp(1j * theta)))


def state_vectors(theta: np.ndarray) -> np.ndarray:
    """Jones vectors for an array of phases, shape (n, 2)."""
    out = np.empty(np.shape(theta) + (2,), dtype=complex)
    out[..., 0] = 1 / math.sqrt(2)
    out[..., 1] = np.exp(1j * np.asarray(theta)) / math.sqrt(2)
    return out


def apply_unitary(u: PolarizationUnitary, s: PolarizationState) -> PolarizationState:
    out = u.matrix @ s.vector
    # renormalize away accumulated rounding; unitarity keeps this ~1
    return PolarizationState.from_vector(out)


def measurement_probabilities(
    s: PolarizationState,
    basis: Basis,
    compensation: PolarizationUnitary | None = None,
) -> tuple[float, float]:
    """Born-rule outcome probabilities (bit 0, bit 1) for measuring in ``basis``."""
    vec = s.vector if compensation is None else compensation.matrix @ s.vector
    probs = []
    for bit in (0, 1):
        ref = symbol_to_state(Bb84Symbol(Basis(basis), bit)).vector
        probs.append(abs(np.vdot(ref, vec)) ** 2)
    total = probs[0] + probs[1]
    return probs[0] / total, probs[1] / total


def bit0_probability(vectors: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Vectorized probability of the bit-0 outcome for Jones vectors (n, 2)."""
    ref = state_vectors(np.asarray(basis) * (math.pi / 2))
    amp = np.einsum("ni,ni->n", ref.conj(), vectors)
    norm = np.einsum("ni,ni->n", vectors.conj(), vectors).real
    return np.abs(amp) ** 2 / norm


def extinction_error(er_db: float) -> float:
    """Probability that a click leaks to the wrong detector for a finite ER."""
    return 1.0 / (1.0 + 10.0 ** (er_db / 10.0))


def poisson_photon_number(mean, rng: np.random.Generator, size=None):
    if np.any(np.asarray(mean) < 0):
        raise ValueError("mean photon number must be non-negative")
    return rng.poisson(mean, size=size)


def binary_entropy(x):
    """Shannon binary entropy in bits, with h(0) = h(1) = 0."""
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError(f"binary entropy needs 0 <= x <= 1, got {x!r}")
    inner = (arr > 0) & (arr < 1)
    safe = np.where(inner, arr, 0.5)
    h = -safe * np.log2(safe) - (1 - safe) * np.log2(1 - safe)
    h = np.where(inner, h, 0.0)
    return float(h) if h.ndim == 0 else h


@dataclass(frozen=True)
class IntensitySetting:
    """Signal/decoy mean photon numbers and Alice's selection probabilities."""

    mu: float
    nu: float
    p_mu: float
    p_z: float

    def __post_init__(self):
        if not (self.mu > self.nu > 0):
            raise ValueError(f"need mu > nu > 0, got mu={self.mu}, nu={self.nu}")
        for name in ("p_mu", "p_z"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")

    @property
    def p_nu(self) -> float:
        return 1.0 - self.p_mu

    @property
    def p_x(self) -> float:
        return 1.0 - self.p_z

    def mixture(self) -> tuple[tuple[float, float], ...]:
        return ((self.mu, self.p_mu), (self.nu, self.p_nu))
