"""One-decoy finite-key analysis.

Turns per-basis, per-intensity detection and error counts into the vacuum and
single-photon bounds, the phase-error bound and finally the extractable key
length. The bound set follows the one-decoy protocol with Hoeffding
fluctuation terms; see ``decoy_bounds`` for the exact expressions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

from .optics import IntensitySetting, binary_entropy

# the key-length formula spends 19 Hoeffding-type failure events in total
SECRECY_TERMS = 19


@dataclass(frozen=True)
class SiftedCounts:
    n_z_mu: int
    n_z_nu: int
    n_x_mu: int
    n_x_nu: int
    m_z_mu: int
    m_z_nu: int
    m_x_mu: int
    m_x_nu: int
    t: float

    def __post_init__(self):
        for b in "zx":
            for k in ("mu", "nu"):
                n = getattr(self, f"n_{b}_{k}")
                m = getattr(self, f"m_{b}_{k}")
                if not 0 <= m <= n:
                    raise ValueError(f"need 0 <= m_{b}_{k} <= n_{b}_{k}, got {m} > {n}" if m > n else f"negative count m_{b}_{k}={m}")
        if not self.t > 0:
            raise ValueError(f"acquisition time t must be positive, got {self.t}")

    @property
    def n_z(self) -> int:
        return self.n_z_mu + self.n_z_nu

    @property
    def n_x(self) -> int:
        return self.n_x_mu + self.n_x_nu

    @property
    def m_z(self) -> int:
        return self.m_z_mu + self.m_z_nu

    @property
    def m_x(self) -> int:
        return self.m_x_mu + self.m_x_nu

    @property
    def qber_z(self) -> float:
        return self.m_z / self.n_z if self.n_z else 0.0

    @property
    def qber_x(self) -> float:
        return self.m_x / self.n_x if self.n_x else 0.0

    def __add__(self, other: "SiftedCounts") -> "SiftedCounts":
        vals = {f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)}
        return SiftedCounts(**vals)

    @classmethod
    def zero(cls, t: float) -> "SiftedCounts":
        return cls(0, 0, 0, 0, 0, 0, 0, 0, t)


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = 1e-9
    eps_cor: float = 1e-15
    f_ec: float = 1.16
    # per-use Hoeffding failure probability; None means eps_sec / 19
    eps_hoeffding: float | None = None

    def __post_init__(self):
        for name in ("eps_sec", "eps_cor"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.f_ec < 1:
            raise ValueError(f"f_ec must be >= 1, got {self.f_ec}")
        if self.eps_hoeffding is not None and not 0 < self.eps_hoeffding < 1:
            raise ValueError(f"eps_hoeffding must lie in (0, 1), got {self.eps_hoeffding}")

    @property
    def eps1(self) -> float:
        if self.eps_hoeffding is not None:
            return self.eps_hoeffding
        return self.eps_sec / SECRECY_TERMS


@dataclass(frozen=True)
class DecoyBounds:
    s_z0_lower: float
    s_z0_upper: float
    s_z1_lower: float
    s_x1_lower: float
    v_x1_upper: float
    clamped: tuple[str, ...] = ()


@dataclass(frozen=True)
class KeyRateReport:
    tau_0: float
    tau_1: float
    s_z0_lower: float
    s_z1_lower: float
    s_x1_lower: float
    v_x1_upper: float
    phi_z_upper: float
    leak_ec: float
    key_length: int
    skr: float
    qber_z: float
    qber_x: float
    n_z: int
    t: float
    clamped: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clamped"] = list(self.clamped)
        return d


def tau_n(n: int, intensities) -> float:
    """Probability that Alice's pulse holds ``n`` photons, averaged over intensities.

    ``intensities`` is an :class:`IntensitySetting` or an iterable of
    ``(mean, probability)`` pairs.
    """
    if n < 0:
        raise ValueError("photon number must be non-negative")
    mix = intensities.mixture() if isinstance(intensities, IntensitySetting) else tuple(intensities)
    total = 0.0
    for mean, prob in mix:
        # 0**0 == 1 covers the vacuum term of a zero-intensity setting
        total += prob * math.exp(-mean) * mean**n / math.factorial(n)
    return total


def hoeffding_delta(n: float, eps: float) -> float:
    """Hoeffding deviation sqrt(n/2 * ln(1/eps))."""
    if n < 0:
        raise ValueError("count must be non-negative")
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    return math.sqrt(n / 2.0 * math.log(1.0 / eps))


def basis_bounds(n_mu, n_nu, m_mu, m_nu, it: IntensitySetting, eps1: float, finite: bool = True):
    """Unclamped ``(s0_lower, s0_upper, s1_lower, v1_upper)`` for one basis."""
    mu, nu, p_mu, p_nu = it.mu, it.nu, it.p_mu, it.p_nu
    n = n_mu + n_nu
    m = m_mu + m_nu
    dn = hoeffding_delta(n, eps1) if finite else 0.0
    dm = hoeffding_delta(m, eps1) if finite else 0.0
    tau0 = tau_n(0, it)
    tau1 = tau_n(1, it)

    n_plus_mu = math.exp(mu) / p_mu * (n_mu + dn)
    n_minus_nu = math.exp(nu) / p_nu * (n_nu - dn)
    m_plus_mu = math.exp(mu) / p_mu * (m_mu + dm)
    m_minus_nu = math.exp(nu) / p_nu * (m_nu - dm)
    m_plus_nu = math.exp(nu) / p_nu * (m_nu + dm)

    s0_lower = tau0 * (mu * n_minus_nu - nu * n_plus_mu) / (mu - nu)
    # vacuum events carry a 1/2 error rate, so the decoy error count caps them
    s0_upper = 2.0 * (tau0 * m_plus_nu + dn)
    s1_lower = (tau1 * mu) / (nu * (mu - nu)) * (
        n_minus_nu - (nu / mu) ** 2 * n_plus_mu - (mu**2 - nu**2) / mu**2 * s0_upper / tau0
    )
    v1_upper = tau1 * (m_plus_mu - m_minus_nu) / (mu - nu)
    return s0_lower, s0_upper, s1_lower, v1_upper


def decoy_bounds(
    counts: SiftedCounts,
    intensities: IntensitySetting,
    sec: SecurityParams = SecurityParams(),
    finite: bool = True,
) -> DecoyBounds:
    """Vacuum and single-photon bounds for both bases.

    With ``n^+-_k = e^k/p_k (n_k +- delta(n))``:

    * ``s0_L = tau0 (mu n^-_nu - nu n^+_mu) / (mu - nu)``
    * ``s0_U = 2 (tau0 e^nu/p_nu m^+_nu + delta(n))``
    * ``s1_L = tau1 mu / (nu (mu - nu)) [n^-_nu - nu^2/mu^2 n^+_mu - (mu^2 - nu^2)/mu^2 s0_U / tau0]``
    * ``v1_U = tau1 (m^+_mu - m^-_nu) / (mu - nu)``

    ``finite=False`` drops every fluctuation term (asymptotic limit).
    Raw values outside their physical range are clamped and named in
    ``clamped``.
    """
    if not intensities.mu > intensities.nu:
        raise ValueError("decoy bounds need mu > nu")
    eps1 = sec.eps1
    clamped = []

    def clamp(name, value, lo, hi=math.inf):
        if value < lo or value > hi:
            clamped.append(name)
            return min(max(value, lo), hi)
        return value

    s_z0_l, s_z0_u, s_z1_l, _ = basis_bounds(
        counts.n_z_mu, counts.n_z_nu, counts.m_z_mu, counts.m_z_nu, intensities, eps1, finite
    )
    _, _, s_x1_l, v_x1_u = basis_bounds(
        counts.n_x_mu, counts.n_x_nu, counts.m_x_mu, counts.m_x_nu, intensities, eps1, finite
    )
    s_z0_l = clamp("s_z0_lower", s_z0_l, 0.0)
    s_z0_u = clamp("s_z0_upper", s_z0_u, 0.0)
    s_z1_l = clamp("s_z1_lower", s_z1_l, 0.0)
    s_x1_l = clamp("s_x1_lower", s_x1_l, 0.0)
    v_x1_u = clamp("v_x1_upper", v_x1_u, 0.0, s_x1_l)
    return DecoyBounds(s_z0_l, s_z0_u, s_z1_l, s_x1_l, v_x1_u, tuple(clamped))


def gamma(a: float, b: float, c: float, d: float) -> float:
    """Finite-size correction to a phase error rate estimated from ``d`` samples.

    ``a`` is the failure probability, ``b`` the observed rate and ``c``, ``d``
    the sizes of the key and test populations.
    """
    if c <= 0 or d <= 0:
        return math.inf
    prod = (1.0 - b) * b
    if prod <= 0:
        return 0.0
    arg = (c + d) / (c * d * prod) * (21.0**2 / a**2)
    inner = (c + d) * prod / (c * d * math.log(2)) * math.log2(arg)
    return math.sqrt(max(inner, 0.0))


def phase_error_upper(
    s_z1_lower: float,
    s_x1_lower: float,
    v_x1_upper: float,
    sec: SecurityParams = SecurityParams(),
    finite: bool = True,
) -> float:
    if s_x1_lower <= 0 or s_z1_lower <= 0:
        return 0.5
    ratio = min(max(v_x1_upper / s_x1_lower, 0.0), 1.0)
    phi = ratio
    if finite:
        phi += gamma(sec.eps_sec, ratio, s_z1_lower, s_x1_lower)
    return min(max(phi, 0.0), 0.5)


def key_length(
    bounds: DecoyBounds,
    phi_z_upper: float,
    counts: SiftedCounts,
    sec: SecurityParams = SecurityParams(),
) -> tuple[int, float]:
    """Secret key length in bits and the rate over the acquisition time."""
    leak = sec.f_ec * counts.n_z * binary_entropy(counts.qber_z)
    raw = (
        bounds.s_z0_lower
        + bounds.s_z1_lower * (1.0 - binary_entropy(phi_z_upper))
        - leak
        - 6.0 * math.log2(SECRECY_TERMS / sec.eps_sec)
        - math.log2(2.0 / sec.eps_cor)
    )
    length = max(0, math.floor(raw))
    return length, length / counts.t


def key_rate_report(
    counts: SiftedCounts,
    intensities: IntensitySetting,
    sec: SecurityParams = SecurityParams(),
) -> KeyRateReport:
    bounds = decoy_bounds(counts, intensities, sec)
    phi = phase_error_upper(bounds.s_z1_lower, bounds.s_x1_lower, bounds.v_x1_upper, sec)
    clamped = list(bounds.clamped)
    if bounds.s_x1_lower <= 0 or bounds.s_z1_lower <= 0 or phi >= 0.5:
        clamped.append("phi_z_upper")
    length, skr = key_length(bounds, phi, counts, sec)
    return KeyRateReport(
        tau_0=tau_n(0, intensities),
        tau_1=tau_n(1, intensities),
        s_z0_lower=bounds.s_z0_lower,
        s_z1_lower=bounds.s_z1_lower,
        s_x1_lower=bounds.s_x1_lower,
        v_x1_upper=bounds.v_x1_upper,
        phi_z_upper=phi,
        leak_ec=sec.f_ec * counts.n_z * binary_entropy(counts.qber_z),
        key_length=length,
        skr=skr,
        qber_z=counts.qber_z,
        qber_x=counts.qber_x,
        n_z=counts.n_z,
        t=counts.t,
        clamped=tuple(clamped),
    )
