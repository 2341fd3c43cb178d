"""First-passage-time density of the simple diffusion process.

Two series expansions of the unit-scale density are available: one that
converges quickly for small scaled decision times and one for large. An
automatic switching rule picks the representation and the number of series
terms needed for a target truncation accuracy epsilon. The general density
follows from the unit-scale one through an exact scaling factorization, and
the upper boundary is handled by reflecting drift and start point.

All functions are pure; safe to call concurrently.
"""

import enum
import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# Density values below this are reported as exactly 0; log-density callers
# clamp at LOG_FLOOR instead of propagating -inf into particle weights.
DENSITY_FLOOR = 1e-300
LOG_FLOOR = -690.0

# Hard cap on series length for pathological inputs.
KAPPA_CAP = 10_000


class Boundary(str, enum.Enum):
    LOWER = "lower"
    UPPER = "upper"


class Representation(str, enum.Enum):
    SMALL_TIME = "small-time"
    LARGE_TIME = "large-time"


class _TruncationDiagnostics:
    """Counts how often the series-length cap was hit."""

    def __init__(self):
        self._lock = threading.Lock()
        self.kappa_cap_hits = 0

    def record_cap_hit(self, count: int = 1):
        with self._lock:
            self.kappa_cap_hits += count

    def reset(self):
        with self._lock:
            self.kappa_cap_hits = 0


truncation_diagnostics = _TruncationDiagnostics()


@dataclass(frozen=True)
class SimpleDiffusionParams:
    """Drift v, boundary separation a, relative start point w, decision time t_d."""

    v: float
    a: float
    w: float
    t_d: float

    def __post_init__(self):
        if not self.a > 0:
            raise DomainError(f"boundary separation must be positive, got a={self.a}")
        if not 0 < self.w < 1:
            raise DomainError(f"relative start point must lie in (0,1), got w={self.w}")
        if not self.t_d > 0:
            raise DomainError(f"decision time must be positive, got t_d={self.t_d}")


@dataclass(frozen=True)
class SeriesPlan:
    representation: Representation
    kappa: int
    epsilon: float

    def __post_init__(self):
        if self.kappa < 1:
            raise DomainError(f"series length must be >= 1, got {self.kappa}")
        if not self.epsilon > 0:
            raise DomainError(f"target accuracy must be positive, got {self.epsilon}")


def _check_t_eps(t_scaled, epsilon):
    if not t_scaled > 0:
        raise DomainError(f"scaled time must be positive, got {t_scaled}")
    if not 0 < epsilon <= 0.01:
        raise DomainError(f"epsilon must lie in (0, 0.01], got {epsilon}")


def _sqrt_or_zero(arg):
    return math.sqrt(arg) if arg > 0 else 0.0


def switching_indicator(t_scaled: float, epsilon: float) -> float:
    """Decision function of the representation rule; >= 0 selects large-time.

    Square-root arguments that go negative (extremely large t) contribute 0.
    """
    term_small = _sqrt_or_zero(-2.0 * t_scaled * math.log(2.0 * epsilon * math.sqrt(2.0 * math.pi * t_scaled)))
    term_large = _sqrt_or_zero(-2.0 * math.log(math.pi * t_scaled * epsilon) / (math.pi ** 2 * t_scaled))
    return 2.0 + term_small - term_large


def kappa_small_time(t_scaled: float, epsilon: float) -> int:
    raw = max(
        2.0 + _sqrt_or_zero(-2.0 * t_scaled * math.log(2.0 * epsilon * math.sqrt(2.0 * math.pi * t_scaled))),
        1.0 + math.sqrt(t_scaled),
    )
    return _capped_ceil(raw)


def kappa_large_time(t_scaled: float, epsilon: float) -> int:
    raw = max(
        _sqrt_or_zero(-2.0 * math.log(math.pi * t_scaled * epsilon) / (math.pi ** 2 * t_scaled)),
        1.0 / (math.pi * math.sqrt(t_scaled)),
    )
    return _capped_ceil(raw)


def _capped_ceil(raw):
    k = max(1, int(math.ceil(raw)))
    if k > KAPPA_CAP:
        truncation_diagnostics.record_cap_hit()
        return KAPPA_CAP
    return k


def choose_representation(t_scaled: float, epsilon: float) -> SeriesPlan:
    """Pick the series representation and truncation length for one evaluation."""
    _check_t_eps(t_scaled, epsilon)
    if switching_indicator(t_scaled, epsilon) >= 0:
        return SeriesPlan(Representation.LARGE_TIME, kappa_large_time(t_scaled, epsilon), epsilon)
    return SeriesPlan(Representation.SMALL_TIME, kappa_small_time(t_scaled, epsilon), epsilon)


# --------------------------------------------------------------------------- #
# unit-scale density (drift 0, boundary separation 1)
# --------------------------------------------------------------------------- #

def wfpt_unit_density(t_scaled: float, w: float, plan: SeriesPlan) -> float:
    """Truncated series value of the unit-parameter density at the lower boundary."""
    if not t_scaled > 0:
        raise DomainError(f"scaled time must be positive, got {t_scaled}")
    if not 0 < w < 1:
        raise DomainError(f"relative start point must lie in (0,1), got w={w}")
    if plan.representation is Representation.LARGE_TIME:
        k = np.arange(1, plan.kappa + 1, dtype=float)
        val = math.pi * float(np.sum(k * np.sin(k * math.pi * w) * np.exp(-0.5 * k * k * math.pi ** 2 * t_scaled)))
    else:
        lo = -((plan.kappa - 1) // 2)
        hi = -(-(plan.kappa - 1) // 2)
        k = np.arange(lo, hi + 1, dtype=float)
        u = w + 2.0 * k
        val = float(np.sum(u * np.exp(-u * u / (2.0 * t_scaled)))) / math.sqrt(2.0 * math.pi * t_scaled ** 3)
    return val if val > 0.0 else 0.0


def wfpt_density(choice: Boundary, p: SimpleDiffusionParams, epsilon: float = 1e-10) -> float:
    """Defective first-passage density at one boundary of the simple diffusion."""
    choice = Boundary(choice)
    if choice is Boundary.UPPER:
        p = SimpleDiffusionParams(v=-p.v, a=p.a, w=1.0 - p.w, t_d=p.t_d)
    t_scaled = p.t_d / p.a ** 2
    plan = choose_representation(t_scaled, epsilon)
    unit = wfpt_unit_density(t_scaled, p.w, plan)
    val = math.exp(-p.v * p.a * p.w - 0.5 * p.v ** 2 * p.t_d) / p.a ** 2 * unit
    return val if val >= DENSITY_FLOOR else 0.0
