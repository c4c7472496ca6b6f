"""Hard decisions, BER, BER-derived Q-factor and the published reference
numbers used for comparison reports."""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .channel import check_order, gray, qam_scale

INF_Q = "INF_Q"
ZERO_Q = "ZERO_Q"


# ---------------------------------------------------------------------------
# demapping
# ---------------------------------------------------------------------------


def hard_decision(y, order: int) -> np.ndarray:
    """Nearest-point decision and Gray demapping, returning 2*log2(sqrt(M))
    bits per symbol (in-phase bits first, MSB first)."""
    k = check_order(order)
    side = 1 << k
    y = np.asarray(y, dtype=np.complex128) * qam_scale(order)

    def axis_bits(v):
        pos = np.clip(np.rint((v + side - 1) / 2.0), 0, side - 1).astype(np.int64)
        label = gray(pos)
        shifts = np.arange(k - 1, -1, -1)
        return (label[..., None] >> shifts) & 1

    bits = np.concatenate([axis_bits(y.real), axis_bits(y.imag)], axis=-1)
    return bits.reshape(-1).astype(np.uint8)


def bit_errors(estimate, reference, order: int) -> tuple[int, int]:
    a = hard_decision(estimate, order)
    b = hard_decision(reference, order)
    return int(np.count_nonzero(a != b)), len(b)


# ---------------------------------------------------------------------------
# Q-factor
# ---------------------------------------------------------------------------


def erfcinv(y: float, rtol: float = 1e-12) -> float:
    """Inverse of math.erfc on (0, 2) by bisection, polished with Newton."""
    if not 0.0 < y < 2.0:
        raise ValueError("erfcinv needs 0 < y < 2")
    if y == 1.0:
        return 0.0
    if y > 1.0:
        return -erfcinv(2.0 - y, rtol)
    # erfc is decreasing; for y < 1 the root is positive and below 27
    lo, hi = 0.0, 27.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if math.erfc(mid) > y:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-6 * max(hi, 1e-300):
            break
    x = 0.5 * (lo + hi)
    for _ in range(50):
        # d/dx erfc(x) = -2/sqrt(pi) exp(-x^2); Newton on log erfc is better
        # conditioned deep in the tail
        f = math.log(math.erfc(x)) - math.log(y)
        deriv = -2.0 / math.sqrt(math.pi) * math.exp(-x * x) / math.erfc(x)
        step = f / deriv
        x -= step
        if abs(step) <= rtol * abs(x):
            break
    return x


def q_factor_linear(ber: float) -> float:
    return math.sqrt(2.0) * erfcinv(2.0 * ber)


def q_factor_db(ber: float) -> float:
    """20*log10(sqrt(2)*erfcinv(2*ber)); +inf for ber = 0 and -inf for
    ber >= 0.5 (rendered as INF_Q / ZERO_Q)."""
    if not 0.0 <= ber <= 1.0 or math.isnan(ber):
        raise ValueError(f"BER must lie in [0, 1], got {ber!r}")
    if ber == 0.0:
        return math.inf
    if ber >= 0.5:
        return -math.inf
    return 20.0 * math.log10(q_factor_linear(ber))


def format_q(q_db: float) -> str:
    if q_db == math.inf:
        return INF_Q
    if q_db == -math.inf:
        return ZERO_Q
    return repr(float(q_db))


def parse_q(text: str) -> float:
    text = text.strip()
    if text == INF_Q:
        return math.inf
    if text == ZERO_Q:
        return -math.inf
    return float(text)


@dataclass(frozen=True)
class QResult:
    ber: float
    q_db: float
    n_bits: int
    n_errors: int = 0

    @classmethod
    def from_counts(cls, errors: int, n_bits: int) -> "QResult":
        if n_bits <= 0:
            raise ValueError("no bits to evaluate")
        ber = errors / n_bits
        return cls(ber, q_factor_db(min(ber, 0.5)), n_bits, errors)

    def record(self, label: str, segments: int, mode: str) -> str:
        return f"{label},{segments},{mode},{self.ber!r},{format_q(self.q_db)},{self.n_bits}"


def evaluate(params, acts, windows: np.ndarray, targets: np.ndarray, order: int, batch: int = 512) -> QResult:
    """Equalize every window, hard-decide its outputs and pool the BER."""
    from .model import equalizer_forward

    errors = 0
    n_bits = 0
    for start in range(0, len(windows), batch):
        out = equalizer_forward(params, windows[start : start + batch], acts)
        tgt = targets[start : start + batch]
        e, n = bit_errors(out[..., 0] + 1j * out[..., 1], tgt[..., 0] + 1j * tgt[..., 1], order)
        errors += e
        n_bits += n
    return QResult.from_counts(errors, n_bits)


def evaluate_unequalized(windows: np.ndarray, targets: np.ndarray, order: int) -> QResult:
    """Hard decisions taken straight on the received symbols aligned with
    each target block."""
    from .model import LOOKBACK, OUTPUTS

    rx = windows[:, LOOKBACK : LOOKBACK + OUTPUTS]
    e, n = bit_errors(rx[..., 0] + 1j * rx[..., 1], targets[..., 0] + 1j * targets[..., 1], order)
    return QResult.from_counts(e, n)


# ---------------------------------------------------------------------------
# published reference values
# ---------------------------------------------------------------------------

BASELINE_Q_DB = 5.2

# segments -> (Q without re-training, Q with re-training), dB
FIG1C = MappingProxyType(
    {
        3: (0.0, 5.09),
        5: (3.21, 5.075),
        7: (4.26, 5.1),
        9: (4.48, 5.1),
    }
)

# variant -> (DSP slices, LUT, FF) for the tanh implementation
TABLE1 = MappingProxyType(
    {
        "original": (26, 3849, 3020),
        "3-segment": (0, 203, 34),
        "5-segment": (0, 570, 98),
        "7-segment": (0, 1076, 164),
        "9-segment": (0, 1374, 230),
    }
)


@dataclass(frozen=True)
class PaperReference:
    baseline_q_db: float = BASELINE_Q_DB
    fig1c: MappingProxyType = FIG1C
    table1: MappingProxyType = TABLE1


PAPER_REFERENCE = PaperReference()
