"""Sigmoid/tanh, their piecewise-linear (PWL) approximations, and a
bit-exact fixed-point model of the PWL datapath.

A PWL spec with K segments stores K-1 strictly increasing breakpoints
plus one (slope, intercept) pair per segment. A point lying exactly on a
breakpoint always belongs to the segment on its right.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

ALLOWED_SEGMENTS = (3, 5, 7, 9)

DEFAULT_ERROR_HALF_RANGE = 8.0
DEFAULT_ERROR_POINTS = 16001


class ActivationKind(enum.Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"

    @classmethod
    def parse(cls, name: str | "ActivationKind") -> "ActivationKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise ValueError(f"unknown activation kind {name!r}") from None


# ---------------------------------------------------------------------------
# exact functions
# ---------------------------------------------------------------------------


def _check_finite(x) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("activation input must be finite")


def sigmoid(x):
    """Logistic function evaluated so that only exp(-|x|) is ever formed."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def eval_exact(kind: ActivationKind, x):
    """Exact sigmoid or tanh. Accepts scalars or arrays; returns the same."""
    _check_finite(x)
    if kind is ActivationKind.TANH:
        y = np.tanh(np.asarray(x, dtype=np.float64))
    else:
        y = sigmoid(x)
    return float(y) if np.ndim(y) == 0 else y


def grad_exact(kind: ActivationKind, x):
    """Derivative of the exact function with respect to its input."""
    y = np.asarray(eval_exact(kind, x))
    g = 1.0 - y * y if kind is ActivationKind.TANH else y * (1.0 - y)
    return float(g) if np.ndim(g) == 0 else g


# ---------------------------------------------------------------------------
# PWL specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PwlSpec:
    kind: ActivationKind
    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    intercepts: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))
        object.__setattr__(self, "slopes", tuple(float(m) for m in self.slopes))
        object.__setattr__(self, "intercepts", tuple(float(c) for c in self.intercepts))
        k = len(self.slopes)
        if k < 2:
            raise ValueError("a PWL spec needs at least two segments")
        if len(self.intercepts) != k or len(self.breakpoints) != k - 1:
            raise ValueError(
                f"inconsistent PWL lengths: {len(self.breakpoints)} breakpoints, "
                f"{k} slopes, {len(self.intercepts)} intercepts"
            )
        if any(b1 <= b0 for b0, b1 in zip(self.breakpoints, self.breakpoints[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if not all(math.isfinite(v) for v in self.breakpoints + self.slopes + self.intercepts):
            raise ValueError("PWL coefficients must be finite")

    @property
    def segments(self) -> int:
        return len(self.slopes)

    def continuity_gaps(self) -> list[float]:
        """Jump |left - right| at each breakpoint."""
        m, c = self.slopes, self.intercepts
        return [
            abs((m[i] * b + c[i]) - (m[i + 1] * b + c[i + 1]))
            for i, b in enumerate(self.breakpoints)
        ]

    def to_record(self) -> str:
        fields = [self.kind.value, str(self.segments)]
        fields += [repr(v) for v in self.breakpoints + self.slopes + self.intercepts]
        return ",".join(fields)

    @classmethod
    def from_record(cls, record: str) -> "PwlSpec":
        parts = [p.strip() for p in record.strip().split(",")]
        if len(parts) < 2:
            raise ValueError(f"malformed PWL record: {record!r}")
        kind = ActivationKind.parse(parts[0])
        k = int(parts[1])
        values = [float(p) for p in parts[2:]]
        if len(values) != 3 * k - 1:
            raise ValueError(f"PWL record for K={k} needs {3 * k - 1} numbers, got {len(values)}")
        return cls(kind, values[: k - 1], values[k - 1 : 2 * k - 1], values[2 * k - 1 :])


def _spec_from_knots(kind: ActivationKind, knots: Sequence[float]) -> PwlSpec:
    """Chord interpolant through f(knots) with constant tails.

    Knots are the breakpoints; the first and last segments hold the
    function value at the outermost knots.
    """
    b = np.asarray(knots, dtype=np.float64)
    y = np.asarray(eval_exact(kind, b))
    slopes = [0.0]
    intercepts = [float(y[0])]
    for i in range(len(b) - 1):
        m = (y[i + 1] - y[i]) / (b[i + 1] - b[i])
        slopes.append(float(m))
        intercepts.append(float(y[i] - m * b[i]))
    slopes.append(0.0)
    intercepts.append(float(y[-1]))
    return PwlSpec(kind, tuple(b), tuple(slopes), tuple(intercepts))


def _check_segments(segments: int) -> None:
    if segments not in ALLOWED_SEGMENTS:
        raise ValueError(f"segments must be one of {ALLOWED_SEGMENTS}, got {segments!r}")


def fit_hard(kind: ActivationKind) -> PwlSpec:
    """Hard tanh / hard sigmoid: tangent at the origin clamped to the
    saturation values."""
    if kind is ActivationKind.TANH:
        return PwlSpec(kind, (-1.0, 1.0), (0.0, 1.0, 0.0), (-1.0, 0.0, 1.0))
    return PwlSpec(kind, (-2.0, 2.0), (0.0, 0.25, 0.0), (0.0, 0.5, 1.0))


def _symmetric_knots(positive: Sequence[float]) -> list[float]:
    pos = [float(p) for p in positive]
    return [-p for p in reversed(pos)] + pos


def fit_chord(kind: ActivationKind, segments: int, half_range: float) -> PwlSpec:
    """Chord interpolant on K-1 uniformly spaced breakpoints over
    [-half_range, half_range]."""
    _check_segments(segments)
    if not half_range > 0:
        raise ValueError("half_range must be positive")
    n = segments - 1
    # i/(n-1) mapped to [-T, T]; mirrored so the fitted segments are exactly symmetric
    pos = [half_range * (2 * i - (n - 1)) / (n - 1) for i in range(n // 2, n)]
    return _spec_from_knots(kind, _symmetric_knots(pos))


def eval_pwl(spec: PwlSpec, x):
    """Evaluate a PWL spec; scalar in, float out, array in, array out."""
    _check_finite(x)
    xa = np.asarray(x, dtype=np.float64)
    idx = np.searchsorted(spec.breakpoints, xa, side="right")
    y = np.take(spec.slopes, idx) * xa + np.take(spec.intercepts, idx)
    return float(y) if y.ndim == 0 else y


def grad_pwl(spec: PwlSpec, x):
    """Slope of the segment containing x (piecewise constant)."""
    _check_finite(x)
    idx = np.searchsorted(spec.breakpoints, np.asarray(x, dtype=np.float64), side="right")
    g = np.take(spec.slopes, idx)
    return float(g) if np.ndim(g) == 0 else g


def error_grid(half_range: float = DEFAULT_ERROR_HALF_RANGE, points: int = DEFAULT_ERROR_POINTS) -> np.ndarray:
    return np.linspace(-half_range, half_range, points)


def max_abs_error(
    spec: PwlSpec,
    grid_half_range: float = DEFAULT_ERROR_HALF_RANGE,
    grid_points: int = DEFAULT_ERROR_POINTS,
) -> float:
    """Largest |PWL - exact| over a uniform grid on [-R, R]."""
    if grid_points < 1001:
        raise ValueError("grid_points must be at least 1001")
    x = error_grid(grid_half_range, grid_points)
    return float(np.max(np.abs(eval_pwl(spec, x) - eval_exact(spec.kind, x))))


# ---------------------------------------------------------------------------
# minimax search
# ---------------------------------------------------------------------------

DEFAULT_SEARCH_HALF_RANGE = {ActivationKind.TANH: 4.0, ActivationKind.SIGMOID: 8.0}


@lru_cache(maxsize=16)
def _chord_error_table(kind: ActivationKind, search_half_range: float, grid_points: int, pairwise: bool):
    """Error tables for the minimax search on x >= 0.

    Candidates are c_0 = 0 plus grid_points - 1 uniform points on (0, R].
    ``first[j]`` is the error of the chord through the symmetric centre
    and c_j, ``tail[j]`` the error of the constant tail starting at c_j
    and ``pair[i, j]`` (when requested) the error of the chord c_i -> c_j.
    All errors are measured on the non-negative half of the default
    error grid.
    """
    cand = np.linspace(0.0, search_half_range, grid_points)
    grid = error_grid()
    dense = grid[grid >= 0.0]
    fd = np.asarray(eval_exact(kind, dense))
    fc = np.asarray(eval_exact(kind, cand))
    n = len(cand)

    lo = np.searchsorted(dense, cand, side="left")

    def chord_errors(i: int, js: np.ndarray) -> np.ndarray:
        out = np.zeros(len(js))
        start = lo[i]
        for k in range(0, len(js), 256):
            block = js[k : k + 256]
            stop = np.searchsorted(dense, cand[block[-1]], side="right")
            xs = dense[start:stop]
            if len(xs) == 0:
                continue
            slopes = (fc[block] - fc[i]) / (cand[block] - cand[i])
            err = np.abs(fc[i] + slopes[:, None] * (xs[None, :] - cand[i]) - fd[None, start:stop])
            err[xs[None, :] > cand[block][:, None]] = 0.0
            out[k : k + 256] = err.max(axis=1)
        return out

    first = np.full(n, np.inf)
    first[1:] = chord_errors(0, np.arange(1, n))
    # both functions increase on x >= 0, so a flat tail is worst at the grid end
    tail = np.abs(fd[-1] - fc)
    pair = None
    if pairwise:
        pair = np.full((n, n), np.inf)
        for i in range(1, n - 1):
            pair[i, i + 1 :] = chord_errors(i, np.arange(i + 1, n))
    return cand, first, tail, pair


def fit_minimax(
    kind: ActivationKind,
    segments: int,
    search_half_range: float | None = None,
    grid_points: int = 401,
) -> PwlSpec:
    """Best symmetric chord-with-flat-tails spec on a candidate grid.

    Searches every placement of the (K-1)/2 positive breakpoints on
    ``linspace(0, R, grid_points)[1:]`` and returns the one with the
    smallest max-abs error on the default error grid. The search is a
    bottleneck dynamic programme over the chord errors, which visits the
    same optimum as enumerating all placements. Ties go to the smaller
    outermost breakpoint. The default search range is 4 for tanh and 8 for
    the sigmoid, whose tail converges more slowly.
    """
    _check_segments(segments)
    if search_half_range is None:
        search_half_range = DEFAULT_SEARCH_HALF_RANGE[kind]
    if grid_points < 101:
        raise ValueError("grid_points must be at least 101")
    if not search_half_range > 0:
        raise ValueError("search_half_range must be positive")
    m = (segments - 1) // 2
    cand, first, tail, pair = _chord_error_table(kind, float(search_half_range), int(grid_points), m > 1)
    n = len(cand)

    best = first.copy()  # best[j]: bottleneck error with the current last knot at c_j
    parents = []
    for _ in range(m - 1):
        totals = np.maximum(best[:, None], pair)
        arg = np.argmin(totals, axis=0)  # first minimum -> smallest predecessor
        parents.append(arg)
        best = totals[arg, np.arange(n)]
    final = np.maximum(best, tail)
    final[0] = np.inf
    j = int(np.argmin(final))
    knots = [j]
    for arg in reversed(parents):
        j = int(arg[j])
        knots.append(j)
    knots.reverse()
    return _spec_from_knots(kind, _symmetric_knots(cand[knots]))


# ---------------------------------------------------------------------------
# fixed point
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedFormat:
    """Signed two's-complement format with ``frac_bits`` fractional bits."""

    total_bits: int = 16
    frac_bits: int = 12

    def __post_init__(self):
        if not 4 <= self.total_bits <= 32:
            raise ValueError("total_bits must lie in 4..32")
        if not 0 <= self.frac_bits <= self.total_bits - 1:
            raise ValueError("frac_bits must lie in 0..total_bits-1")

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.raw_min * self.lsb

    @property
    def max_value(self) -> float:
        return self.raw_max * self.lsb

    def saturate(self, raw: int) -> int:
        return max(self.raw_min, min(self.raw_max, raw))


@dataclass(frozen=True)
class FixedValue:
    raw: int
    format: FixedFormat

    def __post_init__(self):
        if not self.format.raw_min <= self.raw <= self.format.raw_max:
            raise ValueError(f"raw value {self.raw} does not fit {self.format}")

    @property
    def value(self) -> float:
        return self.raw * self.format.lsb


def quantize(x: float, fmt: FixedFormat) -> FixedValue:
    """Round half to even onto the format grid, then saturate."""
    _check_finite(x)
    scaled = float(x) * (1 << fmt.frac_bits)  # exact: power-of-two scaling
    if abs(scaled) > 2.0 ** 62:
        raw = fmt.raw_max if scaled > 0 else fmt.raw_min
    else:
        raw = fmt.saturate(round(scaled))  # Python round() is half-to-even
    return FixedValue(raw, fmt)


def shift_round(value: int, shift: int) -> int:
    """value * 2**-shift rounded half to even (left shift when shift < 0)."""
    if shift <= 0:
        return value << -shift
    q, r = divmod(value, 1 << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def _quantize_breakpoint(b: float, fmt: FixedFormat) -> int:
    """Breakpoint on the input grid. One above raw_max is allowed so that a
    breakpoint beyond the representable range is never reached, instead of
    saturating onto the largest input and moving it to the wrong segment."""
    scaled = float(b) * (1 << fmt.frac_bits)
    if scaled >= fmt.raw_max + 1:
        return fmt.raw_max + 1
    if scaled <= fmt.raw_min:
        return fmt.raw_min
    return round(scaled)


@dataclass(frozen=True)
class FixedPwl:
    """PWL coefficients quantized for the integer datapath."""

    breakpoints: tuple[int, ...]  # in the input format
    slopes: tuple[int, ...]  # coeff format
    intercepts: tuple[int, ...]  # coeff format
    in_format: FixedFormat
    coeff_format: FixedFormat

    @classmethod
    def from_spec(cls, spec: PwlSpec, in_format: FixedFormat, coeff_format: FixedFormat) -> "FixedPwl":
        return cls(
            tuple(_quantize_breakpoint(b, in_format) for b in spec.breakpoints),
            tuple(quantize(m, coeff_format).raw for m in spec.slopes),
            tuple(quantize(c, coeff_format).raw for c in spec.intercepts),
            in_format,
            coeff_format,
        )


def eval_pwl_fixed(
    spec: PwlSpec | FixedPwl,
    x: FixedValue,
    coeff_format: FixedFormat = FixedFormat(),
    out_format: FixedFormat = FixedFormat(),
) -> FixedValue:
    """Integer model of the PWL datapath.

    Segment select compares raw x against breakpoints quantized to x's
    format. The slope product is kept at full width and rounded (half to
    even) down to the output format; the intercept is aligned to the output
    format with the same rounding before the saturating add.
    """
    if isinstance(spec, PwlSpec):
        spec = FixedPwl.from_spec(spec, x.format, coeff_format)
    elif spec.in_format != x.format:
        raise ValueError("input format does not match the quantized spec")
    cf = spec.coeff_format
    seg = 0
    for b in spec.breakpoints:
        if x.raw >= b:
            seg += 1
        else:
            break
    product = spec.slopes[seg] * x.raw  # frac bits: cf + x
    term = shift_round(product, cf.frac_bits + x.format.frac_bits - out_format.frac_bits)
    offset = shift_round(spec.intercepts[seg], cf.frac_bits - out_format.frac_bits)
    return FixedValue(out_format.saturate(term + offset), out_format)


def _shift_round_array(v: np.ndarray, shift: int) -> np.ndarray:
    if shift <= 0:
        return v << -shift
    q = v >> shift  # floor division for two's complement
    r = v - (q << shift)
    half = 1 << (shift - 1)
    return q + ((r > half) | ((r == half) & ((q & 1) == 1)))


def eval_pwl_fixed_array(
    spec: PwlSpec | FixedPwl,
    raw: np.ndarray,
    in_format: FixedFormat,
    coeff_format: FixedFormat = FixedFormat(),
    out_format: FixedFormat = FixedFormat(),
) -> np.ndarray:
    """``eval_pwl_fixed`` over an int64 array of raw inputs; returns raw
    outputs. Same datapath, vectorised."""
    if isinstance(spec, PwlSpec):
        spec = FixedPwl.from_spec(spec, in_format, coeff_format)
    raw = np.asarray(raw, dtype=np.int64)
    seg = np.searchsorted(np.asarray(spec.breakpoints, dtype=np.int64), raw, side="right")
    product = np.asarray(spec.slopes, dtype=np.int64)[seg] * raw
    term = _shift_round_array(product, spec.coeff_format.frac_bits + in_format.frac_bits - out_format.frac_bits)
    offsets = np.array(
        [shift_round(c, spec.coeff_format.frac_bits - out_format.frac_bits) for c in spec.intercepts], dtype=np.int64
    )
    return np.clip(term + offsets[seg], out_format.raw_min, out_format.raw_max)


def quantize_array(x, fmt: FixedFormat) -> np.ndarray:
    """Vectorised ``quantize`` returning raw int64 values."""
    scaled = np.asarray(x, dtype=np.float64) * (1 << fmt.frac_bits)
    scaled = np.clip(scaled, fmt.raw_min, fmt.raw_max)  # saturate before rounding
    return np.rint(scaled).astype(np.int64)  # rint is half-to-even
