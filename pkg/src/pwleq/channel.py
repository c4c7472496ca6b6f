"""Synthetic coherent link: Gray-mapped square QAM, a quadratic-phase FIR
standing in for chromatic dispersion, a memoryless Kerr-like phase
rotation and complex AWGN."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .nncore import make_rng

NOISE_STREAM = 0x9E3779B97F4A7C15  # offsets the noise seed from the symbol seed


@dataclass(frozen=True)
class ChannelConfig:
    qam_order: int = 16
    n_symbols: int = 281_108  # 4608 windows of 61 plus 20 symbols of context
    dispersion_taps: int = 11
    dispersion_strength: float = 0.8
    kerr_gamma: float = 0.10
    snr_db: float = 18.0
    seed: int = 0

    def __post_init__(self):
        check_order(self.qam_order)
        if self.dispersion_taps < 1 or self.dispersion_taps % 2 == 0:
            raise ValueError("dispersion_taps must be odd and >= 1")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError("snr_db must be finite (or +inf for a noiseless link)")
        if self.n_symbols < 1:
            raise ValueError("n_symbols must be positive")

    def header(self) -> str:
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_header(cls, text: str) -> "ChannelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for item in text.split():
            k, v = item.split("=", 1)
            kwargs[k] = int(v) if types[k] in ("int", int) else float(v)
        return cls(**kwargs)


@dataclass(frozen=True)
class Dataset:
    tx: np.ndarray
    rx: np.ndarray
    config: ChannelConfig

    def __post_init__(self):
        if self.tx.shape != self.rx.shape:
            raise ValueError("tx and rx must have equal length")


# ---------------------------------------------------------------------------
# modulation
# ---------------------------------------------------------------------------


def check_order(order: int) -> int:
    """Return bits per axis for a square QAM order (4, 16, 64, ...)."""
    side = math.isqrt(order) if isinstance(order, (int, np.integer)) and order > 0 else 0
    if order < 4 or side * side != order or side & (side - 1):
        raise ValueError(f"QAM order must be a square power of two >= 4, got {order!r}")
    return side.bit_length() - 1


def gray(n):
    return n ^ (n >> 1)


def gray_inverse(g):
    g = np.asarray(g)
    n = g.copy()
    shift = g >> 1
    while np.any(shift):
        n ^= shift
        shift >>= 1
    return n


def qam_scale(order: int) -> float:
    """Factor that brings the odd-integer grid to unit average power."""
    return math.sqrt(2.0 * (order - 1) / 3.0)


def constellation(order: int) -> np.ndarray:
    """Point for each symbol label. The high half of the label's bits are
    the in-phase Gray code, the low half the quadrature Gray code."""
    k = check_order(order)
    side = 1 << k
    labels = np.arange(order)
    pos_i = gray_inverse(labels >> k)
    pos_q = gray_inverse(labels & (side - 1))
    pts = (2 * pos_i - side + 1) + 1j * (2 * pos_q - side + 1)
    return pts / qam_scale(order)


def gen_qam(n: int, order: int, seed: int) -> np.ndarray:
    """n i.i.d. uniform symbols from the unit-power constellation."""
    points = constellation(order)
    labels = make_rng(seed).integers(0, order, size=n)
    return points[labels]


# ---------------------------------------------------------------------------
# impairments
# ---------------------------------------------------------------------------


def dispersion_taps(taps: int, strength: float) -> np.ndarray:
    """Centred FIR whose DFT on ``taps`` bins is exp(i*strength*(2*pi*f)^2),
    normalised to unit energy."""
    if taps < 1 or taps % 2 == 0:
        raise ValueError("dispersion filter needs an odd number of taps")
    half = (taps - 1) // 2
    f = np.arange(-half, half + 1) / taps
    response = np.exp(1j * strength * (2 * np.pi * f) ** 2)
    h = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(response)))
    return h / np.sqrt(np.sum(np.abs(h) ** 2))


def dispersive_filter(x, taps: int, strength: float) -> np.ndarray:
    """Linear convolution with the centred dispersion FIR, trimmed so that
    output index n lines up with input index n."""
    x = np.asarray(x, dtype=np.complex128)
    h = dispersion_taps(taps, strength)
    half = (taps - 1) // 2
    return np.convolve(x, h)[half : half + len(x)]


def kerr_rotate(x, gamma: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    return x * np.exp(1j * gamma * np.abs(x) ** 2)


def add_awgn(x, snr_db: float, seed: int) -> np.ndarray:
    """Circular Gaussian noise of total variance 10^(-snr/10) relative to a
    unit-power signal; ``snr_db = inf`` disables it."""
    x = np.asarray(x, dtype=np.complex128)
    if snr_db == math.inf:
        return x.copy()
    sigma = math.sqrt(10.0 ** (-snr_db / 10.0) / 2.0)
    rng = make_rng(seed)
    u1 = 1.0 - rng.random(len(x))  # (0, 1], keeps the log finite
    u2 = rng.random(len(x))
    r = np.sqrt(-2.0 * np.log(u1))
    noise = r * np.cos(2 * np.pi * u2) + 1j * (r * np.sin(2 * np.pi * u2))
    return x + sigma * noise


def build_dataset(config: ChannelConfig) -> Dataset:
    tx = gen_qam(config.n_symbols, config.qam_order, config.seed)
    y = dispersive_filter(tx, config.dispersion_taps, config.dispersion_strength)
    y = kerr_rotate(y, config.kerr_gamma)
    rx = add_awgn(y, config.snr_db, (config.seed + NOISE_STREAM) % 2**64)
    return Dataset(tx, rx, config)


def identity_config(**overrides) -> ChannelConfig:
    """Channel with every impairment switched off."""
    base = ChannelConfig(dispersion_strength=0.0, kerr_gamma=0.0, snr_db=math.inf)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def save_dataset(path: str | Path, ds: Dataset) -> Path:
    """One ``tx_re,tx_im,rx_re,rx_im`` line per symbol after a ``#`` header."""
    path = Path(path)
    cols = np.stack([ds.tx.real, ds.tx.imag, ds.rx.real, ds.rx.imag], axis=1)
    lines = ["# " + ds.config.header(), "# tx_re,tx_im,rx_re,rx_im"]
    lines += [",".join(repr(float(v)) for v in row) for row in cols]
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    config = None
    rows = []
    with path.open() as fh:
        for line in fh:
            if line.startswith("#"):
                body = line[1:].strip()
                if config is None and "=" in body:
                    config = ChannelConfig.from_header(body)
                continue
            if line.strip():
                rows.append([float(v) for v in line.split(",")])
    if config is None:
        raise ValueError(f"{path}: missing channel header")
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return Dataset(arr[:, 0] + 1j * arr[:, 1], arr[:, 2] + 1j * arr[:, 3], config)


def measured_snr_db(ds: Dataset) -> float:
    """Signal-to-error power of rx against tx (all impairments included)."""
    err = np.mean(np.abs(ds.rx - ds.tx) ** 2)
    sig = np.mean(np.abs(ds.tx) ** 2)
    return math.inf if err == 0 else 10.0 * math.log10(sig / err)
