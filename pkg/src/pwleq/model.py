"""biLSTM + linear Conv1D equalizer: 81 received symbols in, 61 out.

Both LSTM directions are stored stacked on a leading axis of size 2
(index 0 scans forward in time, index 1 backward) so a single matmul per
time step advances both.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .activation import ActivationKind, FixedFormat, PwlSpec
from .nncore import (
    EXACT_SIGMOID,
    EXACT_TANH,
    ActivationFn,
    DimensionError,
    LstmCache,
    conv1d_backward,
    conv1d_forward,
    fixed_activation,
    glorot_uniform,
    load_checkpoint,
    lstm_cell_backward_core,
    lstm_cell_forward,
    make_rng,
    pwl_activation,
    save_checkpoint,
)

WINDOW = 81
KERNEL = 21
OUTPUTS = WINDOW - KERNEL + 1  # 61
LOOKBACK = (KERNEL - 1) // 2  # 10
HIDDEN = 35
FEATURES = 2

PARAM_NAMES = ("W", "U", "b", "kernels", "conv_bias")


@dataclass(frozen=True)
class EqualizerParams:
    W: np.ndarray  # (2, 4H, I)
    U: np.ndarray  # (2, 4H, H)
    b: np.ndarray  # (2, 4H)
    kernels: np.ndarray  # (2, 2H, K)
    conv_bias: np.ndarray  # (2,)

    def __post_init__(self):
        H = self.hidden
        expected = {
            "W": (2, 4 * H, FEATURES),
            "U": (2, 4 * H, H),
            "b": (2, 4 * H),
            "kernels": (FEATURES, 2 * H, self.kernels.shape[-1]),
            "conv_bias": (FEATURES,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def hidden(self) -> int:
        return self.U.shape[-1]

    @property
    def input_size(self) -> int:
        return self.W.shape[-1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[-1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d) -> "EqualizerParams":
        return cls(**{name: np.asarray(d[name], dtype=np.float64) for name in PARAM_NAMES})

    @classmethod
    def zeros(cls, hidden: int = HIDDEN, input_size: int = FEATURES, kernel: int = KERNEL) -> "EqualizerParams":
        H = hidden
        return cls(
            np.zeros((2, 4 * H, input_size)),
            np.zeros((2, 4 * H, H)),
            np.zeros((2, 4 * H)),
            np.zeros((FEATURES, 2 * H, kernel)),
            np.zeros(FEATURES),
        )

    # per-direction views, forward scan = 0, backward scan = 1
    def lstm(self, direction: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.W[direction], self.U[direction], self.b[direction]


def init_params(seed: int, hidden: int = HIDDEN, input_size: int = FEATURES, kernel: int = KERNEL) -> EqualizerParams:
    """Glorot-uniform weights, zero biases except forget-gate bias 1."""
    rng = make_rng(seed)
    H = hidden
    W = np.stack([glorot_uniform(rng, (4 * H, input_size), input_size, 4 * H) for _ in range(2)])
    U = np.stack([glorot_uniform(rng, (4 * H, H), H, 4 * H) for _ in range(2)])
    b = np.zeros((2, 4 * H))
    b[:, H : 2 * H] = 1.0
    kernels = glorot_uniform(rng, (FEATURES, 2 * H, kernel), 2 * H * kernel, FEATURES * kernel)
    return EqualizerParams(W, U, b, kernels, np.zeros(FEATURES))


# ---------------------------------------------------------------------------
# activation sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationSet:
    gate: ActivationFn = EXACT_SIGMOID
    state: ActivationFn = EXACT_TANH
    sigmoid_spec: PwlSpec | None = None
    tanh_spec: PwlSpec | None = None

    @property
    def mode(self) -> str:
        return "exact" if self.sigmoid_spec is None else "pwl"

    @property
    def segments(self) -> int:
        return 0 if self.tanh_spec is None else self.tanh_spec.segments


EXACT = ActivationSet()


def swap_activations(acts_exact: ActivationSet, sigmoid_spec: PwlSpec, tanh_spec: PwlSpec) -> ActivationSet:
    """Replace the gate (sigmoid) and state (tanh) functions by PWL specs."""
    if sigmoid_spec.kind is not ActivationKind.SIGMOID:
        raise ValueError(f"gate role needs a sigmoid spec, got {sigmoid_spec.kind.value}")
    if tanh_spec.kind is not ActivationKind.TANH:
        raise ValueError(f"state role needs a tanh spec, got {tanh_spec.kind.value}")
    return replace(
        acts_exact,
        gate=pwl_activation(sigmoid_spec),
        state=pwl_activation(tanh_spec),
        sigmoid_spec=sigmoid_spec,
        tanh_spec=tanh_spec,
    )


def fixed_point_activations(acts: ActivationSet, fmt: FixedFormat) -> ActivationSet:
    """Same PWL specs evaluated through the integer datapath in ``fmt``."""
    if acts.mode != "pwl":
        raise ValueError("fixed-point evaluation needs PWL activations")
    return replace(
        acts,
        gate=fixed_activation(acts.sigmoid_spec, fmt),
        state=fixed_activation(acts.tanh_spec, fmt),
    )


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _as_batch(window: np.ndarray, params: EqualizerParams) -> tuple[np.ndarray, bool]:
    w = np.asarray(window, dtype=np.float64)
    single = w.ndim == 2
    if single:
        w = w[None]
    if w.ndim != 3 or w.shape[-2:] != (WINDOW, params.input_size):
        raise DimensionError(f"window batch has shape {np.shape(window)}")
    return w, single


def _tail_hits(acts: ActivationSet, z: np.ndarray, c: np.ndarray, H: int) -> tuple[int, int]:
    """Count PWL inputs that land on a zero-slope segment."""
    if acts.mode == "exact":
        return 0, z.size + c.size
    gate_flat = acts.gate.derivative(z[..., np.r_[0 : 2 * H, 3 * H : 4 * H]]) == 0.0
    state_flat = acts.state.derivative(z[..., 2 * H : 3 * H]) == 0.0
    cell_flat = acts.state.derivative(c) == 0.0
    hits = int(gate_flat.sum() + state_flat.sum() + cell_flat.sum())
    return hits, z.size + c.size


def _scan(params: EqualizerParams, x: np.ndarray, acts: ActivationSet, keep_cache: bool, stats: dict | None):
    """Run both LSTM directions. x: (B, T, I). Returns per-step hidden
    states (2, B, T, H) in each direction's own scan order, plus caches."""
    B, T, _ = x.shape
    H = params.hidden
    xs = np.stack([x, x[:, ::-1]])  # (2, B, T, I)
    proj = np.matmul(xs, np.swapaxes(params.W, -1, -2)[:, None]) + params.b[:, None, None, :]
    h = np.zeros((2, B, H))
    c = np.zeros((2, B, H))
    hs = np.empty((2, B, T, H))
    caches: list[LstmCache] = []
    for t in range(T):
        h, c, cache = lstm_cell_forward(
            xs[:, :, t], h, c, params.W, params.U, params.b, acts.gate, acts.state, x_proj=proj[:, :, t]
        )
        hs[:, :, t] = h
        if keep_cache:
            caches.append(cache)
        if stats is not None:
            hits, total = _tail_hits(acts, cache.z, cache.c, H)
            stats["tail_hits"] = stats.get("tail_hits", 0) + hits
            stats["total"] = stats.get("total", 0) + total
    return xs, hs, caches


def _features(hs: np.ndarray) -> np.ndarray:
    return np.concatenate([hs[0], hs[1][:, ::-1]], axis=-1)


def equalizer_forward(
    params: EqualizerParams,
    window: np.ndarray,
    acts: ActivationSet = EXACT,
    stats: dict | None = None,
) -> np.ndarray:
    """Equalize one window (T x 2) or a batch (B x T x 2).

    Output row j is the estimate of the transmitted symbol at window
    position j + 10.
    """
    x, single = _as_batch(window, params)
    _, hs, _ = _scan(params, x, acts, keep_cache=False, stats=stats)
    out = conv1d_forward(_features(hs), params.kernels, params.conv_bias)
    return out[0] if single else out


def equalizer_backward(
    params: EqualizerParams,
    window: np.ndarray,
    acts: ActivationSet,
    grad_out: np.ndarray,
) -> EqualizerParams:
    """Gradients of sum(grad_out * forward(window)) w.r.t. every parameter,
    summed over the batch. Returned in an EqualizerParams container."""
    x, single = _as_batch(window, params)
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[None]
    return forward_backward(params, x, acts, g)[1]


def forward_backward(
    params: EqualizerParams,
    x: np.ndarray,
    acts: ActivationSet,
    grad_out: np.ndarray | None = None,
    target: np.ndarray | None = None,
):
    """Forward plus BPTT for a batch.

    Either ``grad_out`` is given, or ``target`` is, in which case the loss
    is the mean squared error over all outputs and its gradient is used.
    Returns ``(output, grads, loss)``.
    """
    B, T, _ = x.shape
    H = params.hidden
    xs, hs, caches = _scan(params, x, acts, keep_cache=True, stats=None)
    feats = _features(hs)
    out = conv1d_forward(feats, params.kernels, params.conv_bias)
    loss = None
    if grad_out is None:
        diff = out - target
        loss = float(np.mean(diff * diff))
        grad_out = 2.0 * diff / diff.size
    if grad_out.shape != out.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != output shape {out.shape}")
    g_feats, g_kernels, g_bias = conv1d_backward(grad_out, feats, params.kernels)
    g_hs = np.stack([g_feats[..., :H], g_feats[..., H:][:, ::-1]])  # back to scan order

    dzs = np.empty((2, B, T, 4 * H))
    dh = np.zeros((2, B, H))
    dc = np.zeros((2, B, H))
    U = params.U
    for t in range(T - 1, -1, -1):
        dz, dc = lstm_cell_backward_core(g_hs[:, :, t] + dh, dc, caches[t], acts.gate, acts.state)
        dh = np.matmul(dz, U)
        dzs[:, :, t] = dz

    h_prev = np.concatenate([np.zeros((2, B, 1, H)), hs[:, :, :-1]], axis=2)
    dz_flat = dzs.reshape(2, B * T, 4 * H).swapaxes(1, 2)
    grads = EqualizerParams(
        W=np.matmul(dz_flat, xs.reshape(2, B * T, -1)),
        U=np.matmul(dz_flat, h_prev.reshape(2, B * T, H)),
        b=dzs.sum(axis=(1, 2)),
        kernels=g_kernels,
        conv_bias=g_bias,
    )
    return out, grads, loss


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def _iq(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-1)


def window_arrays(symbols_rx, symbols_tx) -> tuple[np.ndarray, np.ndarray]:
    """Stack every (window, target) pair: (N, 81, 2) and (N, 61, 2).

    Windows start every 61 symbols; the target is the transmitted symbols
    at window positions 10..70. A trailing remainder is dropped.
    """
    rx = np.asarray(symbols_rx, dtype=np.complex128)
    tx = np.asarray(symbols_tx, dtype=np.complex128)
    if rx.shape != tx.shape or rx.ndim != 1:
        raise ValueError("rx and tx must be 1-D sequences of equal length")
    if len(rx) < WINDOW:
        raise ValueError(f"need at least {WINDOW} symbols, got {len(rx)}")
    n = (len(rx) - WINDOW) // OUTPUTS + 1
    starts = np.arange(n) * OUTPUTS
    idx = starts[:, None] + np.arange(WINDOW)[None, :]
    windows = _iq(rx[idx])
    targets = _iq(tx[idx[:, LOOKBACK : LOOKBACK + OUTPUTS]])
    return windows, targets


def window_stream(symbols_rx, symbols_tx) -> list[tuple[np.ndarray, np.ndarray]]:
    windows, targets = window_arrays(symbols_rx, symbols_tx)
    return list(zip(windows, targets))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(path: str | Path, params: EqualizerParams, acts: ActivationSet = EXACT) -> Path:
    """Write ``<path>`` (binary checkpoint) and ``<path>.meta`` (text)."""
    path = Path(path)
    save_checkpoint(path, params.as_dict())
    lines = [
        f"hidden = {params.hidden}",
        f"input_size = {params.input_size}",
        f"kernel_size = {params.kernel_size}",
        f"mode = {acts.mode}",
    ]
    if acts.mode == "pwl":
        lines.append(f"sigmoid_spec = {acts.sigmoid_spec.to_record()}")
        lines.append(f"tanh_spec = {acts.tanh_spec.to_record()}")
    Path(str(path) + ".meta").write_text("\n".join(lines) + "\n")
    return path


def load_model(path: str | Path) -> tuple[EqualizerParams, ActivationSet]:
    path = Path(path)
    params = EqualizerParams.from_dict(load_checkpoint(path))
    meta_path = Path(str(path) + ".meta")
    acts = EXACT
    if meta_path.exists():
        meta = {}
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
        if meta.get("mode") == "pwl":
            acts = swap_activations(
                EXACT, PwlSpec.from_record(meta["sigmoid_spec"]), PwlSpec.from_record(meta["tanh_spec"])
            )
    return params, acts
