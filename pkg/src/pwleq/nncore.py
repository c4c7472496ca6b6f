"""Hand-written layers for the equalizer: LSTM cell, 1-D convolution, Adam.

Tensors are plain float64 numpy arrays. Layer functions accept extra
leading batch axes. LSTM weights may also carry one leading "stack" axis
(W: S x 4H x I) so several independent cells step together; the matching
inputs are then shaped S x B x I.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .activation import (
    ActivationKind,
    FixedFormat,
    FixedPwl,
    PwlSpec,
    eval_pwl_fixed_array,
    quantize_array,
)

Tensor = np.ndarray


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator for a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActivationFn:
    """Scalar activation applied elementwise; ``derivative`` takes the
    pre-activation input, not the output."""

    name: str
    forward: Callable[[Tensor], Tensor]
    derivative: Callable[[Tensor], Tensor]
    spec: PwlSpec | None = None
    codomain: tuple[float, float] = (-1.0, 1.0)
    # same derivative written in terms of the output y = forward(x); lets
    # the LSTM backward reuse cached activations
    derivative_from_output: Callable[[Tensor], Tensor] | None = None


def _tanh_grad(x):
    t = np.tanh(x)
    return 1.0 - t * t


def fast_sigmoid(x):
    # tanh form: overflow-free and several times faster than a sign split
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _sigmoid_grad(x):
    s = fast_sigmoid(x)
    return s * (1.0 - s)


EXACT_SIGMOID = ActivationFn(
    "sigmoid", fast_sigmoid, _sigmoid_grad, codomain=(0.0, 1.0), derivative_from_output=lambda y: y * (1.0 - y)
)
EXACT_TANH = ActivationFn("tanh", np.tanh, _tanh_grad, derivative_from_output=lambda y: 1.0 - y * y)


def exact_activation(kind: ActivationKind) -> ActivationFn:
    return EXACT_TANH if kind is ActivationKind.TANH else EXACT_SIGMOID


def pwl_activation(spec: PwlSpec) -> ActivationFn:
    # searchsorted/take on cached arrays; same right-segment rule as eval_pwl
    bp = np.asarray(spec.breakpoints)
    m = np.asarray(spec.slopes)
    c = np.asarray(spec.intercepts)

    def forward(x):
        idx = np.searchsorted(bp, x, side="right")
        return m[idx] * x + c[idx]

    def derivative(x):
        return m[np.searchsorted(bp, x, side="right")]

    lo = (0.0, 1.0) if spec.kind is ActivationKind.SIGMOID else (-1.0, 1.0)
    return ActivationFn(f"pwl-{spec.kind.value}-{spec.segments}", forward, derivative, spec, lo)


def fixed_activation(spec: PwlSpec, fmt: FixedFormat) -> ActivationFn:
    """PWL activation evaluated through the integer datapath, with inputs,
    coefficients and outputs all in ``fmt``. The derivative is the float
    segment slope (straight-through), so it is for inference studies."""
    fixed = FixedPwl.from_spec(spec, fmt, fmt)
    float_act = pwl_activation(spec)

    def forward(x):
        raw = eval_pwl_fixed_array(fixed, quantize_array(x, fmt), fmt, fmt, fmt)
        return raw * fmt.lsb

    return ActivationFn(
        f"fixed{fmt.total_bits}.{fmt.frac_bits}-{spec.kind.value}-{spec.segments}",
        forward,
        float_act.derivative,
        spec,
        float_act.codomain,
    )


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------


@dataclass
class LstmCache:
    x: Tensor
    h_prev: Tensor
    c_prev: Tensor
    z: Tensor  # pre-activations, gate order (i, f, g, o)
    gates: Tensor  # activated (i, f, g, o)
    c: Tensor
    tc: Tensor  # state_act(c)


@dataclass
class LstmGrads:
    x: Tensor
    h_prev: Tensor
    c_prev: Tensor
    W: Tensor
    U: Tensor
    b: Tensor


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    y = np.matmul(x, np.swapaxes(W, -1, -2))
    return y + (b if W.ndim == 2 else b[:, None, :])


def _check_lstm_shapes(x, h, c, W, U, b) -> int:
    four_h = W.shape[-2]
    if four_h % 4:
        raise DimensionError(f"W has {four_h} rows, not a multiple of 4")
    H = four_h // 4
    if W.shape[-1] != x.shape[-1]:
        raise DimensionError(f"input size {x.shape[-1]} does not match W {W.shape}")
    if U.shape[-2:] != (four_h, H) or b.shape[-1] != four_h:
        raise DimensionError(f"U {U.shape} / b {b.shape} inconsistent with W {W.shape}")
    if h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError(f"state size must be {H}")
    return H


def lstm_cell_forward(
    x_t: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    W: Tensor,
    U: Tensor,
    b: Tensor,
    gate_act: ActivationFn = EXACT_SIGMOID,
    state_act: ActivationFn = EXACT_TANH,
    x_proj: Tensor | None = None,
):
    """One LSTM step. Returns ``(h_t, c_t, cache)``.

    ``x_proj`` may carry a precomputed ``x_t @ W.T + b`` so sequence scans
    can project all inputs in one matmul.
    """
    H = _check_lstm_shapes(x_t, h_prev, c_prev, W, U, b)
    z = _affine(x_t, W, b) if x_proj is None else x_proj
    z = z + np.matmul(h_prev, np.swapaxes(U, -1, -2))
    gates = gate_act.forward(z)
    gates[..., 2 * H : 3 * H] = state_act.forward(z[..., 2 * H : 3 * H])
    i = gates[..., :H]
    f = gates[..., H : 2 * H]
    g = gates[..., 2 * H : 3 * H]
    o = gates[..., 3 * H :]
    c_t = f * c_prev + i * g
    tc = state_act.forward(c_t)
    h_t = o * tc
    return h_t, c_t, LstmCache(x_t, h_prev, c_prev, z, gates, c_t, tc)


def lstm_cell_backward_core(grad_h, grad_c, cache: LstmCache, gate_act, state_act):
    """Gradients w.r.t. the pre-activations and the previous state.

    Returns ``(grad_z, grad_c_prev)``; parameter and input gradients follow
    from grad_z by matrix products (see lstm_cell_backward).
    """
    H = cache.c.shape[-1]
    gates = cache.gates
    i = gates[..., :H]
    f = gates[..., H : 2 * H]
    g = gates[..., 2 * H : 3 * H]
    o = gates[..., 3 * H :]
    tc = cache.tc
    from_out = state_act.derivative_from_output
    d_tc = from_out(tc) if from_out is not None else state_act.derivative(cache.c)
    dc = grad_c + grad_h * o * d_tc
    dgates = np.empty_like(gates)
    dgates[..., :H] = dc * g
    dgates[..., H : 2 * H] = dc * cache.c_prev
    dgates[..., 2 * H : 3 * H] = dc * i
    dgates[..., 3 * H :] = grad_h * tc
    if gate_act.derivative_from_output is not None:
        dz = dgates * gate_act.derivative_from_output(gates)
    else:
        dz = dgates * gate_act.derivative(cache.z)
    gz = cache.z[..., 2 * H : 3 * H]
    d_g = from_out(g) if from_out is not None else state_act.derivative(gz)
    dz[..., 2 * H : 3 * H] = dgates[..., 2 * H : 3 * H] * d_g
    return dz, dc * f


def _batch_outer(dz: Tensor, a: Tensor, stacked: bool) -> Tensor:
    if stacked:
        return np.matmul(np.swapaxes(dz, -1, -2), a)
    return dz.reshape(-1, dz.shape[-1]).T @ a.reshape(-1, a.shape[-1])


def lstm_cell_backward(
    grad_h: Tensor,
    grad_c: Tensor,
    cache: LstmCache | None,
    W: Tensor,
    U: Tensor,
    gate_act: ActivationFn = EXACT_SIGMOID,
    state_act: ActivationFn = EXACT_TANH,
) -> LstmGrads:
    """Reverse-mode gradients of one LSTM step.

    ``grad_h`` / ``grad_c`` are the upstream gradients of h_t and c_t.
    Parameter gradients are summed over batch axes.
    """
    if cache is None:
        raise RuntimeError("lstm_cell_backward needs the cache from lstm_cell_forward")
    dz, dc_prev = lstm_cell_backward_core(grad_h, grad_c, cache, gate_act, state_act)
    stacked = W.ndim == 3
    return LstmGrads(
        x=np.matmul(dz, W),
        h_prev=np.matmul(dz, U),
        c_prev=dc_prev,
        W=_batch_outer(dz, cache.x, stacked),
        U=_batch_outer(dz, cache.h_prev, stacked),
        b=dz.sum(axis=-2) if stacked else dz.reshape(-1, dz.shape[-1]).sum(axis=0),
    )


# ---------------------------------------------------------------------------
# 1-D convolution
# ---------------------------------------------------------------------------


def _tap_matrix(kernels: Tensor) -> Tensor:
    # (Cin, K*Cout) with column k*Cout + co holding kernels[co, :, k]
    cout, cin, klen = kernels.shape
    return kernels.transpose(1, 2, 0).reshape(cin, klen * cout)


def conv1d_forward(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid (unpadded) stride-1 cross-correlation.

    x: (..., T, Cin), kernels: (Cout, Cin, K), bias: (Cout,) ->
    (..., T-K+1, Cout), out[t, co] = bias[co] + sum_{k,ci} x[t+k, ci] kernels[co, ci, k].
    """
    cout, cin, klen = kernels.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    T = x.shape[-2]
    if T < klen:
        raise DimensionError(f"sequence length {T} shorter than kernel {klen}")
    t_out = T - klen + 1
    taps = x @ _tap_matrix(kernels)  # (..., T, K*Cout)
    out = np.broadcast_to(bias, (*x.shape[:-2], t_out, cout)).copy()
    for k in range(klen):
        out += taps[..., k : k + t_out, k * cout : (k + 1) * cout]
    return out


def conv1d_backward(grad_out: Tensor, x: Tensor, kernels: Tensor):
    """Returns ``(grad_x, grad_kernels, grad_bias)``; kernel and bias
    gradients are summed over batch axes."""
    cout, cin, klen = kernels.shape
    T = x.shape[-2]
    t_out = T - klen + 1
    if grad_out.shape[-2:] != (t_out, cout) or x.shape[-1] != cin:
        raise DimensionError(f"grad_out {grad_out.shape} does not match x {x.shape} / kernels {kernels.shape}")
    g2 = grad_out.reshape(-1, t_out, cout)
    x2 = x.reshape(-1, T, cin)
    # shifted copies of the upstream gradient, one block of Cout columns per tap
    spread = np.zeros((x2.shape[0], T, klen * cout))
    for k in range(klen):
        spread[:, k : k + t_out, k * cout : (k + 1) * cout] = g2
    grad_x = spread @ _tap_matrix(kernels).T
    grad_taps = x2.reshape(-1, cin).T @ spread.reshape(-1, klen * cout)
    grad_k = grad_taps.reshape(cin, klen, cout).transpose(2, 0, 1).copy()
    return grad_x.reshape(x.shape), grad_k, g2.sum(axis=(0, 1))


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``;
    the inputs are left untouched."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name!r} at Adam step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if g is None:
            new_params[name], new_m[name], new_v[name] = p, m, v
            continue
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params[name] = p - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PWLQCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor]) -> None:
    """Binary layout: magic, u32 version, u32 count, then per tensor
    u32 name length, utf-8 name, u32 rank, u64 dims, little-endian f64 data."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(tensors))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t, dtype="<f8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors
