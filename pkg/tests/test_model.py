import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwleq.activation import ActivationKind, fit_chord, fit_hard, fit_minimax
from pwleq.model import (
    EXACT,
    LOOKBACK,
    OUTPUTS,
    WINDOW,
    EqualizerParams,
    _scan,
    equalizer_backward,
    equalizer_forward,
    forward_backward,
    init_params,
    load_model,
    save_model,
    swap_activations,
    window_arrays,
    window_stream,
)
from pwleq.nncore import DimensionError, make_rng


def random_window(seed, T=WINDOW):
    return make_rng(seed).normal(size=(T, 2)) * 0.7


def perturbed_params(seed, hidden=3):
    """Random params with non-zero biases so every gradient path is exercised."""
    p = init_params(seed, hidden=hidden)
    rng = make_rng(seed + 77)
    d = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in p.as_dict().items()}
    return EqualizerParams.from_dict(d)


def scalar_equalizer(params, window):
    """Straight-line loops over Python floats, one direction at a time."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    H = params.hidden
    T = len(window)
    x = window.tolist()

    def scan(d, order):
        W, U, b = (a.tolist() for a in params.lstm(d))
        h, c = [0.0] * H, [0.0] * H
        out = [None] * T
        for t in order:
            z = []
            for r in range(4 * H):
                acc = b[r] + W[r][0] * x[t][0] + W[r][1] * x[t][1]
                for j in range(H):
                    acc += U[r][j] * h[j]
                z.append(acc)
            c = [sig(z[H + k]) * c[k] + sig(z[k]) * math.tanh(z[2 * H + k]) for k in range(H)]
            h = [sig(z[3 * H + k]) * math.tanh(c[k]) for k in range(H)]
            out[t] = h
        return out

    fwd = scan(0, range(T))
    bwd = scan(1, range(T - 1, -1, -1))
    feats = [fwd[t] + bwd[t] for t in range(T)]
    K = params.kernels.tolist()
    bias = params.conv_bias.tolist()
    klen = params.kernel_size
    y = np.zeros((T - klen + 1, 2))
    for t in range(T - klen + 1):
        for co in range(2):
            acc = bias[co]
            for k in range(klen):
                for f in range(2 * H):
                    acc += K[co][f][k] * feats[t + k][f]
            y[t, co] = acc
    return y


class TestForward:
    def test_zero_params(self):
        out = equalizer_forward(EqualizerParams.zeros(), random_window(0))
        assert out.shape == (61, 2)
        assert not out.any()

    def test_output_length(self):
        out = equalizer_forward(init_params(3), random_window(1))
        assert out.shape == (WINDOW - 21 + 1, 2) == (61, 2)

    def test_matches_scalar_oracle(self):
        params = init_params(0)
        window = random_window(0)
        np.testing.assert_allclose(equalizer_forward(params, window), scalar_equalizer(params, window), atol=1e-10)

    def test_batch_matches_single(self):
        params = perturbed_params(0)
        batch = np.stack([random_window(s) for s in range(4)])
        out = equalizer_forward(params, batch)
        for n in range(4):
            np.testing.assert_allclose(out[n], equalizer_forward(params, batch[n]), atol=1e-14)

    @pytest.mark.parametrize("shape", [(80, 2), (81, 3), (81,), (2, 81)])
    def test_wrong_shape(self, shape):
        with pytest.raises(DimensionError):
            equalizer_forward(init_params(0), np.zeros(shape))

    def test_deterministic(self):
        params, w = init_params(4), random_window(4)
        np.testing.assert_array_equal(equalizer_forward(params, w), equalizer_forward(params, w))

    def test_time_reversal(self):
        # copy the forward-direction weights into the backward slot
        p = perturbed_params(2)
        d = {k: v.copy() for k, v in p.as_dict().items()}
        for name in ("W", "U", "b"):
            d[name][1] = d[name][0]
        p = EqualizerParams.from_dict(d)
        x = random_window(2)[None]
        _, hs, _ = _scan(p, x, EXACT, keep_cache=False, stats=None)
        _, hs_rev, _ = _scan(p, x[:, ::-1], EXACT, keep_cache=False, stats=None)
        np.testing.assert_allclose(hs[1], hs_rev[0], atol=1e-14)
        np.testing.assert_allclose(hs[0], hs_rev[1], atol=1e-14)


class TestBackward:
    def test_finite_differences(self):
        params = perturbed_params(0)
        window = random_window(0)
        g = make_rng(1).normal(size=(61, 2))
        grads = equalizer_backward(params, window, EXACT, g)
        base = params.as_dict()
        rng = make_rng(2)
        names = list(base)
        sizes = np.array([base[n].size for n in names])
        step = 1e-6
        for _ in range(50):
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            idx = tuple(int(rng.integers(s)) for s in base[name].shape)
            vals = []
            for sgn in (1, -1):
                d = {k: v.copy() for k, v in base.items()}
                d[name][idx] += sgn * step
                vals.append(float(np.sum(g * equalizer_forward(EqualizerParams.from_dict(d), window))))
            fd = (vals[0] - vals[1]) / (2 * step)
            an = getattr(grads, name)[idx]
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), (name, idx, fd, an)

    def test_zero_upstream(self):
        grads = equalizer_backward(perturbed_params(1), random_window(1), EXACT, np.zeros((61, 2)))
        for arr in grads.as_dict().values():
            assert not arr.any()

    def test_conv_bias_gradient(self):
        g = make_rng(3).normal(size=(61, 2))
        grads = equalizer_backward(perturbed_params(1), random_window(1), EXACT, g)
        np.testing.assert_allclose(grads.conv_bias, g.sum(axis=0), atol=1e-13)

    def test_batch_gradient_is_sum(self):
        params = perturbed_params(5)
        x = np.stack([random_window(s) for s in range(3)])
        g = make_rng(6).normal(size=(3, 61, 2))
        total = forward_backward(params, x, EXACT, g)[1]
        parts = [equalizer_backward(params, x[n], EXACT, g[n]) for n in range(3)]
        for name, arr in total.as_dict().items():
            np.testing.assert_allclose(arr, sum(getattr(p, name) for p in parts), atol=1e-12)

    def test_mse_gradient(self):
        params = perturbed_params(7)
        x = np.stack([random_window(s) for s in range(2)])
        y = make_rng(8).normal(size=(2, 61, 2))
        out, grads, loss = forward_backward(params, x, EXACT, target=y)
        assert loss == pytest.approx(np.mean((out - y) ** 2))
        explicit = forward_backward(params, x, EXACT, grad_out=2 * (out - y) / out.size)[1]
        np.testing.assert_allclose(grads.W, explicit.W)

    def test_wrong_grad_shape(self):
        with pytest.raises(DimensionError):
            equalizer_backward(init_params(0), random_window(0), EXACT, np.zeros((60, 2)))


class TestSwap:
    specs = (fit_minimax(ActivationKind.SIGMOID, 5), fit_minimax(ActivationKind.TANH, 5))

    def test_gate_at_zero(self):
        acts = swap_activations(EXACT, *self.specs)
        assert acts.gate.forward(np.array([0.0]))[0] == 0.5
        assert acts.mode == "pwl" and acts.segments == 5

    def test_kind_mismatch(self):
        sig, tanh = self.specs
        with pytest.raises(ValueError):
            swap_activations(EXACT, tanh, sig)

    def test_exact_mode_unchanged(self):
        params, w = init_params(0), random_window(0)
        before = equalizer_forward(params, w, EXACT)
        swapped = swap_activations(EXACT, *self.specs)
        assert EXACT.mode == "exact"
        np.testing.assert_array_equal(equalizer_forward(params, w, EXACT), before)
        assert swapped is not EXACT

    def test_swap_changes_output(self):
        params, w = init_params(0), random_window(0)
        diff = equalizer_forward(params, w, swap_activations(EXACT, *self.specs)) - equalizer_forward(params, w)
        assert np.abs(diff).max() > 0

    def test_codomains(self):
        acts = swap_activations(EXACT, fit_hard(ActivationKind.SIGMOID), fit_chord(ActivationKind.TANH, 7, 3.0))
        x = np.linspace(-50, 50, 10001)
        for a in (acts, EXACT):
            assert a.gate.forward(x).min() >= 0 and a.gate.forward(x).max() <= 1
            assert a.state.forward(x).min() >= -1 and a.state.forward(x).max() <= 1

    def test_pwl_finite_differences(self):
        acts = swap_activations(EXACT, *self.specs)
        params = perturbed_params(3)
        window = random_window(3)
        g = make_rng(4).normal(size=(61, 2))
        grads = equalizer_backward(params, window, acts, g)
        step = 1e-7
        d = {k: v.copy() for k, v in params.as_dict().items()}
        checked = 0
        for idx in [(0, 0, 0), (1, 5, 1), (0, 9, 0)]:
            vals = []
            for sgn in (1, -1):
                dd = {k: v.copy() for k, v in d.items()}
                dd["W"][idx] += sgn * step
                vals.append(float(np.sum(g * equalizer_forward(EqualizerParams.from_dict(dd), window, acts))))
            fd = (vals[0] - vals[1]) / (2 * step)
            an = grads.W[idx]
            # a breakpoint crossing inside the stencil shows up as a kink; skip those entries
            if abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6):
                checked += 1
        assert checked >= 2


class TestPersistence:
    def test_round_trip(self, tmp_path):
        params = perturbed_params(0)
        sig, tanh = TestSwap.specs
        acts = swap_activations(EXACT, sig, tanh)
        save_model(tmp_path / "m.ckpt", params, acts)
        p2, a2 = load_model(tmp_path / "m.ckpt")
        for name, arr in params.as_dict().items():
            np.testing.assert_array_equal(getattr(p2, name), arr)
        assert a2.sigmoid_spec == sig and a2.tanh_spec == tanh
        meta = (tmp_path / "m.ckpt.meta").read_text()
        assert "hidden = 3" in meta and "mode = pwl" in meta

    def test_exact_mode(self, tmp_path):
        save_model(tmp_path / "e.ckpt", init_params(0, hidden=2))
        _, acts = load_model(tmp_path / "e.ckpt")
        assert acts.mode == "exact"

    def test_invalid_params(self):
        p = EqualizerParams.zeros(hidden=2).as_dict()
        p["W"] = p["W"][:, :, :1]
        with pytest.raises(DimensionError):
            EqualizerParams.from_dict(p)
        p = EqualizerParams.zeros(hidden=2).as_dict()
        p["b"][0, 0] = np.nan
        with pytest.raises(ValueError):
            EqualizerParams.from_dict(p)

    def test_default_shapes(self):
        p = init_params(0)
        assert p.kernels.shape == (2, 70, 21)
        assert p.W.shape == (2, 140, 2) and p.U.shape == (2, 140, 35)
        np.testing.assert_array_equal(p.b[:, 35:70], 1.0)


def symbols(n, seed=0):
    rng = make_rng(seed)
    return rng.normal(size=n) + 1j * rng.normal(size=n)


class TestWindows:
    @pytest.mark.parametrize("n,count", [(81, 1), (142, 2), (141, 1), (81 + 61 * 5, 6)])
    def test_counts(self, n, count):
        assert len(window_stream(symbols(n), symbols(n, 1))) == count

    def test_too_short(self):
        with pytest.raises(ValueError):
            window_stream(symbols(80), symbols(80))

    def test_unequal(self):
        with pytest.raises(ValueError):
            window_stream(symbols(90), symbols(91))

    def test_alignment(self):
        rx, tx = symbols(200), symbols(200, 1)
        pairs = window_stream(rx, tx)
        w, t = pairs[1]
        np.testing.assert_array_equal(w[:, 0] + 1j * w[:, 1], rx[61 : 61 + 81])
        np.testing.assert_array_equal(t[:, 0] + 1j * t[:, 1], tx[61 + 10 : 61 + 71])

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(min_value=81, max_value=2000))
    def test_window_arithmetic(self, n):
        idx = np.arange(n, dtype=float)
        w, t = window_arrays(idx, idx + 0.5)
        assert len(w) == (n - 81) // 61 + 1
        assert w[-1, -1, 0] <= n - 1
        assert n - 1 - w[-1, -1, 0] < 61  # remainder dropped is shorter than a stride
        # every target sits at the centre of its window, covered exactly once
        covered = (t[..., 0] - 0.5).ravel()
        np.testing.assert_array_equal(covered, np.arange(LOOKBACK, LOOKBACK + OUTPUTS * len(w)))
        np.testing.assert_array_equal(t[:, :, 0] - 0.5, w[:, LOOKBACK : LOOKBACK + OUTPUTS, 0])


class TestTrainedAlignment:
    def test_uniform_position_error(self, identity_run):
        _, params, _, split = identity_run
        out = equalizer_forward(params, split.val_x)
        per_pos = np.mean((out - split.val_y) ** 2, axis=(0, 2))
        assert per_pos.shape == (61,)
        assert per_pos.max() < 3 * per_pos.min()
