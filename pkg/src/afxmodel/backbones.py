"""Black-box backbones: TCN, GCN, LSTM and diagonal S4.

All models map a (B, N) signal to a (B, N) signal, are causal, and can be
run frame by frame through ``stream_init`` / ``stream_step``.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Parameter, Tensor, custom_op
from .controllers import (
    ConditioningError,
    Modulator,
    TVConcat,
    concat_condition,
    controls_batch,
    make_modulator,
    rowwise_linear,
)
from .nn import LSTM, Module, StateError, uniform

MODULATION_MODES = ("none", "film", "tfilm", "ttfilm", "tvfilm")
CONCAT_MODES = ("none", "concat", "tvconcat")


def receptive_field(blocks: int, kernel: int, dilation_growth: int) -> int:
    """1 + (kernel - 1) * sum of dilations growth**i over the blocks."""
    if min(blocks, kernel, dilation_growth) < 1:
        raise ValueError("blocks, kernel and dilation growth must be >= 1")
    return 1 + (kernel - 1) * sum(dilation_growth ** i for i in range(blocks))


def param_count(model: Module) -> int:
    return model.num_parameters()


def channel_mix(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``w @ x`` over the channel axis, accumulated in a fixed order.

    BLAS rounding depends on the length of the time axis, which would make a
    sample's value depend on how much signal surrounds it.
    """
    y = w[:, 0, None] * x[..., 0:1, :]
    for c in range(1, w.shape[1]):
        y += w[:, c, None] * x[..., c:c + 1, :]
    return y


def pointwise_conv(x, weight, bias=None) -> Tensor:
    """1x1 convolution: (B, Cin, N) -> (B, Cout, N) with weight (Cout, Cin)."""
    x = ad.as_tensor(x)
    xd, wd = x.data, weight.data
    y = channel_mix(wd, xd)
    inputs = [x, weight]
    if bias is not None:
        y = y + bias.data[:, None]
        inputs.append(bias)

    def bw(g):
        out = [np.matmul(wd.T, g), np.einsum("bon,bcn->oc", g, xd)]
        if bias is not None:
            out.append(g.sum(axis=(0, 2)))
        return tuple(out)

    return custom_op(inputs, y, bw, "pointwise_conv")


class Backbone(Module):
    """Shared conditioning checks for the black-box models."""

    family = "backbone"

    def _controls(self, cond, batch, dtype):
        if self.n_controls == 0 and cond is not None:
            raise ConditioningError(f"{self.cond_mode!r} model takes no controls")
        if self.n_controls and cond is None:
            raise ConditioningError(f"{self.cond_mode!r} model needs {self.n_controls} controls")
        return controls_batch(cond, batch, self.n_controls, dtype)

    @staticmethod
    def _signal(x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 1:
            x = ad.reshape(x, (1, x.shape[0]))
        if x.ndim != 2 or x.shape[-1] < 1:
            raise ValueError("expected a (B, N) signal with N >= 1")
        return x


def _check_modulation(mode, n_controls):
    if mode not in MODULATION_MODES:
        raise ConditioningError(f"conditioning {mode!r} is not available for this backbone")
    needs = mode in ("film", "ttfilm", "tvfilm")
    if needs and n_controls < 1:
        raise ConditioningError(f"{mode} needs n_controls >= 1")
    if not needs and n_controls:
        raise ConditioningError(f"{mode} takes no controls")


# ---------------------------------------------------------------------------
# TCN / GCN
# ---------------------------------------------------------------------------

class ConvBlock(Module):
    """Dilated causal conv -> modulation -> activation -> + depthwise 1x1 residual.

    The activation is tanh (TCN) or tanh(a) * sigmoid(b) followed by a
    1x1 channel mix (GCN, where the conv emits both halves).
    """

    def __init__(self, cin, channels, kernel, dilation, gated, rng, dtype):
        super().__init__()
        self.cin, self.channels, self.kernel, self.dilation, self.gated = cin, channels, kernel, dilation, gated
        cout = 2 * channels if gated else channels
        bound = 1.0 / math.sqrt(cin * kernel)
        self.weight = Parameter(uniform(rng, (cout, cin, kernel), bound, dtype))
        self.bias = Parameter(uniform(rng, (cout,), bound, dtype))
        if gated:
            mb = 1.0 / math.sqrt(channels)
            self.mix_weight = Parameter(uniform(rng, (channels, channels), mb, dtype))
            self.mix_bias = Parameter(uniform(rng, (channels,), mb, dtype))
        self.res = Parameter(uniform(rng, (channels,), 1.0, dtype))

    @property
    def conv_channels(self) -> int:
        return 2 * self.channels if self.gated else self.channels

    @property
    def lookback(self) -> int:
        return (self.kernel - 1) * self.dilation

    def activate(self, h: Tensor) -> Tensor:
        if not self.gated:
            return ad.tanh(h)
        c = self.channels
        gate = ad.tanh(h[:, :c]) * ad.sigmoid(h[:, c:])
        return pointwise_conv(gate, self.mix_weight, self.mix_bias)

    def __call__(self, x: Tensor, layer: int, modulator: Modulator, ctx) -> Tensor:
        h = ad.conv1d_causal(x, self.weight, self.bias, self.dilation)
        h = modulator.modulate(layer, h, ctx)
        return self.activate(h) + x * ad.reshape(self.res, (1, self.channels, 1))

    def activate_np(self, h: np.ndarray) -> np.ndarray:
        if not self.gated:
            return np.tanh(h)
        c = self.channels
        gate = np.tanh(h[:, :c]) * (1.0 / (1.0 + np.exp(-h[:, c:])))
        return np.matmul(self.mix_weight.data, gate) + self.mix_bias.data[:, None]

    def macs_per_sample(self) -> int:
        macs = self.weight.size + self.channels
        if self.gated:
            macs += self.mix_weight.size
        return macs


class ConvBackbone(Backbone):
    """TCN (``gated=False``) or GCN (``gated=True``) with optional feature modulation."""

    def __init__(self, blocks: int, kernel: int, dilation_growth: int, channels: int = 16, gated: bool = False,
                 cond_mode: str = "none", n_controls: int = 0, rng=None, dtype=np.float32):
        super().__init__()
        _check_modulation(cond_mode, n_controls)
        rng = np.random.default_rng(0) if rng is None else rng
        base_rng, cond_rng = rng.spawn(2)
        self.family = "gcn" if gated else "tcn"
        self.blocks_n, self.kernel, self.dilation_growth, self.channels = blocks, kernel, dilation_growth, channels
        self.cond_mode, self.n_controls = cond_mode, n_controls
        self.blocks = [
            ConvBlock(1 if i == 0 else channels, channels, kernel, dilation_growth ** i, gated, base_rng, dtype)
            for i in range(blocks)
        ]
        hb = 1.0 / math.sqrt(channels)
        self.head_weight = Parameter(uniform(base_rng, (1, channels), hb, dtype))
        self.head_bias = Parameter(uniform(base_rng, (1,), hb, dtype))
        self.modulator = make_modulator(cond_mode, [b.conv_channels for b in self.blocks], n_controls,
                                        cond_rng, dtype)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.blocks_n, self.kernel, self.dilation_growth)

    def __call__(self, x, cond=None) -> Tensor:
        x = self._signal(x)
        b, n = x.shape
        c = self._controls(cond, b, x.dtype)
        h = ad.reshape(x, (b, 1, n))
        ctx = self.modulator.prepare(h, c)
        for i, blk in enumerate(self.blocks):
            h = blk(h, i, self.modulator, ctx)
        y = pointwise_conv(h, self.head_weight, self.head_bias)
        return ad.reshape(y, (b, n))

    # -- streaming: recompute the F + r - 1 window every frame ----------------
    def stream_init(self, batch: int, cond=None) -> dict:
        dtype = self.dtype
        c = self._controls(cond, batch, dtype)
        return {
            "pos": 0,
            "hist": np.zeros((batch, 1, self.receptive_field - 1), dtype),
            "mod": self.modulator.stream_init(batch, c),
        }

    def stream_step(self, st: dict, frame: np.ndarray) -> np.ndarray:
        pos = st["pos"]
        n = frame.shape[-1]
        window = np.concatenate([st["hist"], frame[:, None, :]], axis=-1)
        self.modulator.stream_input(st["mod"], frame[:, None, :])
        start = pos - (self.receptive_field - 1)
        h = window
        for i, blk in enumerate(self.blocks):
            z = ad.conv1d_valid(h, blk.weight.data, blk.bias.data, blk.dilation)
            start += blk.lookback
            z = self.modulator.stream_modulate(i, z, start, pos, st["mod"])
            out = blk.activate_np(z) + h[:, :, blk.lookback:] * blk.res.data[None, :, None]
            if start < 0:
                out[:, :, :-start] = 0.0  # zero left padding of the next layer
            h = out
        y = np.matmul(self.head_weight.data, h)[:, 0, :] + self.head_bias.data[0]
        r1 = self.receptive_field - 1
        if r1:
            st["hist"] = window[:, :, -r1:]
        st["pos"] = pos + n
        self.modulator.stream_forget(st["mod"], pos + n - r1)
        return y.astype(frame.dtype, copy=False)

    def macs_per_sample(self) -> int:
        return sum(b.macs_per_sample() for b in self.blocks) + self.head_weight.size + _modulator_macs(self.modulator)


def _rec_macs(rec) -> int:
    cell = rec.cell
    gates = cell.w_ih.shape[0]
    macs = gates * (cell.w_ih.shape[1] + cell.w_hh.shape[1])
    if rec.head is not None:
        macs += rec.head.weight.size
    return macs


def _modulator_macs(mod: Modulator) -> float:
    """Block-rate work amortised per sample, plus the affine itself."""
    from .controllers import BLOCK_SIZE, FiLM, TFiLM, TTFiLM, TVFiLM

    if isinstance(mod, FiLM):
        return sum(mod.feat_dims)
    if isinstance(mod, TFiLM):
        return sum(_rec_macs(r) for r in mod.recs) / BLOCK_SIZE + sum(mod.feat_dims)
    if isinstance(mod, TTFiLM):
        return sum(_rec_macs(mod.layer_recurrence(i)) for i in range(len(mod.feat_dims))) / BLOCK_SIZE + sum(
            mod.feat_dims)
    if isinstance(mod, TVFiLM):
        return _rec_macs(mod.rec) / BLOCK_SIZE + sum(mod.feat_dims)
    return 0


def tcn(blocks, kernel, dilation_growth, channels=16, **kw) -> ConvBackbone:
    return ConvBackbone(blocks, kernel, dilation_growth, channels, gated=False, **kw)


def gcn(blocks, kernel, dilation_growth, channels=16, **kw) -> ConvBackbone:
    return ConvBackbone(blocks, kernel, dilation_growth, channels, gated=True, **kw)


def tcn_forward(model: ConvBackbone, x, cond=None) -> Tensor:
    return model(x, cond)


gcn_forward = tcn_forward


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

class LSTMBackbone(Backbone):
    """One LSTM layer over (signal [, controls]), linear head, input residual."""

    family = "lstm"

    def __init__(self, hidden: int = 32, cond_mode: str = "none", n_controls: int = 0, rng=None,
                 dtype=np.float32, embed: int = 4):
        super().__init__()
        if cond_mode not in CONCAT_MODES:
            raise ConditioningError(f"LSTM supports {CONCAT_MODES}, got {cond_mode!r}")
        if (cond_mode == "none") != (n_controls == 0):
            raise ConditioningError("controls are needed exactly when conditioning is enabled")
        rng = np.random.default_rng(0) if rng is None else rng
        base_rng, cond_rng = rng.spawn(2)
        self.hidden, self.cond_mode, self.n_controls = hidden, cond_mode, n_controls
        n_in = 1 + {"none": 0, "concat": n_controls, "tvconcat": embed}[cond_mode]
        self.lstm = LSTM(n_in, hidden, base_rng, dtype)
        hb = 1.0 / math.sqrt(hidden)
        self.head_weight = Parameter(uniform(base_rng, (1, hidden), hb, dtype))
        self.head_bias = Parameter(uniform(base_rng, (1,), hb, dtype))
        if cond_mode == "tvconcat":
            self.tvconcat = TVConcat(n_controls, cond_rng, embed=embed, dtype=dtype)

    def _inputs(self, x: Tensor, c) -> Tensor:
        b, n = x.shape
        if self.cond_mode == "none":
            return ad.reshape(x, (b, n, 1))
        aug = concat_condition(x, self.cond_mode, c, getattr(self, "tvconcat", None))
        return ad.transpose(aug, (0, 2, 1))

    def _out(self, x: Tensor, h: Tensor) -> Tensor:
        y = rowwise_linear(h, self.head_weight, self.head_bias)  # (B, N, 1)
        return ad.reshape(y, x.shape) + x

    def __call__(self, x, cond=None) -> Tensor:
        return self.forward_with_state(x, cond, None)[0]

    def init_state(self, batch: int) -> dict:
        z = np.zeros((batch, self.hidden), self.dtype)
        return {"h": z, "c": z.copy(), "history": None}

    def forward_with_state(self, x, cond=None, state: dict | None = None):
        """Process a chunk continuing from ``state``; returns (y, new_state).

        The carried state is a constant, so gradients stop at the chunk
        boundary.  With TVConcat the block-rate embedding is recomputed over
        the whole input history so its values match one-shot processing.
        """
        x = self._signal(x)
        b, n = x.shape
        c = self._controls(cond, b, x.dtype)
        if state is None:
            state = self.init_state(b)
        if state["h"].shape != (b, self.hidden) or state["c"].shape != (b, self.hidden):
            raise StateError(f"state for hidden size {state['h'].shape[-1]} / batch {state['h'].shape[0]}, "
                             f"model needs {(b, self.hidden)}")
        if self.cond_mode == "tvconcat":
            past = state["history"]
            full = x if past is None else ad.concat([Tensor(past), x], axis=1)
            emb = self.tvconcat(full, c)[:, :, -n:]
            inp = ad.transpose(ad.concat([ad.reshape(x, (b, 1, n)), emb], axis=1), (0, 2, 1))
            history = full.data
        else:
            inp = self._inputs(x, c)
            history = None
        h, (h_last, c_last) = self.lstm(inp, (state["h"], state["c"]))
        return self._out(x, h), {"h": h_last, "c": c_last, "history": history}

    def stream_init(self, batch: int, cond=None) -> dict:
        c = self._controls(cond, batch, self.dtype)
        st = {"pos": 0, "state": self.init_state(batch), "cond": c}
        if self.cond_mode == "tvconcat":
            st["tv"] = self.tvconcat.stream_init(batch, c)
        return st

    def stream_step(self, st: dict, frame: np.ndarray) -> np.ndarray:
        b, n = frame.shape
        cols = [frame[:, :, None]]
        if self.cond_mode == "concat":
            cols.append(np.broadcast_to(st["cond"][:, None, :], (b, n, self.n_controls)).astype(frame.dtype))
        elif self.cond_mode == "tvconcat":
            cols.append(np.transpose(self.tvconcat.stream_embed(st["tv"], frame, st["pos"]), (0, 2, 1)))
        inp = np.ascontiguousarray(np.concatenate(cols, axis=-1) if len(cols) > 1 else cols[0])
        s = st["state"]
        lstm = self.lstm
        h_seq, _, _, s["h"], s["c"] = _kernels.lstm_forward(
            inp, lstm.w_ih.data, lstm.w_hh.data, lstm.bias.data, s["h"], s["c"], False)
        with ad.no_grad():
            y = self._out(Tensor(frame), Tensor(h_seq)).data
        st["pos"] += n
        return y

    def macs_per_sample(self) -> float:
        macs = self.lstm.w_ih.size + self.lstm.w_hh.size + self.hidden
        if self.cond_mode == "tvconcat":
            macs += _rec_macs(self.tvconcat.rec) / 128
        return macs


def lstm_forward(model: LSTMBackbone, x, cond=None, state=None):
    return model.forward_with_state(x, cond, state)


# ---------------------------------------------------------------------------
# diagonal S4
# ---------------------------------------------------------------------------

_KERNEL_CHUNK = 4096


def s4d_modes(state_dim: int) -> np.ndarray:
    """Fixed diagonal of A: -1/2 + i pi n."""
    return -0.5 + 1j * np.pi * np.arange(state_dim)


def _complex(p: np.ndarray) -> np.ndarray:
    return p[..., 0].astype(np.float64) + 1j * p[..., 1].astype(np.float64)


def ssm_discretize(log_dt, b_param, c_param, a_modes):
    """ZOH discretisation -> (z = exp(dt A), Bbar = B (z - 1) / A, C), complex128."""
    dt = np.exp(np.asarray(log_dt, dtype=np.float64))[:, None]
    z = np.exp(dt * a_modes[None, :])
    bbar = _complex(b_param) * (z - 1.0) / a_modes[None, :]
    return z, bbar, _complex(c_param)


def s4d_kernel(log_dt: Tensor, b_param: Tensor, c_param: Tensor, a_modes: np.ndarray, length: int) -> Tensor:
    """Convolution kernel K (H, L), K_l = 2 Re sum_n C_n Bbar_n z_n^l."""
    z, bbar, cc = ssm_discretize(log_dt.data, b_param.data, c_param.data, a_modes)
    w = cc * bbar  # (H, N)
    logz = np.log(z)
    kern = np.empty((z.shape[0], length))
    for lo in range(0, length, _KERNEL_CHUNK):
        ls = np.arange(lo, min(lo + _KERNEL_CHUNK, length))
        vand = np.exp(logz[:, :, None] * ls)  # (H, N, l)
        kern[:, lo:lo + len(ls)] = 2.0 * np.einsum("hn,hnl->hl", w, vand).real
    dtype = log_dt.dtype

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        gw = np.zeros_like(w)
        gz = np.zeros_like(w)
        for lo in range(0, length, _KERNEL_CHUNK):
            ls = np.arange(lo, min(lo + _KERNEL_CHUNK, length))
            vand = np.exp(logz[:, :, None] * ls)
            gl = g[:, None, lo:lo + len(ls)]
            gw += 2.0 * (gl * np.conj(vand)).sum(axis=-1)
            # d z^l / dz = l z^(l-1) = l z^l / z
            gz += 2.0 * (gl * ls * np.conj(vand)).sum(axis=-1) * np.conj(w / z)
        a = a_modes[None, :]
        s = (z - 1.0) / a
        b = _complex(b_param.data)
        dt = np.exp(log_dt.data.astype(np.float64))
        g_dt = (np.real(np.conj(gw) * cc * b * z) + np.real(np.conj(gz) * a * z)).sum(axis=1)
        g_b = gw * np.conj(cc * s)
        g_c = gw * np.conj(b * s)
        as_pair = lambda v: np.stack([v.real, v.imag], axis=-1).astype(dtype)  # noqa: E731
        return (g_dt * dt).astype(dtype), as_pair(g_b), as_pair(g_c)

    return custom_op((log_dt, b_param, c_param), kern.astype(dtype), bw, "s4d_kernel")


def causal_fft_conv(u, kern) -> Tensor:
    """y[b, h, t] = sum_{l <= t} K[h, l] u[b, h, t - l] via zero-padded FFTs."""
    u = ad.as_tensor(u)
    kern = ad.as_tensor(kern)
    n = u.shape[-1]
    nfft = 2 * n
    uf = np.fft.rfft(u.data, nfft)
    kf = np.fft.rfft(kern.data, nfft)
    y = np.fft.irfft(uf * kf[None], nfft)[..., :n].astype(u.dtype)

    def bw(g):
        gf = np.fft.rfft(g, nfft)
        gu = np.fft.irfft(gf * np.conj(kf)[None], nfft)[..., :n]
        gk = np.fft.irfft((gf * np.conj(uf)).sum(axis=0), nfft)[..., :n]
        return gu.astype(u.dtype), gk.astype(kern.dtype)

    return custom_op((u, kern), y, bw, "fft_conv")


class S4DLayer(Module):
    """Per-channel diagonal SSM with learnable timescale, B, C and skip D."""

    def __init__(self, channels: int, state_dim: int, rng, dtype=np.float32, dt_min=1e-3, dt_max=1e-1):
        super().__init__()
        self.channels, self.state_dim = channels, state_dim
        self.a_modes = s4d_modes(state_dim)
        self.log_dt = Parameter(rng.uniform(math.log(dt_min), math.log(dt_max), channels).astype(dtype))
        b = np.zeros((channels, state_dim, 2))
        b[..., 0] = 1.0
        self.b = Parameter(b.astype(dtype))
        self.c = Parameter((rng.standard_normal((channels, state_dim, 2)) * math.sqrt(0.5)).astype(dtype))
        self.d = Parameter(rng.standard_normal(channels).astype(dtype))

    def __call__(self, u: Tensor, mode: str = "conv") -> Tensor:
        """u: (B, H, L)."""
        if mode == "conv":
            kern = s4d_kernel(self.log_dt, self.b, self.c, self.a_modes, u.shape[-1])
            y = causal_fft_conv(u, kern)
        elif mode == "recurrent":
            y = Tensor(self.recurrent(u.data, self.init_state(u.shape[0])))
        else:
            raise ValueError(f"unknown S4 mode {mode!r}")
        return y + u * ad.reshape(self.d, (1, self.channels, 1))

    def init_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        z = np.zeros((batch, self.channels, self.state_dim), np.float64)
        return z, z.copy()

    def recurrent_params(self):
        z, bbar, cc = ssm_discretize(self.log_dt.data, self.b.data, self.c.data, self.a_modes)
        return z.real.copy(), z.imag.copy(), bbar.real.copy(), bbar.imag.copy(), cc.real.copy(), cc.imag.copy()

    def recurrent(self, u: np.ndarray, state, params=None) -> np.ndarray:
        """State-space recurrence without the skip term; state is updated in place."""
        params = self.recurrent_params() if params is None else params
        s_re, s_im = state
        if s_re.shape != (u.shape[0], self.channels, self.state_dim):
            raise StateError(f"S4 state {s_re.shape} does not fit input {u.shape}")
        zero_d = np.zeros(self.channels)
        y = _kernels.ssm_recurrent(np.ascontiguousarray(u, dtype=np.float64), *params, zero_d, s_re, s_im)
        return y.astype(u.dtype)


class S4Backbone(Backbone):
    """Lift 1 -> H, blocks of SSM -> modulation -> tanh -> 1x1 mix -> + residual, head H -> 1."""

    family = "s4"

    def __init__(self, blocks: int = 4, state_dim: int = 4, channels: int = 16, cond_mode: str = "none",
                 n_controls: int = 0, rng=None, dtype=np.float32, mode: str = "conv"):
        super().__init__()
        _check_modulation(cond_mode, n_controls)
        rng = np.random.default_rng(0) if rng is None else rng
        base_rng, cond_rng = rng.spawn(2)
        self.blocks_n, self.state_dim, self.channels = blocks, state_dim, channels
        self.cond_mode, self.n_controls, self.mode = cond_mode, n_controls, mode
        self.lift_weight = Parameter(uniform(base_rng, (channels, 1), 1.0, dtype))
        self.lift_bias = Parameter(uniform(base_rng, (channels,), 1.0, dtype))
        self.layers = [S4DLayer(channels, state_dim, base_rng, dtype) for _ in range(blocks)]
        mb = 1.0 / math.sqrt(channels)
        self.mix_weights = [Parameter(uniform(base_rng, (channels, channels), mb, dtype)) for _ in range(blocks)]
        self.mix_biases = [Parameter(uniform(base_rng, (channels,), mb, dtype)) for _ in range(blocks)]
        for i, (w, b) in enumerate(zip(self.mix_weights, self.mix_biases)):
            setattr(self, f"mix{i}_weight", w)
            setattr(self, f"mix{i}_bias", b)
        self.head_weight = Parameter(uniform(base_rng, (1, channels), mb, dtype))
        self.head_bias = Parameter(uniform(base_rng, (1,), mb, dtype))
        self.modulator = make_modulator(cond_mode, [channels] * blocks, n_controls, cond_rng, dtype)

    def __call__(self, x, cond=None, mode: str | None = None) -> Tensor:
        x = self._signal(x)
        b, n = x.shape
        c = self._controls(cond, b, x.dtype)
        x3 = ad.reshape(x, (b, 1, n))
        ctx = self.modulator.prepare(x3, c)
        h = pointwise_conv(x3, self.lift_weight, self.lift_bias)
        for i, layer in enumerate(self.layers):
            u = layer(h, mode or self.mode)
            u = self.modulator.modulate(i, u, ctx)
            u = pointwise_conv(ad.tanh(u), self.mix_weights[i], self.mix_biases[i])
            h = u + h
        return ad.reshape(pointwise_conv(h, self.head_weight, self.head_bias), (b, n))

    def stream_init(self, batch: int, cond=None) -> dict:
        c = self._controls(cond, batch, self.dtype)
        return {
            "pos": 0,
            "ssm": [layer.init_state(batch) for layer in self.layers],
            "params": [layer.recurrent_params() for layer in self.layers],
            "mod": self.modulator.stream_init(batch, c),
        }

    def stream_step(self, st: dict, frame: np.ndarray) -> np.ndarray:
        pos = st["pos"]
        x3 = frame[:, None, :]
        self.modulator.stream_input(st["mod"], x3)
        h = channel_mix(self.lift_weight.data, x3) + self.lift_bias.data[:, None]
        for i, layer in enumerate(self.layers):
            u = layer.recurrent(h, st["ssm"][i], st["params"][i]) + h * layer.d.data[None, :, None]
            u = self.modulator.stream_modulate(i, u, pos, pos, st["mod"])
            h = channel_mix(self.mix_weights[i].data, np.tanh(u)) + self.mix_biases[i].data[:, None] + h
        y = channel_mix(self.head_weight.data, h)[:, 0, :] + self.head_bias.data[0]
        st["pos"] = pos + frame.shape[-1]
        self.modulator.stream_forget(st["mod"], st["pos"])
        return y.astype(frame.dtype, copy=False)

    def macs_per_sample(self) -> float:
        h, n = self.channels, self.state_dim
        # recurrent form: complex state update (4 real MACs) + input (2) + readout (2) per mode
        per_layer = 8 * h * n + h + h * h
        return self.blocks_n * per_layer + 2 * h + _modulator_macs(self.modulator)


def s4d_forward(model: S4Backbone, x, cond=None, state=None):
    """Recurrent-mode forward that continues from ``state`` (a stream state)."""
    st = model.stream_init(ad.as_tensor(x).shape[0], cond) if state is None else state
    y = model.stream_step(st, np.asarray(ad.as_tensor(x).data))
    return y, st
