"""Small module system and recurrent layers on top of :mod:`afxmodel.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Parameter, Tensor, custom_op


class StateError(ValueError):
    """Raised when a recurrent state does not match the layer."""


class Module:
    """Container that tracks parameters and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            value = ModuleList(value)
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = ""):
        for name, p in self.named_parameters(prefix):
            p.name = name
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise KeyError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        object.__setattr__(self, "_items", list(modules))
        for i, m in enumerate(self._items):
            self._children[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """y = x @ W.T + b over the last axis."""

    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32, bias: bool = True, zero: bool = False):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_out, n_in), dtype) if zero else uniform(rng, (n_out, n_in), bound, dtype)
        self.weight = Parameter(w)
        self.use_bias = bias
        if bias:
            self.bias = Parameter(np.zeros(n_out, dtype) if zero else uniform(rng, (n_out,), bound, dtype))

    def __call__(self, x):
        x = ad.as_tensor(x)
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.use_bias:
            y = y + self.bias
        return y

    def apply_numpy(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.data.T
        if self.use_bias:
            y = y + self.bias.data
        return y


class MLP(Module):
    """Stack of Linear layers with tanh between them and a linear output."""

    def __init__(self, sizes, rng, dtype=np.float32, zero_last: bool = False):
        super().__init__()
        layers = []
        for i in range(len(sizes) - 1):
            last = i == len(sizes) - 2
            layers.append(Linear(sizes[i], sizes[i + 1], rng, dtype, zero=zero_last and last))
        self.layers = layers

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.tanh(x)
        return x


# ---------------------------------------------------------------------------
# fused recurrent ops
# ---------------------------------------------------------------------------

def _as_state(state, bsz, hid, dtype):
    if state is None:
        return np.zeros((bsz, hid), dtype)
    state = np.asarray(state, dtype=dtype)
    if state.shape != (bsz, hid):
        raise StateError(f"state shape {state.shape} != {(bsz, hid)}")
    return np.ascontiguousarray(state)


def lstm_op(x, w_ih: Tensor, w_hh: Tensor, bias: Tensor, h0=None, c0=None):
    """Run an LSTM over x (B, T, I).  Returns (h_seq Tensor, (h_T, c_T) arrays).

    The incoming state is a constant: gradients do not flow into it, which
    is exactly the truncation used by TBPTT.
    """
    x = ad.as_tensor(x)
    xd = np.ascontiguousarray(x.data)
    dtype = w_hh.dtype
    xd = xd.astype(dtype, copy=False)
    bsz = xd.shape[0]
    hid = w_hh.shape[1]
    h0 = _as_state(h0, bsz, hid, dtype)
    c0 = _as_state(c0, bsz, hid, dtype)
    store = ad.is_grad_enabled() and any(t.requires_grad for t in (x, w_ih, w_hh, bias))
    h_seq, c_seq, gates, h_last, c_last = _kernels.lstm_forward(
        xd, w_ih.data, w_hh.data, bias.data, h0, c0, store
    )

    def bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dz = _kernels.lstm_backward(g, h_seq, c_seq, gates, w_hh.data, h0, c0)
        h_prev = np.concatenate([h0[:, None, :], h_seq[:, :-1, :]], axis=1)
        dzf = dz.reshape(-1, dz.shape[-1])
        gw_ih = dzf.T @ xd.reshape(-1, xd.shape[-1])
        gw_hh = dzf.T @ h_prev.reshape(-1, hid)
        gb = dzf.sum(axis=0)
        gx = dz @ w_ih.data
        return gx, gw_ih, gw_hh, gb

    out = custom_op((x, w_ih, w_hh, bias), h_seq, bw, "lstm")
    return out, (h_last, c_last)


def gru_op(x, w_ih: Tensor, w_hh: Tensor, bias: Tensor, h0=None):
    """Run a GRU over x (B, T, I).  Returns (h_seq Tensor, h_T array)."""
    x = ad.as_tensor(x)
    dtype = w_hh.dtype
    xd = np.ascontiguousarray(x.data).astype(dtype, copy=False)
    bsz = xd.shape[0]
    hid = w_hh.shape[1]
    h0 = _as_state(h0, bsz, hid, dtype)
    store = ad.is_grad_enabled() and any(t.requires_grad for t in (x, w_ih, w_hh, bias))
    h_seq, cache, h_last = _kernels.gru_forward(xd, w_ih.data, w_hh.data, bias.data, h0, store)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dxp, dup = _kernels.gru_backward(g, h_seq, cache, w_hh.data, h0)
        h_prev = np.concatenate([h0[:, None, :], h_seq[:, :-1, :]], axis=1)
        dxf = dxp.reshape(-1, 3 * hid)
        gw_ih = dxf.T @ xd.reshape(-1, xd.shape[-1])
        gw_hh = dup.reshape(-1, 3 * hid).T @ h_prev.reshape(-1, hid)
        gb = dxf.sum(axis=0)
        gx = dxp @ w_ih.data
        return gx, gw_ih, gw_hh, gb

    out = custom_op((x, w_ih, w_hh, bias), h_seq, bw, "gru")
    return out, h_last


class LSTM(Module):
    """Single-layer LSTM, one bias vector, gate order (i, f, g, o).

    ``zero_cell_input`` zero-initialises the cell-candidate weights so the
    layer emits exactly zero from a zero state (used by identity-at-init
    modulators).
    """

    def __init__(self, n_in: int, hidden: int, rng, dtype=np.float32, zero_cell_input: bool = False):
        super().__init__()
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        w_ih = uniform(rng, (4 * hidden, n_in), bound, dtype)
        w_hh = uniform(rng, (4 * hidden, hidden), bound, dtype)
        bias = uniform(rng, (4 * hidden,), bound, dtype)
        if zero_cell_input:
            g = slice(2 * hidden, 3 * hidden)
            w_ih[g] = 0.0
            w_hh[g] = 0.0
            bias[g] = 0.0
        self.w_ih = Parameter(w_ih)
        self.w_hh = Parameter(w_hh)
        self.bias = Parameter(bias)

    def __call__(self, x, state=None):
        h0, c0 = (None, None) if state is None else state
        return lstm_op(x, self.w_ih, self.w_hh, self.bias, h0, c0)


class GRU(Module):
    def __init__(self, n_in: int, hidden: int, rng, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.w_ih = Parameter(uniform(rng, (3 * hidden, n_in), bound, dtype))
        self.w_hh = Parameter(uniform(rng, (3 * hidden, hidden), bound, dtype))
        self.bias = Parameter(uniform(rng, (3 * hidden,), bound, dtype))

    def __call__(self, x, state=None):
        return gru_op(x, self.w_ih, self.w_hh, self.bias, state)
