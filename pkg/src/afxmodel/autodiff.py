"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when gradients are enabled and
any input requires them, remembers the op that produced it together with a
closure mapping the output adjoint to the input adjoints.  Heavy sequential
operations (IIR filters, recurrent layers, SSM kernels) are registered as
single fused nodes with hand-written adjoints instead of being unrolled.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ContractError",
    "NaNPropagationError",
    "DeterminismError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "custom_op",
    "backward",
    "grad_check",
    "clip_gradients",
]


class ContractError(ValueError):
    """Raised when an op is called outside its preconditions."""


class NaNPropagationError(FloatingPointError):
    """Raised when a NaN appears in an adjoint during backward."""


class DeterminismError(RuntimeError):
    """Raised by :func:`grad_check` when the function is not repeatable."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Node of the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.dtype})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method shortcuts -------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def abs(self):
        return absolute(self)


class Parameter(Tensor):
    """Learnable leaf with a name and a learning-rate multiplier."""

    __slots__ = ("name", "lr_multiplier")

    def __init__(self, data, name: str = "", lr_multiplier: float = 1.0):
        super().__init__(np.array(data, copy=True), requires_grad=True, op="param")
        if not lr_multiplier > 0:
            raise ContractError(f"lr_multiplier must be positive, got {lr_multiplier}")
        self.name = name
        self.lr_multiplier = float(lr_multiplier)
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _result_dtype(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


def custom_op(inputs: Sequence, data: np.ndarray, backward_fn: Callable, op: str) -> Tensor:
    """Create a graph node.

    ``backward_fn(g)`` receives the output adjoint and returns one adjoint
    (or ``None``) per entry of ``inputs``.
    """
    parents = tuple(as_tensor(t) for t in inputs)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _scalar_like(value, ref: Tensor):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype))


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_like(b, a)
    out = a.data + b.data
    return custom_op(
        (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _scalar_like(a, b)
    a = as_tensor(a)
    b = _scalar_like(b, a)
    out = a.data - b.data
    return custom_op(
        (a, b), out,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_like(b, a)
    ad, bd = a.data, b.data
    return custom_op(
        (a, b), ad * bd,
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _scalar_like(a, b)
    a = as_tensor(a)
    b = _scalar_like(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return custom_op(
        (a, b), out,
        lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)),
        "div",
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise ContractError("tensor exponents are not supported")
    ad = a.data
    out = ad ** exponent
    return custom_op((a,), out, lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return custom_op((a,), out, lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return custom_op((a,), out, lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return custom_op((a,), out, lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return custom_op((a,), np.log(ad), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return custom_op((a,), out, lambda g: (g * 0.5 / out,), "sqrt")


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return custom_op((a,), np.sin(ad), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return custom_op((a,), np.cos(ad), lambda g: (-g * np.sin(ad),), "cos")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return custom_op((a,), np.abs(ad), lambda g: (g * np.sign(ad),), "abs")


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    mask = ad > floor
    return custom_op((a,), np.where(mask, ad, floor).astype(ad.dtype), lambda g: (g * mask,), "clamp_min")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ContractError("matmul expects operands with ndim >= 2")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return custom_op((a, b), ad @ bd, bw, "matmul")


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    return custom_op((a,), np.sum(a.data, axis=axis, keepdims=keepdims), bw, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return custom_op((a,), a.data.reshape(shape), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return custom_op((a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _has_advanced(index) else _assign_add(full, index, g)
        return (full,)

    return custom_op((a,), a.data[index], bw, "getitem")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, index, g):
    full[index] += g


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return custom_op(ts, np.concatenate([t.data for t in ts], axis=axis), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return custom_op(ts, np.stack([t.data for t in ts], axis=axis), bw, "stack")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return custom_op(
        (a,), np.broadcast_to(a.data, shape).copy(), lambda g: (_unbroadcast(g, orig),), "broadcast_to"
    )


def pad_left(a, amount: int) -> Tensor:
    """Zero-pad the last axis on the left."""
    a = as_tensor(a)
    if amount == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 1) + [(amount, 0)]
    return custom_op((a,), np.pad(a.data, widths), lambda g: (g[..., amount:],), "pad_left")


# ---------------------------------------------------------------------------
# block-rate helpers (control signals run one value per block of samples)
# ---------------------------------------------------------------------------

def num_blocks(n: int, block: int) -> int:
    return -(-n // block)


def block_reduce(a, block: int, mode: str) -> Tensor:
    """Reduce the last axis in blocks of ``block`` samples.

    ``mode`` is ``"max"`` or ``"meanabs"``; the trailing partial block is
    reduced over the samples it actually has.
    """
    a = as_tensor(a)
    ad = a.data
    n = ad.shape[-1]
    nb = num_blocks(n, block)
    pad = nb * block - n
    lead = ad.shape[:-1]
    if mode == "max":
        padded = np.concatenate([ad, np.full(lead + (pad,), -np.inf, dtype=ad.dtype)], axis=-1) if pad else ad
        blocks = padded.reshape(lead + (nb, block))
        idx = np.argmax(blocks, axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            gb = np.zeros(lead + (nb, block), dtype=ad.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            return (gb.reshape(lead + (nb * block,))[..., :n],)

        return custom_op((a,), out, bw, "block_max")
    if mode == "meanabs":
        padded = np.concatenate([ad, np.zeros(lead + (pad,), dtype=ad.dtype)], axis=-1) if pad else ad
        counts = np.full(nb, block, dtype=ad.dtype)
        counts[-1] = block - pad
        out = np.abs(padded.reshape(lead + (nb, block))).sum(axis=-1) / counts
        sign = np.sign(ad)

        def bw(g):
            per = np.repeat(g / counts, block, axis=-1)[..., :n]
            return (per * sign,)

        return custom_op((a,), out, bw, "block_meanabs")
    raise ContractError(f"unknown block reduction {mode!r}")


def hold(a, n: int, block: int) -> Tensor:
    """Upsample a block-rate last axis to ``n`` samples by holding values."""
    a = as_tensor(a)
    ad = a.data
    nb = ad.shape[-1]
    if nb != num_blocks(n, block):
        raise ContractError(f"block sequence of length {nb} does not cover {n} samples")
    out = np.repeat(ad, block, axis=-1)[..., :n]
    pad = nb * block - n

    def bw(g):
        if pad:
            g = np.concatenate([g, np.zeros(g.shape[:-1] + (pad,), dtype=g.dtype)], axis=-1)
        return (g.reshape(g.shape[:-1] + (nb, block)).sum(axis=-1),)

    return custom_op((a,), out, bw, "hold")


def shift_blocks(a, axis: int = -2) -> Tensor:
    """Delay a block sequence by one block, inserting zeros at the front."""
    a = as_tensor(a)
    ad = np.moveaxis(a.data, axis, 0)
    out = np.concatenate([np.zeros_like(ad[:1]), ad[:-1]], axis=0)

    def bw(g):
        gm = np.moveaxis(g, axis, 0)
        gin = np.concatenate([gm[1:], np.zeros_like(gm[:1])], axis=0)
        return (np.moveaxis(gin, 0, axis),)

    return custom_op((a,), np.moveaxis(out, 0, axis), bw, "shift_blocks")


# ---------------------------------------------------------------------------
# dilated causal convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel: int, dilation: int, n_out: int) -> np.ndarray:
    # x: (B, Cin, n_out + (kernel-1)*dilation) -> (B, Cin*kernel, n_out)
    b, cin, _ = x.shape
    cols = np.empty((b, cin, kernel, n_out), dtype=x.dtype)
    for k in range(kernel):
        cols[:, :, k, :] = x[:, :, k * dilation:k * dilation + n_out]
    return cols.reshape(b, cin * kernel, n_out)


def conv1d_valid(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, dilation: int) -> np.ndarray:
    """Non-differentiable 'valid' dilated convolution used by streaming."""
    cout, cin, kernel = weight.shape
    n_out = x.shape[-1] - (kernel - 1) * dilation
    if kernel == 1:
        y = weight[:, :, 0] @ x
    else:
        y = weight.reshape(cout, cin * kernel) @ _im2col(x, kernel, dilation, n_out)
    if bias is not None:
        y += bias[:, None]
    return y


def conv1d_causal(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Dilated causal 1-D convolution with zero left padding.

    ``x``: (B, Cin, N); ``weight``: (Cout, Cin, K); ``bias``: (Cout,).
    Output length equals input length and y[n] only sees x[n-(K-1)d .. n].
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    xd, wd = x.data, weight.data
    cout, cin, kernel = wd.shape
    if xd.ndim != 3 or xd.shape[1] != cin:
        raise ContractError(f"conv1d input {xd.shape} incompatible with weight {wd.shape}")
    n = xd.shape[-1]
    pad = (kernel - 1) * dilation
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, 0))) if pad else xd
    cols = _im2col(xp, kernel, dilation, n)
    w2 = wd.reshape(cout, cin * kernel)
    y = w2 @ cols
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data[:, None]
        inputs.append(bias)

    def bw(g):
        gw = np.einsum("bon,bin->oi", g, cols, optimize=True).reshape(wd.shape)
        gcols = (w2.T @ g).reshape(g.shape[0], cin, kernel, n)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(kernel):
            gxp[:, :, k * dilation:k * dilation + n] += gcols[:, :, k, :]
        grads = [gxp[:, :, pad:], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return custom_op(inputs, y, bw, "conv1d")


# ---------------------------------------------------------------------------
# windowed FFT magnitude
# ---------------------------------------------------------------------------

def frame_signal(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    n = x.shape[-1]
    n_frames = 1 + (n - fft_size) // hop
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[..., idx]


def _overlap_add(frames: np.ndarray, hop: int, n: int) -> np.ndarray:
    lead = frames.shape[:-2]
    n_frames, fft_size = frames.shape[-2:]
    out = np.zeros(lead + (n,), dtype=frames.dtype)
    if fft_size % hop == 0:
        r = fft_size // hop
        chunks = frames.reshape(lead + (n_frames, r, hop))
        span = (n_frames + r - 1) * hop
        view = out[..., :span].reshape(lead + (n_frames + r - 1, hop))
        for j in range(r):
            view[..., j:j + n_frames, :] += chunks[..., :, j, :]
        out[..., :span] = view.reshape(lead + (span,))
    else:
        for f in range(n_frames):
            out[..., f * hop:f * hop + fft_size] += frames[..., f, :]
    return out


def stft_magnitude(x, fft_size: int, hop: int, window: np.ndarray, power_floor: float = 1e-8) -> Tensor:
    """|STFT| of the last axis, framed without centering.

    Returns (..., frames, fft_size // 2 + 1).  The magnitude is computed as
    sqrt(max(|X|^2, power_floor)) so the derivative stays finite.
    """
    x = as_tensor(x)
    xd = x.data
    n = xd.shape[-1]
    if n < fft_size:
        raise ContractError(f"signal of {n} samples shorter than fft size {fft_size}")
    win = window.astype(xd.dtype)
    frames = frame_signal(xd, fft_size, hop) * win
    spec = np.fft.rfft(frames, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    mask = power > power_floor
    mag = np.sqrt(np.where(mask, power, power_floor)).astype(xd.dtype)

    def bw(g):
        # adjoint of |rfft| followed by the adjoint of framing
        gspec = np.where(mask, g / mag, 0.0) * spec
        # irfft doubles every bin except DC (and Nyquist for even sizes)
        upper = -1 if fft_size % 2 == 0 else None
        gspec[..., 1:upper] *= 0.5
        gframes = np.fft.irfft(gspec, n=fft_size, axis=-1) * fft_size
        gframes *= win
        return (_overlap_add(gframes.astype(xd.dtype), hop, n),)

    return custom_op((x,), mag, bw, "stft_mag")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, parameters: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``.

    Returns a map from parameter name to its gradient.  Parameters passed
    in ``parameters`` but not reachable from ``root`` report zeros.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    reached: dict[int, Tensor] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                reached[id(node)] = node
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if np.isnan(pg).any():
                    raise NaNPropagationError(f"NaN in adjoint produced by op '{node.op}'")
                if pg.dtype != p.data.dtype:
                    pg = pg.astype(p.data.dtype)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
    out: dict[str, np.ndarray] = {}
    for node in reached.values():
        if isinstance(node, Parameter):
            out[node.name] = node.grad
    if parameters is not None:
        for p in parameters:
            if p.grad is None:
                p.zero_grad()
            out.setdefault(p.name, p.grad)
    return out


def grad_check(
    function: Callable[[], Tensor],
    parameters: Sequence[Parameter],
    epsilon: float = 1e-4,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward and central differences.

    error = |analytic - numeric| / max(|numeric|, 1e-8), maximised over the
    checked elements.  ``max_elements`` limits the number of elements
    probed per parameter (sampled with ``rng``).
    """
    if not 1e-6 <= epsilon <= 1e-2:
        raise ContractError("epsilon must lie in [1e-6, 1e-2]")
    rng = rng or np.random.default_rng(0)
    with no_grad():
        first = float(function().data.reshape(-1)[0])
        second = float(function().data.reshape(-1)[0])
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise DeterminismError(f"function evaluated to {first!r} then {second!r}")
    for p in parameters:
        p.zero_grad()
    loss = function()
    backward(loss)
    worst = 0.0
    for p in parameters:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                fp = float(function().data.reshape(-1)[0])
            flat[i] = orig - epsilon
            with no_grad():
                fm = float(function().data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def clip_gradients(gradients: dict[str, np.ndarray], algorithm: str, threshold: float) -> dict[str, np.ndarray]:
    """Clip a gradient map by global L2 norm or elementwise value."""
    if threshold <= 0:
        raise ContractError("clip threshold must be positive")
    if not gradients:
        return {}
    if algorithm == "norm":
        total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in gradients.values())))
        if total > threshold:
            scale = threshold / total
            return {k: g * scale for k, g in gradients.items()}
        return dict(gradients)
    if algorithm == "value":
        return {k: np.clip(g, -threshold, threshold) for k, g in gradients.items()}
    raise ContractError(f"unknown clip algorithm {algorithm!r}")
