"""Processor controllers and feature-wise conditioning mechanisms.

Everything time-varying here runs at block rate (one value per 128
samples).  A block-rate value for block ``k`` is computed from the signal
in blocks ``0 .. k-1`` only, so every mechanism can be run frame by frame
with any frame size and reproduce the offline result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Parameter, Tensor, custom_op
from .nn import GRU, LSTM, MLP, Linear, Module

BLOCK_SIZE = 128

CONDITIONING_MODES = ("none", "concat", "tvconcat", "film", "tfilm", "ttfilm", "tvfilm")


class ConditioningError(ValueError):
    """Raised when controls are missing, unexpected, or of the wrong size."""


@dataclass
class ControlVector:
    """User-control settings normalised to [0, 1]."""

    values: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not self.names:
            self.names = [f"c{i}" for i in range(len(self.values))]
        if len(self.names) != len(self.values):
            raise ConditioningError("one name per control value is required")
        if np.any(self.values < 0) or np.any(self.values > 1) or not np.all(np.isfinite(self.values)):
            raise ConditioningError(f"control values must lie in [0, 1], got {self.values}")

    @classmethod
    def from_knobs(cls, knobs: dict[str, float], scale: float = 10.0) -> "ControlVector":
        """Build from knob settings on the 0..``scale`` dial."""
        names = list(knobs)
        return cls(np.array([knobs[n] for n in names], dtype=np.float64) / scale, names)

    def __len__(self):
        return len(self.values)


@dataclass
class BlockRateSequence:
    """One control value per 128-sample block; ``values`` has blocks on the last axis."""

    values: Tensor
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        self.values = ad.as_tensor(self.values)
        if self.block_size != BLOCK_SIZE:
            raise ValueError(f"block size must be {BLOCK_SIZE}")

    def __len__(self):
        return self.values.shape[-1]

    def covers(self, n: int) -> bool:
        return len(self) == ad.num_blocks(n, self.block_size)


def controls_batch(controls, batch: int, n_controls: int, dtype) -> np.ndarray | None:
    """Normalise controls to a (B, C) array or None, validating C."""
    if n_controls == 0:
        if controls is not None:
            raise ConditioningError("model is not conditional but controls were given")
        return None
    if controls is None:
        raise ConditioningError(f"model expects {n_controls} controls, none given")
    if isinstance(controls, ControlVector):
        controls = controls.values
    arr = np.asarray(controls.data if isinstance(controls, Tensor) else controls, dtype=dtype)
    if arr.ndim == 1:
        arr = np.broadcast_to(arr, (batch, arr.shape[0]))
    if arr.shape != (batch, n_controls):
        raise ConditioningError(f"controls of shape {arr.shape}, expected {(batch, n_controls)}")
    return np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def rowwise_linear(x, weight: Tensor, bias: Tensor | None) -> Tensor:
    """x @ W.T + b computed as an elementwise product and a last-axis sum.

    Unlike a BLAS matmul, every output row is produced by the same
    arithmetic no matter how many rows are processed together, which keeps
    streamed and offline block-rate outputs bit-identical.
    """
    x = ad.as_tensor(x)
    xd, wd = x.data, weight.data
    y = (xd[..., None, :] * wd).sum(axis=-1)
    inputs = [x, weight]
    if bias is not None:
        y = y + bias.data
        inputs.append(bias)

    def bw(g):
        gx = g @ wd
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1])
        out = [gx, gw]
        if bias is not None:
            out.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return tuple(out)

    return custom_op(inputs, y, bw, "rowwise_linear")


def _with_controls(feats: Tensor, cond: np.ndarray | None) -> Tensor:
    # feats: (B, nb, F) -> (B, nb, F + C)
    if cond is None:
        return feats
    b, nb, _ = feats.shape
    c = np.broadcast_to(cond[:, None, :], (b, nb, cond.shape[1])).astype(feats.dtype)
    return ad.concat([feats, Tensor(c)], axis=-1)


class BlockRecurrence(Module):
    """Block-rate recurrent controller.

    Per-block reduction of a (B, F, N) signal (``max`` or ``meanabs``),
    optionally concatenated with constant controls, fed to a GRU or LSTM;
    the hidden state after blocks ``< k`` (zero for ``k = 0``) drives an
    optional linear head that emits the value for block ``k``.
    """

    def __init__(self, n_features, n_controls, hidden, rng, dtype=np.float32, cell="gru",
                 reduce="meanabs", head_out=None, zero_head=True, zero_cell_input=False):
        super().__init__()
        self.n_features = n_features
        self.n_controls = n_controls
        self.reduce = reduce
        self.cell_kind = cell
        n_in = n_features + n_controls
        if cell == "gru":
            self.cell = GRU(n_in, hidden, rng, dtype)
        elif cell == "lstm":
            self.cell = LSTM(n_in, hidden, rng, dtype, zero_cell_input=zero_cell_input)
        else:
            raise ValueError(f"unknown cell {cell!r}")
        self.hidden = hidden
        self.head = Linear(hidden, head_out, rng, dtype, zero=zero_head) if head_out else None
        self.out_dim = head_out or hidden

    @classmethod
    def sharing(cls, cell, head, n_features, n_controls, reduce) -> "BlockRecurrence":
        """A recurrence view built around existing cell/head modules."""
        rec = cls.__new__(cls)
        Module.__init__(rec)
        for key, value in dict(n_features=n_features, n_controls=n_controls, reduce=reduce,
                               cell_kind="lstm" if isinstance(cell, LSTM) else "gru",
                               hidden=cell.hidden, cell=cell, head=head,
                               out_dim=head.weight.shape[0] if head is not None else cell.hidden).items():
            object.__setattr__(rec, key, value)
        return rec

    def _head(self, h):
        if self.head is None:
            return ad.as_tensor(h)
        return rowwise_linear(h, self.head.weight, self.head.bias)

    def __call__(self, signal, cond: np.ndarray | None = None) -> Tensor:
        """signal: (B, F, N) -> (B, nb, out_dim)."""
        feats = ad.block_reduce(signal, BLOCK_SIZE, self.reduce)  # (B, F, nb)
        seq = _with_controls(ad.transpose(feats, (0, 2, 1)), cond)
        h, _ = self.cell(seq)
        return self._head(ad.shift_blocks(h, axis=1))

    # -- streaming ---------------------------------------------------------
    def stream_init(self, batch: int, cond: np.ndarray | None):
        dtype = self.cell.w_hh.dtype
        zeros = np.zeros((batch, self.hidden), dtype)
        state = {
            "h": zeros.copy(),
            "c": zeros.copy(),
            "buf": np.zeros((batch, self.n_features, BLOCK_SIZE), dtype),
            "fill": 0,
            "block": 0,
            "cond": cond,
            "table": {},
        }
        with ad.no_grad():
            state["table"][0] = self._head(zeros[:, None, :]).data[:, 0, :]
        return state

    def _reduce_block(self, buf: np.ndarray) -> np.ndarray:
        blocks = buf[:, :, None, :]
        if self.reduce == "max":
            return blocks.max(axis=-1)[:, :, 0]
        return np.abs(blocks).sum(axis=-1)[:, :, 0] / buf.dtype.type(BLOCK_SIZE)

    def stream_push(self, state, values: np.ndarray):
        """Consume (B, F, n) samples, stepping the cell at each block boundary."""
        n = values.shape[-1]
        pos = 0
        buf = state["buf"]
        while pos < n:
            take = min(BLOCK_SIZE - state["fill"], n - pos)
            buf[:, :, state["fill"]:state["fill"] + take] = values[:, :, pos:pos + take]
            state["fill"] += take
            pos += take
            if state["fill"] == BLOCK_SIZE:
                feat = self._reduce_block(buf)[:, None, :]
                if state["cond"] is not None:
                    feat = np.concatenate([feat, state["cond"][:, None, :].astype(feat.dtype)], axis=-1)
                feat = np.ascontiguousarray(feat)
                cell = self.cell
                if self.cell_kind == "gru":
                    h_seq, _, h_last = _kernels.gru_forward(
                        feat, cell.w_ih.data, cell.w_hh.data, cell.bias.data, state["h"], False)
                    state["h"] = h_last
                else:
                    h_seq, _, _, h_last, c_last = _kernels.lstm_forward(
                        feat, cell.w_ih.data, cell.w_hh.data, cell.bias.data, state["h"], state["c"], False)
                    state["h"], state["c"] = h_last, c_last
                state["block"] += 1
                with ad.no_grad():
                    state["table"][state["block"]] = self._head(h_seq).data[:, 0, :]
                state["fill"] = 0

    @staticmethod
    def stream_forget(state, before_block: int):
        for k in [k for k in state["table"] if k < before_block]:
            del state["table"][k]

    @staticmethod
    def stream_lookup(state, first_block: int, n_blocks: int) -> np.ndarray:
        """(B, n_blocks, D) values for blocks first_block .. first_block + n_blocks - 1."""
        table = state["table"]
        lo = max(first_block, 0)
        ref = table[min(table)]
        out = np.zeros((ref.shape[0], n_blocks, ref.shape[1]), dtype=ref.dtype)
        for k in range(lo, first_block + n_blocks):
            out[:, k - first_block, :] = table[k]
        return out


def hold_positions(values: np.ndarray, start: int, n: int) -> np.ndarray:
    """Expand (B, nb, D) block values covering absolute blocks from
    ``start // 128`` to per-sample (B, D, n) for samples start .. start+n-1."""
    first = start // BLOCK_SIZE
    idx = np.arange(start, start + n) // BLOCK_SIZE - first
    return np.transpose(values[:, idx, :], (0, 2, 1))


def first_block(start: int) -> int:
    return start // BLOCK_SIZE


# ---------------------------------------------------------------------------
# processor controllers
# ---------------------------------------------------------------------------

class StaticController(Module):
    """Learnable constants, initialised at the processor's neutral setting."""

    kind = "static"

    def __init__(self, init_values, dtype=np.float32):
        super().__init__()
        self.values = Parameter(np.asarray(init_values, dtype=dtype))

    def __call__(self, x=None, cond=None) -> Tensor:
        return self.values


class DynamicController(Module):
    """Block-rate control sequence from the input envelope.

    Per-block mean absolute value of the input (plus the controls for the
    dynamic-conditional variant) drives a single-layer GRU with two hidden
    units; a linear head adds to the neutral setting.  Output shape is
    (B, ceil(N / 128), P).
    """

    def __init__(self, init_values, rng, n_controls: int = 0, hidden: int = 2, dtype=np.float32):
        super().__init__()
        self.init_values = np.asarray(init_values, dtype=dtype)
        self.n_controls = n_controls
        self.kind = "dynamic-conditional" if n_controls else "dynamic"
        self.rnn = BlockRecurrence(1, n_controls, hidden, rng, dtype, cell="gru", reduce="meanabs",
                                   head_out=len(self.init_values), zero_head=True)

    def __call__(self, x, cond=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.shape[-1] == 0:
            raise ValueError("dynamic controller needs a non-empty signal")
        seq = self.rnn(ad.reshape(x, (x.shape[0], 1, x.shape[-1])), cond)
        return seq + self.init_values


class ConditionalStaticController(Module):
    """Controls -> processor parameters through a C -> 16 -> P tanh MLP."""

    kind = "static-conditional"

    def __init__(self, init_values, n_controls: int, rng, hidden: int = 16, dtype=np.float32):
        super().__init__()
        self.init_values = np.asarray(init_values, dtype=dtype)
        self.n_controls = n_controls
        self.mlp = MLP([n_controls, hidden, len(self.init_values)], rng, dtype, zero_last=True)

    def __call__(self, x=None, cond=None) -> Tensor:
        if cond is None or cond.shape[-1] != self.n_controls:
            raise ConditioningError(f"static-conditional controller needs {self.n_controls} controls")
        return self.mlp(Tensor(cond)) + self.init_values


def static_controller(init_values, dtype=np.float32) -> StaticController:
    return StaticController(init_values, dtype)


def dynamic_controller(init_values, rng, dtype=np.float32) -> DynamicController:
    return DynamicController(init_values, rng, 0, dtype=dtype)


def conditional_controller(init_values, n_controls, rng, dynamic=False, dtype=np.float32):
    if dynamic:
        return DynamicController(init_values, rng, n_controls, dtype=dtype)
    return ConditionalStaticController(init_values, n_controls, rng, dtype=dtype)


# ---------------------------------------------------------------------------
# backbone conditioning
# ---------------------------------------------------------------------------

def _affine(f: Tensor, gb: Tensor, n_feat: int) -> Tensor:
    """f * (1 + gb[:F]) + gb[F:], gb broadcast against f (B, F, N)."""
    gamma = gb[:, :n_feat] + 1.0
    beta = gb[:, n_feat:]
    return f * gamma + beta


class Modulator(Module):
    """Base class: per-layer affine modulation of (B, F, N) feature maps."""

    mode = "none"
    needs_cond = False
    temporal = False

    def prepare(self, x: Tensor, cond) -> dict:
        return {"cond": cond}

    def modulate(self, layer: int, f: Tensor, ctx: dict) -> Tensor:
        return f

    def check_cond(self, cond):
        if self.needs_cond and cond is None:
            raise ConditioningError(f"{self.mode} conditioning requires controls")

    # -- streaming: numpy-only counterparts of prepare/modulate -------------
    def stream_init(self, batch: int, cond) -> dict:
        return {}

    def stream_input(self, st: dict, frame: np.ndarray):
        """Observe the model input frame (B, 1, F)."""

    def stream_modulate(self, layer: int, f: np.ndarray, start: int, new_from: int, st: dict) -> np.ndarray:
        """Modulate ``f`` whose first sample sits at absolute position ``start``;
        samples from ``new_from`` on have not been seen before."""
        return f

    def stream_forget(self, st: dict, before: int):
        """Drop block values for samples earlier than ``before``."""


def _affine_np(f: np.ndarray, gb: np.ndarray, n_feat: int) -> np.ndarray:
    return f * (gb[:, :n_feat] + 1.0) + gb[:, n_feat:]


def _held(values: np.ndarray, start: int, n: int) -> np.ndarray:
    return hold_positions(values, start, n)


class FiLM(Modulator):
    """Per-layer MLP from controls to a time-constant per-channel scale and shift."""

    mode = "film"
    needs_cond = True

    def __init__(self, feat_dims, n_controls, rng, hidden=32, dtype=np.float32):
        super().__init__()
        self.feat_dims = list(feat_dims)
        self.nets = [MLP([n_controls, hidden, 2 * f], rng, dtype, zero_last=True) for f in feat_dims]

    def prepare(self, x, cond):
        self.check_cond(cond)
        return {"gb": [net(Tensor(cond)) for net in self.nets]}

    def modulate(self, layer, f, ctx):
        gb = ctx["gb"][layer]
        return _affine(f, ad.reshape(gb, gb.shape + (1,)), self.feat_dims[layer])

    def stream_init(self, batch, cond):
        self.check_cond(cond)
        with ad.no_grad():
            return {"gb": [net(Tensor(cond)).data[:, :, None] for net in self.nets]}

    def stream_modulate(self, layer, f, start, new_from, st):
        return _affine_np(f, st["gb"][layer], self.feat_dims[layer])


class _TemporalModulator(Modulator):
    temporal = True

    def layer_recurrence(self, layer: int) -> BlockRecurrence:
        raise NotImplementedError

    def layer_output_to_gb(self, layer: int, out: Tensor) -> Tensor:
        return out

    def modulate(self, layer, f, ctx):
        n = f.shape[-1]
        rec = self.layer_recurrence(layer)
        out = rec(f, ctx["cond"] if self.needs_cond else None)  # (B, nb, D)
        gb = ad.hold(ad.transpose(out, (0, 2, 1)), n, BLOCK_SIZE)
        return _affine(f, gb, self.feat_dims[layer])

    def stream_init(self, batch, cond):
        if self.needs_cond:
            self.check_cond(cond)
        c = cond if self.needs_cond else None
        return {"recs": [self.layer_recurrence(i).stream_init(batch, c) for i in range(len(self.feat_dims))]}

    def stream_modulate(self, layer, f, start, new_from, st):
        rec = self.layer_recurrence(layer)
        rs = st["recs"][layer]
        rec.stream_push(rs, np.ascontiguousarray(f[..., max(new_from - start, 0):]))
        n = f.shape[-1]
        first = start // BLOCK_SIZE
        vals = rec.stream_lookup(rs, first, (start + n - 1) // BLOCK_SIZE - first + 1)
        return _affine_np(f, _held(vals, start, n), self.feat_dims[layer])

    def stream_forget(self, st, before):
        for rs in st["recs"]:
            BlockRecurrence.stream_forget(rs, before // BLOCK_SIZE)


class TFiLM(_TemporalModulator):
    """Per-layer LSTM over max-pooled blocks emitting (scale - 1, shift)."""

    mode = "tfilm"

    def __init__(self, feat_dims, rng, dtype=np.float32):
        super().__init__()
        self.feat_dims = list(feat_dims)
        self.recs = [BlockRecurrence(f, 0, 2 * f, rng, dtype, cell="lstm", reduce="max",
                                     head_out=None, zero_cell_input=True) for f in feat_dims]

    def layer_recurrence(self, layer):
        return self.recs[layer]

    def prepare(self, x, cond):
        return {"cond": None}


class TTFiLM(_TemporalModulator):
    """Tiny TFiLM: one shared 4-unit LSTM over (pooled features, controls),
    per-layer linear heads."""

    mode = "ttfilm"
    needs_cond = True

    def __init__(self, feat_dims, n_controls, rng, hidden=4, dtype=np.float32):
        super().__init__()
        if len(set(feat_dims)) != 1:
            raise ValueError("TTFiLM shares its recurrent cell, so all layers need equal width")
        self.feat_dims = list(feat_dims)
        f = feat_dims[0]
        self.shared = LSTM(f + n_controls, hidden, rng, dtype)
        self.heads = [Linear(hidden, 2 * f, rng, dtype, zero=True) for _ in feat_dims]
        # views sharing the cell; kept out of the parameter registry
        object.__setattr__(self, "_recs", [
            BlockRecurrence.sharing(self.shared, head, f, n_controls, "max") for head in self.heads
        ])

    def layer_recurrence(self, layer):
        return self._recs[layer]

    def prepare(self, x, cond):
        self.check_cond(cond)
        return {"cond": cond}


class TVFiLM(Modulator):
    """One block-rate LSTM over the input envelope and controls drives every layer."""

    mode = "tvfilm"
    needs_cond = True
    temporal = True

    def __init__(self, feat_dims, n_controls, rng, hidden=16, dtype=np.float32):
        super().__init__()
        self.feat_dims = list(feat_dims)
        self.offsets = np.concatenate([[0], np.cumsum([2 * f for f in feat_dims])])
        self.rec = BlockRecurrence(1, n_controls, hidden, rng, dtype, cell="lstm", reduce="meanabs",
                                   head_out=int(self.offsets[-1]), zero_head=True)

    def prepare(self, x, cond):
        self.check_cond(cond)
        x = ad.as_tensor(x)
        out = self.rec(ad.reshape(x, (x.shape[0], 1, x.shape[-1])), cond)  # (B, nb, D)
        return {"out": ad.transpose(out, (0, 2, 1)), "n": x.shape[-1]}

    def modulate(self, layer, f, ctx):
        lo, hi = self.offsets[layer], self.offsets[layer + 1]
        gb = ad.hold(ctx["out"][:, lo:hi, :], f.shape[-1], BLOCK_SIZE)
        return _affine(f, gb, self.feat_dims[layer])

    def stream_init(self, batch, cond):
        self.check_cond(cond)
        return {"rec": self.rec.stream_init(batch, cond)}

    def stream_input(self, st, frame):
        self.rec.stream_push(st["rec"], frame)

    def stream_modulate(self, layer, f, start, new_from, st):
        lo, hi = self.offsets[layer], self.offsets[layer + 1]
        n = f.shape[-1]
        first = start // BLOCK_SIZE
        vals = self.rec.stream_lookup(st["rec"], first, (start + n - 1) // BLOCK_SIZE - first + 1)
        return _affine_np(f, _held(vals[:, :, lo:hi], start, n), self.feat_dims[layer])

    def stream_forget(self, st, before):
        BlockRecurrence.stream_forget(st["rec"], before // BLOCK_SIZE)


def make_modulator(mode: str, feat_dims, n_controls: int, rng, dtype=np.float32) -> Modulator:
    if mode in ("none", "concat", "tvconcat"):
        return Modulator()
    if mode == "film":
        return FiLM(feat_dims, n_controls, rng, dtype=dtype)
    if mode == "tfilm":
        return TFiLM(feat_dims, rng, dtype=dtype)
    if mode == "ttfilm":
        return TTFiLM(feat_dims, n_controls, rng, dtype=dtype)
    if mode == "tvfilm":
        return TVFiLM(feat_dims, n_controls, rng, dtype=dtype)
    raise ConditioningError(f"unknown conditioning mode {mode!r}")


def modulate(features, mode: str, cond=None, *, modulator: Modulator | None = None, layer: int = 0,
             rng=None) -> Tensor:
    """Apply one layer of feature-wise modulation to a (B, F, N) map.

    A fresh modulator (identity at initialisation) is built when none is
    given.
    """
    features = ad.as_tensor(features)
    b, f, _ = features.shape
    if mode in ("film", "ttfilm", "tvfilm") and cond is None:
        raise ConditioningError(f"{mode} requires controls")
    cond_arr = None
    if cond is not None and mode != "tfilm":
        values = cond.values if isinstance(cond, ControlVector) else np.asarray(cond)
        cond_arr = controls_batch(values, b, values.shape[-1], features.dtype)
    if modulator is None:
        n_controls = 0 if cond_arr is None else cond_arr.shape[1]
        modulator = make_modulator(mode, [f], n_controls, rng or np.random.default_rng(0), features.dtype)
        layer = 0
    ctx = modulator.prepare(features[:, :1, :] if mode == "tvfilm" else features, cond_arr)
    return modulator.modulate(layer, features, ctx)


class TVConcat(Module):
    """Block-rate LSTM over (input envelope, controls) -> E-dim embedding,
    held per block and appended to the input as extra channels."""

    def __init__(self, n_controls, rng, embed=4, hidden=16, dtype=np.float32):
        super().__init__()
        self.embed = embed
        self.rec = BlockRecurrence(1, n_controls, hidden, rng, dtype, cell="lstm", reduce="meanabs",
                                   head_out=embed, zero_head=True)

    def __call__(self, x, cond) -> Tensor:
        x = ad.as_tensor(x)
        out = self.rec(ad.reshape(x, (x.shape[0], 1, x.shape[-1])), cond)  # (B, nb, E)
        return ad.hold(ad.transpose(out, (0, 2, 1)), x.shape[-1], BLOCK_SIZE)

    def stream_init(self, batch, cond):
        return self.rec.stream_init(batch, cond)

    def stream_embed(self, st, frame: np.ndarray, start: int) -> np.ndarray:
        """(B, F) frame at absolute ``start`` -> (B, E, F) held embedding."""
        self.rec.stream_push(st, frame[:, None, :])
        n = frame.shape[-1]
        first = start // BLOCK_SIZE
        vals = self.rec.stream_lookup(st, first, (start + n - 1) // BLOCK_SIZE - first + 1)
        BlockRecurrence.stream_forget(st, (start + n) // BLOCK_SIZE)
        return _held(vals, start, n)


def concat_condition(x, mode: str, cond, tvconcat: TVConcat | None = None) -> Tensor:
    """Augment a (B, N) signal with control channels -> (B, 1 + C or 1 + E, N)."""
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    b, n = x.shape
    sig = ad.reshape(x, (b, 1, n))
    if mode == "concat":
        values = cond.values if isinstance(cond, ControlVector) else np.asarray(cond)
        c = controls_batch(values, b, values.shape[-1], x.dtype)
        rows = np.broadcast_to(c[:, :, None], (b, c.shape[1], n)).astype(x.dtype)
        return ad.concat([sig, Tensor(rows)], axis=1)
    if mode == "tvconcat":
        if tvconcat is None:
            raise ConditioningError("tvconcat needs its controller module")
        c = controls_batch(cond, b, tvconcat.rec.n_controls, x.dtype)
        return ad.concat([sig, tvconcat(x, c)], axis=1)
    raise ConditioningError(f"unknown concat mode {mode!r}")
