"""Differentiable DSP processors and gray-box processing chains.

Signals are (B, N) tensors at 48 kHz.  Processor parameters arrive as
unconstrained reals from a controller: the parametric EQ maps them through
range squashers, gains are in dB, offsets are additive.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Parameter, Tensor, custom_op
from .controllers import (
    BLOCK_SIZE,
    BlockRateSequence,
    ConditionalStaticController,
    ConditioningError,
    DynamicController,
    StaticController,
    controls_batch,
    hold_positions,
)
from .nn import MLP, Module

FS = 48000
_LN10 = math.log(10.0)


class ParameterError(ValueError):
    """Non-finite or otherwise invalid processor parameter."""


class StabilityError(ValueError):
    """Biquad poles on or outside the unit circle."""


class ShapeError(ValueError):
    """Control sequence does not match the signal length."""


# ---------------------------------------------------------------------------
# parametric EQ
# ---------------------------------------------------------------------------

# raw vector layout and physical ranges
PEQ_FIELDS = ("ls_freq", "ls_gain", "p1_freq", "p1_gain", "p1_q", "p2_freq", "p2_gain", "p2_q",
              "hs_freq", "hs_gain")
FREQ_RANGES = {"ls": (20.0, 350.0), "p1": (400.0, 2400.0), "p2": (2500.0, 7000.0), "hs": (7500.0, 20000.0)}
GAIN_RANGE = (-24.0, 24.0)
Q_RANGE = (0.3, 10.0)


def _squash_lin(u, lo, hi):
    return ad.sigmoid(u) * (hi - lo) + lo


def _squash_log(u, lo, hi):
    return ad.exp(ad.sigmoid(u) * (math.log(hi) - math.log(lo)) + math.log(lo))


def _logit(p):
    return math.log(p / (1.0 - p))


def _unsquash_lin(v, lo, hi):
    return _logit((v - lo) / (hi - lo))


def _unsquash_log(v, lo, hi):
    return _logit((math.log(v) - math.log(lo)) / (math.log(hi) - math.log(lo)))


@dataclass
class PeqParams:
    """Unconstrained parameters of the 4-band EQ (low shelf, two peaks, high shelf).

    ``raw`` holds 10 reals in the order of ``PEQ_FIELDS``.  All zeros gives
    0 dB in every band, i.e. a flat response.
    """

    raw: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape[-1] != 10:
            raise ParameterError("PEQ needs 10 parameters")

    @classmethod
    def flat(cls) -> "PeqParams":
        return cls(np.zeros(10))

    @classmethod
    def from_physical(cls, low_shelf=(None, 0.0), peak1=(None, 0.0, None), peak2=(None, 0.0, None),
                      high_shelf=(None, 0.0)) -> "PeqParams":
        """Build from (freq_hz, gain_db[, q]) tuples; ``None`` keeps the band's mid-range default."""
        raw = np.zeros(10)
        bands = [("ls", low_shelf, 0), ("p1", peak1, 2), ("p2", peak2, 5), ("hs", high_shelf, 8)]
        for name, vals, i in bands:
            freq, gain = vals[0], vals[1]
            if freq is not None:
                raw[i] = _unsquash_log(freq, *FREQ_RANGES[name])
            raw[i + 1] = _unsquash_lin(gain, *GAIN_RANGE)
            if len(vals) > 2 and vals[2] is not None:
                raw[i + 2] = _unsquash_log(vals[2], *Q_RANGE)
        return cls(raw)

    def physical(self) -> dict[str, float]:
        with ad.no_grad():
            vals = _map_physical(Tensor(self.raw))
        return {k: float(v.data) for k, v in vals.items()}


def _map_physical(raw: Tensor) -> dict[str, Tensor]:
    col = lambda i: raw[..., i]  # noqa: E731
    out = {}
    for name, (fi, gi, qi) in {"ls": (0, 1, None), "p1": (2, 3, 4), "p2": (5, 6, 7), "hs": (8, 9, None)}.items():
        out[f"{name}_freq"] = _squash_log(col(fi), *FREQ_RANGES[name])
        out[f"{name}_gain"] = _squash_lin(col(gi), *GAIN_RANGE)
        if qi is not None:
            out[f"{name}_q"] = _squash_log(col(qi), *Q_RANGE)
    return out


def _shelf(freq, gain_db, fs, high: bool) -> list[Tensor]:
    amp = ad.exp(gain_db * (_LN10 / 40.0))
    sqrt_a = ad.exp(gain_db * (_LN10 / 80.0))
    w0 = freq * (2.0 * math.pi / fs)
    cw = ad.cos(w0)
    # shelf slope S = 1
    two_sa_alpha = ad.sin(w0) * sqrt_a * math.sqrt(2.0)
    ap, am = amp + 1.0, amp - 1.0
    sgn = 1.0 if high else -1.0
    b0 = amp * (ap + am * cw * sgn + two_sa_alpha)
    b1 = amp * (am + ap * cw * sgn) * (-2.0 * sgn)
    b2 = amp * (ap + am * cw * sgn - two_sa_alpha)
    a0 = ap - am * cw * sgn + two_sa_alpha
    a1 = (am - ap * cw * sgn) * (2.0 * sgn)
    a2 = ap - am * cw * sgn - two_sa_alpha
    return [b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0]


def _peak(freq, gain_db, q, fs) -> list[Tensor]:
    amp = ad.exp(gain_db * (_LN10 / 40.0))
    w0 = freq * (2.0 * math.pi / fs)
    alpha = ad.sin(w0) / (q * 2.0)
    cw = ad.cos(w0)
    a0 = alpha / amp + 1.0
    b0 = alpha * amp + 1.0
    b2 = 1.0 - alpha * amp
    a1 = cw * -2.0
    a2 = 1.0 - alpha / amp
    return [b0 / a0, a1 / a0, b2 / a0, a1 / a0, a2 / a0]


def peq_coefficients(params, fs: float = FS) -> Tensor:
    """Biquad coefficients (..., 4, 5) ordered b0 b1 b2 a1 a2, stages ls/p1/p2/hs.

    ``params`` is a :class:`PeqParams` or a raw tensor (..., 10).
    """
    raw = ad.as_tensor(params.raw if isinstance(params, PeqParams) else params)
    if not np.all(np.isfinite(raw.data)):
        raise ParameterError("non-finite EQ parameter")
    m = _map_physical(raw)
    stages = [
        _shelf(m["ls_freq"], m["ls_gain"], fs, high=False),
        _peak(m["p1_freq"], m["p1_gain"], m["p1_q"], fs),
        _peak(m["p2_freq"], m["p2_gain"], m["p2_q"], fs),
        _shelf(m["hs_freq"], m["hs_gain"], fs, high=True),
    ]
    return ad.stack([ad.stack(c, axis=-1) for c in stages], axis=-2)


@dataclass(frozen=True)
class BiquadCoeffs:
    b0: float
    b1: float
    b2: float
    a1: float
    a2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2, self.a1, self.a2])

    def is_stable(self) -> bool:
        return _stable(self.as_array()[None, :])

    def response(self, freqs_hz, fs: float = FS) -> np.ndarray:
        """Complex frequency response H(e^{jw}) at the given frequencies."""
        z1 = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=np.float64) / fs)
        num = self.b0 + self.b1 * z1 + self.b2 * z1 * z1
        return num / (1.0 + self.a1 * z1 + self.a2 * z1 * z1)


def coeffs_list(coeffs) -> list[BiquadCoeffs]:
    """Unpack a (4, 5) coefficient tensor into :class:`BiquadCoeffs`."""
    arr = np.asarray(ad.as_tensor(coeffs).data, dtype=np.float64).reshape(-1, 5)
    return [BiquadCoeffs(*map(float, row)) for row in arr]


def _stable(c: np.ndarray) -> bool:
    a1, a2 = c[..., 3], c[..., 4]
    return bool(np.all(np.abs(a2) < 1.0) and np.all(np.abs(a1) < 1.0 + a2))


def biquad(x, coeffs) -> Tensor:
    """Filter (B, N) with one biquad per row; coeffs (B, 5) or (5,); zero initial state."""
    x = ad.as_tensor(x)
    coeffs = ad.as_tensor(coeffs)
    bsz = x.shape[0]
    if coeffs.ndim == 1:
        coeffs = ad.broadcast_to(coeffs, (bsz, 5))
    dtype = x.dtype
    cd = np.ascontiguousarray(coeffs.data, dtype=dtype)
    if not _stable(cd):
        raise StabilityError("biquad poles outside the unit circle")
    xd = np.ascontiguousarray(x.data)
    y = _kernels.biquad_forward(xd, cd, np.zeros((bsz, 2), dtype))

    def bw(g):
        lam = _kernels.allpole_adjoint(np.ascontiguousarray(g, dtype=dtype), cd)
        gx = cd[:, 0:1] * lam
        gx[:, :-1] += cd[:, 1:2] * lam[:, 1:]
        gx[:, :-2] += cd[:, 2:3] * lam[:, 2:]
        gc = np.stack([
            (lam * xd).sum(axis=1),
            (lam[:, 1:] * xd[:, :-1]).sum(axis=1),
            (lam[:, 2:] * xd[:, :-2]).sum(axis=1),
            -(lam[:, 1:] * y[:, :-1]).sum(axis=1),
            -(lam[:, 2:] * y[:, :-2]).sum(axis=1),
        ], axis=1)
        return gx, gc

    return custom_op((x, coeffs), y, bw, "biquad")


def biquad_cascade_filter(x, coeffs) -> Tensor:
    """Run (B, N) through a cascade; coeffs is (S, 5), (B, S, 5) or a list of BiquadCoeffs."""
    if isinstance(coeffs, (list, tuple)) and coeffs and isinstance(coeffs[0], BiquadCoeffs):
        coeffs = np.stack([c.as_array() for c in coeffs])
    x = ad.as_tensor(x)
    coeffs = ad.as_tensor(coeffs)
    if not np.all(np.isfinite(x.data)):
        raise ParameterError("non-finite input signal")
    y = x
    for s in range(coeffs.shape[-2]):
        y = biquad(y, coeffs[..., s, :])
    return y


# ---------------------------------------------------------------------------
# gain / offset
# ---------------------------------------------------------------------------

def _per_sample(control, x: Tensor, transform) -> Tensor:
    n = x.shape[-1]
    if isinstance(control, BlockRateSequence):
        if not control.covers(n):
            raise ShapeError(f"block sequence of length {len(control)} does not cover {n} samples "
                             f"(expected {ad.num_blocks(n, BLOCK_SIZE)})")
        return ad.hold(transform(control.values), n, BLOCK_SIZE)
    c = transform(ad.as_tensor(control))
    if c.ndim == 1:
        c = ad.reshape(c, (c.shape[0], 1)) if c.shape[0] == x.shape[0] and c.shape[0] != 1 else ad.reshape(c, ())
    elif c.ndim == 2 and c.shape[1] != 1:
        raise ShapeError(f"static control of shape {c.shape}")
    return c


def db_to_amp(gain_db) -> Tensor:
    return ad.exp(ad.as_tensor(gain_db) * (_LN10 / 20.0))


def gain_apply(x, gain_db) -> Tensor:
    """x * 10^(g/20); ``gain_db`` is a scalar, a per-row (B,) value or a BlockRateSequence."""
    x = ad.as_tensor(x)
    return x * _per_sample(gain_db, x, db_to_amp)


def offset_apply(x, offset) -> Tensor:
    """x + o with the same control conventions as :func:`gain_apply`."""
    x = ad.as_tensor(x)
    return x + _per_sample(offset, x, lambda v: v)


# ---------------------------------------------------------------------------
# static nonlinearities
# ---------------------------------------------------------------------------

class MLPNonlinearity(Module):
    """Memoryless 1 -> 32 -> 32 -> 32 -> 1 tanh MLP applied to every sample."""

    def __init__(self, rng, dtype=np.float32, hidden: int = 32, zero_last: bool = False):
        super().__init__()
        self.mlp = MLP([1, hidden, hidden, hidden, 1], rng, dtype, zero_last=zero_last)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        flat = ad.reshape(x, (x.size, 1))
        return ad.reshape(self.mlp(flat), x.shape)

    def macs_per_sample(self) -> int:
        return sum(layer.weight.size for layer in self.mlp.layers)


def rational_tanh_fit(lim: float = 3.0, n: int = 2001) -> np.ndarray:
    """Least-squares fit of P/(1+Q) to tanh on [-lim, lim], P odd, Q even and >= 0.

    Returns the 10 coefficients (p0..p5, q1..q4).
    """
    x = np.linspace(-lim, lim, n)
    t = np.tanh(x)
    design = np.stack([x, x ** 3, x ** 5, -t * x ** 2, -t * x ** 4], axis=1)
    c, *_ = np.linalg.lstsq(design, t, rcond=None)
    return np.array([0.0, c[0], 0.0, c[1], 0.0, c[2], 0.0, c[3], 0.0, c[4]])


def _rational(x: Tensor, coef: Tensor) -> Tensor:
    xd = x.data
    cd = coef.data.astype(xd.dtype)
    p = cd[5]
    for k in range(4, -1, -1):
        p = p * xd + cd[k]
    q = cd[9]
    for k in range(8, 5, -1):
        q = q * xd + cd[k]
    q = q * xd
    den = 1.0 + np.abs(q)
    y = p / den

    def bw(g):
        sq = np.sign(q)
        gp = g / den
        gq = -g * y / den * sq
        powers = [np.ones_like(xd)]
        for _ in range(5):
            powers.append(powers[-1] * xd)
        gcoef = np.empty(10, dtype=cd.dtype)
        for k in range(6):
            gcoef[k] = (gp * powers[k]).sum()
        for k in range(1, 5):
            gcoef[5 + k] = (gq * powers[k]).sum()
        dp = sum(k * cd[k] * powers[k - 1] for k in range(1, 6))
        dq = sum(k * cd[5 + k] * powers[k - 1] for k in range(1, 5))
        gx = gp * dp + gq * dq
        return gx, gcoef.astype(coef.dtype)

    return custom_op((x, coef), y, bw, "rational")


class RationalNonlinearity(Module):
    """y = P(x) / (1 + |Q(x)|), P of degree 5, Q of degree 4 with no constant term."""

    def __init__(self, dtype=np.float32, init: str = "tanh"):
        super().__init__()
        if init == "tanh":
            coef = rational_tanh_fit()
        elif init == "identity":
            coef = np.zeros(10)
            coef[1] = 1.0
        else:
            raise ValueError(f"unknown init {init!r}")
        self.coef = Parameter(coef.astype(dtype))

    def __call__(self, x) -> Tensor:
        return _rational(ad.as_tensor(x), self.coef)


def mlp_nonlinearity(x, module: MLPNonlinearity) -> Tensor:
    return module(x)


def rational_nonlinearity(x, module: RationalNonlinearity) -> Tensor:
    return module(x)


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

CONTROLLER_KINDS = {"s": "static", "d": "dynamic", "sc": "static-conditional", "dc": "dynamic-conditional"}
PROCESSORS = ("PEQ", "G", "O", "MLP", "RNL")
_N_PARAMS = {"PEQ": 10, "G": 1, "O": 1}


@dataclass(frozen=True)
class StageSpec:
    processor: str
    controller: str  # one of CONTROLLER_KINDS values

    def __str__(self):
        if self.processor in ("MLP", "RNL"):
            return self.processor
        short = {v: k for k, v in CONTROLLER_KINDS.items()}[self.controller]
        return f"{self.processor}.{short}"


@dataclass(frozen=True)
class ChainSpec:
    """Ordered processors with their controller bindings, e.g. ``PEQ.s > G.d > PEQ.s > G.s``."""

    stages: tuple[StageSpec, ...]

    @classmethod
    def parse(cls, text: str) -> "ChainSpec":
        stages = []
        for tok in re.split(r"\s*(?:>|→|->)\s*", text.strip()):
            proc, _, ctl = tok.partition(".")
            if proc not in PROCESSORS:
                raise ValueError(f"unknown processor {proc!r}")
            if proc in ("MLP", "RNL"):
                if ctl:
                    raise ValueError(f"{proc} takes no controller suffix")
                stages.append(StageSpec(proc, "static"))
                continue
            if ctl not in CONTROLLER_KINDS:
                raise ValueError(f"stage {tok!r} needs a controller suffix from {sorted(CONTROLLER_KINDS)}")
            stages.append(StageSpec(proc, CONTROLLER_KINDS[ctl]))
        return cls(tuple(stages))

    def __str__(self):
        return " > ".join(str(s) for s in self.stages)

    @property
    def conditional(self) -> bool:
        return any(s.controller.endswith("conditional") for s in self.stages)


class Stage(Module):
    def __init__(self, spec: StageSpec, n_controls: int, rng, dtype):
        super().__init__()
        self.spec = spec
        self.processor = spec.processor
        if spec.processor == "MLP":
            self.proc = MLPNonlinearity(rng, dtype)
            return
        if spec.processor == "RNL":
            self.proc = RationalNonlinearity(dtype)
            return
        init = np.zeros(_N_PARAMS[spec.processor], dtype)
        kind = spec.controller
        if kind == "static":
            self.controller = StaticController(init, dtype)
        elif kind == "dynamic":
            self.controller = DynamicController(init, rng, 0, dtype=dtype)
        elif kind == "static-conditional":
            self.controller = ConditionalStaticController(init, n_controls, rng, dtype=dtype)
        else:
            self.controller = DynamicController(init, rng, n_controls, dtype=dtype)

    @property
    def dynamic(self) -> bool:
        return self.spec.controller.startswith("dynamic")

    def control(self, x_in: Tensor, cond):
        """Processor parameters: (P,), (B, P) or a (B, nb, P) block-rate tensor."""
        return self.controller(x_in, cond)

    def apply(self, y: Tensor, params) -> Tensor:
        proc = self.processor
        if proc in ("MLP", "RNL"):
            return self.proc(y)
        if proc == "PEQ":
            return biquad_cascade_filter(y, peq_coefficients(params))
        fn = gain_apply if proc == "G" else offset_apply
        if self.dynamic:
            return fn(y, BlockRateSequence(params[:, :, 0]))
        if params.ndim == 2:
            return fn(y, ad.reshape(params[:, 0], (params.shape[0], 1)))
        return fn(y, ad.reshape(params, ()))


class GrayBoxModel(Module):
    """A chain of DSP processors; dynamic controllers observe the chain input."""

    def __init__(self, chain: ChainSpec | str, n_controls: int = 0, rng=None, dtype=np.float32):
        super().__init__()
        if isinstance(chain, str):
            chain = ChainSpec.parse(chain)
        if chain.conditional != (n_controls > 0):
            raise ConditioningError("conditional controllers need n_controls > 0 and vice versa")
        rng = np.random.default_rng(0) if rng is None else rng
        self.chain = chain
        self.n_controls = n_controls
        self.stages = [Stage(s, n_controls, rng, dtype) for s in chain.stages]

    def __call__(self, x, cond=None) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2:
            raise ShapeError("gray-box models take (B, N) signals")
        c = controls_batch(cond, x.shape[0], self.n_controls, x.dtype)
        y = x
        for st in self.stages:
            params = None if st.processor in ("MLP", "RNL") else st.control(x, c)
            y = st.apply(y, params)
        return y

    # -- streaming ---------------------------------------------------------
    def stream_init(self, batch: int, cond=None) -> dict:
        dtype = self.dtype
        c = controls_batch(cond, batch, self.n_controls, dtype)
        states = []
        with ad.no_grad():
            for st in self.stages:
                if st.processor in ("MLP", "RNL"):
                    states.append(None)
                elif st.dynamic:
                    rec = st.controller.rnn
                    states.append({"rec": rec.stream_init(batch, c)})
                else:
                    params = st.control(None, c)
                    entry = {"params": params}
                    if st.processor == "PEQ":
                        coeffs = peq_coefficients(params).data
                        coeffs = np.broadcast_to(coeffs, (batch,) + coeffs.shape[-2:])
                        entry["coeffs"] = [np.ascontiguousarray(coeffs[:, s, :], dtype=dtype)
                                           for s in range(coeffs.shape[1])]
                        entry["z"] = np.zeros((coeffs.shape[1], batch, 2), dtype)
                    states.append(entry)
        return {"pos": 0, "stages": states, "batch": batch}

    def stream_step(self, state: dict, frame: np.ndarray) -> np.ndarray:
        """Process one (B, F) frame, updating ``state`` in place."""
        pos = state["pos"]
        n = frame.shape[-1]
        y = Tensor(frame)
        with ad.no_grad():
            for st, s in zip(self.stages, state["stages"]):
                proc = st.processor
                if proc in ("MLP", "RNL"):
                    y = st.apply(y, None)
                elif proc == "PEQ":
                    yd = np.ascontiguousarray(y.data)
                    for k, c in enumerate(s["coeffs"]):
                        yd = _kernels.biquad_forward(yd, c, s["z"][k])
                    y = Tensor(yd)
                elif st.dynamic:
                    rec = st.controller.rnn
                    rec.stream_push(s["rec"], frame[:, None, :])
                    first = pos // BLOCK_SIZE
                    nblk = (pos + n - 1) // BLOCK_SIZE - first + 1
                    vals = rec.stream_lookup(s["rec"], first, nblk) + st.controller.init_values
                    rec.stream_forget(s["rec"], (pos + n) // BLOCK_SIZE)
                    vals = vals[:, :, 0]
                    if proc == "G":
                        vals = db_to_amp(vals).data
                    per = hold_positions(vals[:, :, None], pos, n)[:, 0, :]
                    y = Tensor(y.data * per if proc == "G" else y.data + per)
                else:
                    y = st.apply(y, s["params"])
        state["pos"] = pos + n
        return y.data
