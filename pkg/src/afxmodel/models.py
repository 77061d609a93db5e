"""Declarative model specs, the named-configuration registry and complexity estimates."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import backbones as bb
from .dsp import FS, ChainSpec, GrayBoxModel, MLPNonlinearity
from .nn import Module

FAMILIES = ("tcn", "gcn", "lstm", "s4", "graybox")

# conv geometries: receptive-field tag + size -> (blocks, kernel, dilation growth)
CONV_GEOMETRIES = {
    ("45", "S"): (5, 7, 4),
    ("45", "L"): (10, 3, 2),
    ("250", "S"): (6, 11, 4),
    ("250", "L"): (11, 7, 2),
    ("2500", "S"): (5, 13, 10),
    ("2500", "L"): (10, 5, 3),
}
S4_GEOMETRIES = {"S": (4, 4), "L": (8, 32)}
COND_TAGS = {"F": "film", "TF": "tfilm", "TTF": "ttfilm", "TVF": "tvfilm", "C": "concat", "TVC": "tvconcat"}
GRAYBOX_CHAINS = {
    "COMP": "PEQ.s > G.d > PEQ.s > G.s",
    "DIST-MLP": "PEQ.s > G.s > O.s > MLP > G.s > PEQ.s",
    "DIST-RNL": "PEQ.s > G.s > O.s > RNL > G.s > PEQ.s",
    "FUZZ-MLP": "PEQ.s > G.s > O.d > MLP > G.s > PEQ.s",
    "FUZZ-RNL": "PEQ.s > G.s > O.d > RNL > G.s > PEQ.s",
}
DEFAULT_CONTROLS = 2
MLP_LR_MULTIPLIER = 0.1


class SpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    """Everything needed to rebuild a model's architecture."""

    family: str
    name: str = ""
    blocks: int = 0
    kernel: int = 0
    dilation_growth: int = 0
    channels: int = 16
    state_dim: int = 0
    hidden: int = 0
    cond_mode: str = "none"
    n_controls: int = 0
    chain: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.family == "graybox":
            self.chain = str(ChainSpec.parse(self.chain))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def spec_hash(self) -> str:
        """Hash of the architecture fields (the display name is excluded)."""
        d = self.to_dict()
        d.pop("name")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def receptive_field(self) -> int | None:
        if self.family in ("tcn", "gcn"):
            return bb.receptive_field(self.blocks, self.kernel, self.dilation_growth)
        return None


def spec_from_name(name: str, n_controls: int = DEFAULT_CONTROLS) -> ModelSpec:
    """Parse a configuration name such as ``TCN-TF-45-S-16``, ``S4-L-16``,
    ``LSTM-TVC-32``, ``GB-COMP`` or ``GB-C-FUZZ-RNL``."""
    parts = name.upper().split("-")
    head = parts[0]
    if head == "GB":
        cond = len(parts) > 1 and parts[1] == "C"
        key = "-".join(parts[2:] if cond else parts[1:])
        if key not in GRAYBOX_CHAINS:
            raise SpecError(f"unknown gray-box model {name!r}")
        chain = GRAYBOX_CHAINS[key]
        if cond:
            chain = re.sub(r"\.(s|d)\b", lambda m: "." + m.group(1) + "c", chain)
        return ModelSpec("graybox", name=name, chain=chain, n_controls=n_controls if cond else 0)
    rest = parts[1:]
    cond_mode = "none"
    if rest and rest[0] in COND_TAGS:
        cond_mode = COND_TAGS[rest.pop(0)]
    nc = 0 if cond_mode in ("none", "tfilm") else n_controls
    if head == "LSTM":
        if len(rest) != 1 or cond_mode not in bb.CONCAT_MODES:
            raise SpecError(f"bad LSTM name {name!r}")
        return ModelSpec("lstm", name=name, hidden=int(rest[0]), cond_mode=cond_mode, n_controls=nc)
    if head in ("TCN", "GCN"):
        if len(rest) != 3 or (rest[0], rest[1]) not in CONV_GEOMETRIES:
            raise SpecError(f"bad {head} name {name!r}")
        b, k, d = CONV_GEOMETRIES[(rest[0], rest[1])]
        return ModelSpec(head.lower(), name=name, blocks=b, kernel=k, dilation_growth=d, channels=int(rest[2]),
                         cond_mode=cond_mode, n_controls=nc)
    if head == "S4":
        if len(rest) != 2 or rest[0] not in S4_GEOMETRIES:
            raise SpecError(f"bad S4 name {name!r}")
        b, n = S4_GEOMETRIES[rest[0]]
        return ModelSpec("s4", name=name, blocks=b, state_dim=n, channels=int(rest[1]), cond_mode=cond_mode,
                         n_controls=nc)
    raise SpecError(f"unknown model name {name!r}")


def build_model(spec: ModelSpec | str, seed: int = 0, dtype=np.float32) -> Module:
    """Instantiate a model; per-parameter LR multipliers are set here."""
    if isinstance(spec, str):
        spec = spec_from_name(spec)
    rng = np.random.default_rng(seed)
    f = spec.family
    if f in ("tcn", "gcn"):
        model = bb.ConvBackbone(spec.blocks, spec.kernel, spec.dilation_growth, spec.channels, gated=f == "gcn",
                                cond_mode=spec.cond_mode, n_controls=spec.n_controls, rng=rng, dtype=dtype)
    elif f == "lstm":
        model = bb.LSTMBackbone(spec.hidden, spec.cond_mode, spec.n_controls, rng=rng, dtype=dtype)
    elif f == "s4":
        model = bb.S4Backbone(spec.blocks, spec.state_dim, spec.channels, spec.cond_mode, spec.n_controls,
                              rng=rng, dtype=dtype, mode=spec.extra.get("s4_mode", "conv"))
    else:
        model = GrayBoxModel(spec.chain, spec.n_controls, rng=rng, dtype=dtype)
        for st in model.stages:
            if isinstance(getattr(st, "proc", None), MLPNonlinearity):
                for p in st.proc.parameters():
                    p.lr_multiplier = MLP_LR_MULTIPLIER
    model.spec = spec
    model.assign_names()
    return model


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------

def _graybox_macs(model: GrayBoxModel) -> float:
    macs = 0.0
    for st in model.stages:
        p = st.processor
        if p == "PEQ":
            macs += 4 * 5  # four biquads, five multiplies each
        elif p == "G":
            macs += 1
        elif p == "MLP":
            macs += st.proc.macs_per_sample()
        elif p == "RNL":
            macs += 5 + 3 + 1  # Horner for P and Q, one divide
        if p in ("PEQ", "G", "O") and st.dynamic:
            rec = st.controller.rnn
            macs += bb._rec_macs(rec) / 128
    return macs


def macs_per_sample(model: Module) -> float:
    """Multiply-accumulates per output sample.

    Convention: every weight multiply in linear, convolutional and
    recurrent layers counts once; block-rate work is divided by 128;
    activations, FFTs and kernel generation are not counted.  S4 is
    counted in its recurrent (streaming) form.
    """
    if isinstance(model, GrayBoxModel):
        return _graybox_macs(model)
    return float(model.macs_per_sample())


def complexity(model: Module, fs: int = FS) -> dict:
    macs = macs_per_sample(model)
    return {
        "params": model.num_parameters(),
        "macs_per_sample": macs,
        "mac_per_s": macs * fs,
        "flop_per_s": 2 * macs * fs,
    }
