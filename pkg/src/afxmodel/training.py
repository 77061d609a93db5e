"""Training loops, optimizers, the LR sweep and checkpoints.

Epoch = one pass over the training segments.  Validation runs after every
epoch on full-length segments; the reduce-on-plateau scheduler and early
stopping watch the weighted total validation loss.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import NaNPropagationError, Tensor
from .data import SegmentSet
from .dsp import ParameterError, StabilityError
from .losses import RESOLUTIONS, LossWeights, resolutions_for, scaled_report, total_loss
from .models import ModelSpec, build_model
from .nn import Module

ADAM_BETAS = (0.9, 0.999)
# processors refuse non-finite parameters; in a training run that is a divergence
DIVERGED = (ParameterError, StabilityError)
ADAM_EPS = 1e-8


class DataError(ValueError):
    pass


class InitializationError(RuntimeError):
    """The loss is not finite before any update."""


class SweepError(RuntimeError):
    pass


class CheckpointError(OSError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# schemes
# ---------------------------------------------------------------------------

FAMILY_DEFAULTS = {
    "lstm": dict(lr_list=(0.005, 0.001), clip_algorithm="norm", clip_value=10.0, tbptt=True, max_steps=451_000),
    "tcn": dict(lr_list=(0.005,), clip_algorithm="value", clip_value=1.0, tbptt=False, max_epochs=15_000),
    "gcn": dict(lr_list=(0.005,), clip_algorithm="value", clip_value=1.0, tbptt=False, max_epochs=15_000),
    "s4": dict(lr_list=(0.01,), clip_algorithm="value", clip_value=1.0, tbptt=False, max_epochs=15_000),
    "graybox": dict(lr_list=(0.1,), clip_algorithm="value", clip_value=1.0, tbptt=False, max_epochs=15_000),
}


@dataclass
class TrainScheme:
    family: str
    lr_list: tuple = (0.005,)
    scheduler_patience: int = 20
    scheduler_factor: float = 0.5
    early_stop_patience: int = 50
    clip_algorithm: str = "value"
    clip_value: float = 1.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    sample_length: int = 144_000
    max_steps: int | None = None
    max_epochs: int | None = None
    tbptt: bool = False
    tbptt_update_interval: int = 4800
    batch_size: int = 16
    crop_length: int | None = None
    optimizer: str = "adam"

    def __post_init__(self):
        if self.family not in FAMILY_DEFAULTS:
            raise ValueError(f"unknown family {self.family!r}")
        if self.tbptt and self.family != "lstm":
            raise ValueError("TBPTT applies to the LSTM family only")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.lr_list = tuple(float(v) for v in self.lr_list)
        if not self.lr_list:
            raise ValueError("lr_list is empty")

    @classmethod
    def for_family(cls, family: str, **overrides) -> "TrainScheme":
        kw = dict(FAMILY_DEFAULTS[family])
        kw.update(overrides)
        return cls(family=family, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_list"] = list(self.lr_list)
        return d


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(np.float64)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self.lr * p.lr_multiplier
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buf = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self, grads):
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.momentum
            b += g
            p.data -= (self.lr * p.lr_multiplier * b).astype(p.dtype)


def make_optimizer(kind: str, params, lr: float):
    return Adam(params, lr) if kind == "adam" else SGD(params, lr)


# ---------------------------------------------------------------------------
# plateau / early stopping
# ---------------------------------------------------------------------------

class PlateauTracker:
    """Reduce-on-plateau plus early stopping; any strict decrease is an improvement."""

    def __init__(self, lr: float, patience: int = 20, factor: float = 0.5, stop_patience: int = 50):
        self.lr = lr
        self.patience, self.factor, self.stop_patience = patience, factor, stop_patience
        self.best = math.inf
        self.since_lr = 0
        self.since_best = 0

    def update(self, value: float) -> dict:
        """Returns {"improved", "lr_reduced", "stop"} for this epoch."""
        ev = {"improved": False, "lr_reduced": False, "stop": False}
        if value < self.best:
            self.best = value
            self.since_lr = self.since_best = 0
            ev["improved"] = True
            return ev
        self.since_lr += 1
        self.since_best += 1
        if self.since_lr >= self.patience:
            self.lr *= self.factor
            self.since_lr = 0
            ev["lr_reduced"] = True
        if self.since_best >= self.stop_patience:
            ev["stop"] = True
        return ev


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

EPOCH_COLUMNS = ("epoch", "step", "lr", "train_total", "train_l1", "train_mr_stft", "train_scaled",
                 "val_total", "val_l1", "val_mr_stft", "val_scaled")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_checkpoint: str | None = None
    best_val_total: float = math.inf
    best_val_scaled: float = math.inf
    best_epoch: int = -1
    stop_reason: str = ""
    nan_incidents: list[dict] = field(default_factory=list)
    steps: int = 0
    lr: float = 0.0
    initial_val: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.stop_reason == "nan"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=EPOCH_COLUMNS)
        w.writeheader()
        for row in self.epochs:
            w.writerow({k: row.get(k, "") for k in EPOCH_COLUMNS})
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"lr: {self.lr}", f"stop reason: {self.stop_reason}", f"steps: {self.steps}",
                 f"epochs: {len(self.epochs)}", f"best epoch: {self.best_epoch}",
                 f"best val total: {self.best_val_total:.6g}", f"best val scaled: {self.best_val_scaled:.6g}",
                 f"best checkpoint: {self.best_checkpoint}"]
        if self.initial_val:
            lines.append(f"initial val scaled: {self.initial_val['scaled']:.6g}")
        for inc in self.nan_incidents:
            lines.append(f"nan incident: epoch {inc['epoch']} step {inc['step']}: {inc['message']}")
        return "\n".join(lines)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_report.csv").write_text(self.to_csv())
        (out / "train_summary.txt").write_text(self.summary() + "\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _family(model) -> str | None:
    spec = getattr(model, "spec", None)
    return spec.family if spec is not None else None


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _cond(ctl, idx):
    return None if ctl is None else ctl[idx]


def _loss_components(y_hat, y, weights, resolutions):
    total, comp = total_loss(y_hat, y, weights, resolutions)
    return total, {"total": float(total.data), "l1": comp["l1"], "mr_stft": comp["mr_stft"],
                   "scaled": scaled_report(comp)}


def _mean_components(items: list[tuple[dict, int]]) -> dict:
    n = sum(w for _, w in items)
    keys = ("total", "l1", "mr_stft", "scaled")
    return {k: sum(c[k] * w for c, w in items) / n for k in keys}


def _finite(x: float) -> bool:
    return math.isfinite(x)


def evaluate(model, dry, wet, ctl, weights: LossWeights, batch_size: int = 16) -> dict:
    """Mean (total, l1, mr_stft, scaled) over full-length segments."""
    res = resolutions_for(dry.shape[-1])
    items = []
    with ad.no_grad():
        for idx in _batches(len(dry), batch_size, None):
            try:
                y_hat = model(dry[idx], _cond(ctl, idx))
            except DIVERGED:
                return {k: math.nan for k in ("total", "l1", "mr_stft", "scaled")}
            _, comp = _loss_components(y_hat, wet[idx], weights, res)
            items.append((comp, len(idx)))
    return _mean_components(items)


def _split_arrays(data: SegmentSet, dtype):
    tr = data.arrays("train", dtype)
    if tr[0] is None:
        raise DataError("no training segments")
    va = data.arrays("val", dtype)
    if va[0] is None:
        va = tr  # tiny datasets: validate on the training pool
    return tr, va


class _Run:
    """Shared epoch bookkeeping for both training loops."""

    def __init__(self, model, scheme, lr, out_dir):
        self.model = model
        self.scheme = scheme
        self.params = model.parameters()
        self.opt = make_optimizer(scheme.optimizer, self.params, lr)
        self.tracker = PlateauTracker(lr, scheme.scheduler_patience, scheme.scheduler_factor,
                                      scheme.early_stop_patience)
        self.report = TrainReport(lr=lr)
        self.out_dir = Path(out_dir) if out_dir else None
        self.best_state = model.state_dict()
        self.step = 0

    def update(self, loss: Tensor, epoch: int) -> bool:
        """Backward + clip + optimizer step. Returns False when the run must stop on NaN."""
        value = float(loss.data)
        if not _finite(value):
            return self._nan(epoch, f"loss {value}")
        self.model.zero_grad()
        try:
            ad.backward(loss, self.params)
        except NaNPropagationError as exc:
            return self._nan(epoch, str(exc))
        grads = {p.name: p.grad for p in self.params}
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            return self._nan(epoch, "non-finite gradient")
        grads = ad.clip_gradients(grads, self.scheme.clip_algorithm, self.scheme.clip_value)
        self.opt.lr = self.tracker.lr
        self.opt.step([grads[p.name] for p in self.params])
        self.step += 1
        return True

    def _nan(self, epoch, message) -> bool:
        if self.step == 0:
            raise InitializationError(f"non-finite loss before the first update: {message}")
        self.report.nan_incidents.append({"epoch": epoch, "step": self.step, "message": message})
        self.report.stop_reason = "nan"
        return False

    def start(self, initial: dict):
        """The untrained weights are the first best-checkpoint candidate (epoch 0)."""
        if not _finite(initial["total"]):
            raise InitializationError("non-finite validation loss at initialization")
        self.report.initial_val = initial
        self.tracker.best = initial["total"]
        self._new_best(0, initial)

    def _new_best(self, epoch: int, val: dict):
        self.report.best_val_total = val["total"]
        self.report.best_val_scaled = val["scaled"]
        self.report.best_epoch = epoch
        self.best_state = self.model.state_dict()
        if self.out_dir is not None:
            path = self.out_dir / "best.npz"
            save_checkpoint(self.model, path, {"epoch": epoch, "step": self.step, "lr": self.tracker.lr})
            self.report.best_checkpoint = str(path)

    def end_epoch(self, epoch: int, train: dict, val: dict) -> bool:
        """Record, schedule, checkpoint. Returns True when training should stop."""
        row = {"epoch": epoch, "step": self.step, "lr": self.tracker.lr}
        row.update({f"train_{k}": v for k, v in train.items()})
        row.update({f"val_{k}": v for k, v in val.items()})
        self.report.epochs.append(row)
        if not _finite(val["total"]):
            self.report.nan_incidents.append({"epoch": epoch, "step": self.step, "message": "validation loss"})
            self.report.stop_reason = "nan"
            return True
        ev = self.tracker.update(val["total"])
        if ev["improved"]:
            self._new_best(epoch, val)
        if ev["stop"]:
            self.report.stop_reason = "early-stopped"
            return True
        return False

    def finish(self) -> TrainReport:
        self.model.load_state_dict(self.best_state)
        self.report.steps = self.step
        if self.out_dir is not None:
            self.report.write(self.out_dir)
        return self.report


def _check_family(model, scheme):
    fam = _family(model)
    if fam is not None and fam != scheme.family:
        raise ValueError(f"scheme for {scheme.family!r} given a {fam!r} model")


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

def train(model: Module, data: SegmentSet, scheme: TrainScheme, seed: int = 0, lr: float | None = None,
          out_dir=None, callback=None) -> TrainReport:
    """Mini-batch training on whole (or randomly cropped) segments.

    ``callback(row)`` is invoked after every epoch with the epoch record.
    """
    _check_family(model, scheme)
    if scheme.tbptt:
        return train_tbptt(model, data, scheme, seed, lr, out_dir, callback)
    lr = scheme.lr_list[0] if lr is None else lr
    rng = np.random.default_rng(seed)
    (dry, wet, ctl), (vdry, vwet, vctl) = _split_arrays(data, model.dtype)
    run = _Run(model, scheme, lr, out_dir)
    crop = scheme.crop_length if scheme.crop_length and scheme.crop_length < dry.shape[-1] else None
    res = resolutions_for(crop or dry.shape[-1])
    run.start(evaluate(model, vdry, vwet, vctl, scheme.loss_weights, scheme.batch_size))
    epoch = 0
    while True:
        epoch += 1
        items = []
        stopped = False
        for idx in _batches(len(dry), scheme.batch_size, rng):
            x, y = dry[idx], wet[idx]
            if crop:
                s = int(rng.integers(0, dry.shape[-1] - crop + 1))
                x, y = x[:, s:s + crop], y[:, s:s + crop]
            try:
                loss, comp = _loss_components(model(x, _cond(ctl, idx)), y, scheme.loss_weights, res)
            except DIVERGED as exc:
                run._nan(epoch, str(exc))
                stopped = True
                break
            if not run.update(loss, epoch):
                stopped = True
                break
            items.append((comp, len(idx)))
            if scheme.max_steps is not None and run.step >= scheme.max_steps:
                break
        if stopped:
            break
        val = evaluate(model, vdry, vwet, vctl, scheme.loss_weights, scheme.batch_size)
        if run.end_epoch(epoch, _mean_components(items), val):
            break
        if callback:
            callback(run.report.epochs[-1])
        if scheme.max_steps is not None and run.step >= scheme.max_steps:
            run.report.stop_reason = "max-steps"
            break
        if scheme.max_epochs is not None and epoch >= scheme.max_epochs:
            run.report.stop_reason = "max-epochs"
            break
    return run.finish()


def train_tbptt(model: Module, data: SegmentSet, scheme: TrainScheme, seed: int = 0, lr: float | None = None,
                out_dir=None, callback=None, carry_state: bool = True) -> TrainReport:
    """Chunked training: one update per ``tbptt_update_interval`` samples,
    recurrent state carried across chunks as a constant (no gradient flow)."""
    _check_family(model, scheme)
    if not hasattr(model, "forward_with_state"):
        raise ValueError("TBPTT needs a recurrent model")
    lr = scheme.lr_list[0] if lr is None else lr
    rng = np.random.default_rng(seed)
    (dry, wet, ctl), (vdry, vwet, vctl) = _split_arrays(data, model.dtype)
    chunk = scheme.tbptt_update_interval
    n = dry.shape[-1]
    if n < chunk:
        raise DataError(f"segments of {n} samples are shorter than one {chunk}-sample chunk")
    res = resolutions_for(chunk)
    run = _Run(model, scheme, lr, out_dir)
    run.start(evaluate(model, vdry, vwet, vctl, scheme.loss_weights, scheme.batch_size))
    epoch = 0
    done = False
    while not done:
        epoch += 1
        items = []
        for idx in _batches(len(dry), scheme.batch_size, rng):
            state = None
            for s in range(0, n - chunk + 1, chunk):
                x, y = dry[idx, s:s + chunk], wet[idx, s:s + chunk]
                try:
                    y_hat, new_state = model.forward_with_state(x, _cond(ctl, idx), state)
                except DIVERGED as exc:
                    run._nan(epoch, str(exc))
                    done = True
                    break
                state = new_state if carry_state else None
                loss, comp = _loss_components(y_hat, y, scheme.loss_weights, res)
                if not run.update(loss, epoch):
                    done = True
                    break
                items.append((comp, len(idx)))
                if scheme.max_steps is not None and run.step >= scheme.max_steps:
                    break
            if done or (scheme.max_steps is not None and run.step >= scheme.max_steps):
                break
        if done:
            break
        val = evaluate(model, vdry, vwet, vctl, scheme.loss_weights, scheme.batch_size)
        if run.end_epoch(epoch, _mean_components(items), val):
            break
        if callback:
            callback(run.report.epochs[-1])
        if scheme.max_steps is not None and run.step >= scheme.max_steps:
            run.report.stop_reason = "max-steps"
            break
        if scheme.max_epochs is not None and epoch >= scheme.max_epochs:
            run.report.stop_reason = "max-epochs"
            break
    return run.finish()


# ---------------------------------------------------------------------------
# LR sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("lr", "status", "stop_reason", "best_val_total", "best_val_scaled", "best_epoch", "steps",
                 "run_dir")


@dataclass
class SweepResult:
    best: TrainReport
    best_lr: float
    rows: list[dict]
    reports: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def _sweep_one(spec_dict, data, scheme_dict, lr, seed, run_dir, dtype_name):
    spec = ModelSpec.from_dict(spec_dict)
    scheme_dict = dict(scheme_dict)
    scheme_dict["loss_weights"] = LossWeights(**scheme_dict["loss_weights"])
    scheme = TrainScheme(**scheme_dict)
    model = build_model(spec, seed, np.dtype(dtype_name))
    try:
        report = train(model, data, scheme, seed, lr, run_dir)
    except InitializationError as exc:
        report = TrainReport(lr=lr, stop_reason="nan",
                             nan_incidents=[{"epoch": 0, "step": 0, "message": str(exc)}])
    return report


def lr_sweep(spec: ModelSpec, data: SegmentSet, lr_list, seed: int = 0, scheme: TrainScheme | None = None,
             out_dir=None, workers: int = 1, dtype=np.float32) -> SweepResult:
    """One independent run per LR; the best is the lowest scaled validation loss."""
    lr_list = [float(v) for v in lr_list]
    if not lr_list:
        raise SweepError("lr_sweep needs at least one learning rate")
    scheme = scheme or TrainScheme.for_family(spec.family)
    sd = scheme.to_dict()
    args = []
    for i, lr in enumerate(lr_list):
        run_dir = str(Path(out_dir) / f"lr_{i}_{lr:g}") if out_dir else None
        args.append((spec.to_dict(), data, sd, lr, seed, run_dir, np.dtype(dtype).name))
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_sweep_one, *zip(*args)))
    else:
        reports = [_sweep_one(*a) for a in args]
    rows, ok = [], []
    for (lr, a, rep) in zip(lr_list, args, reports):
        status = "failed" if rep.failed else "ok"
        rows.append({"lr": lr, "status": status, "stop_reason": rep.stop_reason,
                     "best_val_total": rep.best_val_total, "best_val_scaled": rep.best_val_scaled,
                     "best_epoch": rep.best_epoch, "steps": rep.steps, "run_dir": a[5] or ""})
        if not rep.failed and math.isfinite(rep.best_val_scaled):
            ok.append((rep.best_val_scaled, lr, rep))
    if not ok:
        raise SweepError("every run in the sweep failed")
    _, best_lr, best = min(ok, key=lambda t: t[0])
    result = SweepResult(best, best_lr, rows, dict(zip(lr_list, reports)))
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep_summary.csv").write_text(result.to_csv())
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: Module, path, extra: dict | None = None):
    """``.npz`` of every parameter plus a JSON header with the spec and its hash."""
    spec = getattr(model, "spec", None)
    meta = {
        "format": CHECKPOINT_VERSION,
        "package_version": __version__,
        "spec": spec.to_dict() if spec is not None else None,
        "spec_hash": spec.spec_hash() if spec is not None else None,
        "dtype": np.dtype(model.dtype).name,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _read_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, EOFError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return meta, state


def load_checkpoint(model: Module, path) -> dict:
    """Restore parameters in place; returns the checkpoint metadata."""
    meta, state = _read_checkpoint(path)
    spec = getattr(model, "spec", None)
    if spec is not None and meta.get("spec_hash") not in (None, spec.spec_hash()):
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint is for {meta['spec'].get('family')} {meta['spec'].get('name')!r}, "
            f"model is {spec.family} {spec.name!r}")
    try:
        model.load_state_dict(state)
    except KeyError as exc:
        raise IncompatibleCheckpointError(f"{path}: {exc}") from exc
    return meta


def load_model(path) -> Module:
    """Rebuild the architecture recorded in a checkpoint and load its weights."""
    meta, _ = _read_checkpoint(path)
    if not meta.get("spec"):
        raise CheckpointError(f"{path}: checkpoint carries no model spec")
    model = build_model(ModelSpec.from_dict(meta["spec"]), 0, np.dtype(meta.get("dtype", "float32")))
    load_checkpoint(model, path)
    return model


def scheme_with(scheme: TrainScheme, **kw) -> TrainScheme:
    return replace(scheme, **kw)
