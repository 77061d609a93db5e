"""Frame-based streaming inference and the real-time-factor benchmark.

Convolutional models recompute an ``F + r - 1`` window per frame; LSTM,
S4 (recurrent form) and gray-box chains carry their state.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .dsp import FS

BENCH_FRAME_SIZES = tuple(2 ** k for k in range(5, 15))  # 32 .. 16384
WARMUP_FRAMES = 3
MIN_REPEATS = 9


class FrameError(ValueError):
    pass


class MeasurementWarning(UserWarning):
    pass


class StreamSession:
    """One audio stream through a model, ``frame_size`` samples at a time.

    Parameters
    ----------
    model
        Any model exposing ``stream_init(batch, cond)`` and ``stream_step(state, frame)``.
    frame_size
        Samples per call to :meth:`process`.
    cond
        Normalised controls for parametric models.
    """

    def __init__(self, model, frame_size: int, cond=None, batch: int = 1):
        if frame_size < 1:
            raise FrameError("frame size must be positive")
        self.model = model
        self.frame_size = int(frame_size)
        self.cond = cond
        self.batch = batch
        self.state = model.stream_init(batch, cond)
        self.frames_processed = 0

    @property
    def history_length(self) -> int:
        hist = self.state.get("hist") if isinstance(self.state, dict) else None
        return 0 if hist is None else hist.shape[-1]

    def process(self, frame) -> np.ndarray:
        """One frame in, one frame out.  Accepts (F,) or (B, F)."""
        x = np.asarray(frame, dtype=self.model.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape != (self.batch, self.frame_size):
            raise FrameError(f"expected a frame of {self.frame_size} samples (batch {self.batch}), got {x.shape}")
        y = self.model.stream_step(self.state, np.ascontiguousarray(x))
        self.frames_processed += 1
        return y[0] if squeeze else y

    def reset(self):
        self.state = self.model.stream_init(self.batch, self.cond)
        self.frames_processed = 0


def stream_process(session: StreamSession, frame) -> np.ndarray:
    return session.process(frame)


def reset(session: StreamSession):
    session.reset()


def stream_signal(model, x, frame_size: int, cond=None) -> np.ndarray:
    """Stream a whole (N,) or (B, N) signal; the tail is zero-padded to a full frame and trimmed."""
    x = np.asarray(x, dtype=model.dtype)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    b, n = x.shape
    pad = (-n) % frame_size
    xp = np.concatenate([x, np.zeros((b, pad), x.dtype)], axis=1) if pad else x
    sess = StreamSession(model, frame_size, cond, batch=b)
    out = np.concatenate([sess.process(xp[:, i:i + frame_size]) for i in range(0, xp.shape[1], frame_size)],
                         axis=1)[:, :n]
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# real-time factor
# ---------------------------------------------------------------------------

@dataclass
class RtfRecord:
    frame_size: int
    elapsed: float  # median seconds per frame
    fs: int = FS
    model: str = ""

    @property
    def rtf(self) -> float:
        return rtf_value(self.frame_size, self.elapsed, self.fs)

    @property
    def passes_realtime(self) -> bool:
        return self.rtf > 1.0


def rtf_value(frame_size: int, elapsed: float, fs: int = FS) -> float:
    """F / (T * fs): above 1 is faster than real time."""
    return frame_size / (elapsed * fs)


def measure_rtf(model, frame_size: int, duration_s: float | None = None, repeats: int = MIN_REPEATS,
                cond=None, timer=time.perf_counter, warmup: int = WARMUP_FRAMES, seed: int = 0,
                name: str = "") -> RtfRecord:
    """Median wall-clock per frame over ``repeats`` frames after ``warmup`` frames.

    ``duration_s`` raises the repeat count so at least that much audio is
    processed.  ``timer`` is injectable for tests.
    """
    if duration_s:
        repeats = max(repeats, int(np.ceil(duration_s * FS / frame_size)))
    rng = np.random.default_rng(seed)
    frames = (0.1 * rng.standard_normal((warmup + repeats, frame_size))).astype(model.dtype)
    sess = StreamSession(model, frame_size, cond)
    for i in range(warmup):
        sess.process(frames[i])
    times = []
    for i in range(warmup, warmup + repeats):
        t0 = timer()
        sess.process(frames[i])
        times.append(timer() - t0)
    elapsed = statistics.median(times)
    resolution = time.get_clock_info("perf_counter").resolution if timer is time.perf_counter else 0.0
    if elapsed <= 0 or resolution > 0.01 * elapsed:
        warnings.warn(f"timer resolution {resolution:g} s is coarse relative to {elapsed:g} s", MeasurementWarning)
    return RtfRecord(frame_size, elapsed, FS, name)


RTF_COLUMNS = ("model", "F", "T_median", "rtf", "passes_realtime")


def rtf_rows(records) -> list[dict]:
    return [{"model": r.model, "F": r.frame_size, "T_median": repr(r.elapsed), "rtf": repr(r.rtf),
             "passes_realtime": r.passes_realtime} for r in records]


def rtf_csv(records) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RTF_COLUMNS)
    w.writeheader()
    w.writerows(rtf_rows(records))
    return buf.getvalue()


def parse_rtf_csv(text: str) -> list[RtfRecord]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(RtfRecord(int(row["F"]), float(row["T_median"]), FS, row["model"]))
    return out


def rtf_sweep(models: dict, frame_sizes=BENCH_FRAME_SIZES, repeats: int = MIN_REPEATS, duration_s=None,
              conds: dict | None = None, timer=time.perf_counter) -> list[RtfRecord]:
    """``models`` maps a display name to a model; one record per (model, F)."""
    if not models:
        raise ValueError("rtf_sweep needs at least one model")
    conds = conds or {}
    records = []
    for name, model in models.items():
        for f in frame_sizes:
            records.append(measure_rtf(model, f, duration_s, repeats, conds.get(name), timer, name=name))
    return records


def fraction_increasing(records, model: str) -> float:
    """Share of adjacent frame-size pairs where the RTF does not decrease."""
    rs = sorted((r for r in records if r.model == model), key=lambda r: r.frame_size)
    pairs = list(zip(rs, rs[1:]))
    if not pairs:
        return 1.0
    return sum(b.rtf >= a.rtf for a, b in pairs) / len(pairs)


def record_dict(r: RtfRecord) -> dict:
    d = asdict(r)
    d["rtf"] = r.rtf
    return d
