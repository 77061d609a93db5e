"""Dry/wet pair I/O, impulse alignment, gain staging, segmentation and dataset checks.

Dataset layout::

    <root>/<device>/<pair>.dry.wav
    <root>/<device>/<pair>.wet.wav
    <root>/<device>/<pair>.yaml      # sidecar metadata

Sidecar keys: ``device_type`` (e.g. distortion), ``device_name``,
``settings`` (knob -> 0..10 dial value), ``split`` (``train`` or ``test``)
and optionally ``alignment_offset`` to override impulse detection.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import signal as sps
from scipy.io import wavfile

FS = 48000
SEGMENT = 144_000  # 3 s
GAIN_REGION = 240_000  # 5 s
CLIP_RUN = 32


class FormatError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class AlignmentWarning(UserWarning):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path, expected_fs: int = FS) -> np.ndarray:
    """Mono 16/24/32-bit integer or 32-bit float file -> float64 in [-1, 1]."""
    try:
        fs, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise FormatError(f"{path}: unreadable audio file ({exc})") from exc
    if fs != expected_fs:
        raise FormatError(f"{path}: sample rate {fs} Hz, expected {expected_fs} Hz (no resampling)")
    if data.ndim != 1:
        raise FormatError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:  # 24-bit files are read left-justified into int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise FormatError(f"{path}: unsupported sample format {data.dtype}")


def wav_bit_depth(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(64)
    idx = head.find(b"fmt ")
    return int.from_bytes(head[idx + 22:idx + 24], "little")


def write_wav(path, x: np.ndarray, fs: int = FS, bits: int = 24):
    """Write mono audio as 16/24-bit PCM or 32-bit float (``bits=32``)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if bits == 32:
        wavfile.write(path, fs, x.astype(np.float32))
        return
    if bits not in (16, 24):
        raise FormatError(f"unsupported bit depth {bits}")
    full = 2 ** (bits - 1)
    ints = np.clip(np.round(x * full), -full, full - 1).astype("<i4")
    if bits == 16:
        wavfile.write(path, fs, ints.astype(np.int16))
        return
    raw = ints.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(3)
        w.setframerate(fs)
        w.writeframes(raw)


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------

@dataclass
class AudioPair:
    dry: np.ndarray
    wet: np.ndarray
    fs: int = FS
    metadata: dict = field(default_factory=dict)
    alignment_offset: int | None = None
    name: str = ""

    @property
    def split(self) -> str:
        return self.metadata.get("split", "train")

    def controls(self, names=None) -> np.ndarray | None:
        """Knob settings normalised from the 0..10 dial to [0, 1]."""
        settings = self.metadata.get("settings") or {}
        if not settings:
            return None
        names = names or sorted(settings)
        return np.array([float(settings[n]) / 10.0 for n in names])


def sidecar_path(wet_path) -> Path:
    p = Path(wet_path)
    name = p.name
    for suffix in (".wet.wav", ".wav"):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)] + ".yaml")
    return p.with_suffix(".yaml")


def load_pair(dry_path, wet_path, metadata_path=None) -> AudioPair:
    dry = read_wav(dry_path)
    wet = read_wav(wet_path)
    meta_path = Path(metadata_path) if metadata_path else sidecar_path(wet_path)
    metadata = {}
    if meta_path.exists():
        with open(meta_path) as fh:
            metadata = yaml.safe_load(fh) or {}
    name = Path(wet_path).name.replace(".wet.wav", "")
    return AudioPair(dry, wet, FS, metadata, None, name)


# ---------------------------------------------------------------------------
# impulse alignment
# ---------------------------------------------------------------------------

def _sliding_rms(x: np.ndarray, window: int) -> np.ndarray:
    kern = np.ones(window) / window
    return np.sqrt(np.convolve(x * x, kern, mode="same"))


def find_impulse(x: np.ndarray, region: slice, threshold: float = 10.0, rms_window: int = 4800) -> int | None:
    """Index of the synchronisation impulse inside ``region``: the peak of
    |x|, accepted when it exceeds ``threshold`` times the RMS of its
    surroundings (the peak itself excluded)."""
    seg = x[region]
    if seg.size == 0:
        return None
    k = int(np.argmax(np.abs(seg)))
    peak = abs(seg[k])
    lo, hi = max(0, k - rms_window // 2), min(seg.size, k + rms_window // 2)
    around = np.concatenate([seg[lo:max(lo, k - 8)], seg[min(hi, k + 9):hi]])
    rms = math.sqrt(float(np.mean(around ** 2))) if around.size else 0.0
    if peak == 0.0 or peak < threshold * rms:
        return None
    start = region.start or 0
    if start < 0:
        start += x.size
    return start + k


def align_by_impulses(pair: AudioPair, threshold: float = 10.0, manual_offset: int | None = None,
                      max_drift: int = 16) -> AudioPair:
    """Shift wet relative to dry so their start impulses coincide, trim to equal length."""
    fs = pair.fs
    head = slice(0, fs)
    if manual_offset is None:
        manual_offset = pair.metadata.get("alignment_offset")
    if manual_offset is not None:
        offset = int(manual_offset)
    else:
        i_dry = find_impulse(pair.dry, head, threshold)
        i_wet = find_impulse(pair.wet, head, threshold)
        if i_dry is None or i_wet is None:
            raise AlignmentError(f"{pair.name or 'pair'}: no synchronisation impulse in the first second")
        offset = i_wet - i_dry
    dry, wet = pair.dry, pair.wet
    if offset > 0:
        wet = wet[offset:]
    elif offset < 0:
        dry = dry[-offset:]
    n = min(dry.size, wet.size)
    dry, wet = dry[:n].copy(), wet[:n].copy()
    if manual_offset is None and n > fs:
        tail = slice(n - fs, n)
        e_dry = find_impulse(dry, tail, threshold)
        e_wet = find_impulse(wet, tail, threshold)
        if e_dry is None or e_wet is None:
            warnings.warn(f"{pair.name or 'pair'}: no end impulse to verify alignment", AlignmentWarning)
        else:
            drift = e_wet - e_dry
            if abs(drift) > max_drift:
                raise AlignmentError(f"{pair.name or 'pair'}: start/end impulses disagree by {drift} samples")
            if abs(drift) > 1:
                warnings.warn(f"{pair.name or 'pair'}: end impulse off by {drift} samples", AlignmentWarning)
    return AudioPair(dry, wet, fs, dict(pair.metadata), offset, pair.name)


# ---------------------------------------------------------------------------
# augmentation and segmentation
# ---------------------------------------------------------------------------

def stage_gains_db(n: int, seed: int, region: int = GAIN_REGION, low_db: float = -20.0,
                   high_db: float = 0.0) -> np.ndarray:
    """One uniform gain (dB) per ``region`` samples."""
    rng = np.random.default_rng(seed)
    return rng.uniform(low_db, high_db, size=-(-n // region))


def gain_stage(dry: np.ndarray, seed: int, region: int = GAIN_REGION) -> np.ndarray:
    """Apply a random gain in [-20, 0] dB to every 5 s region of a new dry input."""
    dry = np.asarray(dry, dtype=np.float64)
    gains = 10.0 ** (stage_gains_db(dry.size, seed, region) / 20.0)
    return dry * np.repeat(gains, region)[: dry.size]


@dataclass
class Segment:
    dry: np.ndarray
    wet: np.ndarray
    split: str
    source: str = ""
    start: int = 0
    controls: np.ndarray | None = None


@dataclass
class SegmentSet:
    segments: list[Segment] = field(default_factory=list)
    length: int = SEGMENT

    def by_split(self, split: str) -> list[Segment]:
        return [s for s in self.segments if s.split == split]

    def arrays(self, split: str, dtype=np.float32):
        segs = self.by_split(split)
        if not segs:
            return None, None, None
        dry = np.stack([s.dry for s in segs]).astype(dtype)
        wet = np.stack([s.wet for s in segs]).astype(dtype)
        ctl = None if segs[0].controls is None else np.stack([s.controls for s in segs])
        return dry, wet, ctl

    def extend(self, other: "SegmentSet"):
        self.segments.extend(other.segments)
        return self

    def counts(self) -> dict[str, int]:
        return {k: len(self.by_split(k)) for k in ("train", "val", "test")}


def segment_and_split(pair: AudioPair, seed: int, length: int = SEGMENT, val_fraction: float = 0.1,
                      control_names=None) -> SegmentSet:
    """Consecutive non-overlapping windows; test-tagged files go to test only."""
    n = min(pair.dry.size, pair.wet.size)
    count = n // length
    if count < 1:
        raise DataError(f"{pair.name or 'pair'}: {n} samples is shorter than one {length}-sample segment")
    controls = pair.controls(control_names)
    if pair.split == "test":
        tags = ["test"] * count
    else:
        n_val = int(round(val_fraction * count))
        order = np.random.default_rng(seed).permutation(count)
        val = set(order[:n_val].tolist())
        tags = ["val" if i in val else "train" for i in range(count)]
    segs = [Segment(pair.dry[i * length:(i + 1) * length], pair.wet[i * length:(i + 1) * length], tags[i],
                    pair.name, i * length, controls) for i in range(count)]
    return SegmentSet(segs, length)


def iter_pairs(root):
    """Yield (device dir, dry path, wet path) for every pair below ``root``."""
    root = Path(root)
    for wet in sorted(root.rglob("*.wet.wav")):
        dry = wet.with_name(wet.name.replace(".wet.wav", ".dry.wav"))
        yield wet.parent, dry, wet


def load_dataset(root, seed: int = 0, length: int = SEGMENT, align: bool = True, val_fraction: float = 0.1,
                 control_names=None) -> SegmentSet:
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    out = SegmentSet(length=length)
    for k, (_, dry, wet) in enumerate(iter_pairs(root)):
        pair = load_pair(dry, wet)
        if align:
            pair = align_by_impulses(pair)
        out.extend(segment_and_split(pair, seed + k, length, val_fraction, control_names))
    if not out.segments:
        raise DataError(f"no pairs found below {root}")
    return out


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("device", "pair", "readable", "sample_rate_ok", "length_match", "offset", "aligned",
                  "clipped_dry", "clipped_wet", "peak_dry", "peak_wet", "rms_dry", "rms_wet", "status", "message")


def _clip_runs(x: np.ndarray, run: int = CLIP_RUN) -> bool:
    # positive full scale of an n-bit file reads as 1 - 2**(1-n); accept down to the 16-bit value
    hit = np.abs(x) >= 1.0 - 2.0 ** -15
    if not hit.any():
        return False
    edges = np.diff(np.concatenate([[0], hit.astype(np.int8), [0]]))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    return bool(np.any(ends - starts >= run))


@dataclass
class DatasetReport:
    rows: list[dict]

    @property
    def ok(self) -> bool:
        return all(r["status"] != "error" for r in self.rows) and bool(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        devices = sorted({r["device"] for r in self.rows})
        for d in devices:
            rows = [r for r in self.rows if r["device"] == d]
            bad = [r for r in rows if r["status"] == "error"]
            warn = [r for r in rows if r["status"] == "warning"]
            lines.append(f"{d}: {len(rows)} pairs, {len(bad)} errors, {len(warn)} warnings")
            for r in bad + warn:
                lines.append(f"  {r['pair']}: {r['status']}: {r['message']}")
        if not self.rows:
            lines.append("no pairs found")
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines)


def verify_dataset(root, threshold: float = 10.0) -> DatasetReport:
    """Check every pair: readability, rate, length, alignment, clipping, levels."""
    rows = []
    for dev, dry_p, wet_p in iter_pairs(root):
        row = {k: "" for k in REPORT_COLUMNS}
        row.update(device=dev.name, pair=wet_p.name.replace(".wet.wav", ""), readable=False)
        messages, status = [], "ok"
        try:
            pair = load_pair(dry_p, wet_p)
        except (FormatError, OSError) as exc:
            row.update(status="error", message=str(exc), sample_rate_ok="sample rate" not in str(exc))
            rows.append(row)
            continue
        row.update(readable=True, sample_rate_ok=True, length_match=pair.dry.size == pair.wet.size)
        row.update(peak_dry=float(np.abs(pair.dry).max()), peak_wet=float(np.abs(pair.wet).max()),
                   rms_dry=float(np.sqrt(np.mean(pair.dry ** 2))), rms_wet=float(np.sqrt(np.mean(pair.wet ** 2))))
        row.update(clipped_dry=_clip_runs(pair.dry), clipped_wet=_clip_runs(pair.wet))
        if row["clipped_dry"] or row["clipped_wet"]:
            status = "warning"
            messages.append("clipping (run of full-scale samples)")
        i_dry = find_impulse(pair.dry, slice(0, FS), threshold)
        i_wet = find_impulse(pair.wet, slice(0, FS), threshold)
        if i_dry is None or i_wet is None:
            status = "error"
            messages.append("no synchronisation impulse")
            row["aligned"] = False
        else:
            off = i_wet - i_dry
            row.update(offset=off, aligned=off == 0)
            if off != 0:
                status = "error"
                messages.append(f"misaligned by {off} samples")
        if not row["length_match"]:
            status = "error"
            messages.append(f"length mismatch {pair.dry.size} vs {pair.wet.size}")
        row.update(status=status, message="; ".join(messages))
        rows.append(row)
    return DatasetReport(rows)


# ---------------------------------------------------------------------------
# synthetic material
# ---------------------------------------------------------------------------

def synth_dry(duration_s: float, seed: int, fs: int = FS) -> np.ndarray:
    """Guitar-like test material: plucked harmonic notes with decays plus noise bursts."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs))
    out = np.zeros(n)
    t_pos = 0
    while t_pos < n:
        dur = int(rng.uniform(0.15, 0.8) * fs)
        seg = min(dur, n - t_pos)
        t = np.arange(seg) / fs
        f0 = 82.4 * 2 ** (rng.integers(0, 36) / 12.0)
        note = np.zeros(seg)
        for h in range(1, 8):
            if f0 * h > fs / 2.5:
                break
            note += rng.uniform(0.2, 1.0) / h * np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi))
        env = np.exp(-t * rng.uniform(2.0, 9.0)) * (1 - np.exp(-t * 400.0))
        if rng.uniform() < 0.2:
            note += rng.standard_normal(seg) * np.exp(-t * 30.0)
        out[t_pos:t_pos + seg] += note * env
        t_pos += seg
    return 0.5 * out / max(np.abs(out).max(), 1e-9)


def rbj_peak(freq, gain_db, q, fs=FS):
    a = 10 ** (gain_db / 40.0)
    w0 = 2 * np.pi * freq / fs
    alpha = np.sin(w0) / (2 * q)
    b = np.array([1 + alpha * a, -2 * np.cos(w0), 1 - alpha * a])
    den = np.array([1 + alpha / a, -2 * np.cos(w0), 1 - alpha / a])
    return b / den[0], den / den[0]


@dataclass
class SyntheticDistortion:
    """Reference device: peaking EQ -> drive -> tanh -> level -> peaking EQ."""

    pre_eq: tuple = (800.0, 6.0, 0.8)
    drive_db: float = 18.0
    post_eq: tuple = (3000.0, -6.0, 1.0)
    level_db: float = -6.0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        b, a = rbj_peak(*self.pre_eq)
        y = sps.lfilter(b, a, x)
        y = np.tanh(y * 10 ** (self.drive_db / 20.0)) * 10 ** (self.level_db / 20.0)
        b, a = rbj_peak(*self.post_eq)
        return sps.lfilter(b, a, y)


def add_sync_impulses(x: np.ndarray, lead: int = 24000, tail: int = 24000, amp: float = 0.9) -> np.ndarray:
    """Prepend/append silence containing one full-scale-ish click each."""
    pad_a = np.zeros(lead)
    pad_a[lead // 2] = amp
    pad_b = np.zeros(tail)
    pad_b[tail // 2] = amp
    return np.concatenate([pad_a, x, pad_b])


def make_synthetic_dataset(root, device=None, n_pairs: int = 2, duration_s: float = 30.0, seed: int = 0,
                           device_name: str = "synthetic-dist", test_pairs: int = 0, delay: int = 0,
                           bits: int = 24) -> Path:
    """Write a small dataset rendered through a known device.

    Dry inputs are gain-staged; each file gets start/end impulses so the
    pairs can be aligned.  ``delay`` shifts the wet files to exercise alignment.
    """
    device = device or SyntheticDistortion()
    out = Path(root) / device_name
    out.mkdir(parents=True, exist_ok=True)
    for k in range(n_pairs + test_pairs):
        dry = gain_stage(synth_dry(duration_s, seed * 1000 + k), seed * 1000 + k)
        dry = add_sync_impulses(dry)
        wet = np.clip(device(dry), -0.95, 0.95)
        # stamp the clicks onto the capture too; the device squashes its own copy
        wet[24000 // 2] = 0.99
        wet[-(24000 // 2)] = 0.99
        if delay:
            wet = np.concatenate([np.zeros(delay), wet])[: wet.size] if delay > 0 else np.concatenate(
                [wet[-delay:], np.zeros(-delay)])
        name = f"pair{k:03d}"
        write_wav(out / f"{name}.dry.wav", dry, bits=bits)
        write_wav(out / f"{name}.wet.wav", wet, bits=bits)
        meta = {"device_type": "distortion", "device_name": device_name, "settings": {},
                "split": "test" if k >= n_pairs else "train"}
        with open(out / f"{name}.yaml", "w") as fh:
            yaml.safe_dump(meta, fh)
    return out
