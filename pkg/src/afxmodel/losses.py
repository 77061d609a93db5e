"""Training losses, objective metrics, FAD over external embeddings and Spearman correlation."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps
from scipy import stats

from . import autodiff as ad
from .autodiff import Tensor


class ShapeError(ValueError):
    pass


class DegenerateTargetError(ValueError):
    """ESR of an all-zero target."""


class UndefinedCorrelationError(ValueError):
    """Rank correlation of a constant vector."""


class NumericalWarning(UserWarning):
    pass


MAPE_EPS = 1e-3


def _pair(y_hat, y) -> tuple[Tensor, Tensor]:
    y_hat, y = ad.as_tensor(y_hat), ad.as_tensor(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"shape mismatch {y_hat.shape} vs {y.shape}")
    if y.size < 1:
        raise ShapeError("empty signals")
    return y_hat, y


def l1(y_hat, y) -> Tensor:
    y_hat, y = _pair(y_hat, y)
    return ad.reduce_mean(ad.absolute(y_hat - y))


def mse(y_hat, y) -> Tensor:
    y_hat, y = _pair(y_hat, y)
    e = y_hat - y
    return ad.reduce_mean(e * e)


def esr(y_hat, y) -> Tensor:
    """sum(e^2) / sum(y^2), no pre-emphasis."""
    y_hat, y = _pair(y_hat, y)
    energy = float(np.sum(np.square(y.data, dtype=np.float64)))
    if energy == 0.0:
        raise DegenerateTargetError("ESR is undefined for an all-zero target")
    e = y_hat - y
    return ad.reduce_sum(e * e) * (1.0 / energy)


def mape(y_hat, y, eps: float = MAPE_EPS) -> Tensor:
    """mean(|e| / max(|y|, eps))."""
    y_hat, y = _pair(y_hat, y)
    denom = np.maximum(np.abs(y.data), eps).astype(y.dtype)
    return ad.reduce_mean(ad.absolute(y_hat - y) * (1.0 / denom))


# ---------------------------------------------------------------------------
# multi-resolution STFT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StftResolution:
    fft_size: int
    hop_size: int
    window_size: int

    def __post_init__(self):
        if not self.hop_size <= self.window_size <= self.fft_size:
            raise ValueError("need hop <= window <= fft")

    def window(self) -> np.ndarray:
        # periodic Hann, zero-padded to the FFT size when the window is shorter
        w = sps.windows.hann(self.window_size, sym=False)
        pad = self.fft_size - self.window_size
        return np.pad(w, (pad // 2, pad - pad // 2))


RESOLUTIONS = (StftResolution(512, 128, 512), StftResolution(2048, 512, 2048), StftResolution(8192, 2048, 8192))


def resolutions_for(length: int, resolutions=RESOLUTIONS) -> tuple[StftResolution, ...]:
    """Resolutions whose FFT fits in ``length`` samples (for short training chunks)."""
    fit = tuple(r for r in resolutions if r.fft_size <= length)
    if not fit:
        raise ShapeError(f"{length} samples is shorter than every STFT resolution")
    return fit


def mr_stft(y_hat, y, resolutions=RESOLUTIONS) -> Tensor:
    """Mean over resolutions of spectral convergence + mean |log Y_hat - log Y|."""
    y_hat, y = _pair(y_hat, y)
    n = y.shape[-1]
    longest = max(r.fft_size for r in resolutions)
    if n < longest:
        raise ShapeError(f"{n} samples is shorter than the largest fft size {longest}")
    total = None
    for r in resolutions:
        win = r.window()
        mag_hat = ad.stft_magnitude(y_hat, r.fft_size, r.hop_size, win)
        mag = ad.stft_magnitude(y, r.fft_size, r.hop_size, win)
        diff = mag - mag_hat
        sc = ad.sqrt(ad.reduce_sum(diff * diff)) / ad.sqrt(ad.reduce_sum(mag * mag))
        logmag = ad.reduce_mean(ad.absolute(ad.log(mag) - ad.log(mag_hat)))
        term = sc + logmag
        total = term if total is None else total + term
    return total * (1.0 / len(resolutions))


def spectral_convergence(y_hat, y, resolution: StftResolution) -> float:
    with ad.no_grad():
        win = resolution.window()
        m_hat = ad.stft_magnitude(y_hat, resolution.fft_size, resolution.hop_size, win).data
        m = ad.stft_magnitude(y, resolution.fft_size, resolution.hop_size, win).data
    return float(np.linalg.norm(m - m_hat) / np.linalg.norm(m))


# ---------------------------------------------------------------------------
# weighted training loss and the weight-free report
# ---------------------------------------------------------------------------

TABLE_WEIGHT_PAIRS = ((10.0, 1.0), (5.0, 5.0), (1.0, 0.1), (0.5, 0.5))


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 10.0
    w_stft: float = 1.0

    def __post_init__(self):
        if self.w_l1 < 0 or self.w_stft < 0 or (self.w_l1 == 0 and self.w_stft == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")

    @property
    def is_table_pair(self) -> bool:
        return (self.w_l1, self.w_stft) in TABLE_WEIGHT_PAIRS


def total_loss(y_hat, y, weights: LossWeights = LossWeights(), resolutions=RESOLUTIONS):
    """Returns (w_l1 * l1 + w_stft * mr_stft, {"l1": float, "mr_stft": float})."""
    a = l1(y_hat, y)
    b = mr_stft(y_hat, y, resolutions)
    total = a * weights.w_l1 + b * weights.w_stft
    return total, {"l1": float(a.data), "mr_stft": float(b.data)}


def scaled_report(components: dict) -> float:
    """Unit-weight total, comparable across weight configurations."""
    return 1.0 * components["l1"] + 1.0 * components["mr_stft"]


def evaluate_metrics(y_hat, y, resolutions=RESOLUTIONS) -> dict[str, float]:
    with ad.no_grad():
        y_hat = np.asarray(ad.as_tensor(y_hat).data, dtype=np.float64)
        y = np.asarray(ad.as_tensor(y).data, dtype=np.float64)
        out = {
            "l1": float(l1(y_hat, y).data),
            "mse": float(mse(y_hat, y).data),
            "esr": float(esr(y_hat, y).data),
            "mape": float(mape(y_hat, y).data),
            "mr_stft": float(mr_stft(y_hat, y, resolutions).data),
        }
    out["scaled_total"] = scaled_report(out)
    return out


# ---------------------------------------------------------------------------
# Frechet audio distance
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingSet:
    """M embedding vectors of dimension D produced by one representation."""

    vectors: np.ndarray
    source: str = "unknown"

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        m, d = self.vectors.shape
        if m < d + 1:
            warnings.warn(f"{m} embeddings for dimension {d}: covariance is rank deficient", NumericalWarning)

    def save(self, path):
        """CSV with a ``# representation: <source>`` header line."""
        np.savetxt(path, self.vectors, delimiter=",", header=f"representation: {self.source}", comments="# ")

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        path = Path(path)
        with open(path) as fh:
            first = fh.readline()
        source = "unknown"
        if first.startswith("#") and "representation:" in first:
            source = first.split("representation:", 1)[1].strip()
        vectors = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return cls(vectors, source)


def _stats(e: EmbeddingSet):
    v = e.vectors
    if v.shape[0] < 2:
        raise ShapeError("FAD needs at least two embeddings per set")
    return v.mean(axis=0), np.cov(v, rowvar=False, ddof=1).reshape(v.shape[1], v.shape[1])


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fad(a: EmbeddingSet, b: EmbeddingSet, tol: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), clamped at zero."""
    if a.vectors.shape[1] != b.vectors.shape[1]:
        raise ShapeError(f"embedding dimensions differ: {a.vectors.shape[1]} vs {b.vectors.shape[1]}")
    mu_a, s_a = _stats(a)
    mu_b, s_b = _stats(b)
    # Tr (S_a S_b)^(1/2) = Tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), a symmetric PSD product
    ra = _sqrtm_psd(s_a)
    inner = ra @ s_b @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        warnings.warn(f"matrix square root residual: eigenvalue {w.min():.3e}", NumericalWarning)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Spearman rank correlation
# ---------------------------------------------------------------------------

def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float((a @ b) / math.sqrt((a @ a) * (b @ b)))


def spearman(x, y, permutations: int = 10000, seed: int = 0) -> tuple[float, float]:
    """(rho, two-sided p).  Student-t approximation for n >= 20, permutation test below."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(x)
    if len(y) != n:
        raise ShapeError("spearman needs equal lengths")
    if n < 4:
        raise ShapeError("spearman needs n >= 4")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("rank correlation of a constant vector is undefined")
    rx, ry = average_ranks(x), average_ranks(y)
    rho = _pearson(rx, ry)
    if n >= 20:
        if abs(rho) >= 1.0:
            return rho, 0.0
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        return rho, float(2.0 * stats.t.sf(abs(t), n - 2))
    return rho, _permutation_p(rx, ry, rho, permutations, seed)


def _permutation_p(rx, ry, rho, permutations, seed) -> float:
    n = len(rx)
    thresh = abs(rho) - 1e-12
    if math.factorial(n) <= permutations:
        hits = total = 0
        for perm in itertools.permutations(range(n)):
            total += 1
            hits += abs(_pearson(rx, ry[list(perm)])) >= thresh
        return hits / total
    rng = np.random.default_rng(seed)
    hits = sum(abs(_pearson(rx, rng.permutation(ry))) >= thresh for _ in range(permutations))
    return (hits + 1) / (permutations + 1)
