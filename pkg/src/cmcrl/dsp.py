"""Audio clip -> 3 x 128 x 44 time-frequency feature.

Channels are log(1 + |STFT|), the principal-value STFT phase, and
log(1 + mel power). With 0.5 s at 44.1 kHz, ``n_fft=254`` gives 128 one-sided
bins and ``hop=512`` with centred reflect padding gives 44 frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError

SAMPLE_RATE = 44100
CLIP_LEN = 22050
N_FFT = 254
HOP = 512
N_FRAMES = 44
N_BINS = N_FFT // 2 + 1
N_MELS = 128


def pad_or_trim(samples, target: int = CLIP_LEN) -> np.ndarray:
    """Centre-trim long inputs, zero-pad short ones symmetrically (extra sample goes to the end)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractError(f"pad_or_trim: need a nonempty 1-d signal, got shape {x.shape}")
    n = x.size
    if n > target:
        start = (n - target) // 2
        return x[start:start + target].copy()
    if n < target:
        left = (target - n) // 2
        return np.pad(x, (left, target - n - left))
    return x.copy()


@lru_cache(maxsize=None)
def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frames(clip: np.ndarray, n_fft: int = N_FFT, hop: int = HOP, n_frames: int = N_FRAMES) -> np.ndarray:
    """Reflect-padded, windowed analysis frames, shape ``n_frames x n_fft``."""
    x = np.asarray(clip, dtype=np.float64)
    if x.shape != (CLIP_LEN,):
        raise ContractError(f"stft: clip must have {CLIP_LEN} samples, got shape {x.shape}")
    padded = np.pad(x, n_fft // 2, mode="reflect")
    available = 1 + (padded.size - n_fft) // hop
    idx = hop * np.arange(min(available, n_frames))[:, None] + np.arange(n_fft)[None, :]
    out = np.zeros((n_frames, n_fft))
    out[: idx.shape[0]] = padded[idx]
    return out * hann(n_fft)


def stft(clip, n_fft: int = N_FFT, hop: int = HOP, n_frames: int = N_FRAMES) -> np.ndarray:
    """One-sided STFT, complex ``(n_fft//2 + 1) x n_frames``."""
    return np.fft.rfft(frames(clip, n_fft, hop, n_frames), axis=1).T


def mag_phase(spec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude and phase in (-pi, pi]; zero bins get phase 0."""
    mag = np.abs(spec)
    phase = np.arctan2(spec.imag, spec.real)
    phase = np.where(phase <= -np.pi, np.pi, phase)
    phase = np.where(mag == 0, 0.0, phase)
    return mag, phase


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(n_mels: int, f_min: float, f_max: float) -> np.ndarray:
    """The n_mels + 2 triangle vertices in Hz (left edge, centres, right edge)."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def bin_edges(n_bins: int, sample_rate: float) -> np.ndarray:
    """Frequency extent of each one-sided bin, clipped to [0, sr/2]; shape ``n_bins + 1``."""
    spacing = sample_rate / (2 * (n_bins - 1))
    edges = (np.arange(n_bins + 1) - 0.5) * spacing
    return np.clip(edges, 0.0, sample_rate / 2)


def _triangle_cdf(f, lo, mid, hi):
    """Integral from -inf to f of the unit-area triangle on [lo, hi] peaking at mid."""
    f = np.clip(f, lo, hi)
    height = 2.0 / (hi - lo)
    rising = np.where(mid > lo, height * (f - lo) ** 2 / (2 * np.maximum(mid - lo, 1e-300)), 0.0)
    left_area = height * (mid - lo) / 2
    falling = left_area + height * ((hi - mid) ** 2 - (hi - f) ** 2) / (2 * np.maximum(hi - mid, 1e-300))
    return np.where(f <= mid, rising, falling)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_bins: int = N_BINS, sample_rate: float = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular mel filters integrated over each bin's frequency extent.

    Every triangle has unit area, so a row sums to 1 whenever its triangle lies
    inside the analysed band; narrow low-frequency triangles still land in the
    bin that contains them instead of vanishing between bin centres.
    """
    f_max = sample_rate / 2 if f_max is None else f_max
    if n_mels < 1 or n_bins < 2:
        raise ContractError(f"mel_filterbank: n_mels={n_mels}, n_bins={n_bins}")
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ContractError(f"mel_filterbank: invalid band [{f_min}, {f_max}] for sample rate {sample_rate}")
    pts = mel_points(n_mels, f_min, f_max)
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    edges = bin_edges(n_bins, sample_rate)[None, :]
    cdf = _triangle_cdf(edges, lo, mid, hi)
    bank = np.diff(cdf, axis=1)
    bank.flags.writeable = False
    return bank


def mel_centers(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = SAMPLE_RATE / 2) -> np.ndarray:
    return mel_points(n_mels, f_min, f_max)[1:-1]


@dataclass(frozen=True)
class FeatureStats:
    """Per-channel mean/std computed over a training set."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def apply(self, feat: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean)[:, None, None]
        s = np.asarray(self.std)[:, None, None]
        return (feat - m) / s

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d) -> "FeatureStats":
        return cls(tuple(d["mean"]), tuple(d["std"]))


def compute_stats(features: np.ndarray) -> FeatureStats:
    """``features`` is ``M x 3 x 128 x 44``."""
    mean = features.mean(axis=(0, 2, 3), dtype=np.float64)
    std = features.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return FeatureStats(tuple(float(v) for v in mean), tuple(float(v) for v in std))


def featurize(clip, stats: FeatureStats | None = None) -> np.ndarray:
    mag, phase = mag_phase(stft(clip))
    mel = mel_filterbank() @ (mag ** 2)
    feat = np.stack([np.log1p(mag), phase, np.log1p(mel)])
    return feat if stats is None else stats.apply(feat)


def featurize_many(clips, stats: FeatureStats | None = None, dtype=np.float32) -> np.ndarray:
    return np.stack([featurize(c, stats) for c in clips]).astype(dtype)
