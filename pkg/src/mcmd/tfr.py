"""Log-power time-frequency images and sequence assembly."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.signal import resample_poly

from .signal_io.types import LabeledEpoch, StageLabel

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class StftConfig:
    rate: float = 100.0
    window_s: float = 2.0
    hop_s: float = 1.0
    nfft: int = 256
    log_floor: float = 1e-12

    @property
    def window(self) -> int:
        return int(round(self.window_s * self.rate))

    @property
    def hop(self) -> int:
        return int(round(self.hop_s * self.rate))

    @property
    def n_freq(self) -> int:
        return self.nfft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window) // self.hop

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def resample(signal: np.ndarray, from_rate: float, to_rate: float) -> np.ndarray:
    """Polyphase resampling; output length is round(n * to_rate / from_rate)."""
    if from_rate <= 0 or to_rate <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(signal)
    if from_rate == to_rate:
        return x.copy()
    ratio = Fraction(to_rate / from_rate).limit_denominator(10_000)
    n_out = int(round(len(x) * to_rate / from_rate))
    y = resample_poly(x.astype(np.float64), ratio.numerator, ratio.denominator, padtype="line")
    if len(y) < n_out:
        y = np.concatenate([y, np.full(n_out - len(y), y[-1] if len(y) else 0.0)])
    return y[:n_out]


def stft_logpower(signal: np.ndarray, rate: float = 100.0, cfg: StftConfig | None = None) -> np.ndarray:
    """(F, T) natural-log power spectrogram with a Hamming window."""
    cfg = cfg or StftConfig(rate=rate)
    if rate != cfg.rate:
        raise ValueError(f"signal rate {rate} Hz does not match STFT config rate {cfg.rate} Hz")
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < cfg.window:
        raise ValueError(f"signal of {len(x)} samples is shorter than one window ({cfg.window})")
    n_frames = cfg.n_frames(len(x))
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(cfg.window)
    spec = np.fft.rfft(frames, n=cfg.nfft, axis=1)
    power = spec.real**2 + spec.imag**2
    return np.log(power + cfg.log_floor).T


def epoch_tfr(signals: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(C, n_samples) epoch -> (F, T, C) tensor."""
    return np.stack([stft_logpower(ch, cfg.rate, cfg) for ch in signals], axis=-1)


@dataclass
class TFREpoch:
    tensor: np.ndarray  # (F, T, C)
    label: StageLabel
    subject_id: str
    epoch_index: int


def epochs_to_tfr(epochs: Sequence[LabeledEpoch], cfg: StftConfig | None = None) -> list[TFREpoch]:
    cfg = cfg or StftConfig()
    out = []
    for e in epochs:
        if e.rate != cfg.rate:
            raise ValueError(f"epoch rate {e.rate} Hz does not match STFT rate {cfg.rate} Hz")
        out.append(TFREpoch(epoch_tfr(e.signals, cfg), e.label, e.subject_id, e.epoch_index))
    return out


# ---------------------------------------------------------------- normalization


@dataclass
class NormStats:
    mean: np.ndarray  # (F, C)
    std: np.ndarray  # (F, C)

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "NormStats":
        """Per-bin, per-channel statistics over all epochs and frames."""
        x = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)  # (N, F, T, C)
        mean = x.mean(axis=(0, 2))
        std = np.maximum(x.std(axis=(0, 2)), STD_FLOOR)
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None, :]) / self.std[:, None, :]


def normalize(epochs, stats: NormStats):
    """Z-score a (..., F, T, C) array or a list of TFREpochs."""
    if isinstance(epochs, np.ndarray):
        return stats.apply(epochs)
    return [TFREpoch(stats.apply(e.tensor), e.label, e.subject_id, e.epoch_index) for e in epochs]


# ---------------------------------------------------------------- sequences


def contiguous_runs(epoch_index: Sequence[int]) -> list[tuple[int, int]]:
    """[start, stop) position ranges over which epoch indices step by exactly 1."""
    idx = np.asarray(epoch_index)
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    edges = [0, *breaks.tolist(), len(idx)]
    return list(zip(edges[:-1], edges[1:]))


def window_starts(n: int, L: int, stride: int, mode: str = "train") -> list[int]:
    if L < 1 or stride < 1:
        raise ValueError("L and stride must be >= 1")
    if mode == "eval":
        stride = min(stride, L)  # a wider stride would skip epochs
    if n < L:
        return []
    starts = list(range(0, n - L + 1, stride))
    if mode == "eval" and starts[-1] + L < n:
        starts.append(n - L)
    elif mode not in ("train", "eval"):
        raise ValueError(f"unknown assembly mode {mode!r}")
    return starts


def sequence_windows(epoch_index: Sequence[int], L: int, stride: int, mode: str = "train") -> list[tuple[int, int]]:
    """(position, length) windows inside contiguous runs of one subject.

    Evaluation mode also emits one short window for runs shorter than ``L``
    so that every epoch is covered.
    """
    out = []
    for a, b in contiguous_runs(epoch_index):
        starts = window_starts(b - a, L, stride, mode)
        if starts:
            out.extend((a + s, L) for s in starts)
        elif mode == "eval":
            out.append((a, b - a))
    return out


@dataclass
class TFRSequence:
    epochs: list[TFREpoch]

    @property
    def labels(self) -> list[StageLabel]:
        return [e.label for e in self.epochs]

    @property
    def tensor(self) -> np.ndarray:
        return np.stack([e.tensor for e in self.epochs])


def assemble_sequences(epochs: Sequence[TFREpoch], L: int, stride: int, mode: str = "train") -> list[TFRSequence]:
    """Windows of L consecutive epochs from one subject's ordered epochs."""
    if len({e.subject_id for e in epochs}) > 1:
        raise ValueError("assemble_sequences expects epochs of a single subject")
    windows = sequence_windows([e.epoch_index for e in epochs], L, stride, mode)
    return [TFRSequence(list(epochs[p:p + n])) for p, n in windows]
