"""Synthetic two-domain PSG generator for desk-scale experiments.

Each epoch is AR(1) background noise plus oscillatory bursts at class
signature frequencies. ``channel_info[c][k]`` sets how strongly class ``k``
shows its own signature on channel ``c``; the remaining weight goes to the
signature of ``alias[k]`` (if any), so a weakly-informative channel makes
the class look like its alias. A zero matrix makes all classes identical.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta

import numpy as np
from scipy.signal import lfilter

from .hypnogram import Interval
from .types import EPOCH_SECONDS, N_CLASSES, Channel, RawRecording, StageLabel

# channel roles, in channel_info row order
TARGET_CHANNELS = ("Fpz-Cz", "Pz-Oz", "EMG", "EOG")
SOURCE_CHANNELS = ("C4-A1", "EMG", "EOG")
_SOURCE_ROWS = (0, 2, 3)  # which channel_info rows drive the source channels

# signature frequency (Hz) per channel kind and class W, N1, N2, N3, REM
SIGNATURE_HZ = {
    "eeg": (10.0, 6.0, 13.5, 1.5, 20.0),
    "emg": (32.0, 26.0, 22.0, 17.0, 42.0),
    "eog": (3.0, 4.5, 7.5, 0.8, 2.0),
}
_KIND = {"Fpz-Cz": "eeg", "Pz-Oz": "eeg", "C4-A1": "eeg", "EMG": "emg", "EOG": "eog"}

DEFAULT_CHANNEL_INFO = (
    (1.0, 1.0, 1.0, 1.0, 0.0),  # Fpz-Cz: REM looks exactly like N1
    (0.8, 0.8, 0.8, 0.8, 0.0),  # Pz-Oz
    (0.6, 0.0, 0.0, 0.0, 1.0),   # EMG
    (0.6, 0.0, 0.0, 0.0, 1.0),   # EOG
)


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_subjects_source: int = 12
    n_subjects_target: int = 8
    epochs_per_subject: int = 120
    rate_source: float = 128.0
    rate_target: float = 100.0
    # N1 slightly more frequent than REM, so REM seen through EEG alone is read as N1
    class_priors: tuple[float, ...] = (0.2, 0.25, 0.2, 0.2, 0.15)
    stickiness: float = 0.7
    channel_info: tuple[tuple[float, ...], ...] = DEFAULT_CHANNEL_INFO
    alias: dict[int, int] = field(default_factory=lambda: {int(StageLabel.REM): int(StageLabel.N1)})
    noise_std: float = 10.0
    burst_amplitude: float = 12.0
    bursts_per_epoch: int = 3
    # source domain: frequencies scaled, noise colour and gain changed
    source_freq_scale: float = 1.08
    source_gain: float = 1.4
    ar_coef_target: float = 0.95
    ar_coef_source: float = 0.85
    subject_gain_sd: float = 0.15

    def validate(self) -> None:
        p = np.asarray(self.class_priors, dtype=float)
        if p.shape != (N_CLASSES,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise SynthConfigError(f"class_priors must be {N_CLASSES} non-negative values summing to 1, got {list(p)}")
        info = np.asarray(self.channel_info, dtype=float)
        if info.shape != (len(TARGET_CHANNELS), N_CLASSES):
            raise SynthConfigError(f"channel_info must be {len(TARGET_CHANNELS)}x{N_CLASSES}, got {info.shape}")
        if np.any(info < 0) or np.any(info > 1):
            raise SynthConfigError("channel_info entries must lie in [0, 1]")
        if not 0 <= self.stickiness < 1:
            raise SynthConfigError("stickiness must be in [0, 1)")
        for n in ("n_subjects_source", "n_subjects_target", "epochs_per_subject"):
            if getattr(self, n) < 0:
                raise SynthConfigError(f"{n} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "class_priors" in d:
            d["class_priors"] = tuple(float(x) for x in d["class_priors"])
        if "channel_info" in d:
            d["channel_info"] = tuple(tuple(float(x) for x in row) for row in d["channel_info"])
        if "alias" in d:
            d["alias"] = {int(k): int(v) for k, v in (d["alias"] or {}).items()}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_priors"] = list(self.class_priors)
        d["channel_info"] = [list(r) for r in self.channel_info]
        return d


@dataclass
class SynthDataset:
    domain: str
    recordings: list[RawRecording]
    hypnograms: dict[str, list[Interval]]

    @property
    def subjects(self) -> list[str]:
        return [r.subject_id for r in self.recordings]


def _stage_sequence(rng: np.random.Generator, n: int, priors: np.ndarray, stickiness: float) -> np.ndarray:
    # stationary distribution of this chain equals ``priors``
    out = np.empty(n, dtype=np.int64)
    out[0] = rng.choice(N_CLASSES, p=priors)
    for i in range(1, n):
        out[i] = out[i - 1] if rng.random() < stickiness else rng.choice(N_CLASSES, p=priors)
    return out


def _mixing(info_row: np.ndarray, alias: dict[int, int]) -> np.ndarray:
    """weights[k, j]: amplitude of signature j in an epoch of class k."""
    w = np.zeros((N_CLASSES, N_CLASSES))
    for k in range(N_CLASSES):
        w[k, k] += info_row[k]
        a = alias.get(k)
        if a is not None:
            w[k, a] += (1.0 - info_row[k]) * info_row[a]
    return w


def _channel_signal(
    rng: np.random.Generator,
    stages: np.ndarray,
    rate: float,
    freqs: np.ndarray,
    weights: np.ndarray,
    cfg: SynthConfig,
    ar_coef: float,
    gain: float,
) -> np.ndarray:
    n_ep = int(round(EPOCH_SECONDS * rate))
    total = n_ep * len(stages)
    white = rng.standard_normal(total)
    noise = lfilter([np.sqrt(1 - ar_coef**2)], [1.0, -ar_coef], white)
    x = cfg.noise_std * noise
    t = np.arange(n_ep) / rate
    nyq = rate / 2
    for e, k in enumerate(stages):
        seg = np.zeros(n_ep)
        for j in np.flatnonzero(weights[k]):
            for _ in range(cfg.bursts_per_epoch):
                f = freqs[j] * (1 + 0.04 * rng.standard_normal())
                if f >= nyq * 0.95:
                    continue
                length = rng.uniform(3.0, 8.0)
                start = rng.uniform(0, EPOCH_SECONDS - length)
                env = np.clip((t - start) / length, 0, 1)
                env = np.where((t >= start) & (t <= start + length), np.sin(np.pi * env) ** 2, 0.0)
                amp = cfg.burst_amplitude * weights[k, j] * np.exp(0.25 * rng.standard_normal())
                seg += amp * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        x[e * n_ep:(e + 1) * n_ep] += seg
    return gain * x


def _generate_domain(domain: str, cfg: SynthConfig, seed: int) -> SynthDataset:
    priors = np.asarray(cfg.class_priors, dtype=float)
    priors = priors / priors.sum()
    info = np.asarray(cfg.channel_info, dtype=float)
    if domain == "source":
        roles, rows, rate = SOURCE_CHANNELS, _SOURCE_ROWS, cfg.rate_source
        fscale, dgain, ar, n_sub, dom_id = cfg.source_freq_scale, cfg.source_gain, cfg.ar_coef_source, cfg.n_subjects_source, 1
    else:
        roles, rows, rate = TARGET_CHANNELS, (0, 1, 2, 3), cfg.rate_target
        fscale, dgain, ar, n_sub, dom_id = 1.0, 1.0, cfg.ar_coef_target, cfg.n_subjects_target, 2
    recordings, hyps = [], {}
    for s in range(n_sub):
        rng = np.random.default_rng([seed, dom_id, s])
        sid = f"{domain[:3]}{s:03d}"
        stages = _stage_sequence(rng, cfg.epochs_per_subject, priors, cfg.stickiness)
        sub_gain = float(np.exp(cfg.subject_gain_sd * rng.standard_normal()))
        channels = []
        for role, row in zip(roles, rows):
            kind = _KIND[role]
            freqs = np.asarray(SIGNATURE_HZ[kind]) * fscale
            if role == "Pz-Oz":
                freqs = freqs * 1.05
            w = _mixing(info[row], cfg.alias)
            sig = _channel_signal(rng, stages, rate, freqs, w, cfg, ar, dgain * sub_gain)
            channels.append(Channel(role, sig, rate))
        start = datetime(2000, 1, 1, 22, 0, 0) + timedelta(minutes=s)
        recordings.append(RawRecording(sid, channels, start, cfg.epochs_per_subject * EPOCH_SECONDS))
        hyps[sid] = [(i * EPOCH_SECONDS, EPOCH_SECONDS, StageLabel(int(k))) for i, k in enumerate(stages)]
    return SynthDataset(domain, recordings, hyps)


def synth_generate(cfg: SynthConfig, seed: int) -> tuple[SynthDataset, SynthDataset]:
    """(source, target) datasets; identical (cfg, seed) give identical arrays."""
    cfg.validate()
    return _generate_domain("source", cfg, seed), _generate_domain("target", cfg, seed)
