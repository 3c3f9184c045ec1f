from __future__ import annotations

import enum
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

EPOCH_SECONDS = 30.0
N_CLASSES = 5
N_SLOTS = 4


class StageLabel(enum.IntEnum):
    """AASM sleep stage, serialized as 0..4."""

    WAKE = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4

    @property
    def short(self) -> str:
        return ("W", "N1", "N2", "N3", "R")[self.value]


@dataclass
class Channel:
    label: str
    samples: np.ndarray
    sampling_rate: float

    def __post_init__(self):
        if self.sampling_rate <= 0:
            raise ValueError(f"channel {self.label!r}: sampling_rate must be > 0")
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class RawRecording:
    subject_id: str
    channels: list[Channel]
    start_time: datetime = field(default_factory=lambda: datetime(2000, 1, 1))
    duration: float = 0.0

    def __post_init__(self):
        labels = [c.label for c in self.channels]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate channel labels in {self.subject_id}: {labels}")
        if not self.duration and self.channels:
            c = self.channels[0]
            self.duration = len(c.samples) / c.sampling_rate
        for c in self.channels:
            expected = int(round(c.sampling_rate * self.duration))
            if len(c.samples) != expected:
                raise ValueError(
                    f"channel {c.label!r} has {len(c.samples)} samples, expected "
                    f"{expected} (rate {c.sampling_rate} Hz x {self.duration} s)"
                )

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.channels]

    def channel(self, label: str) -> Channel:
        for c in self.channels:
            if c.label == label:
                return c
        raise KeyError(label)


@dataclass
class LabeledEpoch:
    signals: np.ndarray  # (C, n_samples)
    label: StageLabel
    subject_id: str
    epoch_index: int
    rate: float


@dataclass(frozen=True)
class ChannelLayout:
    """Maps recording channels onto the model's four input slots.

    ``ordered_channels`` holds one channel role per slot; repeated roles are
    duplicated into several slots.
    """

    domain: str
    name: str
    ordered_channels: tuple[str, ...]

    def __post_init__(self):
        if len(self.ordered_channels) != N_SLOTS:
            raise ValueError(f"layout must have exactly {N_SLOTS} slots, got {len(self.ordered_channels)}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")

    @property
    def duplication_map(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for slot, role in enumerate(self.ordered_channels):
            out.setdefault(role, []).append(slot)
        return out

    @property
    def roles(self) -> list[str]:
        return list(self.duplication_map)


SOURCE_LAYOUT = ChannelLayout("source", "source", ("C4-A1", "C4-A1", "EMG", "EOG"))
# single-channel source pre-training (CDSC only)
SOURCE_SINGLE_LAYOUT = ChannelLayout("source", "source_single", ("C4-A1",) * 4)
TEACHER_LAYOUT = ChannelLayout("target", "teacher", ("Fpz-Cz", "Pz-Oz", "EMG", "EOG"))
STUDENT_LAYOUT = ChannelLayout("target", "student", ("Fpz-Cz",) * 4)

LAYOUTS = {l.name: l for l in (SOURCE_LAYOUT, SOURCE_SINGLE_LAYOUT, TEACHER_LAYOUT, STUDENT_LAYOUT)}
