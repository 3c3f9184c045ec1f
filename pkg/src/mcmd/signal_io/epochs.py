from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .hypnogram import Interval
from .types import EPOCH_SECONDS, ChannelLayout, LabeledEpoch, RawRecording, StageLabel


class MissingChannelError(KeyError):
    def __init__(self, role: str, available: Sequence[str]):
        super().__init__(f"missing channel for role {role!r}; recording has {list(available)}")
        self.role = role

    def __str__(self):
        return self.args[0]


def _stage_for(start: float, stop: float, intervals: Sequence[Interval]) -> StageLabel | None:
    for onset, duration, stage in intervals:
        if onset <= start + 1e-9 and stop <= onset + duration + 1e-9:
            return stage
    return None


def make_epochs(
    rec: RawRecording,
    labels: Sequence[Interval],
    layout: ChannelLayout,
    channel_map: Mapping[str, str] | None = None,
    epoch_seconds: float = EPOCH_SECONDS,
) -> list[LabeledEpoch]:
    """Cut ``rec`` into labeled 30 s epochs with the layout's 4 output slots.

    ``channel_map`` translates layout roles to recording labels (e.g.
    ``{"Fpz-Cz": "EEG Fpz-Cz"}``); unmapped roles are looked up verbatim.
    Epochs not fully inside one hypnogram interval are dropped.
    """
    channel_map = dict(channel_map or {})
    by_role = {}
    for role in layout.roles:
        label = channel_map.get(role, role)
        try:
            by_role[role] = rec.channel(label)
        except KeyError:
            raise MissingChannelError(role, rec.labels) from None
    rates = {c.sampling_rate for c in by_role.values()}
    if len(rates) != 1:
        raise ValueError(f"layout channels must share one sampling rate, got {sorted(rates)}; resample first")
    rate = rates.pop()
    n = int(round(epoch_seconds * rate))
    if not np.isclose(n, epoch_seconds * rate):
        raise ValueError(f"{epoch_seconds} s at {rate} Hz is not a whole number of samples")
    n_samples = min(len(c.samples) for c in by_role.values())
    stack = np.stack([by_role[role].samples[: n_samples] for role in layout.ordered_channels])

    out = []
    for i in range(n_samples // n):
        stage = _stage_for(i * epoch_seconds, (i + 1) * epoch_seconds, labels)
        if stage is None:
            continue
        out.append(LabeledEpoch(stack[:, i * n:(i + 1) * n].copy(), stage, rec.subject_id, i, rate))
    return out


def trim_wake(epochs: list[LabeledEpoch], minutes: float | None = 30.0) -> list[LabeledEpoch]:
    """Keep at most ``minutes`` of epochs before the first and after the last sleep epoch."""
    if minutes is None or not epochs:
        return epochs
    sleep_idx = [e.epoch_index for e in epochs if e.label != StageLabel.WAKE]
    if not sleep_idx:
        return epochs
    pad = int(round(minutes * 60 / EPOCH_SECONDS))
    lo, hi = min(sleep_idx) - pad, max(sleep_idx) + pad
    return [e for e in epochs if lo <= e.epoch_index <= hi]
