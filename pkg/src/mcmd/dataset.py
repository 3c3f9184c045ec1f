"""TFR datasets: build from recordings, cache on disk, split by fold, batch."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .signal_io import (
    LAYOUTS,
    ChannelLayout,
    FoldSplit,
    RawRecording,
    make_epochs,
    trim_wake,
)
from .signal_io.hypnogram import Interval
from .signal_io.types import Channel
from .tfr import NormStats, StftConfig, epochs_to_tfr, resample, sequence_windows

CACHE_VERSION = 1
RECORD_GAP = 1_000_000  # epoch-index gap between concatenated recordings


class CacheStaleError(RuntimeError):
    pass


@dataclass
class SubjectTFR:
    subject_id: str
    views: dict[str, np.ndarray]  # view name -> (n, F, T, C) float32
    labels: np.ndarray  # (n,) int64
    epoch_index: np.ndarray  # (n,) int64

    def __len__(self):
        return len(self.labels)


@dataclass
class TFRDataset:
    domain: str
    subjects: dict[str, SubjectTFR]
    stft: StftConfig = field(default_factory=StftConfig)

    @property
    def view_names(self) -> list[str]:
        first = next(iter(self.subjects.values()))
        return list(first.views)

    @property
    def subject_ids(self) -> list[str]:
        return sorted(self.subjects)

    def n_epochs(self) -> int:
        return sum(len(s) for s in self.subjects.values())


def resample_recording(rec: RawRecording, rate: float) -> RawRecording:
    chans = [Channel(c.label, resample(c.samples, c.sampling_rate, rate), rate) for c in rec.channels]
    n = min((len(c.samples) for c in chans), default=0)
    duration = n / rate
    # whole-sample truncation keeps the sample-count invariant after rounding
    chans = [Channel(c.label, c.samples[:n], rate) for c in chans]
    return RawRecording(rec.subject_id, chans, rec.start_time, duration)


def subject_tfr(
    rec: RawRecording,
    hypnogram: Sequence[Interval],
    layouts: Sequence[ChannelLayout],
    stft: StftConfig,
    channel_map: Mapping[str, str] | None = None,
    trim_minutes: float | None = 30.0,
) -> SubjectTFR:
    needed = {(channel_map or {}).get(r, r) for lay in layouts for r in lay.roles}
    rec = RawRecording(rec.subject_id, [c for c in rec.channels if c.label in needed], rec.start_time, rec.duration)
    rec = resample_recording(rec, stft.rate)
    views, labels, index = {}, None, None
    for lay in layouts:
        eps = trim_wake(make_epochs(rec, hypnogram, lay, channel_map), trim_minutes)
        tf = epochs_to_tfr(eps, stft)
        arr = np.stack([t.tensor for t in tf]).astype(np.float32) if tf else np.zeros((0, stft.n_freq, 0, 4), np.float32)
        lab = np.array([int(t.label) for t in tf], dtype=np.int64)
        idx = np.array([t.epoch_index for t in tf], dtype=np.int64)
        if labels is not None and (not np.array_equal(lab, labels) or not np.array_equal(idx, index)):
            raise RuntimeError(f"{rec.subject_id}: layouts produced different epoch sets")
        views[lay.name], labels, index = arr, lab, idx
    return SubjectTFR(rec.subject_id, views, labels, index)


def build_dataset(
    domain: str,
    recordings: Sequence[RawRecording],
    hypnograms: Mapping[str, Sequence[Interval]],
    layouts: Sequence[ChannelLayout | str],
    stft: StftConfig | None = None,
    channel_map: Mapping[str, str] | None = None,
    trim_minutes: float | None = 30.0,
    groups: Mapping[str, str] | None = None,
) -> TFRDataset:
    """TFR views of every recording.

    ``groups`` maps recording ids to subject ids; recordings of one subject
    are concatenated, with epoch indices offset so no sequence spans two.
    """
    stft = stft or StftConfig()
    layouts = [LAYOUTS[l] if isinstance(l, str) else l for l in layouts]
    subjects: dict[str, SubjectTFR] = {}
    for rec in recordings:
        one = subject_tfr(rec, hypnograms[rec.subject_id], layouts, stft, channel_map, trim_minutes)
        sid = (groups or {}).get(rec.subject_id, rec.subject_id)
        if sid not in subjects:
            subjects[sid] = SubjectTFR(sid, one.views, one.labels, one.epoch_index)
            continue
        prev = subjects[sid]
        offset = (int(prev.epoch_index.max()) + 1 if len(prev) else 0) + RECORD_GAP
        subjects[sid] = SubjectTFR(
            sid,
            {v: np.concatenate([prev.views[v], one.views[v]]) for v in prev.views},
            np.concatenate([prev.labels, one.labels]),
            np.concatenate([prev.epoch_index, one.epoch_index + offset]),
        )
    return TFRDataset(domain, subjects, stft)


# ---------------------------------------------------------------- cache


def dataset_hash(ds: TFRDataset) -> str:
    h = hashlib.sha256(ds.domain.encode())
    for sid in ds.subject_ids:
        s = ds.subjects[sid]
        h.update(sid.encode())
        for name in sorted(s.views):
            h.update(name.encode())
            h.update(np.ascontiguousarray(s.views[name]).tobytes())
        h.update(s.labels.tobytes())
        h.update(s.epoch_index.tobytes())
    return h.hexdigest()


def save_cache(ds: TFRDataset, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "version": CACHE_VERSION,
        "domain": ds.domain,
        "stft": asdict(ds.stft),
        "stft_hash": ds.stft.hash(),
        "subjects": [],
    }
    for sid in ds.subject_ids:
        s = ds.subjects[sid]
        np.savez(os.path.join(directory, f"{sid}.npz"), labels=s.labels, epoch_index=s.epoch_index,
                 **{f"view_{k}": v for k, v in s.views.items()})
        manifest["subjects"].append({
            "subject_id": sid,
            "file": f"{sid}.npz",
            "n_epochs": int(len(s)),
            "shapes": {k: list(v.shape) for k, v in s.views.items()},
        })
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_cache(directory, stft: StftConfig | None = None) -> TFRDataset:
    path = os.path.join(directory, "manifest.json")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("version") != CACHE_VERSION:
        raise CacheStaleError(f"{path}: cache version {manifest.get('version')} != {CACHE_VERSION}")
    cached = StftConfig(**manifest["stft"])
    if stft is not None and stft.hash() != manifest["stft_hash"]:
        raise CacheStaleError(f"{path}: STFT config changed (cache {manifest['stft_hash']}, wanted {stft.hash()})")
    subjects = {}
    for entry in manifest["subjects"]:
        with np.load(os.path.join(directory, entry["file"])) as z:
            views = {k[len("view_"):]: z[k] for k in z.files if k.startswith("view_")}
            subjects[entry["subject_id"]] = SubjectTFR(entry["subject_id"], views, z["labels"], z["epoch_index"])
    return TFRDataset(manifest["domain"], subjects, cached)


# ---------------------------------------------------------------- fold splits and batching


class Part(NamedTuple):
    subject_id: str
    start: int
    stop: int


def fold_parts(ds: TFRDataset, fold: FoldSplit) -> dict[str, list[Part]]:
    """Positional epoch ranges for the train / valid / test splits of ``fold``."""
    out: dict[str, list[Part]] = {"train": [], "valid": [], "test": []}
    for sid in fold.test_subjects:
        if sid not in fold.train_subjects:
            out["test"].append(Part(sid, 0, len(ds.subjects[sid])))
    for sid in fold.valid_subjects:
        out["valid"].append(Part(sid, 0, len(ds.subjects[sid])))
    for sid in fold.train_subjects:
        n = len(ds.subjects[sid])
        stop = n
        if fold.test_tail:
            cut = n - max(1, int(round(fold.test_tail * n)))
            out["test"].append(Part(sid, cut, n))
            stop = cut
        if fold.valid_tail:
            cut = stop - max(1, int(round(fold.valid_tail * stop)))
            out["valid"].append(Part(sid, cut, stop))
            stop = cut
        out["train"].append(Part(sid, 0, stop))
    return out


def norm_stats(ds: TFRDataset, parts: Sequence[Part], view: str) -> NormStats:
    return NormStats.from_arrays([ds.subjects[p.subject_id].views[view][p.start:p.stop] for p in parts])


class SequenceSet:
    """Normalized, windowed sequences over a list of parts.

    Every window carries its subject id so callers can audit provenance.
    """

    def __init__(self, ds: TFRDataset, parts: Sequence[Part], views: Sequence[str],
                 stats: Mapping[str, NormStats], L: int, stride: int, mode: str,
                 dtype=np.float32):
        self.parts = list(parts)
        self.views = list(views)
        self.x: dict[str, list[np.ndarray]] = {v: [] for v in self.views}
        self.y: list[np.ndarray] = []
        self.epoch_index: list[np.ndarray] = []
        self.windows: list[tuple[int, int, int]] = []  # (part, position, length)
        for i, p in enumerate(self.parts):
            s = ds.subjects[p.subject_id]
            for v in self.views:
                self.x[v].append(stats[v].apply(s.views[v][p.start:p.stop].astype(np.float64)).astype(dtype))
            self.y.append(s.labels[p.start:p.stop])
            idx = s.epoch_index[p.start:p.stop]
            self.epoch_index.append(idx)
            self.windows.extend((i, pos, n) for pos, n in sequence_windows(idx, L, stride, mode))

    def __len__(self):
        return len(self.windows)

    def subject_of(self, w: int) -> str:
        return self.parts[self.windows[w][0]].subject_id

    def batch(self, window_ids: Sequence[int], view: str) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for w in window_ids:
            i, pos, n = self.windows[w]
            xs.append(self.x[view][i][pos:pos + n])
            ys.append(self.y[i][pos:pos + n])
        return np.stack(xs), np.stack(ys)

    def provenance(self, window_ids: Sequence[int]) -> set[str]:
        return {self.subject_of(w) for w in window_ids}
