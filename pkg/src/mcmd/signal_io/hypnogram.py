from __future__ import annotations

import csv
from typing import Iterable, Mapping

from .edf import read_annotations
from .types import StageLabel

Interval = tuple[float, float, StageLabel]

# R&K stages 3 and 4 merge into AASM N3
DEFAULT_STAGE_MAP: dict[str, StageLabel] = {
    "Sleep stage W": StageLabel.WAKE,
    "Sleep stage 1": StageLabel.N1,
    "Sleep stage 2": StageLabel.N2,
    "Sleep stage 3": StageLabel.N3,
    "Sleep stage 4": StageLabel.N3,
    "Sleep stage R": StageLabel.REM,
    "W": StageLabel.WAKE,
    "Wake": StageLabel.WAKE,
    "N1": StageLabel.N1,
    "N2": StageLabel.N2,
    "N3": StageLabel.N3,
    "R": StageLabel.REM,
    "REM": StageLabel.REM,
}
DEFAULT_DROP = frozenset({"Movement time"})
# Sleep-EDF marks unscored tail epochs with "Sleep stage ?"
SLEEP_EDF_DROP = frozenset({"Movement time", "Sleep stage ?"})


class HypnogramError(ValueError):
    pass


def map_stages(
    rows: Iterable[tuple[float, float, str]],
    mapping: Mapping[str, StageLabel] | None = None,
    drop: Iterable[str] = DEFAULT_DROP,
) -> list[Interval]:
    mapping = DEFAULT_STAGE_MAP if mapping is None else mapping
    drop = set(drop)
    out: list[Interval] = []
    unmapped = []
    for onset, duration, text in rows:
        text = text.strip()
        if text in drop:
            continue
        if text not in mapping:
            unmapped.append(text)
            continue
        out.append((float(onset), float(duration), StageLabel(mapping[text])))
    if unmapped:
        raise HypnogramError(f"unmapped stage strings: {sorted(set(unmapped))}")
    out.sort(key=lambda r: r[0])
    for (o1, d1, _), (o2, _, _) in zip(out, out[1:]):
        if o1 + d1 > o2 + 1e-9:
            raise HypnogramError(f"overlapping intervals at onset {o1} (+{d1}) and {o2}")
    return out


def read_hypnogram_csv(path) -> list[tuple[float, float, str]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"onset_s", "duration_s", "stage"} - set(reader.fieldnames or [])
        if missing:
            raise HypnogramError(f"{path}: missing CSV columns {sorted(missing)}")
        return [(float(r["onset_s"]), float(r["duration_s"]), r["stage"]) for r in reader]


def write_hypnogram_csv(path, intervals: Iterable[Interval]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["onset_s", "duration_s", "stage"])
        for onset, duration, stage in intervals:
            w.writerow([f"{onset:g}", f"{duration:g}", StageLabel(stage).short])


def load_hypnogram(
    path,
    format: str = "csv",
    mapping: Mapping[str, StageLabel] | None = None,
    drop: Iterable[str] = DEFAULT_DROP,
) -> list[Interval]:
    """Sorted, non-overlapping (onset, duration, stage) intervals."""
    if format == "csv":
        rows = read_hypnogram_csv(path)
    elif format == "edf_annotations":
        rows = [r for r in read_annotations(path) if r[2]]
    else:
        raise ValueError(f"unknown hypnogram format {format!r}")
    return map_stages(rows, mapping, drop)
