"""On-disk recording collections: EDF signals plus hypnograms, indexed by a manifest.

A corpus directory holds ``manifest.json``::

    {"domain": "target",
     "records": [{"record_id", "subject_id", "edf", "hypnogram", "hypnogram_format"}, ...]}

Directories without a manifest are scanned for Sleep-EDF style pairs
(``SC4001E0-PSG.edf`` with ``SC4001EC-Hypnogram.edf``); the first five
characters name the subject, so both nights of a subject share a fold.
"""
from __future__ import annotations

import glob
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

from .signal_io import DEFAULT_DROP, SLEEP_EDF_DROP, load_edf, load_hypnogram, write_edf, write_hypnogram_csv
from .signal_io.hypnogram import Interval
from .signal_io.synth import SynthDataset
from .signal_io.types import RawRecording

MANIFEST = "manifest.json"


@dataclass
class CorpusRecord:
    record_id: str
    subject_id: str
    edf: str
    hypnogram: str
    hypnogram_format: str = "csv"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_corpus(ds: SynthDataset, directory) -> str:
    """Write every recording as EDF + CSV hypnogram; returns the corpus hash."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for rec in ds.recordings:
        sid = rec.subject_id
        write_edf(os.path.join(directory, f"{sid}.edf"), rec)
        write_hypnogram_csv(os.path.join(directory, f"{sid}.hypnogram.csv"), ds.hypnograms[sid])
        records.append({"record_id": sid, "subject_id": sid, "edf": f"{sid}.edf",
                        "hypnogram": f"{sid}.hypnogram.csv", "hypnogram_format": "csv"})
    h = corpus_hash(directory, records)
    with open(os.path.join(directory, MANIFEST), "w") as f:
        json.dump({"domain": ds.domain, "records": records, "sha256": h}, f, indent=2, sort_keys=True)
    return h


def corpus_hash(directory, records: Iterable[dict]) -> str:
    h = hashlib.sha256()
    for r in records:
        for key in ("edf", "hypnogram"):
            h.update(r[key].encode())
            h.update(file_sha256(os.path.join(directory, r[key])).encode())
    return h.hexdigest()


def list_corpus(directory) -> tuple[str | None, list[CorpusRecord]]:
    path = os.path.join(directory, MANIFEST)
    if os.path.exists(path):
        with open(path) as f:
            m = json.load(f)
        return m.get("domain"), [CorpusRecord(**{k: r[k] for k in CorpusRecord.__dataclass_fields__ if k in r})
                                 for r in m["records"]]
    psg = sorted(glob.glob(os.path.join(directory, "*-PSG.edf")))
    hyp = sorted(glob.glob(os.path.join(directory, "*-Hypnogram.edf")))
    by_prefix = {os.path.basename(p)[:7]: p for p in hyp}
    out = []
    for p in psg:
        name = os.path.basename(p)
        h = by_prefix.get(name[:7])
        if h is None:
            raise FileNotFoundError(f"no hypnogram found for {name}")
        out.append(CorpusRecord(name[:6], name[:5], os.path.basename(p), os.path.basename(h), "edf_annotations"))
    if not out:
        raise FileNotFoundError(f"{directory}: no {MANIFEST} and no *-PSG.edf files")
    return None, out


def read_corpus(directory, drop: Sequence[str] | None = None) -> tuple[list[RawRecording], dict[str, list[Interval]], dict[str, str]]:
    """Recordings (ids = record ids), hypnograms and the record -> subject map."""
    _, records = list_corpus(directory)
    recs, hyps, groups = [], {}, {}
    for r in records:
        d = drop if drop is not None else (SLEEP_EDF_DROP if r.hypnogram_format == "edf_annotations" else DEFAULT_DROP)
        recs.append(load_edf(os.path.join(directory, r.edf), subject_id=r.record_id))
        hyps[r.record_id] = load_hypnogram(os.path.join(directory, r.hypnogram), r.hypnogram_format, drop=d)
        groups[r.record_id] = r.subject_id
    return recs, hyps, groups
