"""Minimal EDF / EDF+ reader and writer.

Only what the pipeline needs: contiguous recordings (EDF or EDF+C), 16-bit
samples, and the ``EDF Annotations`` signal for hypnograms.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .types import Channel, RawRecording

ANNOTATION_LABEL = "EDF Annotations"

# (name, width) of the fixed part of the header
_FIXED_FIELDS = [
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
]
_SIGNAL_FIELDS = [
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
]


class EDFError(ValueError):
    pass


class EDFParseError(EDFError):
    def __init__(self, field: str, message: str):
        super().__init__(f"EDF header field {field!r}: {message}")
        self.field = field


class EDFScalingError(EDFError):
    pass


class EDFTruncatedError(EDFError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated EDF data: expected {expected} bytes of data records, found {actual}")
        self.expected = expected
        self.actual = actual


@dataclass
class SignalHeader:
    label: str
    transducer: str
    physical_dimension: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    prefiltering: str
    samples_per_record: int

    @property
    def is_annotation(self) -> bool:
        return self.label == ANNOTATION_LABEL

    @property
    def scale(self) -> float:
        if self.digital_max == self.digital_min:
            raise EDFScalingError(f"signal {self.label!r}: digital_max == digital_min ({self.digital_min})")
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)


@dataclass
class EDFHeader:
    version: str
    patient: str
    recording: str
    start_time: datetime
    header_bytes: int
    reserved: str
    n_records: int
    record_duration: float
    signals: list[SignalHeader]

    @property
    def is_edf_plus(self) -> bool:
        return self.reserved.startswith("EDF+")

    @property
    def record_bytes(self) -> int:
        return 2 * sum(s.samples_per_record for s in self.signals)


def _parse_int(field: str, raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise EDFParseError(field, f"expected integer, got {raw!r}") from None


def _parse_float(field: str, raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise EDFParseError(field, f"expected number, got {raw!r}") from None


def _parse_start(date: str, time: str) -> datetime:
    try:
        dd, mm, yy = (int(p) for p in date.strip().split("."))
    except ValueError:
        raise EDFParseError("startdate", f"expected dd.mm.yy, got {date!r}") from None
    try:
        hh, mi, ss = (int(p) for p in time.strip().split("."))
    except ValueError:
        raise EDFParseError("starttime", f"expected hh.mm.ss, got {time!r}") from None
    year = 1900 + yy if yy >= 85 else 2000 + yy
    try:
        return datetime(year, mm, dd, hh, mi, ss)
    except ValueError as exc:
        raise EDFParseError("startdate", str(exc)) from None


def read_header(f) -> EDFHeader:
    fixed = f.read(256)
    if len(fixed) < 256:
        raise EDFParseError("version", f"file too short for EDF header ({len(fixed)} bytes)")
    text = fixed.decode("latin-1")
    raw: dict[str, str] = {}
    pos = 0
    for name, width in _FIXED_FIELDS:
        raw[name] = text[pos:pos + width]
        pos += width
    if raw["version"].strip() != "0":
        raise EDFParseError("version", f"expected '0', got {raw['version'].strip()!r}")
    start = _parse_start(raw["startdate"], raw["starttime"])
    header_bytes = _parse_int("header_bytes", raw["header_bytes"])
    n_records = _parse_int("n_records", raw["n_records"])
    record_duration = _parse_float("record_duration", raw["record_duration"])
    ns = _parse_int("n_signals", raw["n_signals"])
    if ns < 0:
        raise EDFParseError("n_signals", f"negative signal count {ns}")
    if header_bytes != 256 * (ns + 1):
        raise EDFParseError("header_bytes", f"expected {256 * (ns + 1)} for {ns} signals, got {header_bytes}")
    if record_duration < 0:
        raise EDFParseError("record_duration", f"negative duration {record_duration}")

    sig_text = f.read(256 * ns).decode("latin-1")
    if len(sig_text) < 256 * ns:
        raise EDFParseError("label", "signal header section is truncated")
    cols: dict[str, list[str]] = {}
    pos = 0
    for name, width in _SIGNAL_FIELDS:
        cols[name] = [sig_text[pos + i * width:pos + (i + 1) * width] for i in range(ns)]
        pos += width * ns

    signals = []
    for i in range(ns):
        signals.append(SignalHeader(
            label=cols["label"][i].rstrip(" \x00"),
            transducer=cols["transducer"][i].rstrip(),
            physical_dimension=cols["physical_dimension"][i].rstrip(),
            physical_min=_parse_float("physical_min", cols["physical_min"][i]),
            physical_max=_parse_float("physical_max", cols["physical_max"][i]),
            digital_min=_parse_int("digital_min", cols["digital_min"][i]),
            digital_max=_parse_int("digital_max", cols["digital_max"][i]),
            prefiltering=cols["prefiltering"][i].rstrip(),
            samples_per_record=_parse_int("samples_per_record", cols["samples_per_record"][i]),
        ))
        if signals[-1].samples_per_record < 0:
            raise EDFParseError("samples_per_record", f"negative value for signal {i}")
    return EDFHeader(
        version="0",
        patient=raw["patient"].rstrip(),
        recording=raw["recording"].rstrip(),
        start_time=start,
        header_bytes=header_bytes,
        reserved=raw["reserved"].rstrip(),
        n_records=n_records,
        record_duration=record_duration,
        signals=signals,
    )


def read_edf_raw(path) -> tuple[EDFHeader, list[np.ndarray]]:
    """Header plus the raw int16 sample stream of every signal."""
    with open(path, "rb") as f:
        header = read_header(f)
        data = f.read()
    if header.reserved.startswith("EDF+D"):
        raise EDFParseError("reserved", "discontinuous EDF+D recordings are not supported")
    rb = header.record_bytes
    n_records = header.n_records
    if n_records == -1:
        n_records = len(data) // rb if rb else 0
    if n_records < 0:
        raise EDFParseError("n_records", f"invalid record count {n_records}")
    expected = n_records * rb
    if len(data) < expected:
        raise EDFTruncatedError(expected, len(data))
    header.n_records = n_records
    words = np.frombuffer(data[:expected], dtype="<i2").reshape(n_records, rb // 2 if rb else 0)
    streams = []
    pos = 0
    for s in header.signals:
        streams.append(words[:, pos:pos + s.samples_per_record].reshape(-1).copy())
        pos += s.samples_per_record
    return header, streams


def load_edf(path, subject_id: str | None = None) -> RawRecording:
    """Read an EDF/EDF+ file into physical units. Annotation signals are skipped."""
    header, streams = read_edf_raw(path)
    duration = header.n_records * header.record_duration
    channels = []
    for s, digital in zip(header.signals, streams):
        if s.is_annotation:
            continue
        scale = s.scale
        physical = (digital.astype(np.float64) - s.digital_min) * scale + s.physical_min
        if header.record_duration <= 0:
            raise EDFParseError("record_duration", "must be > 0 for files carrying signals")
        rate = s.samples_per_record / header.record_duration
        channels.append(Channel(s.label, physical, rate))
    if subject_id is None:
        subject_id = os.path.splitext(os.path.basename(str(path)))[0]
    return RawRecording(subject_id, channels, header.start_time, duration)


def read_annotations(path) -> list[tuple[float, float, str]]:
    """Parse time-stamped annotation lists from every ``EDF Annotations`` signal."""
    header, streams = read_edf_raw(path)
    out = []
    for s, digital in zip(header.signals, streams):
        if not s.is_annotation:
            continue
        per_record = digital.reshape(header.n_records, s.samples_per_record)
        for rec in per_record:
            out.extend(_parse_tal_block(rec.tobytes()))
    return out


def _parse_tal_block(block: bytes) -> list[tuple[float, float, str]]:
    out = []
    for tal in block.split(b"\x14\x00"):
        tal = tal.strip(b"\x00")
        if not tal:
            continue
        parts = tal.split(b"\x14")
        timing = parts[0].split(b"\x15")
        onset = float(timing[0].decode("latin-1"))
        duration = float(timing[1].decode("latin-1")) if len(timing) > 1 and timing[1] else 0.0
        for text in parts[1:]:
            if text:
                out.append((onset, duration, text.decode("utf-8", errors="replace")))
    return out


# ---------------------------------------------------------------- writer


def _fmt_field(value, width: int, field: str) -> bytes:
    s = str(value)
    if len(s) > width:
        raise EDFError(f"value {s!r} does not fit field {field!r} ({width} chars)")
    return s.ljust(width).encode("latin-1")


def _fmt_number(x: float, direction: int = 0) -> str:
    """Shortest <=8 char decimal, rounded outward when ``direction`` is set."""
    if float(x).is_integer() and len(str(int(x))) <= 8:
        return str(int(x))
    for decimals in range(7, -1, -1):
        if direction < 0:
            v = math.floor(x * 10**decimals) / 10**decimals
        elif direction > 0:
            v = math.ceil(x * 10**decimals) / 10**decimals
        else:
            v = round(x, decimals)
        s = f"{v:.{decimals}f}"
        if "." in s:
            s = s.rstrip("0").rstrip(".")
        if len(s) <= 8:
            return s
    raise EDFError(f"cannot represent {x} in 8 characters")


def _auto_range(x: np.ndarray) -> tuple[float, float, int, int]:
    if x.size == 0:
        return -1.0, 1.0, -32768, 32767
    lo, hi = float(x.min()), float(x.max())
    if np.all(x == np.round(x)) and lo >= -32768 and hi <= 32767:
        return -32768.0, 32767.0, -32768, 32767
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    return float(_fmt_number(lo, -1)), float(_fmt_number(hi, +1)), -32768, 32767


def _tal(onset: float, duration: float | None, texts: list[str]) -> bytes:
    head = f"{onset:+g}".encode()
    if duration is not None:
        head += b"\x15" + f"{duration:g}".encode()
    return head + b"\x14" + b"".join(t.encode("utf-8") + b"\x14" for t in texts) + b"\x00"


def write_edf(
    path,
    recording: RawRecording,
    *,
    record_duration: float = 1.0,
    ranges: dict[str, tuple[float, float, int, int]] | None = None,
    annotations: list[tuple[float, float, str]] | None = None,
    patient: str = "X X X X",
    recording_id: str = "Startdate X X X X",
) -> None:
    """Write ``recording`` as EDF (or EDF+C when ``annotations`` is given).

    ``ranges`` maps channel label -> (physical_min, physical_max, digital_min,
    digital_max). Missing channels get identity scaling when the data are
    int16-representable integers, else a min/max fit.
    """
    ranges = ranges or {}
    ann = list(annotations or [])
    plus = annotations is not None
    rates = [c.sampling_rate for c in recording.channels]
    if recording.channels:
        n_records = int(round(recording.duration / record_duration))
        if not math.isclose(n_records * record_duration, recording.duration, rel_tol=0, abs_tol=1e-9):
            raise EDFError(f"duration {recording.duration} s is not a whole number of {record_duration} s records")
    else:
        n_records = 1
        record_duration = 0.0 if not plus else record_duration
    spr = []
    for r in rates:
        k = r * record_duration
        if not math.isclose(k, round(k)):
            raise EDFError(f"rate {r} Hz x record {record_duration} s is not an integer sample count")
        spr.append(int(round(k)))

    sig_headers: list[SignalHeader] = []
    digital_streams: list[np.ndarray] = []
    for c, n in zip(recording.channels, spr):
        pmin, pmax, dmin, dmax = ranges.get(c.label) or _auto_range(c.samples)
        pmin, pmax = float(_fmt_number(pmin)), float(_fmt_number(pmax))
        h = SignalHeader(c.label, "", "uV", pmin, pmax, int(dmin), int(dmax), "", n)
        d = np.round((c.samples - pmin) / h.scale + dmin)
        digital_streams.append(np.clip(d, dmin, dmax).astype("<i2").reshape(n_records, n))
        sig_headers.append(h)

    ann_blocks: list[bytes] = []
    if plus:
        for r in range(n_records):
            block = _tal(r * record_duration, None, [""])
            if r == 0:
                block += b"".join(_tal(o, d, [t]) for o, d, t in ann)
            ann_blocks.append(block)
        width = max(len(b) for b in ann_blocks)
        n_words = (width + 1) // 2
        sig_headers.append(SignalHeader(ANNOTATION_LABEL, "", "", -1.0, 1.0, -32768, 32767, "", n_words))
        raw = [np.frombuffer(b.ljust(2 * n_words, b"\x00"), dtype="<i2") for b in ann_blocks]
        digital_streams.append(np.stack(raw))

    ns = len(sig_headers)
    st = recording.start_time
    head = b"".join([
        _fmt_field("0", 8, "version"),
        _fmt_field(patient, 80, "patient"),
        _fmt_field(recording_id, 80, "recording"),
        _fmt_field(st.strftime("%d.%m.%y"), 8, "startdate"),
        _fmt_field(st.strftime("%H.%M.%S"), 8, "starttime"),
        _fmt_field(256 * (ns + 1), 8, "header_bytes"),
        _fmt_field("EDF+C" if plus else "", 44, "reserved"),
        _fmt_field(n_records, 8, "n_records"),
        _fmt_field(_fmt_number(record_duration), 8, "record_duration"),
        _fmt_field(ns, 4, "n_signals"),
    ])
    columns = {
        "label": [h.label for h in sig_headers],
        "transducer": [h.transducer for h in sig_headers],
        "physical_dimension": [h.physical_dimension for h in sig_headers],
        "physical_min": [_fmt_number(h.physical_min) for h in sig_headers],
        "physical_max": [_fmt_number(h.physical_max) for h in sig_headers],
        "digital_min": [h.digital_min for h in sig_headers],
        "digital_max": [h.digital_max for h in sig_headers],
        "prefiltering": [h.prefiltering for h in sig_headers],
        "samples_per_record": [h.samples_per_record for h in sig_headers],
        "reserved": ["" for _ in sig_headers],
    }
    for name, width in _SIGNAL_FIELDS:
        head += b"".join(_fmt_field(v, width, name) for v in columns[name])

    body = np.concatenate(digital_streams, axis=1) if digital_streams else np.zeros((n_records, 0), "<i2")
    with open(path, "wb") as f:
        f.write(head)
        f.write(body.astype("<i2").tobytes())
