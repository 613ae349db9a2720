"""Face-track record streams: parsing, validation, ordering and partitioning.

One record per line, as a JSON object::

    {"box": [cx, cy, h, w], "time": 1.24, "id": "spk_0",
     "visual": [...], "audio": [...], "label": 1}

``box`` is the face box centre, height and width, normalised to the frame.
``label`` is optional (1 = active speaker, 0 = not speaking).  Files may be
plain text or gzip compressed.
"""

from __future__ import annotations

import gzip
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

DEFAULT_DIM = 512


class RecordError(ValueError):
    """Raised for malformed or inconsistent record input."""


@dataclass(frozen=True)
class FaceRecord:
    box: tuple[float, float, float, float]
    time: float
    identity: str
    visual: np.ndarray
    audio: np.ndarray
    label: int | None = None

    @property
    def sort_key(self) -> tuple[float, str]:
        return (self.time, self.identity)

    def to_json(self) -> dict:
        out = {
            "box": [float(b) for b in self.box],
            "time": float(self.time),
            "id": self.identity,
            "visual": [float(x) for x in self.visual],
            "audio": [float(x) for x in self.audio],
        }
        if self.label is not None:
            out["label"] = int(self.label)
        return out

    def __eq__(self, other):
        if not isinstance(other, FaceRecord):
            return NotImplemented
        return (
            self.box == other.box
            and self.time == other.time
            and self.identity == other.identity
            and self.label == other.label
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.audio, other.audio)
        )

    __hash__ = None


@dataclass
class RecordStream:
    records: list[FaceRecord]
    d_visual: int
    d_audio: int
    source_id: str = ""

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labelled(self) -> bool:
        return all(r.label is not None for r in self.records)


@dataclass(frozen=True)
class StreamStats:
    n_records: int
    n_frames: int
    faces_per_frame: float
    time_span: float
    n_identities: int

    def as_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_frames": self.n_frames,
            "faces_per_frame": self.faces_per_frame,
            "time_span": self.time_span,
            "n_identities": self.n_identities,
        }


def _check_record(rec: FaceRecord, d_visual: int, d_audio: int, where: str) -> None:
    if len(rec.box) != 4:
        raise RecordError(f"{where}: box must have 4 components, got {len(rec.box)}")
    for b in rec.box:
        if not (0.0 <= b <= 1.0):
            raise RecordError(f"{where}: box component {b!r} outside [0, 1]")
    if not math.isfinite(rec.time) or rec.time < 0:
        raise RecordError(f"{where}: time must be finite and >= 0, got {rec.time!r}")
    if rec.visual.shape != (d_visual,):
        raise RecordError(
            f"{where}: visual feature length {rec.visual.size} != expected {d_visual}")
    if rec.audio.shape != (d_audio,):
        raise RecordError(
            f"{where}: audio feature length {rec.audio.size} != expected {d_audio}")
    if not (np.all(np.isfinite(rec.visual)) and np.all(np.isfinite(rec.audio))):
        raise RecordError(f"{where}: non-finite feature value")
    if rec.label not in (None, 0, 1):
        raise RecordError(f"{where}: label must be 0, 1 or absent, got {rec.label!r}")


def _record_from_obj(obj: dict, where: str) -> FaceRecord:
    if not isinstance(obj, dict):
        raise RecordError(f"{where}: expected a JSON object")
    try:
        box = tuple(float(b) for b in obj["box"])
        time = float(obj["time"])
        identity = str(obj["id"])
        visual = np.asarray(obj["visual"], dtype=np.float64)
        audio = np.asarray(obj["audio"], dtype=np.float64)
    except KeyError as exc:
        raise RecordError(f"{where}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise RecordError(f"{where}: {exc}") from None
    label = obj.get("label")
    if label is not None:
        if isinstance(label, bool) or label not in (0, 1):
            raise RecordError(f"{where}: label must be 0, 1 or absent, got {label!r}")
        label = int(label)
    if visual.ndim != 1 or audio.ndim != 1:
        raise RecordError(f"{where}: feature arrays must be flat")
    return FaceRecord(box, time, identity, visual, audio, label)


def make_stream(records: Iterable[FaceRecord], source_id: str = "",
                dims: tuple[int, int] | None = None) -> RecordStream:
    """Validate ``records`` and return them as a sorted stream."""
    records = list(records)
    if not records:
        raise RecordError("empty stream")
    if dims is None:
        dims = (records[0].visual.size, records[0].audio.size)
    d_visual, d_audio = dims
    seen = set()
    for k, rec in enumerate(records):
        _check_record(rec, d_visual, d_audio, f"record {k}")
        key = (rec.identity, rec.time)
        if key in seen:
            raise RecordError(
                f"record {k}: duplicate (identity, time) = ({rec.identity!r}, {rec.time!r})")
        seen.add(key)
    records.sort(key=lambda r: r.sort_key)
    return RecordStream(records, d_visual, d_audio, source_id)


def _open_text(source) -> IO[str]:
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
        if raw[:2] == b"\x1f\x8b":
            raw = gzip.decompress(raw)
        return io.StringIO(raw.decode("utf-8"))
    if hasattr(source, "read"):
        data = source.read()
        return _open_text(data.encode("utf-8") if isinstance(data, str) else data)
    path = Path(source)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def parse_records(source, dims: tuple[int, int] | None = None,
                  source_id: str | None = None) -> RecordStream:
    """Parse a line-delimited record stream.

    ``source`` may be a path, raw bytes (plain or gzip) or a file object.
    Feature dimensions are inferred from the first record unless ``dims``
    overrides them.  Errors carry the 1-based line number.
    """
    if source_id is None:
        source_id = str(source) if isinstance(source, (str, Path)) else ""
    records = []
    with _open_text(source) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{where}: malformed record ({exc.msg})") from None
            rec = _record_from_obj(obj, where)
            if dims is None:
                dims = (rec.visual.size, rec.audio.size)
            _check_record(rec, dims[0], dims[1], where)
            records.append((lineno, rec))
    if not records:
        raise RecordError("empty stream")
    seen = {}
    for lineno, rec in records:
        key = (rec.identity, rec.time)
        if key in seen:
            raise RecordError(
                f"line {lineno}: duplicate (identity, time) = ({rec.identity!r}, "
                f"{rec.time!r}), first seen on line {seen[key]}")
        seen[key] = lineno
    out = [rec for _, rec in records]
    out.sort(key=lambda r: r.sort_key)
    return RecordStream(out, dims[0], dims[1], source_id)


def serialize_records(stream: RecordStream | Sequence[FaceRecord], fh: IO[str]) -> None:
    for rec in stream:
        fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
        fh.write("\n")


def write_records(stream: RecordStream, path) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wt", encoding="utf-8") as fh:
            serialize_records(stream, fh)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            serialize_records(stream, fh)


def sort_and_partition(stream: RecordStream, n: int) -> list[list[FaceRecord]]:
    """Split the (time, identity)-sorted stream into consecutive chunks of n.

    Every chunk but the last holds exactly ``n`` records.  Chunks may cut a
    face track; graph edges never cross chunk boundaries.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    ordered = sorted(stream.records, key=lambda r: r.sort_key)
    return [ordered[i:i + n] for i in range(0, len(ordered), n)]


def stream_stats(stream: RecordStream | Sequence[FaceRecord]) -> StreamStats:
    records = list(stream)
    times = [r.time for r in records]
    n_frames = len(set(times))
    return StreamStats(
        n_records=len(records),
        n_frames=n_frames,
        faces_per_frame=len(records) / n_frames,
        time_span=max(times) - min(times),
        n_identities=len({r.identity for r in records}),
    )
