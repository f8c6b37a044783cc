"""Feature encodings for process activities and machine utilisation series."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import OrderingError, SchemaError, ValidationError, VersionError
from .ingest import ANALYSED_EVENT_IDS, HOLLOWS_COUNT_FIELDS, ProcessActivity, SysmonEvent

SCHEMA_VERSION = 1
WINDOW_MS = 120_000

EVENT_ONLY = "event_only_5"
COMPLETE = "complete_31"
MACHINE = "machine_10"


@dataclass(frozen=True)
class FeatureSchema:
    schema_id: str
    columns: tuple
    kinds: tuple

    @property
    def width(self) -> int:
        return len(self.columns)

    def index(self, column: str) -> int:
        return self.columns.index(column)

    def to_dict(self) -> dict:
        return {
            "schema_id": self.schema_id,
            "version": SCHEMA_VERSION,
            "columns": [{"name": c, "kind": k} for c, k in zip(self.columns, self.kinds)],
        }


def _schema(schema_id, spec):
    return FeatureSchema(schema_id, tuple(c for c, _ in spec), tuple(k for _, k in spec))


_EVENT_ID_COLUMNS = [(f"EventID_{i}", "one-hot-member") for i in ANALYSED_EVENT_IDS]

SCHEMAS = {
    EVENT_ONLY: _schema(EVENT_ONLY, _EVENT_ID_COLUMNS),
    COMPLETE: _schema(
        COMPLETE,
        [(name, "count") for name in HOLLOWS_COUNT_FIELDS]
        + [
            ("SameImageLoaded", "binary-flag"),
            ("SignatureStatus", "binary-flag"),
            ("Signed", "binary-flag"),
            ("Signed_Failed", "binary-flag"),
            ("Protocol_udp", "one-hot-member"),
            ("Protocol_tcp", "one-hot-member"),
            ("DPortName_http", "one-hot-member"),
            ("DPortName_https", "one-hot-member"),
            ("DPortName_other", "one-hot-member"),
            ("IntegrityLevel_High", "one-hot-member"),
            ("IntegrityLevel_Low", "one-hot-member"),
            ("IntegrityLevel_Medium", "one-hot-member"),
            ("IntegrityLevel_System", "one-hot-member"),
        ]
        + _EVENT_ID_COLUMNS
        + [
            ("EventType_DeleteValue", "one-hot-member"),
            ("EventType_SetValue", "one-hot-member"),
            ("timestamp", "milliseconds"),
        ],
    ),
    MACHINE: _schema(
        MACHINE,
        [
            ("cpu_system", "percent"),
            ("cpu_user", "percent"),
            ("mem", "bytes"),
            ("swap", "bytes"),
            ("total_procs", "count"),
            ("max_pid", "count"),
            ("bytes_sent", "bytes"),
            ("bytes_recv", "bytes"),
            ("pkts_sent", "count"),
            ("pkts_recv", "count"),
        ],
    ),
}

# CLI / config spellings
SCHEMA_ALIASES = {"event_only": EVENT_ONLY, "complete": COMPLETE, "machine": MACHINE}


def resolve_schema(name: str) -> FeatureSchema:
    key = SCHEMA_ALIASES.get(name, name)
    if key not in SCHEMAS:
        raise ValidationError(f"unknown schema id {name!r}; expected one of {sorted(SCHEMAS)}")
    return SCHEMAS[key]


def schema_registry() -> dict:
    return {"version": SCHEMA_VERSION, "schemas": [s.to_dict() for s in SCHEMAS.values()]}


@dataclass
class FeatureSequence:
    """One labelled sequence of fixed-width vectors.

    ``times_ms`` holds the offset of each row from the sequence origin; for
    machine series that is the snapshot second times 1000.
    """

    schema_id: str
    vectors: np.ndarray
    times_ms: np.ndarray
    label: str
    source_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.times_ms = np.asarray(self.times_ms, dtype=np.int64)
        width = SCHEMAS[self.schema_id].width
        if self.vectors.ndim != 2 or self.vectors.shape[1] != width:
            raise SchemaError(f"{self.schema_id} vectors must have width {width}, got {self.vectors.shape}")
        if len(self.times_ms) != len(self.vectors):
            raise SchemaError("times_ms and vectors differ in length")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def y(self) -> int:
        return 1 if self.label == "malicious" else 0


# --------------------------------------------------------------------------- process schemas


def relative_timestamp(event: SysmonEvent, origin: int) -> int:
    delta = event.utc_time - origin
    if delta < 0:
        raise OrderingError(f"event at {event.utc_time} precedes origin {origin}")
    return int(delta)


def _check_ids(activity: ProcessActivity):
    for i, e in enumerate(activity.events):
        if e.event_id not in ANALYSED_EVENT_IDS:
            raise SchemaError(f"event {i} of {activity.process_guid} has id {e.event_id}", field="EventID")


def _label(activity: ProcessActivity) -> str:
    if activity.label not in ("benign", "malicious"):
        raise SchemaError(f"activity {activity.process_guid} is unlabelled", field="label")
    return activity.label


def encode_event_only(activity: ProcessActivity) -> FeatureSequence:
    _check_ids(activity)
    vectors = np.zeros((len(activity.events), 5))
    for row, e in enumerate(activity.events):
        vectors[row, ANALYSED_EVENT_IDS.index(e.event_id)] = 1.0
    times = [relative_timestamp(e, activity.origin_time) for e in activity.events]
    return FeatureSequence(EVENT_ONLY, vectors, times, _label(activity), activity.process_guid)


_TRUE = {"true", "1", "yes"}
_INTEGRITY = {"high": "High", "low": "Low", "medium": "Medium", "system": "System"}


def _flag(attrs: dict, key: str) -> float:
    return 1.0 if attrs.get(key, "").strip().lower() in _TRUE else 0.0


def _encode_event(e: SysmonEvent, ts: int, out: np.ndarray, col: dict, diagnostics: Counter):
    attrs = e.attributes
    # Signature columns are read off whichever retained event carries them; absent -> 0.
    out[col["SameImageLoaded"]] = _flag(attrs, "SameImageLoaded")
    out[col["Signed"]] = _flag(attrs, "Signed")
    status = attrs.get("SignatureStatus")
    if status is not None:
        if status.strip().lower() == "valid":
            out[col["SignatureStatus"]] = 1.0
        else:
            out[col["Signed_Failed"]] = 1.0

    if e.event_id == 3:
        proto = attrs.get("Protocol", "").strip().lower()
        if proto in ("tcp", "udp"):
            out[col[f"Protocol_{proto}"]] = 1.0
        port = attrs.get("DestinationPortName", "").strip().lower()
        out[col[f"DPortName_{port}" if port in ("http", "https") else "DPortName_other"]] = 1.0

    level = attrs.get("IntegrityLevel")
    if level is not None:
        name = _INTEGRITY.get(level.strip().lower())
        if name is None:
            diagnostics["unknown_integrity_level"] += 1
        else:
            out[col[f"IntegrityLevel_{name}"]] = 1.0

    out[col[f"EventID_{e.event_id}"]] = 1.0
    if e.event_type in ("DeleteValue", "SetValue"):
        out[col[f"EventType_{e.event_type}"]] = 1.0
    out[col["timestamp"]] = ts


def encode_complete(
    activity: ProcessActivity,
    timestamp_scale: Optional[float] = None,
    diagnostics: Optional[Counter] = None,
) -> FeatureSequence:
    """Encode an activity with the 31-column schema.

    ``timestamp_scale`` divides the timestamp column (e.g. by the 120 000 ms
    window); ``times_ms`` always keeps raw offsets.
    """
    _check_ids(activity)
    schema = SCHEMAS[COMPLETE]
    col = {name: i for i, name in enumerate(schema.columns)}
    diagnostics = Counter() if diagnostics is None else diagnostics
    vectors = np.zeros((len(activity.events), schema.width))
    times = []
    for row, e in enumerate(activity.events):
        ts = relative_timestamp(e, activity.origin_time)
        times.append(ts)
        _encode_event(e, ts, vectors[row], col, diagnostics)
    if timestamp_scale:
        vectors[:, col["timestamp"]] /= timestamp_scale
    if activity.hollows is not None:
        vectors[:, : len(HOLLOWS_COUNT_FIELDS)] = activity.hollows.counts()
    return FeatureSequence(COMPLETE, vectors, times, _label(activity), activity.process_guid)


# --------------------------------------------------------------------------- machine schema


@dataclass(frozen=True)
class MachineSnapshot:
    t: int
    cpu_system_pct: float
    cpu_user_pct: float
    mem_used: float
    swap_used: float
    total_procs: int
    max_pid: int
    bytes_sent: float
    bytes_recv: float
    pkts_sent: float
    pkts_recv: float

    def as_row(self) -> list:
        return [
            self.cpu_system_pct,
            self.cpu_user_pct,
            self.mem_used,
            self.swap_used,
            self.total_procs,
            self.max_pid,
            self.bytes_sent,
            self.bytes_recv,
            self.pkts_sent,
            self.pkts_recv,
        ]


@dataclass
class MachineSeries:
    machine: str
    window: int
    snapshots: list
    label: str = "unknown"

    @property
    def source_id(self) -> str:
        return f"{self.machine}@{self.window}"


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)

    @property
    def scale(self) -> np.ndarray:
        # zero-variance columns are only shifted
        return np.where(self.std > 0, self.std, 1.0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.scale + self.mean

    @classmethod
    def fit(cls, sequences: Sequence[FeatureSequence]) -> "NormStats":
        rows = np.concatenate([s.vectors for s in sequences], axis=0)
        return cls(rows.mean(axis=0), rows.std(axis=0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def encode_machine(series, stats: Optional[NormStats] = None, label=None, source_id=None) -> FeatureSequence:
    """Encode a per-second snapshot list (or a :class:`MachineSeries`)."""
    if isinstance(series, MachineSeries):
        label = series.label if label is None else label
        source_id = series.source_id if source_id is None else source_id
        series = series.snapshots
    ts = [s.t for s in series]
    if any(b <= a for a, b in zip(ts, ts[1:])) or (ts and ts[0] < 0):
        raise OrderingError("machine snapshots must have strictly increasing t >= 0")
    vectors = np.array([s.as_row() for s in series], dtype=np.float64).reshape(len(series), 10)
    if stats is not None:
        vectors = stats.apply(vectors)
    return FeatureSequence(
        MACHINE,
        vectors,
        [t * 1000 for t in ts],
        label if label is not None else "benign",
        source_id or "machine",
    )


# --------------------------------------------------------------------------- truncation


def truncate_to_horizon(seq: FeatureSequence, t: int) -> FeatureSequence:
    """Keep what is observable ``t`` seconds after the sequence origin."""
    if t < 1:
        raise ValidationError("horizon must be >= 1 second")
    if seq.schema_id == MACHINE:
        n = min(int(t), len(seq))
    else:
        n = int(np.searchsorted(seq.times_ms, int(t) * 1000, side="right"))
    return FeatureSequence(seq.schema_id, seq.vectors[:n], seq.times_ms[:n], seq.label, seq.source_id)


# --------------------------------------------------------------------------- matrix files

MATRIX_FORMAT = "procsight.matrix"


def write_matrix(sequences: Sequence[FeatureSequence], path, schema_id: Optional[str] = None, meta=None) -> None:
    schema_id = schema_id or (sequences[0].schema_id if sequences else None)
    if schema_id is None:
        raise ValidationError("cannot infer schema of an empty matrix file")
    header = {
        "format": MATRIX_FORMAT,
        "format_version": SCHEMA_VERSION,
        "schema_id": schema_id,
        "width": SCHEMAS[schema_id].width,
        "count": len(sequences),
        "columns": list(SCHEMAS[schema_id].columns),
    }
    if meta:
        header.update(meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in sequences:
            if s.schema_id != schema_id:
                raise SchemaError(f"sequence {s.source_id} has schema {s.schema_id}, file is {schema_id}")
            rec = {
                "source_id": s.source_id,
                "label": s.label,
                "times_ms": s.times_ms.tolist(),
                "rows": s.vectors.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def read_matrix(path) -> tuple:
    """Returns ``(header, sequences)``."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise SchemaError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != MATRIX_FORMAT:
        raise SchemaError(f"{path} is not a feature matrix file", field="format")
    if header.get("format_version") != SCHEMA_VERSION:
        raise VersionError(header.get("format_version"), SCHEMA_VERSION)
    schema_id = header["schema_id"]
    seqs = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        rows = np.array(rec["rows"], dtype=np.float64).reshape(-1, header["width"])
        seqs.append(FeatureSequence(schema_id, rows, rec["times_ms"], rec["label"], rec["source_id"]))
    if len(seqs) != header["count"]:
        raise SchemaError(f"{path}: header count {header['count']} but {len(seqs)} records")
    return header, seqs
