"""Sysmon newline-JSON ingestion and per-process activity reconstruction.

Input lines follow the evtx_dump layout (``{"Event": {"System": ..., "EventData": ...}}``);
flat objects carrying the same keys at top level are accepted too.
Timestamps are held as integer milliseconds since the Unix epoch (UTC).
"""

from __future__ import annotations

import bisect
import calendar
import json
import logging
import re
import uuid
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .errors import ParseError, SchemaError, ValidationError, VersionError

log = logging.getLogger(__name__)

COLLECTED_EVENT_IDS = frozenset({1, 2, 3, 5, 7, 8, 11, 12, 13, 14, 22})
ANALYSED_EVENT_IDS = (1, 3, 5, 12, 13)
REGISTRY_EVENT_IDS = frozenset({12, 13, 14})

LABELS = ("benign", "malicious", "unknown")

STORE_FORMAT = "procsight.activities"
STORE_VERSION = 1

HOLLOWS_COUNT_FIELDS = (
    "is_managed",
    "replaced",
    "hdr_modified",
    "total_modified",
    "patched",
    "iat_hooked",
    "implanted_shc",
    "unreachable_file",
    "other",
    "implanted_pe",
)

_TIME_RE = re.compile(
    r"^\s*(\d{4})-(\d{2})-(\d{2})[ T](\d{2}):(\d{2}):(\d{2})(?:\.(\d+))?\s*(Z|[+-]\d{2}:?\d{2})?\s*$"
)
_DEGENERATE_GUID_RE = re.compile(
    r"^\{?[0-9a-fA-F]{8}-0000-0000-0000-[0-9a-fA-F]{12}\}?$"
)
_GUID_NAMESPACE = uuid.UUID("6f1c7f3e-2b7c-4d55-9a43-0c1f2d9b8e11")
ORPHAN_BUCKET_MS = 120_000


def parse_utc(text: str) -> int:
    """Parse a Sysmon ``UtcTime`` or ISO ``SystemTime`` string to epoch milliseconds.

    Sub-millisecond digits are truncated, never rounded.
    """
    m = _TIME_RE.match(str(text))
    if m is None:
        raise SchemaError(f"unparseable timestamp {text!r}", field="UtcTime")
    year, month, day, hh, mm, ss = (int(g) for g in m.groups()[:6])
    frac, tz = m.group(7), m.group(8)
    try:
        dt = datetime(year, month, day, hh, mm, ss)
    except ValueError as exc:
        raise SchemaError(f"invalid timestamp {text!r}: {exc}", field="UtcTime") from None
    ms = calendar.timegm(dt.timetuple()) * 1000
    if frac:
        ms += int((frac + "00")[:3])
    if tz and tz != "Z":
        sign = 1 if tz[0] == "+" else -1
        digits = tz[1:].replace(":", "")
        ms -= sign * (int(digits[:2]) * 3600 + int(digits[2:]) * 60) * 1000
    return ms


def format_utc(ms: int) -> str:
    """Inverse of :func:`parse_utc` in Sysmon's ``YYYY-MM-DD HH:MM:SS.mmm`` form."""
    secs, rem = divmod(int(ms), 1000)
    dt = datetime.fromtimestamp(secs, tz=timezone.utc)
    return dt.strftime("%Y-%m-%d %H:%M:%S") + f".{rem:03d}"


@dataclass(frozen=True)
class SysmonEvent:
    event_id: int
    process_guid: str
    machine: str
    utc_time: int
    event_type: Optional[str] = None
    attributes: dict = field(default_factory=dict, compare=True)

    @property
    def pid(self) -> Optional[int]:
        raw = self.attributes.get("SourceProcessId" if self.event_id == 8 else "ProcessId")
        try:
            return int(raw)
        except (TypeError, ValueError):
            return None

    def to_record(self) -> dict:
        rec = {
            "event_id": self.event_id,
            "process_guid": self.process_guid,
            "machine": self.machine,
            "utc_time": format_utc(self.utc_time),
            "attributes": self.attributes,
        }
        if self.event_type is not None:
            rec["event_type"] = self.event_type
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SysmonEvent":
        return cls(
            event_id=int(rec["event_id"]),
            process_guid=rec["process_guid"],
            machine=rec["machine"],
            utc_time=parse_utc(rec["utc_time"]),
            event_type=rec.get("event_type"),
            attributes=dict(rec.get("attributes", {})),
        )


@dataclass(frozen=True)
class HollowsReport:
    pid: int
    machine: str
    scan_time: int
    is_managed: int = 0
    replaced: int = 0
    hdr_modified: int = 0
    total_modified: int = 0
    patched: int = 0
    iat_hooked: int = 0
    implanted_shc: int = 0
    unreachable_file: int = 0
    other: int = 0
    implanted_pe: int = 0

    def __post_init__(self):
        for name in HOLLOWS_COUNT_FIELDS:
            if getattr(self, name) < 0:
                raise SchemaError(f"hollows count {name} is negative", field=name)

    def counts(self) -> tuple:
        return tuple(getattr(self, name) for name in HOLLOWS_COUNT_FIELDS)

    def to_record(self) -> dict:
        rec = {"pid": self.pid, "machine": self.machine, "scan_time": format_utc(self.scan_time)}
        rec.update(zip(HOLLOWS_COUNT_FIELDS, self.counts()))
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "HollowsReport":
        try:
            scan = rec["scan_time"]
            return cls(
                pid=int(rec["pid"]),
                machine=str(rec["machine"]),
                scan_time=scan if isinstance(scan, int) else parse_utc(scan),
                **{name: int(rec.get(name, 0)) for name in HOLLOWS_COUNT_FIELDS},
            )
        except KeyError as exc:
            raise SchemaError(f"hollows report missing {exc.args[0]!r}", field=exc.args[0]) from None


@dataclass(frozen=True)
class ProcessActivity:
    process_guid: str
    machine: str
    origin_time: int
    events: tuple
    hollows: Optional[HollowsReport] = None
    label: str = "unknown"
    orphan: bool = False

    @property
    def pid(self) -> Optional[int]:
        """ProcessId of the creation event; ``None`` for orphans."""
        if self.orphan:
            return None
        return self.events[0].pid

    def to_record(self) -> dict:
        return {
            "process_guid": self.process_guid,
            "machine": self.machine,
            "origin_time": format_utc(self.origin_time),
            "label": self.label,
            "orphan": self.orphan,
            "hollows": None if self.hollows is None else self.hollows.to_record(),
            "events": [e.to_record() for e in self.events],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ProcessActivity":
        hollows = rec.get("hollows")
        return cls(
            process_guid=rec["process_guid"],
            machine=rec["machine"],
            origin_time=parse_utc(rec["origin_time"]),
            events=tuple(SysmonEvent.from_record(e) for e in rec["events"]),
            hollows=None if hollows is None else HollowsReport.from_record(hollows),
            label=rec.get("label", "unknown"),
            orphan=bool(rec.get("orphan", False)),
        )


# --------------------------------------------------------------------------- parsing


def _scalar(value):
    if isinstance(value, dict):
        # evtx_dump renders attributed elements as {"#text": ..., "#attributes": ...}
        return _scalar(value["#text"]) if "#text" in value else None
    if isinstance(value, list):
        return None
    return value


def _as_attr(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _split_record(obj: dict) -> tuple:
    if "Event" in obj and isinstance(obj["Event"], dict):
        event = obj["Event"]
        return event.get("System") or {}, event.get("EventData") or {}
    # flat record: System and EventData keys side by side
    return obj, obj


def parse_event_line(line, line_no: Optional[int] = None, source=None) -> SysmonEvent:
    """Parse one evtx_dump JSON line into a :class:`SysmonEvent`."""
    if isinstance(line, bytes):
        line = line.decode("utf-8")
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        offset = len(line[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed JSON: {exc.msg}", offset=offset, line_no=line_no, source=source) from None
    if not isinstance(obj, dict):
        raise ParseError("record is not a JSON object", offset=0, line_no=line_no, source=source)

    system, data = _split_record(obj)
    raw_id = _scalar(system.get("EventID", data.get("EventID")))
    if raw_id is None:
        raise SchemaError("record has no EventID", field="EventID")
    try:
        event_id = int(raw_id)
    except (TypeError, ValueError):
        raise SchemaError(f"non-integer EventID {raw_id!r}", field="EventID") from None
    if event_id not in COLLECTED_EVENT_IDS:
        raise SchemaError(f"EventID {event_id} is not in the collected set", field="EventID")

    raw_time = _scalar(data.get("UtcTime"))
    if raw_time is None:
        created = system.get("TimeCreated")
        if isinstance(created, dict):
            raw_time = (created.get("#attributes") or {}).get("SystemTime")
    if raw_time is None:
        raise SchemaError("record has no UtcTime", field="UtcTime")
    utc_time = parse_utc(raw_time)

    guid_field = "SourceProcessGuid" if event_id == 8 else "ProcessGuid"
    guid = _scalar(data.get(guid_field))
    if not guid:
        raise SchemaError(f"EventID {event_id} requires {guid_field}", field=guid_field)

    machine = _scalar(system.get("Computer", data.get("machine")))
    if not machine:
        raise SchemaError("record has no Computer", field="Computer")

    event_type = None
    attributes = {}
    skip = {"EventID", "UtcTime", guid_field, "Computer", "EventType"}
    for key, value in data.items():
        if key in skip:
            continue
        value = _scalar(value)
        if value is None:
            continue
        attributes[key] = _as_attr(value)
    if event_id in REGISTRY_EVENT_IDS and data.get("EventType") is not None:
        event_type = str(_scalar(data["EventType"]))
    elif data.get("EventType") is not None:
        attributes["EventType"] = _as_attr(_scalar(data["EventType"]))

    return SysmonEvent(
        event_id=event_id,
        process_guid=str(guid),
        machine=str(machine),
        utc_time=utc_time,
        event_type=event_type,
        attributes=attributes,
    )


def _iter_lines(path) -> Iterator[tuple]:
    offset = 0
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh, start=1):
            yield line_no, offset, raw
            offset += len(raw)


def read_events(paths: Iterable, skip_uncollected: bool = True) -> list:
    """Read every event from a set of newline-JSON files.

    Records whose EventID lies outside the collected set are dropped when
    ``skip_uncollected`` is set, otherwise they raise.
    """
    events = []
    skipped = 0
    for path in paths:
        for line_no, offset, raw in _iter_lines(path):
            if not raw.strip():
                continue
            try:
                events.append(parse_event_line(raw, line_no=line_no, source=path))
            except ParseError as exc:
                raise ParseError(exc.reason, offset=offset + (exc.offset or 0), line_no=line_no, source=path) from None
            except SchemaError as exc:
                if skip_uncollected and exc.field == "EventID" and "collected" in str(exc):
                    skipped += 1
                    continue
                raise SchemaError(f"{path}:line {line_no}: {exc}", field=exc.field) from None
    if skipped:
        log.info("skipped %d records outside the collected event set", skipped)
    return events


def read_hollows(path) -> list:
    reports = []
    for line_no, offset, raw in _iter_lines(path):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", offset=offset + exc.pos, line_no=line_no, source=path) from None
        reports.append(HollowsReport.from_record(rec))
    return reports


# --------------------------------------------------------------------------- reconstruction


def filter_events(events: Iterable[SysmonEvent]) -> list:
    return [e for e in events if e.event_id in ANALYSED_EVENT_IDS]


def is_degenerate_guid(guid: str) -> bool:
    return bool(_DEGENERATE_GUID_RE.match(guid))


def _synthetic_guid(*parts) -> str:
    return "{" + str(uuid.uuid5(_GUID_NAMESPACE, "|".join(str(p) for p in parts))) + "}"


def resolve_guid_collisions(events: list) -> tuple:
    """Rewrite degenerate (zero middle part) ProcessGuids to per-process synthetic ones.

    Each event under a degenerate guid is anchored to the latest creation
    event with the same (guid, machine, pid) at or before it; the anchor's
    creation time separates processes that reused the guid. Events with no
    preceding creation fall back to a 120 s bucket of their own timestamp.

    Returns ``(events, n_rewritten)``.
    """
    creations = defaultdict(list)
    for e in events:
        if e.event_id == 1 and is_degenerate_guid(e.process_guid):
            creations[(e.process_guid, e.machine, e.pid)].append(e.utc_time)
    for times in creations.values():
        times.sort()

    out = []
    rewritten = 0
    for e in events:
        if not is_degenerate_guid(e.process_guid):
            out.append(e)
            continue
        key = (e.process_guid, e.machine, e.pid)
        times = creations.get(key, [])
        idx = bisect.bisect_right(times, e.utc_time) - 1
        if idx >= 0:
            anchor = f"created@{times[idx]}"
        else:
            anchor = f"bucket@{e.utc_time // ORPHAN_BUCKET_MS}"
        attrs = dict(e.attributes)
        attrs["OriginalProcessGuid"] = e.process_guid
        out.append(replace(e, process_guid=_synthetic_guid(*key, anchor), attributes=attrs))
        rewritten += 1
    if rewritten:
        log.info("rewrote %d events carrying degenerate ProcessGuids", rewritten)
    return out, rewritten


def correlate(events: Iterable[SysmonEvent]) -> list:
    """Group events by ProcessGuid into time-ordered activities.

    Activities come out in order of first appearance in the input; ties in
    timestamp keep input order.
    """
    groups = {}
    for e in events:
        groups.setdefault(e.process_guid, []).append(e)
    activities = []
    for guid, evs in groups.items():
        evs.sort(key=lambda e: e.utc_time)
        activities.append(
            ProcessActivity(
                process_guid=guid,
                machine=evs[0].machine,
                origin_time=evs[0].utc_time,
                events=tuple(evs),
                orphan=evs[0].event_id != 1,
            )
        )
    return activities


def attach_hollows(activities: list, reports: list, window_secs: float = 120.0) -> tuple:
    """Join hollowing reports onto activities by (machine, pid, scan time in window).

    Matching is one-to-one. Candidate pairs are taken greedily in order of
    scan delay after the activity's origin, so each activity receives its
    closest report. Returns ``(activities, unmatched_reports)``.
    """
    if window_secs <= 0:
        raise ValidationError("window must be positive")
    window_ms = int(round(window_secs * 1000))
    by_key = defaultdict(list)
    for ai, act in enumerate(activities):
        if act.pid is not None:
            by_key[(act.machine, act.pid)].append(ai)

    pairs = []
    for ri, rep in enumerate(reports):
        for ai in by_key.get((rep.machine, rep.pid), ()):
            delay = rep.scan_time - activities[ai].origin_time
            if 0 <= delay <= window_ms:
                pairs.append((delay, ai, ri))
    pairs.sort()

    taken_act, taken_rep = {}, set()
    for delay, ai, ri in pairs:
        if ai in taken_act or ri in taken_rep:
            continue
        taken_act[ai] = ri
        taken_rep.add(ri)

    out = [
        replace(act, hollows=reports[taken_act[ai]]) if ai in taken_act else act
        for ai, act in enumerate(activities)
    ]
    unmatched = [rep for ri, rep in enumerate(reports) if ri not in taken_rep]
    return out, unmatched


def apply_labels(activities: list, labels: dict, fallback: Optional[dict] = None) -> list:
    """Set activity labels from a guid-keyed map.

    ``fallback`` maps ``(machine, pid, origin_ms)`` to a label and covers
    activities whose guid was rewritten by :func:`resolve_guid_collisions`.
    """
    out = []
    for act in activities:
        label = labels.get(act.process_guid)
        if label is None and fallback is not None:
            label = fallback.get((act.machine, act.pid, act.origin_time))
        out.append(replace(act, label=label or "unknown"))
    return out


# --------------------------------------------------------------------------- activity store


def write_activities(activities: list, path, meta: Optional[dict] = None) -> None:
    header = {"format": STORE_FORMAT, "format_version": STORE_VERSION, "count": len(activities)}
    if meta:
        header.update(meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for act in activities:
            fh.write(json.dumps(act.to_record(), sort_keys=True) + "\n")


def read_activities(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ParseError("empty activity store", source=path)
    header = json.loads(lines[0])
    if header.get("format") != STORE_FORMAT:
        raise SchemaError(f"{path} is not an activity store", field="format")
    if header.get("format_version") != STORE_VERSION:
        raise VersionError(header.get("format_version"), STORE_VERSION)
    return [ProcessActivity.from_record(json.loads(ln)) for ln in lines[1:]]


def ingest(event_paths, hollows_path=None, window_secs: float = 120.0) -> tuple:
    """Parse, filter, repair, correlate and join; returns ``(activities, stats)``."""
    events = read_events([Path(p) for p in event_paths])
    kept = filter_events(events)
    kept, rewritten = resolve_guid_collisions(kept)
    activities = correlate(kept)
    unmatched = []
    if hollows_path is not None:
        activities, unmatched = attach_hollows(activities, read_hollows(hollows_path), window_secs)
    stats = {
        "events_read": len(events),
        "events_kept": len(kept),
        "guid_rewrites": rewritten,
        "activities": len(activities),
        "orphans": sum(a.orphan for a in activities),
        "hollows_attached": sum(a.hollows is not None for a in activities),
        "hollows_unmatched": len(unmatched),
    }
    return activities, stats
