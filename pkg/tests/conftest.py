import json

import numpy as np
import pytest

from procsight.ingest import ProcessActivity, SysmonEvent, format_utc, parse_utc

T0 = parse_utc("2023-01-01 00:00:00.000")


def raw_event(event_id, guid="{11111111-2222-3333-4444-555555555555}", t_ms=T0, machine="W7-1", **data):
    """An evtx_dump-shaped record."""
    return {
        "Event": {
            "System": {"EventID": event_id, "Computer": machine},
            "EventData": dict(data, UtcTime=format_utc(t_ms), ProcessGuid=guid),
        }
    }


def event(event_id, t_ms=0, guid="G1", machine="W7-1", event_type=None, **attrs):
    """A parsed event at ``T0 + t_ms``."""
    attrs = {k: str(v) for k, v in attrs.items()}
    return SysmonEvent(event_id, guid, machine, T0 + t_ms, event_type, attrs)


def activity(events, hollows=None, label="unknown"):
    events = tuple(sorted(events, key=lambda e: e.utc_time))
    return ProcessActivity(
        events[0].process_guid, events[0].machine, events[0].utc_time, events, hollows, label, events[0].event_id != 1
    )


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------- acceptance verdicts

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
