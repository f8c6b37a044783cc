import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import T0, activity, event, raw_event, write_jsonl
from procsight.campaign import CampaignConfig, generate_dataset, manifest_labels, write_dataset
from procsight.errors import ParseError, SchemaError, ValidationError, VersionError
from procsight.ingest import (
    HollowsReport,
    apply_labels,
    attach_hollows,
    correlate,
    filter_events,
    format_utc,
    ingest,
    is_degenerate_guid,
    parse_event_line,
    parse_utc,
    read_activities,
    read_events,
    resolve_guid_collisions,
    write_activities,
)

DEGENERATE = "{5770385f-0000-0000-0000-000000000000}"


# --------------------------------------------------------------------------- parsing


def test_parse_creation_record():
    line = json.dumps(raw_event(1, guid="G1", t_ms=T0, ProcessId=404, IntegrityLevel="Medium"))
    e = parse_event_line(line)
    assert (e.event_id, e.process_guid, e.machine, e.utc_time) == (1, "G1", "W7-1", T0)
    assert e.attributes["IntegrityLevel"] == "Medium"
    assert e.pid == 404
    assert e.event_type is None


def test_parse_registry_event_type():
    e = parse_event_line(json.dumps(raw_event(13, EventType="SetValue", TargetObject="HKLM\\x")))
    assert e.event_type == "SetValue"
    assert "EventType" not in e.attributes


def test_parse_flat_record():
    rec = {"EventID": 3, "Computer": "W7-2", "UtcTime": "2023-01-01 00:00:01.500", "ProcessGuid": "G2",
           "Protocol": "tcp", "Initiated": True}
    e = parse_event_line(json.dumps(rec))
    assert e.machine == "W7-2"
    assert e.utc_time == T0 + 1500
    assert e.attributes == {"Protocol": "tcp", "Initiated": "true"}


def test_parse_evtx_attribute_wrappers():
    rec = raw_event(1, guid="G1")
    rec["Event"]["System"]["EventID"] = {"#text": 1, "#attributes": {"Qualifiers": ""}}
    assert parse_event_line(json.dumps(rec)).event_id == 1


def test_missing_timestamp_is_schema_error():
    with pytest.raises(SchemaError) as info:
        parse_event_line('{"EventID": 1}')
    assert info.value.field == "UtcTime"


def test_missing_event_id_and_guid():
    with pytest.raises(SchemaError) as info:
        parse_event_line('{"UtcTime": "2023-01-01 00:00:00.000"}')
    assert info.value.field == "EventID"
    with pytest.raises(SchemaError) as info:
        parse_event_line('{"EventID": 3, "Computer": "W7-1", "UtcTime": "2023-01-01 00:00:00.000"}')
    assert info.value.field == "ProcessGuid"


def test_malformed_json_reports_byte_offset(tmp_path):
    good = json.dumps(raw_event(1))
    path = tmp_path / "ev.jsonl"
    path.write_text(good + "\n" + '{"EventID": 1, oops}\n', encoding="utf-8")
    with pytest.raises(ParseError) as info:
        read_events([path])
    err = info.value
    assert err.line_no == 2
    # offset points into the second line, at the bad token
    assert err.offset == len(good) + 1 + len('{"EventID": 1, ')


def test_read_events_skips_uncollected_ids(tmp_path):
    path = write_jsonl(tmp_path / "ev.jsonl", [raw_event(1), raw_event(4104), raw_event(3)])
    assert [e.event_id for e in read_events([path])] == [1, 3]
    with pytest.raises(SchemaError):
        read_events([path], skip_uncollected=False)


@given(st.integers(min_value=0, max_value=4_102_444_800_000))
def test_utc_round_trip(ms):
    assert parse_utc(format_utc(ms)) == ms


def test_parse_utc_accepts_iso_variants():
    assert parse_utc("2023-01-01T00:00:00.123456Z") == T0 + 123
    assert parse_utc("2023-01-01 00:00:01") == T0 + 1000


# --------------------------------------------------------------------------- filtering


def test_filter_examples():
    assert [e.event_id for e in filter_events([event(1), event(22), event(3)])] == [1, 3]
    assert filter_events([]) == []
    assert filter_events([event(7), event(11)]) == []


@given(st.lists(st.sampled_from([1, 2, 3, 5, 7, 8, 11, 12, 13, 14, 22]), max_size=40))
def test_filter_idempotent_and_order_preserving(ids):
    evs = [event(i, t_ms=k) for k, i in enumerate(ids)]
    once = filter_events(evs)
    assert filter_events(once) == once
    assert [e.utc_time for e in once] == sorted(e.utc_time for e in once)
    assert all(e.event_id in (1, 3, 5, 12, 13) for e in once)


# --------------------------------------------------------------------------- guid repair


def test_degenerate_pattern():
    assert is_degenerate_guid(DEGENERATE)
    assert is_degenerate_guid("{5770385F-0000-0000-0000-00000000abcd}")
    assert not is_degenerate_guid("{5770385f-1e2d-6410-0000-000000000000}")
    assert not is_degenerate_guid("G1")


def test_degenerate_guid_split_by_machine():
    evs = [event(1, guid=DEGENERATE, machine="W7-1", ProcessId=4), event(1, guid=DEGENERATE, machine="W7-2", ProcessId=4)]
    out, n = resolve_guid_collisions(evs)
    assert n == 2
    assert out[0].process_guid != out[1].process_guid
    assert out[0].attributes["OriginalProcessGuid"] == DEGENERATE


def test_degenerate_guid_split_by_creation_time():
    evs = [
        event(1, 0, guid=DEGENERATE, ProcessId=4),
        event(3, 2_000, guid=DEGENERATE, ProcessId=4),
        event(1, 90_000, guid=DEGENERATE, ProcessId=4),
        event(3, 91_000, guid=DEGENERATE, ProcessId=4),
    ]
    out, _ = resolve_guid_collisions(evs)
    acts = correlate(out)
    assert len(acts) == 2
    assert [len(a.events) for a in acts] == [2, 2]
    assert [a.origin_time - T0 for a in acts] == [0, 90_000]


def test_well_formed_guid_untouched_and_rewrite_deterministic():
    evs = [event(1, guid="{5770385f-1e2d-6410-0000-000000000001}", ProcessId=8), event(1, guid=DEGENERATE, ProcessId=4)]
    a, n1 = resolve_guid_collisions(evs)
    b, n2 = resolve_guid_collisions(evs)
    assert a[0] is evs[0]
    assert a == b and n1 == n2 == 1


# --------------------------------------------------------------------------- correlation


def test_correlate_sorts_by_time():
    evs = [event(3, 2000), event(1, 0), event(13, 1000, event_type="SetValue")]
    (act,) = correlate(evs)
    assert [e.utc_time - T0 for e in act.events] == [0, 1000, 2000]
    assert act.origin_time == T0 and not act.orphan


def test_correlate_groups_interleaved_guids_and_flags_orphans():
    evs = [event(1, 0, "G1"), event(3, 5, "G2"), event(3, 10, "G1"), event(5, 20, "G2")]
    acts = {a.process_guid: a for a in correlate(evs)}
    assert [e.event_id for e in acts["G1"].events] == [1, 3]
    assert [e.event_id for e in acts["G2"].events] == [3, 5]
    assert acts["G2"].orphan and not acts["G1"].orphan
    assert acts["G2"].pid is None


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_correlate_permutation_invariant(rnd):
    evs = [event(rnd.choice([1, 3, 12, 13]), rnd.randrange(0, 10_000), f"G{rnd.randrange(6)}") for _ in range(60)]
    shuffled = list(evs)
    rnd.shuffle(shuffled)

    def canon(acts):
        return {a.process_guid: sorted((e.utc_time, e.event_id) for e in a.events) for a in acts}

    assert canon(correlate(evs)) == canon(correlate(shuffled))
    assert sum(len(a.events) for a in correlate(shuffled)) == len(evs)


def test_correlate_recovers_generator_grouping():
    ds = generate_dataset(CampaignConfig(n_malicious=6, n_benign=6, seed=3))
    raw = [parse_event_line(json.dumps(r)) for r in ds.raw_events]
    random.Random(0).shuffle(raw)
    rebuilt = {a.process_guid: a for a in correlate(filter_events(raw))}
    truth = {a.process_guid: a for a in ds.activities}
    assert set(rebuilt) == set(truth)
    for guid, act in truth.items():
        assert sorted((e.utc_time, e.event_id) for e in rebuilt[guid].events) == sorted(
            (e.utc_time, e.event_id) for e in act.events
        )


# --------------------------------------------------------------------------- hollows join


def _proc(pid=404, machine="W7-1"):
    return activity([event(1, 0, machine=machine, ProcessId=pid), event(3, 1000, machine=machine)])


def test_hollows_attached_inside_window():
    rep = HollowsReport(404, "W7-1", T0 + 5000, implanted_pe=1)
    (act,), unmatched = attach_hollows([_proc()], [rep], 120)
    assert act.hollows == rep and unmatched == []


def test_hollows_machine_mismatch():
    rep = HollowsReport(404, "W7-2", T0 + 5000)
    (act,), unmatched = attach_hollows([_proc()], [rep], 120)
    assert act.hollows is None and unmatched == [rep]


def test_hollows_closest_wins():
    near, far = HollowsReport(404, "W7-1", T0 + 5000, patched=1), HollowsReport(404, "W7-1", T0 + 80_000, patched=2)
    (act,), unmatched = attach_hollows([_proc()], [far, near], 120)
    assert act.hollows == near and unmatched == [far]


def test_hollows_outside_window_and_bad_window():
    rep = HollowsReport(404, "W7-1", T0 + 121_000)
    (act,), unmatched = attach_hollows([_proc()], [rep], 120)
    assert act.hollows is None and unmatched == [rep]
    with pytest.raises(ValidationError):
        attach_hollows([_proc()], [rep], 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([4, 8, 12]), st.sampled_from(["W7-1", "W7-2"]),
                          st.integers(-5_000, 200_000)), max_size=12))
def test_hollows_report_conservation(specs):
    acts = [_proc(pid, m) for pid in (4, 8) for m in ("W7-1", "W7-2")]
    reports = [HollowsReport(pid, m, T0 + dt) for pid, m, dt in specs]
    out, unmatched = attach_hollows(acts, reports, 120)
    attached = [a.hollows for a in out if a.hollows is not None]
    assert len(attached) + len(unmatched) == len(reports)
    assert [a.events for a in out] == [a.events for a in acts]


def test_negative_hollows_count_rejected():
    with pytest.raises(SchemaError):
        HollowsReport(4, "W7-1", T0, patched=-1)


# --------------------------------------------------------------------------- store and end to end


def test_activity_store_round_trip(tmp_path):
    acts = [_proc(), activity([event(3, 0, guid="G9")], label="benign")]
    acts[0] = attach_hollows(acts[:1], [HollowsReport(404, "W7-1", T0 + 10, iat_hooked=3)])[0][0]
    path = tmp_path / "acts.jsonl"
    write_activities(acts, path, {"note": "x"})
    assert read_activities(path) == acts


def test_activity_store_version_check(tmp_path):
    path = tmp_path / "acts.jsonl"
    write_activities([_proc()], path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    header["format_version"] = 99
    path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(VersionError):
        read_activities(path)


def test_ingest_end_to_end_with_degenerate_guids(tmp_path):
    ds = generate_dataset(CampaignConfig(n_malicious=8, n_benign=8, seed=5, degenerate_guid_rate=0.5))
    paths = write_dataset(ds, tmp_path)
    acts, stats = ingest([paths["events"]], paths["hollows"], 120)
    assert stats["guid_rewrites"] > 0
    assert stats["activities"] == len(ds.activities)
    assert stats["hollows_attached"] == len(ds.hollows)
    by_guid, by_key = manifest_labels(json.loads(paths["manifest"].read_text()))
    labelled = apply_labels(acts, by_guid, by_key)
    assert all(a.label in ("benign", "malicious") for a in labelled)
    want = sorted((a.machine, a.origin_time, a.label, len(a.events)) for a in ds.activities)
    got = sorted((a.machine, a.origin_time, a.label, len(a.events)) for a in labelled)
    assert got == want
