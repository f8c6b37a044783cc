"""Synthetic detonation campaigns.

A campaign is a sequence of iterations over a pool of VMs. Each iteration
draws how many malicious samples run (0-2, never four zero rounds in a
row), places them on random VMs and fills the rest with benign samples;
all samples of an iteration share a start time and run for one window.
Every execution yields one process activity (Sysmon-style events, maybe a
hollowing report) and one per-second utilisation series for its VM.

With background noise on, every VM also runs a few idle-ish office
processes whose events and utilisation mix into the same logs. With it
off, malicious samples run with the other VMs idle and no background
processes exist.

The process profiles below are fixture choices: rates, propensities and
utilisation signatures are tunable, not measured.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .features import MachineSeries, MachineSnapshot
from .ingest import HollowsReport, ProcessActivity, SysmonEvent, format_utc, is_degenerate_guid, parse_event_line, parse_utc

log = logging.getLogger(__name__)

CAMPAIGN_EPOCH = "2023-01-01 00:00:00.000"
RESET_GAP_SECS = 60
FILTERED_NOISE_IDS = (2, 7, 11, 22)


@dataclass
class ProcessProfile:
    name: str
    label: str
    onset: tuple = (0.5, 3.0)
    terminate_prob: float = 0.0
    lifetime: tuple = (60.0, 120.0)
    net_propensity: float = 0.5
    net_rate: float = 0.1
    net_period: Optional[float] = None
    protocols: dict = field(default_factory=lambda: {"tcp": 0.9, "udp": 0.1})
    ports: dict = field(default_factory=lambda: {"https": 0.7, "http": 0.2, "other": 0.1})
    reg_propensity: float = 0.5
    reg_rate: float = 0.1
    reg_types: dict = field(default_factory=lambda: {"SetValue": 0.7, "CreateKey": 0.2, "DeleteValue": 0.1})
    integrity: dict = field(default_factory=lambda: {"Medium": 0.9, "High": 0.1})
    noise_rate: float = 0.2
    hollows_prob: float = 0.0
    startup_cpu: float = 15.0
    cpu_user: float = 2.0
    cpu_sys: float = 0.5
    mem_mb: float = 40.0
    net_bytes: float = 1500.0
    # log-normal sigma of the per-second CPU multiplier; large values give bursty load
    cpu_jitter: float = 0.25

    def validate(self):
        for name in ("terminate_prob", "net_propensity", "reg_propensity", "hollows_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"profile {self.name}: {name}={v} outside [0, 1]")
        if self.label not in ("benign", "malicious"):
            raise ValidationError(f"profile {self.name}: bad label {self.label!r}")


def default_benign_profiles() -> dict:
    return {
        "office": ProcessProfile(
            "office", "benign", onset=(1.0, 8.0), net_propensity=0.4, net_rate=0.03,
            reg_propensity=0.8, reg_rate=0.08, reg_types={"SetValue": 0.8, "CreateKey": 0.2},
            integrity={"Medium": 0.85, "High": 0.15}, startup_cpu=25.0, cpu_user=1.5, mem_mb=80.0,
        ),
        "browser": ProcessProfile(
            "browser", "benign", onset=(0.5, 4.0), net_propensity=0.95, net_rate=0.15,
            ports={"https": 0.85, "http": 0.15}, reg_propensity=0.3, reg_rate=0.03,
            integrity={"Medium": 0.8, "Low": 0.2}, startup_cpu=30.0, cpu_user=6.0, mem_mb=150.0,
            net_bytes=6000.0,
        ),
        "utility": ProcessProfile(
            "utility", "benign", onset=(2.0, 20.0), terminate_prob=0.8, lifetime=(1.0, 20.0),
            net_propensity=0.1, net_rate=0.02, reg_propensity=0.2, reg_rate=0.02,
            integrity={"Medium": 0.4, "High": 0.6}, startup_cpu=10.0, cpu_user=1.0, mem_mb=10.0,
        ),
        "installer": ProcessProfile(
            "installer", "benign", onset=(0.5, 3.0), net_propensity=0.5, net_rate=0.05,
            ports={"https": 0.6, "http": 0.3, "other": 0.1}, reg_propensity=1.0, reg_rate=0.4,
            reg_types={"SetValue": 0.9, "CreateKey": 0.1},
            integrity={"High": 0.9, "Medium": 0.1}, startup_cpu=20.0, cpu_user=12.0, cpu_sys=3.0,
            mem_mb=60.0,
        ),
    }


def default_malicious_profiles() -> dict:
    # Presets only diversify behaviour; the label is always "malicious".
    return {
        "trojan": ProcessProfile(
            "trojan", "malicious", onset=(0.3, 4.0), net_propensity=0.9, net_rate=0.25,
            protocols={"tcp": 0.7, "udp": 0.3}, ports={"http": 0.4, "https": 0.1, "other": 0.5},
            reg_propensity=0.9, reg_rate=0.25, reg_types={"SetValue": 0.6, "DeleteValue": 0.3, "CreateKey": 0.1},
            integrity={"High": 0.5, "Medium": 0.4, "System": 0.1}, hollows_prob=0.35,
            startup_cpu=20.0, cpu_user=18.0, cpu_sys=6.0, mem_mb=90.0, net_bytes=5000.0,
        ),
        "ransomware": ProcessProfile(
            "ransomware", "malicious", onset=(0.5, 5.0), net_propensity=0.3, net_rate=0.05,
            reg_propensity=1.0, reg_rate=0.8, reg_types={"SetValue": 0.5, "DeleteValue": 0.45, "CreateKey": 0.05},
            integrity={"High": 0.7, "Medium": 0.3}, hollows_prob=0.35, startup_cpu=20.0,
            cpu_user=35.0, cpu_sys=15.0, mem_mb=250.0,
        ),
        "botnet": ProcessProfile(
            "botnet", "malicious", onset=(0.5, 4.0), net_propensity=1.0, net_rate=0.0, net_period=2.0,
            protocols={"tcp": 0.5, "udp": 0.5}, ports={"other": 0.8, "http": 0.2},
            reg_propensity=0.6, reg_rate=0.1, integrity={"Medium": 0.6, "High": 0.4},
            hollows_prob=0.3, startup_cpu=15.0, cpu_user=12.0, cpu_sys=4.0, mem_mb=60.0, net_bytes=8000.0,
        ),
        "miner": ProcessProfile(
            "miner", "malicious", onset=(1.0, 5.0), net_propensity=1.0, net_rate=0.08,
            protocols={"tcp": 1.0}, ports={"other": 0.9, "https": 0.1}, reg_propensity=0.5, reg_rate=0.05,
            integrity={"Medium": 0.5, "High": 0.5}, hollows_prob=0.3, startup_cpu=20.0,
            cpu_user=60.0, cpu_sys=5.0, mem_mb=400.0,
        ),
    }


def background_profile() -> ProcessProfile:
    """Idle office software left running on every VM when noise is on."""
    return ProcessProfile(
        "background", "benign", onset=(0.0, 30.0), net_propensity=0.7, net_rate=0.06,
        ports={"https": 0.95, "http": 0.05}, reg_propensity=0.6, reg_rate=0.05,
        reg_types={"SetValue": 1.0}, integrity={"Medium": 1.0}, startup_cpu=0.0, cpu_user=14.0,
        cpu_sys=4.0, mem_mb=150.0, net_bytes=6000.0, cpu_jitter=0.9,
    )


@dataclass
class CampaignConfig:
    n_vms: int = 5
    n_malicious: int = 100
    n_benign: int = 100
    window_secs: int = 120
    seed: int = 0
    background_noise: bool = True
    background_per_vm: tuple = (2, 4)
    force_nonzero: bool = True
    max_malware_per_iteration: int = 2
    degenerate_guid_rate: float = 0.0
    benign_weights: dict = field(default_factory=lambda: {"office": 0.35, "browser": 0.3, "utility": 0.2, "installer": 0.15})
    malicious_weights: dict = field(default_factory=lambda: {"trojan": 0.55, "ransomware": 0.15, "botnet": 0.15, "miner": 0.15})
    benign_profiles: dict = field(default_factory=default_benign_profiles)
    malicious_profiles: dict = field(default_factory=default_malicious_profiles)
    background: ProcessProfile = field(default_factory=background_profile)

    def validate(self):
        if self.n_vms < 1:
            raise ValidationError("n_vms must be >= 1")
        if self.window_secs <= 0:
            raise ValidationError("window_secs must be > 0")
        if self.n_malicious < 0 or self.n_benign < 0:
            raise ValidationError("sample counts must be non-negative")
        if self.n_malicious < 1 and self.n_benign < self.n_vms:
            raise ValidationError("need at least one malicious sample or n_benign >= n_vms")
        if self.n_benign < self.n_vms and self.background_noise:
            raise ValidationError(f"benign pool ({self.n_benign}) smaller than n_vms ({self.n_vms})")
        if not 0.0 <= self.degenerate_guid_rate <= 1.0:
            raise ValidationError("degenerate_guid_rate outside [0, 1]")
        for p in list(self.benign_profiles.values()) + list(self.malicious_profiles.values()) + [self.background]:
            p.validate()
        for weights, pool in ((self.benign_weights, self.benign_profiles), (self.malicious_weights, self.malicious_profiles)):
            missing = set(weights) - set(pool)
            if missing:
                raise ValidationError(f"weights reference unknown profiles {sorted(missing)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d)
        for key in ("benign_profiles", "malicious_profiles"):
            if key in d:
                d[key] = {k: ProcessProfile(**_tuples(v)) for k, v in d[key].items()}
        if "background" in d:
            d["background"] = ProcessProfile(**_tuples(d["background"]))
        if "background_per_vm" in d:
            d["background_per_vm"] = tuple(d["background_per_vm"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown campaign keys {sorted(unknown)}")
        return cls(**d)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# --------------------------------------------------------------------------- scheduling


@dataclass
class Assignment:
    vm: int
    sample_id: Optional[str]
    label: str  # benign | malicious | idle


@dataclass
class IterationPlan:
    index: int
    malware_count: int
    assignments: list
    start_time: int


def draw_malware_count(rng: np.random.Generator, history: Sequence[int], force_nonzero: bool = True, max_count: int = 2) -> int:
    """Uniform over 0..max_count; after three zeros in a row, uniform over 1..max_count."""
    if force_nonzero and len(history) >= 3 and all(h == 0 for h in history[-3:]):
        return int(rng.integers(1, max_count + 1))
    return int(rng.integers(0, max_count + 1))


def vm_name(vm: int) -> str:
    return f"W7-{vm + 1}"


def schedule_campaign(config: CampaignConfig) -> list:
    """Plan iterations until every malicious sample ran once and every benign one at least once."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    malicious = [f"mal-{k:04d}" for k in range(config.n_malicious)]
    benign = [f"ben-{k:04d}" for k in range(config.n_benign)]
    mal_order = list(rng.permutation(len(malicious)))
    ben_usage = np.zeros(len(benign), dtype=int)
    base = parse_utc(CAMPAIGN_EPOCH)
    step_ms = (config.window_secs + RESET_GAP_SECS) * 1000

    plans, history = [], []
    while mal_order or (benign and ben_usage.min() == 0):
        drawn = draw_malware_count(rng, history, config.force_nonzero, min(config.max_malware_per_iteration, config.n_vms))
        count = min(drawn, len(mal_order))
        history.append(count)
        mal_vms = set(int(v) for v in rng.choice(config.n_vms, size=count, replace=False)) if count else set()
        fill = config.n_vms - count if (config.background_noise or count == 0) else 0
        chosen = _least_used(rng, ben_usage, fill)
        assignments, bi = [], 0
        for vm in range(config.n_vms):
            if vm in mal_vms:
                assignments.append(Assignment(vm, malicious[mal_order.pop(0)], "malicious"))
            elif bi < len(chosen):
                assignments.append(Assignment(vm, benign[chosen[bi]], "benign"))
                bi += 1
            else:
                assignments.append(Assignment(vm, None, "idle"))
        plans.append(IterationPlan(len(plans), count, assignments, base + len(plans) * step_ms))
    return plans


def _least_used(rng, usage: np.ndarray, k: int) -> list:
    """Pick ``k`` distinct indices, least-used first, ties broken at random."""
    if k == 0 or len(usage) == 0:
        return []
    if k > len(usage):
        raise ValidationError(f"benign pool ({len(usage)}) smaller than slots to fill ({k})")
    order = np.lexsort((rng.random(len(usage)), usage))[:k]
    usage[order] += 1
    return [int(i) for i in rng.permutation(order)]


# --------------------------------------------------------------------------- process generation


@dataclass
class GeneratedProcess:
    activity: ProcessActivity
    raw_events: list  # evtx_dump-style dicts, including filtered-out ids
    profile: ProcessProfile
    pid: int
    end_ms: int


def _pick(rng, weights: dict):
    keys = list(weights)
    p = np.array([weights[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _guid(rng, machine_tag: str) -> str:
    while True:
        mid = rng.integers(0, 16, size=12)
        if mid.any():
            break
    hexs = "".join("0123456789abcdef"[d] for d in mid)
    tail = "".join("0123456789abcdef"[d] for d in rng.integers(0, 16, size=12))
    return "{%s-%s-%s-%s-%s}" % (machine_tag, hexs[:4], hexs[4:8], hexs[8:], tail)


def _machine_tag(machine: str) -> str:
    return "%08x" % (sum(ord(c) * 131**k for k, c in enumerate(machine)) % 2**32)


def _event_times(rng, profile: ProcessProfile, rate: float, start: float, end: float, period=None) -> np.ndarray:
    if end <= start:
        return np.empty(0)
    if period:
        ticks = np.arange(start, end, period)
        return np.clip(ticks + rng.normal(0, 0.1 * period, size=len(ticks)), start, end)
    n = rng.poisson(rate * (end - start))
    return rng.uniform(start, end, size=n)


def _raw(event_id, machine, t_ms, data):
    return {
        "Event": {
            "#attributes": {"xmlns": "http://schemas.microsoft.com/win/2004/08/events/event"},
            "System": {
                "Provider": {"#attributes": {"Name": "Microsoft-Windows-Sysmon"}},
                "EventID": event_id,
                "Computer": machine,
                "TimeCreated": {"#attributes": {"SystemTime": format_utc(t_ms).replace(" ", "T") + "000Z"}},
            },
            "EventData": dict(data, UtcTime=format_utc(t_ms)),
        }
    }


def generate_process_events(
    profile: ProcessProfile,
    label: str,
    rng: np.random.Generator,
    window_secs: int = 120,
    machine: str = "W7-1",
    start_ms: int = 0,
    pid: Optional[int] = None,
    degenerate_guid: bool = False,
) -> GeneratedProcess:
    """Draw one execution of ``profile`` starting at ``start_ms``."""
    tag = _machine_tag(machine)
    pid = int(rng.integers(250, 1250) * 4) if pid is None else pid
    guid = "{%s-0000-0000-0000-%012x}" % (tag, pid) if degenerate_guid else _guid(rng, tag)
    image = f"C:\\Users\\analyst\\AppData\\Local\\Temp\\{profile.name}_{rng.integers(1e6):06d}.exe"
    window = float(window_secs)
    end = window
    terminates = rng.random() < profile.terminate_prob
    if terminates:
        end = float(min(window, rng.uniform(*profile.lifetime)))
    onset = float(rng.uniform(*profile.onset))

    base = {"ProcessGuid": guid, "ProcessId": pid, "Image": image}
    timeline = [(0.0, 1, dict(base, IntegrityLevel=_pick(rng, profile.integrity), User="LAB\\analyst",
                                CommandLine=image, ParentProcessId=int(rng.integers(100, 900) * 4)))]

    if rng.random() < profile.net_propensity:
        for t in _event_times(rng, profile, profile.net_rate, onset, end, profile.net_period):
            port = _pick(rng, profile.ports)
            data = dict(base, Protocol=_pick(rng, profile.protocols), Initiated="true",
                        DestinationIp=f"10.0.{rng.integers(0, 255)}.{rng.integers(1, 255)}",
                        DestinationPort={"http": 80, "https": 443}.get(port, int(rng.integers(1024, 65535))))
            if port != "other":
                data["DestinationPortName"] = port
            timeline.append((float(t), 3, data))
    if rng.random() < profile.reg_propensity:
        for t in _event_times(rng, profile, profile.reg_rate, onset, end):
            kind = _pick(rng, profile.reg_types)
            eid = 13 if kind == "SetValue" else 12
            timeline.append((float(t), eid, dict(base, EventType=kind,
                                                  TargetObject=f"HKU\\S-1-5-21\\Software\\k{rng.integers(1e4)}")))
    for t in _event_times(rng, profile, profile.noise_rate, 0.0, end):
        eid = int(rng.choice(FILTERED_NOISE_IDS))
        data = dict(base)
        if eid == 7:
            data.update(ImageLoaded="C:\\Windows\\System32\\kernel32.dll", Signed="true", SignatureStatus="Valid")
        else:
            data["TargetFilename"] = f"C:\\Temp\\f{rng.integers(1e4)}.tmp"
        timeline.append((float(t), eid, data))
    if terminates:
        timeline.append((end, 5, dict(base)))

    timeline.sort(key=lambda item: item[0])
    raw_events, events = [], []
    for t, eid, data in timeline:
        t_ms = start_ms + min(int(t * 1000), window_secs * 1000)
        rec = _raw(eid, machine, t_ms, data)
        raw_events.append(rec)
        if eid in (1, 3, 5, 12, 13):
            events.append(parse_event_line(json.dumps(rec)))

    hollows = None
    if label == "malicious" and rng.random() < profile.hollows_prob:
        counts = {name: 0 for name in ("replaced", "hdr_modified", "patched", "iat_hooked", "implanted_shc",
                                       "unreachable_file", "other", "implanted_pe")}
        for name in rng.choice(list(counts), size=int(rng.integers(1, 4)), replace=False):
            counts[name] = int(rng.integers(1, 4))
        hollows = HollowsReport(
            pid=pid, machine=machine, scan_time=start_ms + int(rng.uniform(2.0, window) * 1000),
            is_managed=int(rng.random() < 0.2), total_modified=sum(counts.values()), **counts,
        )
    activity = ProcessActivity(guid, machine, start_ms, tuple(events), hollows, label, orphan=False)
    return GeneratedProcess(activity, raw_events, profile, pid, start_ms + int(end * 1000))


# --------------------------------------------------------------------------- machine series


def generate_machine_series(
    processes: Sequence[GeneratedProcess],
    rng: np.random.Generator,
    window_secs: int = 120,
    machine: str = "W7-1",
    window_index: int = 0,
) -> MachineSeries:
    """Per-second utilisation: baseline noise plus each hosted process's footprint."""
    n = int(window_secs)
    cpu_sys = np.clip(1.5 + rng.normal(0, 0.5, n), 0, None)
    cpu_user = np.clip(2.0 + rng.normal(0, 0.8, n), 0, None)
    mem = 1.2e9 + rng.normal(0, 5e6) + np.cumsum(rng.normal(0, 2e5, n))
    swap = np.full(n, 2.0e8 + rng.normal(0, 1e6))
    procs = np.full(n, float(rng.integers(36, 42)))
    max_pid = np.full(n, float(rng.integers(700, 1000) * 4))
    sent = np.abs(rng.normal(150, 60, n))
    recv = np.abs(rng.normal(300, 100, n))

    secs = np.arange(n)
    for gp in processes:
        prof, act = gp.profile, gp.activity
        origin = act.origin_time
        end = (gp.end_ms - origin) / 1000.0
        alive = secs < end
        onset = next((((e.utc_time - origin) / 1000.0) for e in act.events[1:]), end)
        active = alive & (secs >= onset)
        jitter = rng.lognormal(0, 0.3)
        procs += alive
        max_pid = np.maximum(max_pid, np.where(alive, gp.pid, 0))
        cpu_user += prof.startup_cpu * np.exp(-secs / 1.5) * alive * jitter
        cpu_user += active * prof.cpu_user * jitter * rng.lognormal(0, prof.cpu_jitter, n)
        cpu_sys += active * prof.cpu_sys * jitter * rng.lognormal(0, prof.cpu_jitter, n)
        mem += alive * prof.mem_mb * 1e6 * np.minimum(1.0, (secs + 1) / 5.0) * jitter
        for e in act.events[1:]:
            s = min(int((e.utc_time - origin) // 1000), n - 1)
            if e.event_id == 3:
                b = prof.net_bytes * rng.lognormal(0, 0.4)
                sent[s] += b
                recv[s] += 1.5 * b * rng.lognormal(0, 0.3)
            elif e.event_id in (12, 13):
                cpu_sys[s] += 0.5
    cpu_user = np.minimum(cpu_user, 100.0)
    cpu_sys = np.minimum(cpu_sys, 100.0 - cpu_user)
    pkts_sent = np.round(sent / 600.0 + 1)
    pkts_recv = np.round(recv / 900.0 + 1)
    snaps = [
        MachineSnapshot(int(t), float(cpu_sys[t]), float(cpu_user[t]), float(mem[t]), float(swap[t]),
                        int(procs[t]), int(max_pid[t]), float(sent[t]), float(recv[t]),
                        float(pkts_sent[t]), float(pkts_recv[t]))
        for t in range(n)
    ]
    label = "malicious" if any(gp.activity.label == "malicious" for gp in processes) else "benign"
    return MachineSeries(machine, window_index, snaps, label)


# --------------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    activities: list
    machine_series: list
    manifest: dict
    raw_events: list
    hollows: list


def _sample_profile(config: CampaignConfig, sample_id: str) -> ProcessProfile:
    kind, idx = sample_id.split("-")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, 0 if kind == "ben" else 1, int(idx)]))
    if kind == "mal":
        return config.malicious_profiles[_pick(rng, config.malicious_weights)]
    return config.benign_profiles[_pick(rng, config.benign_weights)]


def generate_dataset(config: CampaignConfig) -> Dataset:
    """Schedule, then generate every execution with per-(iteration, VM) seeds."""
    plans = schedule_campaign(config)
    activities, series, raw_events, hollows = [], [], [], []
    iterations = []
    for plan in plans:
        it_rec = {"index": plan.index, "start_time": format_utc(plan.start_time),
                  "malware_count": plan.malware_count, "vms": []}
        for a in plan.assignments:
            machine = vm_name(a.vm)
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, plan.index, a.vm]))
            hosted, vm_rec = [], {"vm": machine, "sample_id": a.sample_id, "label": a.label, "processes": []}
            jobs = []
            if a.sample_id is not None:
                jobs.append((_sample_profile(config, a.sample_id), a.label, "sample"))
            if config.background_noise:
                lo, hi = config.background_per_vm
                jobs.extend((config.background, "benign", "background") for _ in range(int(rng.integers(lo, hi + 1))))
            used_pids = set()
            for prof, label, role in jobs:
                pid = int(rng.integers(250, 1250) * 4)
                while pid in used_pids:
                    pid = int(rng.integers(250, 1250) * 4)
                used_pids.add(pid)
                gp = generate_process_events(
                    prof, label, rng, config.window_secs, machine, plan.start_time, pid,
                    degenerate_guid=rng.random() < config.degenerate_guid_rate,
                )
                hosted.append(gp)
                activities.append(gp.activity)
                raw_events.extend(gp.raw_events)
                if gp.activity.hollows is not None:
                    hollows.append(gp.activity.hollows)
                vm_rec["processes"].append({
                    "process_guid": gp.activity.process_guid, "pid": gp.pid, "role": role,
                    "profile": prof.name, "label": label, "origin_time": format_utc(gp.activity.origin_time),
                })
            if hosted:
                ms = generate_machine_series(hosted, rng, config.window_secs, machine, plan.index)
                series.append(ms)
                vm_rec["machine_label"] = ms.label
                vm_rec["machine_series"] = f"machine/iter{plan.index:05d}_{machine}.csv"
            it_rec["vms"].append(vm_rec)
        iterations.append(it_rec)

    order = np.random.default_rng(np.random.SeedSequence([config.seed, 4])).permutation(len(raw_events))
    raw_events = [raw_events[k] for k in order]
    manifest = {
        "format": "procsight.manifest",
        "format_version": 1,
        "seed": config.seed,
        "window_secs": config.window_secs,
        "background_noise": config.background_noise,
        "iterations": iterations,
        "totals": {
            "iterations": len(plans),
            "malicious_samples": config.n_malicious,
            "benign_samples": len({a.sample_id for p in plans for a in p.assignments if a.label == "benign"}),
            "activities": len(activities),
            "malicious_activities": sum(a.label == "malicious" for a in activities),
            "machine_series": len(series),
        },
    }
    return Dataset(activities, series, manifest, raw_events, hollows)


def manifest_labels(manifest: dict) -> tuple:
    """``(guid -> label, (machine, pid, origin_ms) -> label)`` ground-truth maps."""
    by_guid, by_key = {}, {}
    for it in manifest["iterations"]:
        for vm in it["vms"]:
            for p in vm["processes"]:
                by_guid.setdefault(p["process_guid"], p["label"])
                by_key[(vm["vm"], p["pid"], parse_utc(p["origin_time"]))] = p["label"]
    # degenerate guids are shared, so only the fallback key is trustworthy for them
    by_guid = {g: l for g, l in by_guid.items() if not is_degenerate_guid(g)}
    return by_guid, by_key


def write_dataset(ds: Dataset, out_dir) -> dict:
    """Write events, hollows, machine CSVs and the manifest; returns the paths."""
    out = Path(out_dir)
    (out / "machine").mkdir(parents=True, exist_ok=True)
    paths = {"events": out / "events.jsonl", "hollows": out / "hollows.jsonl", "manifest": out / "manifest.json"}
    with open(paths["events"], "w", encoding="utf-8") as fh:
        for rec in ds.raw_events:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(paths["hollows"], "w", encoding="utf-8") as fh:
        for rep in ds.hollows:
            fh.write(json.dumps(rep.to_record(), sort_keys=True) + "\n")
    for ms in ds.machine_series:
        write_machine_csv(ms, out / "machine" / f"iter{ms.window:05d}_{ms.machine}.csv")
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        json.dump(ds.manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths


MACHINE_CSV_FIELDS = ("t", "cpu_system_pct", "cpu_user_pct", "mem_used", "swap_used", "total_procs", "max_pid",
                      "bytes_sent", "bytes_recv", "pkts_sent", "pkts_recv")


def write_machine_csv(ms: MachineSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MACHINE_CSV_FIELDS)
        for s in ms.snapshots:
            w.writerow([repr(getattr(s, f)) for f in MACHINE_CSV_FIELDS])


def read_machine_csv(path, machine: str, window: int, label: str = "unknown") -> MachineSeries:
    snaps = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            snaps.append(MachineSnapshot(
                t=int(rec["t"]), cpu_system_pct=float(rec["cpu_system_pct"]), cpu_user_pct=float(rec["cpu_user_pct"]),
                mem_used=float(rec["mem_used"]), swap_used=float(rec["swap_used"]),
                total_procs=int(rec["total_procs"]), max_pid=int(rec["max_pid"]),
                bytes_sent=float(rec["bytes_sent"]), bytes_recv=float(rec["bytes_recv"]),
                pkts_sent=float(rec["pkts_sent"]), pkts_recv=float(rec["pkts_recv"]),
            ))
    return MachineSeries(machine, window, snaps, label)


def read_machine_dataset(out_dir) -> list:
    """Load every machine series listed in a simulate output's manifest, labelled."""
    out = Path(out_dir)
    with open(out / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    series = []
    for it in manifest["iterations"]:
        for vm in it["vms"]:
            if "machine_series" in vm:
                series.append(read_machine_csv(out / vm["machine_series"], vm["vm"], it["index"], vm["machine_label"]))
    return series
