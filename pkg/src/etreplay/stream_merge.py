"""Profiler-timeline ingestion and kernel-to-operator correlation.

Execution traces carry no device-side information, so kernel durations
and stream placement come from a separate profiler timeline in the
trace-event format. Kernels are attributed to the launching CPU op by
correlation id (falling back to external id), and CPU ops are aligned
to trace nodes by per-thread name occurrence.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

from .errors import ETReplayError, MalformedDocument
from .et_model import ExecutionTrace
from .graph_analysis import CategoryOverrides, select_replay_ops

DEFAULT_STREAM = 0
DEFAULT_MATCH_THRESHOLD = 0.9


def round_half_up_us(value: float) -> int:
    """Sub-microsecond inputs round half-up so all internal math is integral."""
    return int(math.floor(value + 0.5))


class EventKind(str, Enum):
    CPU_OP = "cpu_op"
    KERNEL = "kernel"
    RUNTIME_API = "runtime_api"
    OTHER = "other"


@dataclass(frozen=True)
class ProfilerEvent:
    kind: EventKind
    name: str
    start_us: int
    dur_us: int
    thread: int
    stream: int | None = None
    correlation: int | None = None
    external_id: int | None = None


class NoAlignment(ETReplayError):
    pass


@dataclass(frozen=True)
class KernelRecord:
    op_node: int
    name: str
    stream: int
    dur_us: int
    issue_index: int
    start_us: int


@dataclass
class DurationTable:
    cpu_us: dict[int, int] = field(default_factory=dict)
    kernels: dict[int, list[KernelRecord]] = field(default_factory=dict)
    unmatched_kernels: list[ProfilerEvent] = field(default_factory=list)

    def kernel_time_us(self, node_id: int) -> int:
        return sum(k.dur_us for k in self.kernels.get(node_id, ()))


class ProfilerTrace(list):
    """Parsed event list; ``dropped`` counts events discarded with a warning."""

    def __init__(self, events, dropped: int = 0):
        super().__init__(events)
        self.dropped = dropped


def _classify_cat(cat: str) -> EventKind:
    if "cpu_op" in cat:
        return EventKind.CPU_OP
    if "kernel" in cat:
        return EventKind.KERNEL
    if "runtime" in cat:
        return EventKind.RUNTIME_API
    return EventKind.OTHER


def parse_profiler_trace(data: bytes | str) -> ProfilerTrace:
    """Extract all complete-duration ("ph": "X") events from a trace-event file."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"profiler trace is not valid UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"profiler trace is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("traceEvents"), list):
        raise MalformedDocument("profiler trace must be an object with a 'traceEvents' array")

    events = []
    dropped = 0
    for ev in doc["traceEvents"]:
        if not isinstance(ev, dict) or ev.get("ph") != "X":
            continue
        if "ts" not in ev or "dur" not in ev:
            dropped += 1
            continue
        try:
            start = round_half_up_us(float(ev["ts"]))
            dur = round_half_up_us(float(ev["dur"]))
        except (TypeError, ValueError):
            dropped += 1
            continue
        if dur < 0:
            dropped += 1
            continue
        args = ev.get("args") or {}
        events.append(
            ProfilerEvent(
                kind=_classify_cat(str(ev.get("cat", ""))),
                name=str(ev.get("name", "")),
                start_us=start,
                dur_us=dur,
                thread=int(ev.get("tid", 0)),
                stream=int(args["stream"]) if "stream" in args else None,
                correlation=int(args["correlation"]) if "correlation" in args else None,
                external_id=int(args["External id"]) if "External id" in args else None,
            )
        )
    events.sort(key=lambda e: (e.start_us, e.thread, e.name))
    return ProfilerTrace(events, dropped)


def correlate(
    trace: ExecutionTrace,
    events: list[ProfilerEvent],
    match_threshold: float = DEFAULT_MATCH_THRESHOLD,
    overrides: CategoryOverrides | None = None,
) -> DurationTable:
    """Attribute CPU durations and launched kernels to the trace's replay ops.

    CPU events match trace nodes by (thread, name, per-thread occurrence
    index); kernels match their launching CPU event by correlation id,
    falling back to external id. Raises NoAlignment when fewer than
    ``match_threshold`` of the selected ops find a CPU event.
    """
    selected = select_replay_ops(trace, overrides)
    by_id = {n.id: n for n in trace.nodes}

    cpu_events = [e for e in events if e.kind is EventKind.CPU_OP]
    occurrences: dict[tuple[int, str], list[ProfilerEvent]] = {}
    for ev in sorted(cpu_events, key=lambda e: (e.start_us, e.name)):
        occurrences.setdefault((ev.thread, ev.name), []).append(ev)

    table = DurationTable()
    event_to_node: dict[int, int] = {}
    counters: dict[tuple[int, str], int] = {}
    matched = 0
    for node_id in selected:
        node = by_id[node_id]
        key = (node.tid, node.name)
        index = counters.get(key, 0)
        counters[key] = index + 1
        bucket = occurrences.get(key, ())
        table.kernels[node_id] = []
        if index < len(bucket):
            ev = bucket[index]
            table.cpu_us[node_id] = ev.dur_us
            event_to_node[id(ev)] = node_id
            matched += 1

    if selected and matched / len(selected) < match_threshold:
        raise NoAlignment(
            f"only {matched}/{len(selected)} replay ops matched a profiler CPU event "
            f"(threshold {match_threshold:.0%})"
        )

    by_correlation: dict[int, ProfilerEvent] = {}
    by_external: dict[int, ProfilerEvent] = {}
    for ev in cpu_events:
        if ev.correlation is not None:
            by_correlation.setdefault(ev.correlation, ev)
        if ev.external_id is not None:
            by_external.setdefault(ev.external_id, ev)

    pending: list[tuple[int, ProfilerEvent]] = []
    for ev in events:
        if ev.kind is not EventKind.KERNEL:
            continue
        launcher = None
        if ev.correlation is not None:
            launcher = by_correlation.get(ev.correlation)
        if launcher is None and ev.external_id is not None:
            launcher = by_external.get(ev.external_id)
        node_id = event_to_node.get(id(launcher)) if launcher is not None else None
        if node_id is None:
            table.unmatched_kernels.append(ev)
        else:
            pending.append((node_id, ev))

    issue_counters: dict[int, int] = {}
    for node_id, ev in sorted(pending, key=lambda p: (p[1].start_us, p[0], p[1].name)):
        stream = ev.stream if ev.stream is not None else DEFAULT_STREAM
        index = issue_counters.get(stream, 0)
        issue_counters[stream] = index + 1
        table.kernels[node_id].append(
            KernelRecord(
                op_node=node_id,
                name=ev.name,
                stream=stream,
                dur_us=ev.dur_us,
                issue_index=index,
                start_us=ev.start_us,
            )
        )
    for records in table.kernels.values():
        records.sort(key=lambda k: (k.start_us, k.stream, k.issue_index))
    return table


def assign_streams(table: DurationTable) -> dict[int, int]:
    """Primary stream per op: the stream carrying the majority of kernel time.

    Ties break toward the smaller stream id; kernel-less ops use the
    default stream.
    """
    assignment = {}
    for node_id, records in table.kernels.items():
        if not records:
            assignment[node_id] = DEFAULT_STREAM
            continue
        per_stream: dict[int, int] = {}
        for k in records:
            per_stream[k.stream] = per_stream.get(k.stream, 0) + k.dur_us
        assignment[node_id] = max(sorted(per_stream), key=lambda s: per_stream[s])
    return assignment


def _interval_union(intervals: list[tuple[int, int]]) -> list[tuple[int, int]]:
    merged: list[tuple[int, int]] = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def _subtract_measure(base: list[tuple[int, int]], holes: list[tuple[int, int]]) -> int:
    """Total measure of ``base`` minus its overlap with ``holes``; both unions."""
    total = sum(e - s for s, e in base)
    hi = 0
    overlap = 0
    for s, e in base:
        while hi < len(holes) and holes[hi][1] <= s:
            hi += 1
        j = hi
        while j < len(holes) and holes[j][0] < e:
            overlap += min(e, holes[j][1]) - max(s, holes[j][0])
            j += 1
    return total - overlap


def exposed_gpu_times(
    table: DurationTable, compute_categories: dict[int, bool]
) -> dict[int, int]:
    """Per-op exposed GPU time: kernel intervals not covered by other ops' compute kernels.

    ``compute_categories`` maps node id -> True when the op counts as
    computation (its kernels hide other ops' kernels).
    """
    exposed = {}
    for node_id, records in table.kernels.items():
        own = _interval_union([(k.start_us, k.start_us + k.dur_us) for k in records])
        others = _interval_union(
            [
                (k.start_us, k.start_us + k.dur_us)
                for other, recs in table.kernels.items()
                if other != node_id and compute_categories.get(other, True)
                for k in recs
            ]
        )
        exposed[node_id] = _subtract_measure(own, others)
    return exposed
