"""Replay-plan construction, transformation, and serialization.

A plan is the portable, self-contained hand-off artifact between trace
analysis and replay (simulated or real): ordered op directives with
tensor instantiation/binding instructions, stream and thread placement,
recorded durations, and communication descriptors. The plan-file JSON
schema is documented in docs/formats.md and is the contract consumed by
the simulator and by external executors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fnmatch import fnmatchcase
from typing import Protocol, Union

from .errors import ETReplayError, MalformedDocument, VersionMismatch
from .et_model import (
    ArgValue,
    DType,
    ETNode,
    ExecutionTrace,
    ListArg,
    NoneArg,
    ScalarArg,
    TensorArg,
    TensorRef,
    is_integer_dtype,
    iter_tensors,
    normalize_dtype,
)
from .graph_analysis import (
    CategoryOverrides,
    OpCategory,
    TensorClassification,
    categorize_op,
    classify_tensors,
    select_replay_ops,
)
from .schema_parser import OpSchema, SchemaSyntaxError, parse_op_schema, render
from .stream_merge import DurationTable

PLAN_VERSION = "1"

TensorId = tuple[int, ...]


class Collective(str, Enum):
    ALL_REDUCE = "all_reduce"
    ALL_TO_ALL = "all_to_all"
    ALL_GATHER = "all_gather"
    REDUCE_SCATTER = "reduce_scatter"
    BROADCAST = "broadcast"
    SEND = "send"
    RECV = "recv"
    BARRIER = "barrier"


_RING_COLLECTIVES = frozenset(
    {
        Collective.ALL_REDUCE,
        Collective.ALL_TO_ALL,
        Collective.ALL_GATHER,
        Collective.REDUCE_SCATTER,
        Collective.BROADCAST,
    }
)
_BLOCKING_KINDS = frozenset({Collective.BARRIER, Collective.SEND, Collective.RECV})

# Longer names first so e.g. "all_gather" is not shadowed by a substring.
_COLLECTIVE_MARKERS = (
    ("reduce_scatter", Collective.REDUCE_SCATTER),
    ("reducescatter", Collective.REDUCE_SCATTER),
    ("all_to_all", Collective.ALL_TO_ALL),
    ("alltoall", Collective.ALL_TO_ALL),
    ("all_gather", Collective.ALL_GATHER),
    ("allgather", Collective.ALL_GATHER),
    ("all_reduce", Collective.ALL_REDUCE),
    ("allreduce", Collective.ALL_REDUCE),
    ("broadcast", Collective.BROADCAST),
    ("barrier", Collective.BARRIER),
    ("send", Collective.SEND),
    ("recv", Collective.RECV),
)


def collective_kind(name: str) -> Collective | None:
    lowered = name.lower()
    for marker, kind in _COLLECTIVE_MARKERS:
        if marker in lowered:
            return kind
    return None


class BrokenDependency(ETReplayError):
    pass


class UnknownGroup(ETReplayError):
    pass


class LabelNotFound(ETReplayError):
    pass


class AmbiguousLabel(ETReplayError):
    pass


# --------------------------------------------------------------------------
# Fill policies and tensor directives


@dataclass(frozen=True)
class RandomUniform:
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class Zeros:
    pass


@dataclass(frozen=True)
class IndexUniform:
    table_size: int


FillPolicy = Union[RandomUniform, Zeros, IndexUniform]


@dataclass(frozen=True)
class BindIntermediate:
    tensor: TensorId
    shape: tuple[int, ...]
    dtype: DType


@dataclass(frozen=True)
class Instantiate:
    tensor: TensorId
    shape: tuple[int, ...]
    dtype: DType
    fill: FillPolicy


@dataclass(frozen=True)
class ScalarLiteral:
    value: object  # int | float | bool | str | None | nested lists thereof


@dataclass(frozen=True)
class ListDirective:
    items: tuple["TensorDirective", ...]


TensorDirective = Union[BindIntermediate, Instantiate, ScalarLiteral, ListDirective]


@dataclass(frozen=True)
class TensorSpec:
    tensor: TensorId
    shape: tuple[int, ...]
    dtype: DType


@dataclass(frozen=True)
class CommDescriptor:
    group_id: int
    collective: Collective
    dtype: DType
    message_bytes: int
    blocking: bool
    peer: int | None = None


@dataclass(frozen=True)
class ReplayOp:
    node_id: int
    name: str
    category: OpCategory
    skip: bool
    thread: int = 0
    stream: int = 0
    cpu_us: int | None = None
    kernels: tuple[tuple[int, int], ...] = ()  # (stream, dur_us) pairs, issue order
    schema: str | None = None
    inputs: tuple[TensorDirective, ...] = ()
    outputs: tuple[TensorSpec, ...] = ()
    comm: CommDescriptor | None = None

    def kernel_time_us(self) -> int:
        return sum(d for _, d in self.kernels)


@dataclass(frozen=True)
class ReplayPlan:
    rank: int
    world_size: int
    ops: tuple[ReplayOp, ...]
    process_groups: dict[int, tuple[int, ...]]
    version: str = PLAN_VERSION
    group_id_map: dict[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class PlanConfig:
    """Knobs the trace does not record; defaults follow docs/formats.md."""

    fill_lo: float = 0.0
    fill_hi: float = 1.0
    lookup_op_patterns: tuple[str, ...] = ("aten::embedding*", "*lookup*")
    index_table_size: int = 1000


@dataclass(frozen=True)
class CustomOpRegistry:
    """Names (exact or fnmatch patterns) of custom ops with known implementations."""

    entries: dict[str, str] = field(default_factory=dict)

    def has(self, name: str) -> bool:
        if name in self.entries:
            return True
        return any(fnmatchcase(name, pattern) for pattern in self.entries)

    @classmethod
    def from_json(cls, data: bytes | str) -> "CustomOpRegistry":
        try:
            obj = json.loads(data)
        except json.JSONDecodeError as exc:
            raise MalformedDocument(f"registry is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise MalformedDocument("registry must be a JSON object of name -> impl spec")
        return cls({str(k): str(v) for k, v in obj.items()})


# --------------------------------------------------------------------------
# Plan construction


def parse_schemas(trace: ExecutionTrace, selection: list[int]) -> dict[int, OpSchema | None]:
    """Parse each selected op's recorded schema; unparseable or empty -> None."""
    by_id = {n.id: n for n in trace.nodes}
    out: dict[int, OpSchema | None] = {}
    for node_id in selection:
        text = by_id[node_id].op_schema
        if not text:
            out[node_id] = None
            continue
        try:
            out[node_id] = parse_op_schema(text)
        except SchemaSyntaxError:
            out[node_id] = None
    return out


def _is_lookup_op(name: str, config: PlanConfig) -> bool:
    return any(fnmatchcase(name, p) for p in config.lookup_op_patterns)


def _default_fill(node: ETNode, ref: TensorRef, config: PlanConfig) -> FillPolicy:
    if _is_lookup_op(node.name, config) and is_integer_dtype(ref.dtype):
        return IndexUniform(table_size=config.index_table_size)
    return RandomUniform(lo=config.fill_lo, hi=config.fill_hi)


def _contains_tensor(arg: ArgValue) -> bool:
    return next(iter_tensors(arg), None) is not None


def _plain_value(arg: ArgValue):
    if isinstance(arg, ScalarArg):
        return arg.value
    if isinstance(arg, NoneArg):
        return None
    if isinstance(arg, ListArg):
        return [_plain_value(item) for item in arg.items]
    raise ETReplayError(f"tensor argument cannot be rendered as a literal: {arg!r}")


def _directive_for(
    arg: ArgValue,
    node: ETNode,
    live_outputs: set[TensorId],
    classification: TensorClassification,
    config: PlanConfig,
) -> TensorDirective:
    if isinstance(arg, TensorArg):
        ref = arg.ref
        if ref.id in classification.intermediate:
            producer = classification.producer.get(ref.id)
            if producer is None or producer >= node.id:
                raise BrokenDependency(
                    f"node {node.id} consumes tensor {ref.id} before it is produced"
                )
            if ref.id in live_outputs:
                return BindIntermediate(tensor=ref.id, shape=ref.shape, dtype=ref.dtype)
            # Producer is selected but skipped: the tensor never materializes
            # during replay, so it must be synthesized instead.
        return Instantiate(
            tensor=ref.id, shape=ref.shape, dtype=ref.dtype, fill=_default_fill(node, ref, config)
        )
    if isinstance(arg, ListArg) and _contains_tensor(arg):
        return ListDirective(
            tuple(
                _directive_for(item, node, live_outputs, classification, config)
                for item in arg.items
            )
        )
    return ScalarLiteral(_plain_value(arg))


def _comm_metadata(node: ETNode) -> tuple[int, int | None]:
    """Process-group id and peer rank from the node's integer scalar inputs.

    Convention (documented in docs/formats.md): the first integer scalar
    input of a communication op is its process-group id; for send/recv
    the second integer scalar is the peer rank.
    """
    found = []
    for arg in node.inputs:
        if isinstance(arg, ScalarArg) and isinstance(arg.value, int) and not isinstance(arg.value, bool):
            found.append(arg.value)
        if len(found) == 2:
            break
    group = found[0] if found else 0
    peer = found[1] if len(found) > 1 else None
    return group, peer


def _comm_descriptor(node: ETNode, kind: Collective) -> CommDescriptor:
    group, peer = _comm_metadata(node)
    ref = next(iter(node.input_tensors()), None) or next(iter(node.output_tensors()), None)
    if ref is None:
        dtype, message_bytes = DType.UNKNOWN, 0
    else:
        dtype, message_bytes = ref.dtype, ref.nbytes()
    return CommDescriptor(
        group_id=group,
        collective=kind,
        dtype=dtype,
        message_bytes=message_bytes,
        blocking=kind in _BLOCKING_KINDS,
        peer=peer if kind in (Collective.SEND, Collective.RECV) else None,
    )


def build_plan(
    trace: ExecutionTrace,
    selection: list[int],
    classification: TensorClassification,
    schemas: dict[int, OpSchema | None],
    durations: DurationTable | None = None,
    streams: dict[int, int] | None = None,
    registry: CustomOpRegistry | None = None,
    *,
    world_size: int = 1,
    process_groups: dict[int, tuple[int, ...]] | None = None,
    config: PlanConfig | None = None,
    overrides: CategoryOverrides | None = None,
) -> ReplayPlan:
    """Assemble a replay plan from the analysis products of one trace.

    External input tensors become Instantiate directives (random fill by
    default, index fill for lookup ops), tensors produced by an earlier
    non-skipped op become BindIntermediate. Fused ops and custom ops
    without a registry entry are kept as skip markers so coverage
    accounting still sees them.
    """
    config = config or PlanConfig()
    registry = registry or CustomOpRegistry()
    durations = durations or DurationTable()
    streams = streams or {}
    by_id = {n.id: n for n in trace.nodes}

    ops: list[ReplayOp] = []
    live_outputs: set[TensorId] = set()
    group_id_map: dict[int, int] = {}

    for node_id in sorted(selection):
        node = by_id[node_id]
        category = categorize_op(node, overrides)
        schema_obj = schemas.get(node_id)
        comm: CommDescriptor | None = None

        if category is OpCategory.FUSED:
            skip = True
        elif category is OpCategory.COMMUNICATION:
            kind = collective_kind(node.name)
            if kind is None:
                skip = True
            else:
                skip = False
                comm = _comm_descriptor(node, kind)
                if comm.group_id not in group_id_map:
                    if process_groups is not None and comm.group_id not in process_groups:
                        raise UnknownGroup(
                            f"node {node_id} uses process group {comm.group_id} "
                            f"which is not in the supplied group table"
                        )
                    group_id_map[comm.group_id] = len(group_id_map)
                comm = replace(comm, group_id=group_id_map[comm.group_id])
        elif category is OpCategory.ATEN:
            skip = schema_obj is None and not registry.has(node.name)
        else:
            skip = not registry.has(node.name)

        inputs = tuple(
            _directive_for(arg, node, live_outputs, classification, config)
            for arg in node.inputs
        )
        outputs = tuple(
            TensorSpec(tensor=ref.id, shape=ref.shape, dtype=ref.dtype)
            for ref in node.output_tensors()
        )
        kernels = tuple(
            (k.stream, k.dur_us) for k in durations.kernels.get(node_id, ())
        )
        ops.append(
            ReplayOp(
                node_id=node_id,
                name=node.name,
                category=category,
                skip=skip,
                thread=node.tid,
                stream=streams.get(node_id, 0),
                cpu_us=durations.cpu_us.get(node_id),
                kernels=kernels,
                schema=render(schema_obj) if schema_obj is not None else None,
                inputs=inputs,
                outputs=outputs,
                comm=comm,
            )
        )
        if not skip:
            live_outputs.update(spec.tensor for spec in outputs)

    if process_groups is not None:
        groups = {new: tuple(process_groups[old]) for old, new in group_id_map.items()}
    else:
        groups = {new: tuple(range(world_size)) for new in group_id_map.values()}
    return ReplayPlan(
        rank=trace.rank,
        world_size=world_size,
        ops=tuple(ops),
        process_groups=groups,
        version=PLAN_VERSION,
        group_id_map=group_id_map,
    )


def validate_plan(plan: ReplayPlan) -> list[str]:
    """Re-check plan invariants; empty list means the plan is well-formed."""
    problems = []
    live: set[TensorId] = set()
    for op in plan.ops:
        for directive in _walk_directives(op.inputs):
            if isinstance(directive, BindIntermediate) and directive.tensor not in live:
                problems.append(
                    f"op {op.node_id} binds tensor {directive.tensor} "
                    f"with no earlier non-skipped producer"
                )
        if op.comm is not None and op.comm.group_id not in plan.process_groups:
            problems.append(f"op {op.node_id} references unknown group {op.comm.group_id}")
        if op.cpu_us is not None and op.cpu_us < 0:
            problems.append(f"op {op.node_id} has negative cpu time")
        if any(dur < 0 for _, dur in op.kernels):
            problems.append(f"op {op.node_id} has a negative kernel duration")
        if not op.skip:
            live.update(spec.tensor for spec in op.outputs)
    return problems


def _walk_directives(directives) -> list[TensorDirective]:
    out = []
    for d in directives:
        out.append(d)
        if isinstance(d, ListDirective):
            out.extend(_walk_directives(d.items))
    return out


# --------------------------------------------------------------------------
# Transformations


def extract_subtrace(trace: ExecutionTrace, label: str) -> ExecutionTrace:
    """Re-root the trace at the unique annotation node named ``label``."""
    matches = [n for n in trace.nodes if n.name == label]
    if not matches:
        raise LabelNotFound(f"no node named {label!r}")
    if len(matches) > 1:
        raise AmbiguousLabel(f"{len(matches)} nodes named {label!r}")
    root = matches[0]

    children: dict[int, list[int]] = {}
    for node in trace.nodes:
        if not node.is_root():
            children.setdefault(node.parent, []).append(node.id)
    keep: set[int] = set()
    stack = [root.id]
    while stack:
        node_id = stack.pop()
        keep.add(node_id)
        stack.extend(children.get(node_id, ()))

    by_id = {n.id: n for n in trace.nodes}
    nodes = []
    for node_id in sorted(keep):
        node = by_id[node_id]
        if node_id == root.id:
            node = replace(node, parent=0)
        nodes.append(node)
    return ExecutionTrace(
        nodes=tuple(nodes), rank=trace.rank, schema_version=trace.schema_version
    )


def _rewrite_dead_binds(ops: list[ReplayOp]) -> list[ReplayOp]:
    """Turn binds whose producer no longer runs into Instantiate directives."""
    live: set[TensorId] = set()
    out = []
    for op in ops:
        def fix(directive: TensorDirective) -> TensorDirective:
            if isinstance(directive, BindIntermediate) and directive.tensor not in live:
                return Instantiate(
                    tensor=directive.tensor,
                    shape=directive.shape,
                    dtype=directive.dtype,
                    fill=RandomUniform(),
                )
            if isinstance(directive, ListDirective):
                return ListDirective(tuple(fix(item) for item in directive.items))
            return directive

        new_inputs = tuple(fix(d) for d in op.inputs)
        if new_inputs != op.inputs:
            op = replace(op, inputs=new_inputs)
        out.append(op)
        if not op.skip:
            live.update(spec.tensor for spec in op.outputs)
    return out


def filter_by_category(plan: ReplayPlan, keep: set[OpCategory]) -> ReplayPlan:
    """Mark ops outside ``keep`` as skipped; dependency ids stay resolvable.

    Binds onto tensors whose producer became skipped are rewritten to
    Instantiate with the recorded shape and dtype, so the filtered plan
    still validates.
    """
    ops = [op if op.category in keep else replace(op, skip=True) for op in plan.ops]
    return replace(plan, ops=tuple(_rewrite_dead_binds(ops)))


# --------------------------------------------------------------------------
# Cross-rank collective matching


@dataclass(frozen=True)
class MatchedCollective:
    group: int
    position: int
    collective: Collective
    dtype: DType
    message_bytes: dict[int, int]
    node_ids: dict[int, int]


@dataclass(frozen=True)
class DeadlockReport:
    group: int
    position: int
    per_rank: dict[int, str]

    def __str__(self) -> str:
        lines = [f"collective divergence in group {self.group} at position {self.position}:"]
        for rank in sorted(self.per_rank):
            lines.append(f"  rank {rank}: {self.per_rank[rank]}")
        return "\n".join(lines)


def _match_key(op: ReplayOp) -> tuple[str, DType]:
    kind = op.comm.collective
    # send/recv pair up across ranks, so they compare under one label.
    label = "p2p" if kind in (Collective.SEND, Collective.RECV) else kind.value
    return label, op.comm.dtype


def match_collectives(
    plans: list[ReplayPlan],
) -> list[MatchedCollective] | DeadlockReport:
    """Check that every process group sees the same collective sequence on all ranks.

    Returns matched (kind, dtype) tuples with per-rank message sizes on
    success, or the first divergence (by group id, then position) as a
    DeadlockReport. The verdict is independent of plan order.
    """
    if not plans:
        return []
    world = plans[0].world_size
    groups = plans[0].process_groups
    for plan in plans[1:]:
        if plan.world_size != world or plan.process_groups != groups:
            raise ETReplayError("plans disagree on world size or process groups")
    by_rank = {plan.rank: plan for plan in plans}

    sequences: dict[int, dict[int, list[ReplayOp]]] = {}
    for group_id, members in groups.items():
        missing = [r for r in members if r not in by_rank]
        if missing:
            raise ETReplayError(f"group {group_id} members {missing} have no plan")
        sequences[group_id] = {
            rank: [
                op
                for op in by_rank[rank].ops
                if op.comm is not None and not op.skip and op.comm.group_id == group_id
            ]
            for rank in members
        }

    matched: list[MatchedCollective] = []
    for group_id in sorted(sequences):
        members = sorted(sequences[group_id])
        seqs = sequences[group_id]
        for position in range(max((len(s) for s in seqs.values()), default=0)):
            keys = {}
            for rank in members:
                seq = seqs[rank]
                keys[rank] = _match_key(seq[position]) if position < len(seq) else None
            distinct = set(keys.values())
            if len(distinct) != 1 or None in distinct:
                return DeadlockReport(
                    group=group_id,
                    position=position,
                    per_rank={
                        rank: (
                            f"{seqs[rank][position].comm.collective.value} "
                            f"{seqs[rank][position].comm.dtype.value} "
                            f"@node {seqs[rank][position].node_id}"
                            if position < len(seqs[rank])
                            else "missing"
                        )
                        for rank in members
                    },
                )
            first = seqs[members[0]][position]
            matched.append(
                MatchedCollective(
                    group=group_id,
                    position=position,
                    collective=first.comm.collective,
                    dtype=first.comm.dtype,
                    message_bytes={r: seqs[r][position].comm.message_bytes for r in members},
                    node_ids={r: seqs[r][position].node_id for r in members},
                )
            )
    return matched


# --------------------------------------------------------------------------
# Communication cost scaling


class CommCostModel(Protocol):
    def delay_us(
        self, collective: Collective, message_bytes: int, emulated_world: int, actual_world: int
    ) -> int | None:
        """Modeled duration; None means "keep the recorded durations"."""


class IdentityCostModel:
    def delay_us(self, collective, message_bytes, emulated_world, actual_world):
        return None


@dataclass(frozen=True)
class AlphaBetaModel:
    """Latency/bandwidth model: alpha + beta * size, ring-scaled for collectives."""

    alpha_us: float = 5.0
    beta_us_per_kb: float = 0.01
    per_collective: dict[Collective, tuple[float, float]] = field(default_factory=dict)

    def delay_us(self, collective, message_bytes, emulated_world, actual_world):
        alpha, beta = self.per_collective.get(collective, (self.alpha_us, self.beta_us_per_kb))
        if collective is Collective.BARRIER:
            size_term = 0.0
        elif collective in _RING_COLLECTIVES:
            w = max(emulated_world, 1)
            size_term = beta * (message_bytes / 1024.0) * (w - 1) / w
        else:
            size_term = beta * (message_bytes / 1024.0)
        return int(math.floor(alpha + size_term + 0.5))


class ZeroCostModel:
    def delay_us(self, collective, message_bytes, emulated_world, actual_world):
        return 0


def parse_cost_model_config(text: str) -> AlphaBetaModel:
    """Key-value config: ``alpha_us``, ``beta_us_per_kb``, plus per-collective
    overrides like ``all_reduce.alpha_us``."""
    alpha, beta = 5.0, 0.01
    per: dict[Collective, list[float]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ETReplayError(f"cost-model line {lineno} is not key=value: {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            number = float(value.strip())
        except ValueError:
            raise ETReplayError(f"cost-model line {lineno}: bad number {value.strip()!r}")
        if key == "alpha_us":
            alpha = number
        elif key == "beta_us_per_kb":
            beta = number
        elif "." in key:
            kind_name, _, param = key.partition(".")
            try:
                kind = Collective(kind_name)
            except ValueError:
                raise ETReplayError(f"cost-model line {lineno}: unknown collective {kind_name!r}")
            slot = per.setdefault(kind, [math.nan, math.nan])
            if param == "alpha_us":
                slot[0] = number
            elif param == "beta_us_per_kb":
                slot[1] = number
            else:
                raise ETReplayError(f"cost-model line {lineno}: unknown key {key!r}")
        else:
            raise ETReplayError(f"cost-model line {lineno}: unknown key {key!r}")
    resolved = {
        kind: (
            pair[0] if not math.isnan(pair[0]) else alpha,
            pair[1] if not math.isnan(pair[1]) else beta,
        )
        for kind, pair in per.items()
    }
    return AlphaBetaModel(alpha_us=alpha, beta_us_per_kb=beta, per_collective=resolved)


def scale_comm(
    plan: ReplayPlan, model: CommCostModel, emulated_world: int | None = None
) -> ReplayPlan:
    """Replace communication kernel durations with model-computed delays.

    Compute ops are untouched; this is how a small deployment emulates the
    communication cost of a larger one.
    """
    emulated = emulated_world if emulated_world is not None else plan.world_size
    ops = []
    for op in plan.ops:
        if op.comm is not None:
            delay = model.delay_us(
                op.comm.collective, op.comm.message_bytes, emulated, plan.world_size
            )
            if delay is not None:
                stream = op.kernels[0][0] if op.kernels else op.stream
                op = replace(op, kernels=((stream, delay),))
        ops.append(op)
    return replace(plan, ops=tuple(ops))


# --------------------------------------------------------------------------
# Serialization


def _fill_to_obj(fill: FillPolicy) -> dict:
    if isinstance(fill, RandomUniform):
        return {"kind": "random_uniform", "lo": fill.lo, "hi": fill.hi}
    if isinstance(fill, Zeros):
        return {"kind": "zeros"}
    if isinstance(fill, IndexUniform):
        return {"kind": "index_uniform", "table_size": fill.table_size}
    raise ETReplayError(f"not a fill policy: {fill!r}")


def _fill_from_obj(obj: dict) -> FillPolicy:
    kind = obj.get("kind")
    if kind == "random_uniform":
        return RandomUniform(lo=float(obj["lo"]), hi=float(obj["hi"]))
    if kind == "zeros":
        return Zeros()
    if kind == "index_uniform":
        return IndexUniform(table_size=int(obj["table_size"]))
    raise MalformedDocument(f"unknown fill policy {obj!r}")


def _directive_to_obj(d: TensorDirective) -> dict:
    if isinstance(d, BindIntermediate):
        return {"kind": "bind", "tensor": list(d.tensor), "shape": list(d.shape), "dtype": d.dtype.value}
    if isinstance(d, Instantiate):
        return {
            "kind": "instantiate",
            "tensor": list(d.tensor),
            "shape": list(d.shape),
            "dtype": d.dtype.value,
            "fill": _fill_to_obj(d.fill),
        }
    if isinstance(d, ScalarLiteral):
        return {"kind": "literal", "value": d.value}
    if isinstance(d, ListDirective):
        return {"kind": "list", "items": [_directive_to_obj(item) for item in d.items]}
    raise ETReplayError(f"not a directive: {d!r}")


def _directive_from_obj(obj: dict) -> TensorDirective:
    kind = obj.get("kind")
    if kind == "bind":
        return BindIntermediate(
            tensor=tuple(obj["tensor"]), shape=tuple(obj["shape"]), dtype=normalize_dtype(obj["dtype"])
        )
    if kind == "instantiate":
        return Instantiate(
            tensor=tuple(obj["tensor"]),
            shape=tuple(obj["shape"]),
            dtype=normalize_dtype(obj["dtype"]),
            fill=_fill_from_obj(obj["fill"]),
        )
    if kind == "literal":
        value = obj["value"]
        return ScalarLiteral(_freeze_literal(value))
    if kind == "list":
        return ListDirective(tuple(_directive_from_obj(item) for item in obj["items"]))
    raise MalformedDocument(f"unknown directive {obj!r}")


def _freeze_literal(value):
    return [_freeze_literal(v) for v in value] if isinstance(value, list) else value


def _op_to_obj(op: ReplayOp) -> dict:
    return {
        "node_id": op.node_id,
        "name": op.name,
        "category": op.category.value,
        "skip": op.skip,
        "thread": op.thread,
        "stream": op.stream,
        "cpu_us": op.cpu_us,
        "kernels": [[s, d] for s, d in op.kernels],
        "schema": op.schema,
        "inputs": [_directive_to_obj(d) for d in op.inputs],
        "outputs": [
            {"tensor": list(t.tensor), "shape": list(t.shape), "dtype": t.dtype.value}
            for t in op.outputs
        ],
        "comm": None
        if op.comm is None
        else {
            "group": op.comm.group_id,
            "collective": op.comm.collective.value,
            "dtype": op.comm.dtype.value,
            "message_bytes": op.comm.message_bytes,
            "blocking": op.comm.blocking,
            "peer": op.comm.peer,
        },
    }


def _op_from_obj(obj: dict) -> ReplayOp:
    comm_obj = obj.get("comm")
    comm = None
    if comm_obj is not None:
        comm = CommDescriptor(
            group_id=int(comm_obj["group"]),
            collective=Collective(comm_obj["collective"]),
            dtype=normalize_dtype(comm_obj["dtype"]),
            message_bytes=int(comm_obj["message_bytes"]),
            blocking=bool(comm_obj["blocking"]),
            peer=comm_obj.get("peer"),
        )
    return ReplayOp(
        node_id=int(obj["node_id"]),
        name=str(obj["name"]),
        category=OpCategory(obj["category"]),
        skip=bool(obj["skip"]),
        thread=int(obj["thread"]),
        stream=int(obj["stream"]),
        cpu_us=None if obj["cpu_us"] is None else int(obj["cpu_us"]),
        kernels=tuple((int(s), int(d)) for s, d in obj["kernels"]),
        schema=obj["schema"],
        inputs=tuple(_directive_from_obj(d) for d in obj["inputs"]),
        outputs=tuple(
            TensorSpec(
                tensor=tuple(t["tensor"]), shape=tuple(t["shape"]), dtype=normalize_dtype(t["dtype"])
            )
            for t in obj["outputs"]
        ),
        comm=comm,
    )


def save_plan(plan: ReplayPlan) -> bytes:
    """Canonical (sorted-key) JSON bytes; identical plans serialize identically."""
    doc = {
        "version": plan.version,
        "rank": plan.rank,
        "world_size": plan.world_size,
        "process_groups": {str(g): list(members) for g, members in plan.process_groups.items()},
        "group_id_map": {str(old): new for old, new in plan.group_id_map.items()},
        "ops": [_op_to_obj(op) for op in plan.ops],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def load_plan(data: bytes | str) -> ReplayPlan:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"plan is not valid UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"plan is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDocument("plan must be a JSON object")
    version = doc.get("version")
    if version != PLAN_VERSION:
        raise VersionMismatch(f"plan version {version!r} unsupported (expected {PLAN_VERSION!r})")
    try:
        return ReplayPlan(
            rank=int(doc["rank"]),
            world_size=int(doc["world_size"]),
            ops=tuple(_op_from_obj(o) for o in doc["ops"]),
            process_groups={
                int(g): tuple(members) for g, members in doc["process_groups"].items()
            },
            version=version,
            group_id_map={int(old): int(new) for old, new in doc.get("group_id_map", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedDocument(f"plan document is structurally invalid: {exc}") from exc
