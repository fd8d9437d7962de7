"""Operator selection, categorization, and tensor lifetime classification.

Traces record the full call stack, so many recorded operators are
implementation details of their parents (aten::linear already contains
aten::t and aten::addmm). Replay keeps only the outermost operator of
each call chain and classifies the tensors it consumes as produced
in-trace (intermediate) or externally supplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fnmatch import fnmatchcase

from .errors import ETReplayError
from .et_model import ETNode, ExecutionTrace, TensorRef


class OpCategory(str, Enum):
    ATEN = "aten"
    COMMUNICATION = "communication"
    FUSED = "fused"
    CUSTOM = "custom"


COMM_NAME_PREFIXES = ("nccl:", "c10d::")
COMM_NAMES = frozenset(
    {
        "all_reduce",
        "all_to_all",
        "all_gather",
        "reduce_scatter",
        "broadcast",
        "send",
        "recv",
        "barrier",
    }
)
FUSION_MARKERS = ("fused", "CudaFusionGroup", "nvfuser")


class EmptySelection(ETReplayError):
    pass


@dataclass(frozen=True)
class CategoryOverrides:
    """User-supplied ``pattern -> category`` rules, checked before built-ins."""

    rules: tuple[tuple[str, OpCategory], ...] = ()

    def lookup(self, name: str) -> OpCategory | None:
        for pattern, category in self.rules:
            if fnmatchcase(name, pattern):
                return category
        return None


def parse_category_overrides(text: str) -> CategoryOverrides:
    """Parse override config lines of the form ``pattern -> category``."""
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        sep = "→" if "→" in line else "->"
        if sep not in line:
            raise ETReplayError(f"override line {lineno} missing '->': {raw!r}")
        pattern, _, category = line.partition(sep)
        try:
            rules.append((pattern.strip(), OpCategory(category.strip().lower())))
        except ValueError:
            raise ETReplayError(f"override line {lineno}: unknown category {category.strip()!r}")
    return CategoryOverrides(tuple(rules))


def is_comm_name(name: str) -> bool:
    return name.startswith(COMM_NAME_PREFIXES) or name in COMM_NAMES


def is_annotation_name(name: str) -> bool:
    return name.startswith("##") and name.endswith("##") and len(name) >= 4


def is_wrapper_node(node: ETNode) -> bool:
    """Structural nodes (root, user annotation regions) traversed but never replayed."""
    return node.is_root() or is_annotation_name(node.name)


def is_operator_node(node: ETNode, overrides: CategoryOverrides | None = None) -> bool:
    if is_wrapper_node(node):
        return False
    if overrides is not None and overrides.lookup(node.name) is not None:
        return True
    return bool(node.op_schema) or "::" in node.name or is_comm_name(node.name)


def categorize_op(node: ETNode, overrides: CategoryOverrides | None = None) -> OpCategory:
    """Classify a selected operator by name; total and pure."""
    name = node.name
    if overrides is not None:
        hit = overrides.lookup(name)
        if hit is not None:
            return hit
    if name.startswith("aten::"):
        return OpCategory.ATEN
    if is_comm_name(name):
        return OpCategory.COMMUNICATION
    if any(marker in name for marker in FUSION_MARKERS):
        return OpCategory.FUSED
    return OpCategory.CUSTOM


def select_replay_ops(
    trace: ExecutionTrace, overrides: CategoryOverrides | None = None
) -> list[int]:
    """Pick the outermost operator of every call chain, in execution order.

    Walks the tree from the root: wrapper nodes are traversed through,
    the first operator node on each path is kept and its whole subtree
    skipped.
    """
    children: dict[int, list[int]] = {}
    for node in trace.nodes:
        if not node.is_root():
            children.setdefault(node.parent, []).append(node.id)
    by_id = {n.id: n for n in trace.nodes}

    selected: list[int] = []
    stack = [n.id for n in trace.nodes if n.is_root()]
    while stack:
        node = by_id[stack.pop()]
        if is_operator_node(node, overrides):
            selected.append(node.id)
            continue
        stack.extend(children.get(node.id, ()))
    return sorted(selected)


@dataclass(frozen=True)
class TensorClassification:
    intermediate: frozenset[tuple[int, ...]]
    external: frozenset[tuple[int, ...]]
    producer: dict[tuple[int, ...], int]


@dataclass(frozen=True)
class DependencyEdge:
    producer: int
    consumer: int
    tensor: tuple[int, ...]


def classify_tensors(trace: ExecutionTrace, selected: list[int]) -> TensorClassification:
    """Partition input tensors of selected ops into intermediate and external.

    A tensor is intermediate iff some selected operator lists it among its
    outputs before (strictly smaller node id than) its first consumer;
    everything else consumed must exist before replay starts.
    """
    by_id = {n.id: n for n in trace.nodes}
    first_produced: dict[tuple[int, ...], int] = {}
    first_consumed: dict[tuple[int, ...], int] = {}
    for node_id in sorted(selected):
        node = by_id[node_id]
        for ref in node.input_tensors():
            first_consumed.setdefault(ref.id, node_id)
        for ref in node.output_tensors():
            first_produced.setdefault(ref.id, node_id)

    intermediate = set()
    external = set()
    producer: dict[tuple[int, ...], int] = {}
    for tensor_id, consumer in first_consumed.items():
        produced_at = first_produced.get(tensor_id)
        if produced_at is not None and produced_at < consumer:
            intermediate.add(tensor_id)
            producer[tensor_id] = produced_at
        else:
            external.add(tensor_id)
    return TensorClassification(
        intermediate=frozenset(intermediate),
        external=frozenset(external),
        producer=producer,
    )


def dependency_edges(
    trace: ExecutionTrace, selected: list[int], classification: TensorClassification
) -> list[DependencyEdge]:
    """Producer → consumer edges over intermediate tensors."""
    by_id = {n.id: n for n in trace.nodes}
    edges = []
    for node_id in sorted(selected):
        for ref in by_id[node_id].input_tensors():
            origin = classification.producer.get(ref.id)
            if origin is not None and origin < node_id:
                edges.append(DependencyEdge(producer=origin, consumer=node_id, tensor=ref.id))
    return edges


@dataclass(frozen=True)
class CategoryShare:
    count: float
    cpu_time: float
    exposed_gpu_time: float


def breakdown(
    trace: ExecutionTrace,
    cpu_us: dict[int, int] | None = None,
    exposed_gpu_us: dict[int, int] | None = None,
    overrides: CategoryOverrides | None = None,
) -> dict[OpCategory, CategoryShare]:
    """Per-category fractions of op count, CPU time, and exposed GPU time.

    Ops missing from a timing table contribute zero to that metric. Each
    distribution sums to 1 whenever its total is nonzero.
    """
    cpu_us = cpu_us or {}
    exposed_gpu_us = exposed_gpu_us or {}
    selected = select_replay_ops(trace, overrides)
    if not selected:
        raise EmptySelection("trace contains no replayable operators")
    by_id = {n.id: n for n in trace.nodes}

    counts = {c: 0 for c in OpCategory}
    cpu = {c: 0 for c in OpCategory}
    gpu = {c: 0 for c in OpCategory}
    for node_id in selected:
        category = categorize_op(by_id[node_id], overrides)
        counts[category] += 1
        cpu[category] += cpu_us.get(node_id, 0)
        gpu[category] += exposed_gpu_us.get(node_id, 0)

    def fractions(table: dict[OpCategory, int]) -> dict[OpCategory, float]:
        total = sum(table.values())
        if total == 0:
            return {c: 0.0 for c in OpCategory}
        return {c: table[c] / total for c in OpCategory}

    count_f, cpu_f, gpu_f = fractions(counts), fractions(cpu), fractions(gpu)
    return {
        c: CategoryShare(count=count_f[c], cpu_time=cpu_f[c], exposed_gpu_time=gpu_f[c])
        for c in OpCategory
    }
