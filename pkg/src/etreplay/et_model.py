"""Execution-trace data model: parsing, validation, and serialization.

A trace is a tree of operator invocations recorded at runtime. Each node
carries its arguments; tensor arguments are identified by an opaque
six-integer tuple so data dependencies can be tracked without values.
The on-disk format is documented bit-exactly in docs/formats.md.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Union

from .errors import ETReplayError, MalformedDocument

SCHEMA_MAJOR = 1
DEFAULT_SCHEMA_VERSION = "1.0.0"


class DType(str, Enum):
    F32 = "f32"
    F64 = "f64"
    F16 = "f16"
    BF16 = "bf16"
    I64 = "i64"
    I32 = "i32"
    I8 = "i8"
    U8 = "u8"
    BOOL = "bool"
    UNKNOWN = "unknown"


_DTYPE_SIZES = {
    DType.F32: 4,
    DType.F64: 8,
    DType.F16: 2,
    DType.BF16: 2,
    DType.I64: 8,
    DType.I32: 4,
    DType.I8: 1,
    DType.U8: 1,
    DType.BOOL: 1,
    DType.UNKNOWN: 1,
}

_INTEGER_DTYPES = frozenset({DType.I64, DType.I32, DType.I8, DType.U8})


def normalize_dtype(tag: str) -> DType:
    """Map a recorded type tag to a DType; unrecognized tags become UNKNOWN."""
    try:
        return DType(tag)
    except ValueError:
        return DType.UNKNOWN


def dtype_size(dtype: DType) -> int:
    return _DTYPE_SIZES[dtype]


def is_integer_dtype(dtype: DType) -> bool:
    return dtype in _INTEGER_DTYPES


@dataclass(frozen=True)
class TensorRef:
    """A recorded tensor argument. Identity is the six-tuple, nothing else."""

    id: tuple[int, ...]
    shape: tuple[int, ...] = ()
    dtype: DType = DType.UNKNOWN

    def element_count(self) -> int:
        n = 1
        for extent in self.shape:
            n *= extent
        return n

    def nbytes(self) -> int:
        return self.element_count() * dtype_size(self.dtype)


@dataclass(frozen=True)
class ScalarArg:
    value: Union[int, float, bool, str]


@dataclass(frozen=True)
class TensorArg:
    ref: TensorRef


@dataclass(frozen=True)
class ListArg:
    items: tuple["ArgValue", ...]


@dataclass(frozen=True)
class NoneArg:
    pass


ArgValue = Union[ScalarArg, TensorArg, ListArg, NoneArg]


def iter_tensors(arg: ArgValue) -> Iterable[TensorRef]:
    """Yield every TensorRef reachable inside one argument value."""
    if isinstance(arg, TensorArg):
        yield arg.ref
    elif isinstance(arg, ListArg):
        for item in arg.items:
            yield from iter_tensors(item)


@dataclass(frozen=True)
class ETNode:
    name: str
    id: int
    parent: int = 0  # 0 means "no parent" (root)
    op_schema: str = ""
    inputs: tuple[ArgValue, ...] = ()
    outputs: tuple[ArgValue, ...] = ()
    tid: int = 0
    label: str = ""

    def is_root(self) -> bool:
        return self.parent == 0

    def input_tensors(self) -> list[TensorRef]:
        return [t for a in self.inputs for t in iter_tensors(a)]

    def output_tensors(self) -> list[TensorRef]:
        return [t for a in self.outputs for t in iter_tensors(a)]


@dataclass(frozen=True)
class ExecutionTrace:
    nodes: tuple[ETNode, ...]
    rank: int = 0
    schema_version: str = DEFAULT_SCHEMA_VERSION

    def node_by_id(self, node_id: int) -> ETNode:
        return self._index()[node_id]

    def _index(self) -> dict[int, ETNode]:
        # Cached on first use; the dataclass is frozen so this is safe.
        cache = getattr(self, "_node_index", None)
        if cache is None:
            cache = {n.id: n for n in self.nodes}
            object.__setattr__(self, "_node_index", cache)
        return cache

    def children_of(self, node_id: int) -> list[ETNode]:
        return [n for n in self.nodes if n.parent == node_id and n.id != node_id]

    def root(self) -> ETNode:
        roots = [n for n in self.nodes if n.is_root()]
        if len(roots) != 1:
            raise ETReplayError(f"trace has {len(roots)} roots, expected exactly 1")
        return roots[0]


@dataclass(frozen=True)
class Violation:
    rule: str
    node_id: int
    detail: str = ""

    def __str__(self) -> str:
        msg = f"{self.rule} at node {self.node_id}"
        return f"{msg}: {self.detail}" if self.detail else msg


class DuplicateNodeId(MalformedDocument):
    pass


class DanglingParent(MalformedDocument):
    pass


class ParentOrderViolation(MalformedDocument):
    pass


class ArityMismatch(MalformedDocument):
    pass


_NODE_KEYS = (
    "name",
    "id",
    "parent",
    "op_schema",
    "inputs",
    "input_shapes",
    "input_types",
    "outputs",
    "output_shapes",
    "output_types",
)


def _decode_arg(value, shape_slot, type_slot, node_id: int) -> ArgValue:
    # An argument position is a tensor iff its type slot is a string tag.
    if isinstance(type_slot, str):
        if not (
            isinstance(value, list)
            and len(value) == 6
            and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        ):
            raise MalformedDocument(
                f"node {node_id}: tensor argument must be a 6-integer array, got {value!r}"
            )
        if not isinstance(shape_slot, list) or not all(
            isinstance(e, int) and not isinstance(e, bool) and e >= 0 for e in shape_slot
        ):
            raise MalformedDocument(
                f"node {node_id}: tensor shape must be a list of non-negative ints, got {shape_slot!r}"
            )
        return TensorArg(TensorRef(tuple(value), tuple(shape_slot), normalize_dtype(type_slot)))
    if isinstance(value, list):
        n = len(value)
        shapes = shape_slot if isinstance(shape_slot, list) and len(shape_slot) == n else [[]] * n
        types = type_slot if isinstance(type_slot, list) and len(type_slot) == n else [[]] * n
        return ListArg(
            tuple(_decode_arg(v, s, t, node_id) for v, s, t in zip(value, shapes, types))
        )
    if value is None:
        return NoneArg()
    if isinstance(value, (int, float, bool, str)):
        return ScalarArg(value)
    raise MalformedDocument(f"node {node_id}: unsupported argument encoding {value!r}")


def _encode_arg(arg: ArgValue) -> tuple[object, object, object]:
    """Return the (value, shape, type) slot triple for one argument."""
    if isinstance(arg, TensorArg):
        return list(arg.ref.id), list(arg.ref.shape), arg.ref.dtype.value
    if isinstance(arg, ListArg):
        triples = [_encode_arg(item) for item in arg.items]
        return (
            [t[0] for t in triples],
            [t[1] for t in triples],
            [t[2] for t in triples],
        )
    if isinstance(arg, NoneArg):
        return None, [], []
    if isinstance(arg, ScalarArg):
        return arg.value, [], []
    raise ETReplayError(f"not an ArgValue: {arg!r}")


def _decode_node(obj: dict) -> ETNode:
    if not isinstance(obj, dict):
        raise MalformedDocument(f"node entry must be an object, got {obj!r}")
    missing = [k for k in _NODE_KEYS if k not in obj]
    if missing:
        raise MalformedDocument(f"node entry missing keys {missing}: {obj!r}")
    node_id = obj["id"]
    if not isinstance(node_id, int) or isinstance(node_id, bool) or node_id <= 0:
        raise MalformedDocument(f"node id must be a positive integer, got {node_id!r}")
    parent = obj["parent"]
    if not isinstance(parent, int) or isinstance(parent, bool) or parent < 0:
        raise MalformedDocument(f"node {node_id}: parent must be a non-negative integer")

    args: dict[str, tuple[ArgValue, ...]] = {}
    for side in ("input", "output"):
        values = obj[f"{side}s"]
        shapes = obj[f"{side}_shapes"]
        types = obj[f"{side}_types"]
        for key in (f"{side}s", f"{side}_shapes", f"{side}_types"):
            if not isinstance(obj[key], list):
                raise MalformedDocument(f"node {node_id}: {key} must be an array")
        if not (len(values) == len(shapes) == len(types)):
            raise ArityMismatch(
                f"node {node_id}: {side}s has {len(values)} entries but "
                f"{len(shapes)} shapes and {len(types)} types"
            )
        args[side] = tuple(
            _decode_arg(v, s, t, node_id) for v, s, t in zip(values, shapes, types)
        )

    tid = obj.get("tid", 0)
    if not isinstance(tid, int) or isinstance(tid, bool):
        raise MalformedDocument(f"node {node_id}: tid must be an integer")
    return ETNode(
        name=str(obj["name"]),
        id=node_id,
        parent=parent,
        op_schema=str(obj["op_schema"]),
        inputs=args["input"],
        outputs=args["output"],
        tid=tid,
        label=str(obj.get("label", "")),
    )


def _check_schema_version(version: str) -> None:
    head = version.split(".", 1)[0]
    if head.isdigit() and int(head) > SCHEMA_MAJOR:
        raise MalformedDocument(
            f"unsupported trace schema major version {head} (supported: {SCHEMA_MAJOR})"
        )


def parse_trace(data: bytes | str) -> ExecutionTrace:
    """Parse an execution-trace JSON document.

    Raises MalformedDocument (or a subclass: DuplicateNodeId, DanglingParent,
    ParentOrderViolation, ArityMismatch) when the document is not a valid
    trace. The returned nodes are sorted by id.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"trace is not valid UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"trace is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDocument("trace document must be a JSON object")
    for key in ("schema", "nodes"):
        if key not in doc:
            raise MalformedDocument(f"trace document missing top-level key {key!r}")
    if not isinstance(doc["nodes"], list):
        raise MalformedDocument("trace 'nodes' must be an array")
    schema_version = str(doc["schema"])
    _check_schema_version(schema_version)
    rank = doc.get("rank", 0)
    if not isinstance(rank, int) or isinstance(rank, bool) or rank < 0:
        raise MalformedDocument("trace 'rank' must be a non-negative integer")

    nodes = sorted((_decode_node(obj) for obj in doc["nodes"]), key=lambda n: n.id)

    seen: set[int] = set()
    roots = 0
    for node in nodes:
        if node.id in seen:
            raise DuplicateNodeId(f"node id {node.id} appears more than once")
        seen.add(node.id)
        if node.is_root():
            roots += 1
    for node in nodes:
        if node.is_root():
            continue
        if node.parent not in seen:
            raise DanglingParent(f"node {node.id} references missing parent {node.parent}")
        if node.parent >= node.id:
            raise ParentOrderViolation(
                f"node {node.id} references parent {node.parent} which does not precede it"
            )
    if roots != 1:
        raise MalformedDocument(f"trace must have exactly one root node, found {roots}")
    return ExecutionTrace(nodes=tuple(nodes), rank=rank, schema_version=schema_version)


def _node_to_obj(node: ETNode) -> dict:
    in_triples = [_encode_arg(a) for a in node.inputs]
    out_triples = [_encode_arg(a) for a in node.outputs]
    obj = {
        "name": node.name,
        "id": node.id,
        "parent": node.parent,
        "op_schema": node.op_schema,
        "inputs": [t[0] for t in in_triples],
        "input_shapes": [t[1] for t in in_triples],
        "input_types": [t[2] for t in in_triples],
        "outputs": [t[0] for t in out_triples],
        "output_shapes": [t[1] for t in out_triples],
        "output_types": [t[2] for t in out_triples],
    }
    if node.tid != 0:
        obj["tid"] = node.tid
    if node.label:
        obj["label"] = node.label
    return obj


def serialize_trace(trace: ExecutionTrace) -> bytes:
    """Render a trace back to its canonical JSON document form."""
    doc = {
        "schema": trace.schema_version,
        "rank": trace.rank,
        "nodes": [_node_to_obj(n) for n in sorted(trace.nodes, key=lambda n: n.id)],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def _tensor_violations(node: ETNode) -> list[Violation]:
    out = []
    for ref in node.input_tensors() + node.output_tensors():
        if len(ref.id) != 6 or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in ref.id
        ):
            out.append(Violation("BadTensorId", node.id, f"tensor id {ref.id!r} is not a 6-int tuple"))
        if any(e < 0 for e in ref.shape):
            out.append(Violation("NegativeExtent", node.id, f"shape {ref.shape!r}"))
    return out


def validate(trace: ExecutionTrace) -> list[Violation]:
    """Check every trace invariant; returns one Violation per broken rule.

    Returns [] exactly when serialize_trace(trace) would be accepted by
    parse_trace.
    """
    violations: list[Violation] = []
    seen: set[int] = set()
    roots = []
    for node in trace.nodes:
        if not isinstance(node.id, int) or node.id <= 0:
            violations.append(Violation("BadNodeId", node.id, "id must be a positive integer"))
            continue
        if node.id in seen:
            violations.append(Violation("DuplicateNodeId", node.id))
        seen.add(node.id)
        if node.is_root():
            roots.append(node.id)
    for node in trace.nodes:
        if not node.is_root():
            if node.parent not in seen:
                violations.append(
                    Violation("DanglingParent", node.id, f"parent {node.parent} not in trace")
                )
            elif node.parent >= node.id:
                violations.append(
                    Violation("ParentOrderViolation", node.id, f"parent {node.parent} >= id")
                )
        violations.extend(_tensor_violations(node))
    if len(roots) == 0:
        violations.append(Violation("NoRoot", 0, "no node with parent 0"))
    elif len(roots) > 1:
        violations.append(Violation("MultipleRoots", roots[1], f"roots: {roots}"))
    if trace.rank < 0:
        violations.append(Violation("NegativeRank", 0, f"rank {trace.rank}"))
    head = trace.schema_version.split(".", 1)[0]
    if head.isdigit() and int(head) > SCHEMA_MAJOR:
        violations.append(Violation("UnsupportedSchemaVersion", 0, trace.schema_version))
    return violations


def execution_order(trace: ExecutionTrace) -> list[int]:
    """Canonical replay order: node ids ascending."""
    return sorted(n.id for n in trace.nodes)
