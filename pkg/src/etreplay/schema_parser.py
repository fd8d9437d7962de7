"""String parser for operator schema signatures.

Signatures follow the ``ns::name.overload(params) -> returns`` form in
which parameter types may carry optional markers (``?``), list markers
(``[]`` / ``[n]``), alias annotations in parentheses, literal defaults
after ``=``, and a ``*`` separator before keyword-only parameters.
Parsed signatures render back to a canonical single-spaced string.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ETReplayError


class SchemaSyntaxError(ETReplayError):
    """Schema text that does not follow the signature grammar."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnbalancedBrackets(SchemaSyntaxError):
    pass


_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_OPEN = {"(": ")", "[": "]"}
_CLOSE = {")": "(", "]": "["}


@dataclass(frozen=True)
class Param:
    name: str
    type_expr: str
    default: str | None = None
    kwarg_only: bool = False


@dataclass(frozen=True)
class OpSchema:
    namespace: str
    base_name: str
    overload: str | None = None
    params: tuple[Param, ...] = ()
    returns: tuple[str, ...] = ()

    @property
    def qualified_name(self) -> str:
        name = f"{self.namespace}::{self.base_name}"
        return f"{name}.{self.overload}" if self.overload else name


def _normalize(text: str) -> str:
    return " ".join(text.split())


def _scan_balanced(text: str, start: int, until: str) -> int:
    """Return the index of the first top-level ``until`` char at or after start."""
    depth: list[str] = []
    quote: str | None = None
    i = start
    while i < len(text):
        c = text[i]
        if quote is not None:
            if c == quote and text[i - 1] != "\\":
                quote = None
        elif c in "'\"":
            quote = c
        elif c in _OPEN:
            depth.append(c)
        elif c in _CLOSE:
            if not depth or depth[-1] != _CLOSE[c]:
                raise UnbalancedBrackets(f"unexpected {c!r}", i)
            depth.pop()
        elif c == until and not depth:
            return i
        i += 1
    if depth:
        raise UnbalancedBrackets(f"unclosed {depth[-1]!r}", len(text))
    if quote is not None:
        raise SchemaSyntaxError("unterminated string literal", len(text))
    return -1


def _split_top(text: str, base_offset: int) -> list[tuple[str, int]]:
    """Split at top-level commas; returns (chunk, byte offset) pairs."""
    chunks: list[tuple[str, int]] = []
    pos = 0
    while True:
        comma = _scan_balanced(text, pos, ",")
        if comma < 0:
            chunks.append((text[pos:], base_offset + pos))
            return chunks
        chunks.append((text[pos:comma], base_offset + pos))
        pos = comma + 1


def _parse_param(chunk: str, offset: int, kwarg_only: bool) -> Param:
    text = chunk.strip()
    if not text:
        raise SchemaSyntaxError("empty parameter", offset)
    default: str | None = None
    eq = _scan_balanced(text, 0, "=")
    if eq >= 0:
        default = _normalize(text[eq + 1 :])
        if not default:
            raise SchemaSyntaxError("empty default value", offset + eq)
        text = text[:eq].strip()
    pieces = text.rsplit(None, 1)
    if len(pieces) != 2:
        raise SchemaSyntaxError(f"parameter {text!r} needs a type and a name", offset)
    type_expr, name = _normalize(pieces[0]), pieces[1]
    if not _IDENT.match(name):
        raise SchemaSyntaxError(f"bad parameter name {name!r}", offset)
    return Param(name=name, type_expr=type_expr, default=default, kwarg_only=kwarg_only)


def parse_op_schema(text: str) -> OpSchema:
    """Parse one schema string; raises SchemaSyntaxError with a byte offset."""
    if not text or not text.strip():
        raise SchemaSyntaxError("empty schema string", 0)
    sep = text.find("::")
    if sep < 0:
        raise SchemaSyntaxError("missing '::' namespace separator", 0)
    namespace = text[:sep].strip()
    if not _IDENT.match(namespace):
        raise SchemaSyntaxError(f"bad namespace {namespace!r}", 0)

    lparen = text.find("(", sep)
    if lparen < 0:
        raise SchemaSyntaxError("missing parameter list", len(text))
    name_part = text[sep + 2 : lparen].strip()
    base_name, overload = name_part, None
    if "." in name_part:
        base_name, overload = name_part.split(".", 1)
        if not _IDENT.match(overload):
            raise SchemaSyntaxError(f"bad overload name {overload!r}", sep + 2)
    if not _IDENT.match(base_name):
        raise SchemaSyntaxError(f"bad operator name {base_name!r}", sep + 2)

    rparen = _scan_balanced(text, lparen + 1, ")")
    if rparen < 0:
        raise UnbalancedBrackets("parameter list never closes", lparen)

    params: list[Param] = []
    seen_star = False
    body = text[lparen + 1 : rparen]
    if body.strip():
        for chunk, offset in _split_top(body, lparen + 1):
            if chunk.strip() == "*":
                if seen_star:
                    raise SchemaSyntaxError("duplicate '*' marker", offset)
                seen_star = True
                continue
            params.append(_parse_param(chunk, offset, kwarg_only=seen_star))

    tail = text[rparen + 1 :].strip()
    if not tail.startswith("->"):
        raise SchemaSyntaxError("missing '->' before return types", rparen + 1)
    ret_text = tail[2:].strip()
    returns = _parse_returns(ret_text, rparen + 1)
    return OpSchema(
        namespace=namespace,
        base_name=base_name,
        overload=overload,
        params=tuple(params),
        returns=tuple(returns),
    )


def _parse_returns(ret_text: str, offset: int) -> list[str]:
    if not ret_text:
        raise SchemaSyntaxError("missing return type", offset)
    if ret_text.startswith("("):
        # A parenthesized tuple consumes the whole tail; "Tensor(a)[]" and
        # friends begin with an identifier instead, so they fall through.
        end = _matching_paren(ret_text)
        if end == len(ret_text) - 1:
            inner = ret_text[1:end]
            if not inner.strip():
                return []
            return [_normalize(c) for c, _ in _split_top(inner, offset + 1)]
    return [_normalize(ret_text)]


def _matching_paren(text: str) -> int:
    depth = 0
    for i, c in enumerate(text):
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
            if depth == 0:
                return i
            if depth < 0:
                raise UnbalancedBrackets("unexpected ')'", i)
    raise UnbalancedBrackets("unclosed '('", len(text))


def render(schema: OpSchema) -> str:
    """Canonical textual form; parse_op_schema(render(s)) == s."""
    parts: list[str] = []
    star_emitted = False
    for p in schema.params:
        if p.kwarg_only and not star_emitted:
            parts.append("*")
            star_emitted = True
        text = f"{p.type_expr} {p.name}"
        if p.default is not None:
            text += f"={p.default}"
        parts.append(text)
    if len(schema.returns) == 1:
        ret = schema.returns[0]
    else:
        ret = "(" + ", ".join(schema.returns) + ")"
    return f"{schema.qualified_name}({', '.join(parts)}) -> {ret}"
