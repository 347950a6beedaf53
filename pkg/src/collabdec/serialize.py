"""Canonical structured-text serialization.

One serializer for everything that must be byte-stable: decode traces,
evaluation reports, bound reports, wire-protocol bodies, and golden files.
Floats are rendered as decimal text with 17 significant digits (lossless
for IEEE doubles); mapping keys keep insertion order for dataclass-derived
objects and are emitted as-is, so producers control field order.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Any

NEG_INF_LITERAL = "-1e999"  # parses back to -inf in any IEEE JSON reader
POS_INF_LITERAL = "1e999"


def format_float(x: float) -> str:
    """17-significant-digit decimal text; round-trips every finite double."""
    if math.isnan(x):
        raise ValueError("NaN is not serializable")
    if math.isinf(x):
        return NEG_INF_LITERAL if x < 0 else POS_INF_LITERAL
    if x == int(x) and abs(x) < 1e16:
        # keep integral floats readable and unambiguous ("2.0", not "2")
        return f"{x:.1f}"
    return format(x, ".17g")


def _encode(obj: Any, out: list[str], indent: int, level: int, allow_inf: bool) -> None:
    pad = " " * (indent * level)
    pad_in = " " * (indent * (level + 1))
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        if math.isinf(obj) and not allow_inf:
            raise ValueError("infinite float outside a wire body")
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(_quote(obj))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        _encode({f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)},
                out, indent, level, allow_inf)
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (k, v) in enumerate(obj.items()):
            if not isinstance(k, str):
                k = str(k)
            out.append(pad_in)
            out.append(_quote(k))
            out.append(": ")
            _encode(v, out, indent, level + 1, allow_inf)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad_in)
            _encode(v, out, indent, level + 1, allow_inf)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "]")
    else:
        raise TypeError(f"not canonically serializable: {type(obj).__name__}")


def _quote(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\r":
            out.append("\\r")
        elif ord(ch) < 0x20:
            out.append(f"\\u{ord(ch):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def canon_dumps(obj: Any, *, indent: int = 2, allow_inf: bool = False) -> str:
    """Serialize to canonical JSON text (trailing newline included)."""
    out: list[str] = []
    _encode(obj, out, indent, 0, allow_inf)
    out.append("\n")
    return "".join(out)


def canon_csv(rows: list[dict[str, Any]], columns: list[str]) -> str:
    """CSV with a fixed column order and canonical float text."""
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row.get(col)
            if v is None:
                cells.append("")
            elif isinstance(v, bool):
                cells.append("true" if v else "false")
            elif isinstance(v, float):
                cells.append(format_float(v))
            elif isinstance(v, int):
                cells.append(str(v))
            else:
                text = str(v)
                if "," in text or '"' in text or "\n" in text:
                    text = '"' + text.replace('"', '""') + '"'
                cells.append(text)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
