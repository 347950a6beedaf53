"""Wire-format bodies for protocol v1.0.

Floats travel as decimal text with 17 significant digits (lossless for
IEEE doubles); an infinite log probability is the literal ``-1e999``,
which any IEEE JSON reader parses back to -inf.  NaN never appears in a
conforming body.
"""

from __future__ import annotations

import json
import math
from typing import Any

from fastapi import Response

PROTOCOL_VERSION = "1.0"
NEG_INF_LITERAL = "-1e999"
POS_INF_LITERAL = "1e999"


def format_float(x: float) -> str:
    """17-significant-digit decimal text; round-trips every finite double."""
    if math.isnan(x):
        raise ValueError("NaN is not representable in a wire body")
    if math.isinf(x):
        return NEG_INF_LITERAL if x < 0 else POS_INF_LITERAL
    if x == int(x) and abs(x) < 1e16:
        return f"{x:.1f}"
    return format(x, ".17g")


def _encode(obj: Any) -> str:
    if obj is None or obj is True or obj is False:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items())
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"not wire-serializable: {type(obj).__name__}")


def wire_body(payload: dict) -> str:
    return _encode(payload)


def wire_response(payload: dict) -> Response:
    return Response(content=wire_body(payload), media_type="application/json")
