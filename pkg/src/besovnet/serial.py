"""Shared helpers for the JSON documents written and read by the package."""

import json
import math


class DocumentError(ValueError):
    """A document could not be parsed into the expected structure.

    ``field`` names the offending key path, ``reason`` says what was wrong.
    """

    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")

    def to_dict(self):
        return {"error": "document", "field": self.field, "reason": self.reason}


def encode_real(x):
    """Encode a real that may be infinite; JSON has no literal for it."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def decode_real(value, field="value"):
    if isinstance(value, str):
        if value in ("inf", "Infinity", "+inf"):
            return math.inf
        if value in ("-inf", "-Infinity"):
            return -math.inf
        raise DocumentError(field, f"expected a number, got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DocumentError(field, f"expected a number, got {type(value).__name__}")
    return float(value)


def require(doc, key, field=""):
    path = f"{field}.{key}" if field else key
    if not isinstance(doc, dict):
        raise DocumentError(field or "<root>", "expected an object")
    if key not in doc:
        raise DocumentError(path, "missing")
    return doc[key]


def dumps(doc):
    """Canonical text form: fixed key order and float repr, so output is byte-stable."""
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


def loads(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DocumentError("<root>", f"not valid JSON ({exc.msg} at line {exc.lineno})") from exc
