"""Bit-exact JSON helpers.

Rationals travel as strings "numerator/denominator" (or "n" for
integers) so files round-trip exactly; float-mode coordinates travel as
plain JSON numbers.  All emitters sort keys and use a fixed separator
set so identical objects produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from pathlib import Path
from typing import Any

from .errors import ParseError
from .values import QComplex, Value, value_mode


def parse_rational(s) -> Fraction:
    if isinstance(s, int):
        return Fraction(s)
    if isinstance(s, str):
        try:
            return Fraction(s)
        except (ValueError, ZeroDivisionError) as exc:
            raise ParseError(f"bad rational literal {s!r}: {exc}") from None
    raise ParseError(f"expected rational string, got {type(s).__name__}")


def format_rational(x: Fraction) -> str:
    return str(x)


def parse_coord(obj, mode: str):
    """One complex coordinate: [re, im] with rational strings or numbers."""
    if not isinstance(obj, (list, tuple)) or len(obj) != 2:
        raise ParseError(f"coordinate must be a [re, im] pair, got {obj!r}")
    if mode == "exact":
        return QComplex(parse_rational(obj[0]), parse_rational(obj[1]))
    try:
        return complex(float(obj[0]), float(obj[1]))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad float coordinate {obj!r}: {exc}") from None


def format_coord(c) -> list:
    if isinstance(c, QComplex):
        return [format_rational(c.re), format_rational(c.im)]
    return [c.real, c.imag]


def parse_value(obj, m: int, mode: str) -> Value:
    if not isinstance(obj, (list, tuple)) or len(obj) != m:
        raise ParseError(f"value must list {m} coordinates, got {obj!r}")
    return tuple(parse_coord(c, mode) for c in obj)


def format_value(v: Value) -> list:
    return [format_coord(c) for c in v]


def detect_mode(obj: dict, default: str = "exact") -> str:
    mode = obj.get("mode", default)
    if mode not in ("exact", "float"):
        raise ParseError(f"unknown mode {mode!r}")
    return mode


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def load_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON in {path}: {exc}") from None


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def value_json_mode(v: Value) -> str:
    return value_mode(v)
