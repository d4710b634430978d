"""Complex values in C^m, exact or floating.

A value is a tuple of m coordinates, all of one mode: exact coordinates
are :class:`QComplex` (rational real and imaginary parts), float
coordinates are the builtin ``complex``.  Exactness is what makes the
measure and harmonicity identities checkable as identities rather than
up to rounding, so exact mode is the default everywhere.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Iterable, Union

from .errors import ModeMismatchError

_RatLike = Union[int, Fraction]


class QComplex:
    """Complex number with rational real and imaginary parts."""

    __slots__ = ("re", "im")

    def __init__(self, re: _RatLike = 0, im: _RatLike = 0):
        self.re = Fraction(re)
        self.im = Fraction(im)

    def __add__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return QComplex(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __sub__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return QComplex(self.re - other.re, self.im - other.im)

    def __rsub__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other - self

    def __mul__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return QComplex(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return NotImplemented
        d = other.abs2()
        if d == 0:
            raise ZeroDivisionError("division by zero QComplex")
        return QComplex(
            (self.re * other.re + self.im * other.im) / d,
            (self.im * other.re - self.re * other.im) / d,
        )

    def __neg__(self):
        return QComplex(-self.re, -self.im)

    def __eq__(self, other):
        other = _coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self.re == other.re and self.im == other.im

    def __hash__(self):
        return hash((self.re, self.im))

    def __bool__(self):
        return bool(self.re) or bool(self.im)

    def __repr__(self):
        return f"QComplex({self.re!r}, {self.im!r})"

    def abs2(self) -> Fraction:
        """Squared modulus, exact."""
        return self.re * self.re + self.im * self.im

    def to_complex(self) -> complex:
        return complex(safe_float(self.re), safe_float(self.im))


def _coerce(x) -> "QComplex":
    if isinstance(x, QComplex):
        return x
    if isinstance(x, (int, Fraction)):
        return QComplex(x)
    return NotImplemented


QC_ZERO = QComplex(0)
QC_ONE = QComplex(1)

ExactValue = tuple  # tuple[QComplex, ...]
FloatValue = tuple  # tuple[complex, ...]
Value = tuple


def value_mode(v: Value) -> str:
    return "exact" if isinstance(v[0], QComplex) else "float"


def check_same_mode(*values: Value) -> str:
    modes = {value_mode(v) for v in values}
    if len(modes) != 1:
        raise ModeMismatchError("exact and float values mixed in one computation")
    return modes.pop()


def vzero(m: int, mode: str = "exact") -> Value:
    if mode == "exact":
        return (QC_ZERO,) * m
    return (0j,) * m


def as_value(x, m: int, mode: str = "exact") -> Value:
    """Coerce a scalar or coordinate sequence into a well-formed value."""
    if isinstance(x, tuple) and x and isinstance(x[0], (QComplex, complex)):
        if len(x) != m:
            raise ValueError(f"value has {len(x)} coordinates, expected {m}")
        return x
    if isinstance(x, (int, Fraction, QComplex, complex, float)):
        coords = [x] * m
    else:
        coords = list(x)
        if len(coords) != m:
            raise ValueError(f"value has {len(coords)} coordinates, expected {m}")
    if mode == "exact":
        out = []
        for c in coords:
            if isinstance(c, QComplex):
                out.append(c)
            elif isinstance(c, (int, Fraction)):
                out.append(QComplex(c))
            else:
                raise ModeMismatchError(f"cannot use {type(c).__name__} in exact mode")
        return tuple(out)
    return tuple(complex(c.to_complex() if isinstance(c, QComplex) else c) for c in coords)


def vadd(u: Value, v: Value) -> Value:
    return tuple(a + b for a, b in zip(u, v, strict=True))


def vsub(u: Value, v: Value) -> Value:
    return tuple(a - b for a, b in zip(u, v, strict=True))


def vscale(a, v: Value) -> Value:
    if value_mode(v) == "float" and isinstance(a, (QComplex, Fraction)):
        a = a.to_complex() if isinstance(a, QComplex) else safe_float(a)
    return tuple(a * c for c in v)


def vdot_weighted(weights: Iterable, vals: Iterable[Value]) -> Value:
    """Sum of w_i * v_i over coordinates."""
    it = iter(zip(weights, vals))
    w0, v0 = next(it)
    acc = list(vscale(w0, v0))
    for w, v in it:
        for j, c in enumerate(vscale(w, v)):
            acc[j] = acc[j] + c
    return tuple(acc)


def dist2(u: Value, v: Value):
    """Squared Euclidean distance on C^m; Fraction in exact mode, float otherwise."""
    if isinstance(u[0], QComplex):
        total = Fraction(0)
        for a, b in zip(u, v, strict=True):
            total += (a - b).abs2()
        return total
    total = 0.0
    for a, b in zip(u, v, strict=True):
        d = a - b
        total += d.real * d.real + d.imag * d.imag
    return total


def safe_float(x) -> float:
    """float() that saturates instead of raising on huge rationals."""
    try:
        return float(x)
    except OverflowError:
        return math.inf if x > 0 else -math.inf


def rational_sqrt(x: Fraction) -> Fraction | None:
    """Exact square root of a nonnegative rational, or None if irrational."""
    if x < 0:
        raise ValueError("negative radicand")
    n, d = x.numerator, x.denominator
    rn, rd = math.isqrt(n), math.isqrt(d)
    if rn * rn == n and rd * rd == d:
        return Fraction(rn, rd)
    return None


def metric_factor(d2) -> float:
    """t/(1+t) for t = sqrt(d2); the bounded distance profile of both metrics."""
    if isinstance(d2, Fraction):
        if d2 == 0:
            return 0.0
        fd2 = safe_float(d2)
    else:
        fd2 = d2
    if fd2 == 0.0:
        return 0.0
    if not math.isfinite(fd2) or fd2 > 1e300:
        return 1.0
    t = math.sqrt(fd2)
    return t / (1.0 + t)


def metric_factor_exact(d2: Fraction) -> Fraction | None:
    """Exact t/(1+t) when sqrt(d2) is rational, else None."""
    if d2 == 0:
        return Fraction(0)
    t = rational_sqrt(d2)
    if t is None:
        return None
    return t / (1 + t)
