"""Simple functions on the tree boundary and the probability metric.

A level-n simple function assigns one value of C^m to every level-n
sector, i.e. it is constant on each sector and therefore measurable at
level n.  Two simple functions denote the same boundary function when
they agree after refining both to a common level; equality here means
exactly that.

The metric integrates d/(1+d) of the pointwise distance against the
exact sector measures.  Measures are aggregated exactly per distinct
squared distance before any float enters, which makes the metric
literally invariant under refinement and translation, not merely up to
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

from .errors import DepthCapError, ModeMismatchError, ParseError
from .serialize import detect_mode, format_value, parse_value
from .tree import TreeConfig, level_measures
from .values import (
    QComplex,
    Value,
    check_same_mode,
    dist2,
    metric_factor,
    metric_factor_exact,
    safe_float,
    value_mode,
    vadd,
    vscale,
    vsub,
)


@dataclass(frozen=True, eq=False)
class SimpleFunction:
    """One value per level-`level` sector, in canonical vertex order."""

    config: TreeConfig
    level: int
    values: tuple[Value, ...]

    def __post_init__(self):
        expected = self.config.level_size(self.level)
        if len(self.values) != expected:
            raise ValueError(f"level {self.level} needs {expected} values, got {len(self.values)}")
        check_same_mode(*self.values)
        if len({len(v) for v in self.values}) != 1:
            raise ValueError("all values must share one dimension m")

    @property
    def m(self) -> int:
        return len(self.values[0])

    @property
    def mode(self) -> str:
        return value_mode(self.values[0])

    def __eq__(self, other) -> bool:
        """Equality as boundary functions: agree after common refinement."""
        if not isinstance(other, SimpleFunction):
            return NotImplemented
        if self.config != other.config or self.m != other.m or self.mode != other.mode:
            return False
        common = max(self.level, other.level)
        return refine(self, common).values == refine(other, common).values

    def __hash__(self):
        return hash((self.config, self.m, self.mode))


def constant(config: TreeConfig, value, m: int = 1, mode: str = "exact") -> SimpleFunction:
    from .values import as_value

    return SimpleFunction(config, 0, (as_value(value, m, mode),))


def _check_pair(psi: SimpleFunction, phi: SimpleFunction) -> None:
    if psi.config != phi.config:
        raise ValueError("simple functions live on different trees")
    if psi.m != phi.m:
        raise ValueError(f"dimension mismatch: {psi.m} vs {phi.m}")
    if psi.mode != phi.mode:
        raise ModeMismatchError("exact and float simple functions mixed")


def refine(sf: SimpleFunction, n2: int) -> SimpleFunction:
    """Re-express sf at a deeper level; the same boundary function."""
    if n2 < sf.level:
        raise ValueError(f"cannot refine level {sf.level} down to {n2}")
    vals = list(sf.values)
    config = sf.config
    if n2 > config.depth_cap:
        raise DepthCapError(f"refinement level {n2} exceeds cap {config.depth_cap}")
    cur = sf.level
    if config.homogeneous_from <= cur:
        # branching depends only on depth from here down
        while cur < n2:
            b = config.level_node_class(cur).branching
            vals = [v for v in vals for _ in range(b)]
            cur += 1
    else:
        from .tree import level as tree_level

        paths = [v.path for v in tree_level(config, cur)]
        while cur < n2:
            nv, np_ = [], []
            for p, v in zip(paths, vals):
                b = config.branching(p)
                for i in range(b):
                    np_.append(p + (i,))
                    nv.append(v)
            vals, paths = nv, np_
            cur += 1
    return SimpleFunction(config, n2, tuple(vals))


def _sector_groups(psi: SimpleFunction, phi: SimpleFunction) -> dict:
    """Total sector measure per distinct squared distance, exact.

    Sectors are first grouped by their (value, value) pair so the exact
    distance arithmetic runs once per distinct pair, not per sector.
    """
    common = max(psi.level, phi.level)
    a = refine(psi, common).values
    b = refine(phi, common).values
    measures = level_measures(psi.config, common)
    pair_mass: dict = {}
    for va, vb, p in zip(a, b, measures):
        key = (va, vb)
        acc = pair_mass.get(key)
        pair_mass[key] = p if acc is None else acc + p
    groups: dict = {}
    for (va, vb), p in pair_mass.items():
        d2 = dist2(va, vb)
        if d2 == 0:
            continue
        groups[d2] = groups.get(d2, Fraction(0)) + p
    return groups


def prob_metric(psi: SimpleFunction, phi: SimpleFunction) -> float:
    """Integral of d/(1+d) against the sector measure; in [0, 1)."""
    _check_pair(psi, phi)
    groups = _sector_groups(psi, phi)
    total = 0.0
    for d2 in sorted(groups):
        total += safe_float(groups[d2]) * metric_factor(d2)
    return total


def prob_metric_exact(psi: SimpleFunction, phi: SimpleFunction) -> Fraction | None:
    """Exact metric value when every sector distance is rational, else None."""
    _check_pair(psi, phi)
    if psi.mode != "exact":
        return None
    total = Fraction(0)
    for d2, p in _sector_groups(psi, phi).items():
        f = metric_factor_exact(d2)
        if f is None:
            return None
        total += p * f
    return total


def add(psi: SimpleFunction, phi: SimpleFunction) -> SimpleFunction:
    _check_pair(psi, phi)
    common = max(psi.level, phi.level)
    a, b = refine(psi, common), refine(phi, common)
    return SimpleFunction(psi.config, common, tuple(vadd(x, y) for x, y in zip(a.values, b.values)))


def sub(psi: SimpleFunction, phi: SimpleFunction) -> SimpleFunction:
    _check_pair(psi, phi)
    common = max(psi.level, phi.level)
    a, b = refine(psi, common), refine(phi, common)
    return SimpleFunction(psi.config, common, tuple(vsub(x, y) for x, y in zip(a.values, b.values)))


def scale(a, psi: SimpleFunction) -> SimpleFunction:
    return SimpleFunction(psi.config, psi.level, tuple(vscale(a, v) for v in psi.values))


def perturb(psi: SimpleFunction, eps: Fraction) -> SimpleFunction:
    """A distinct function within metric distance (0, eps) of psi.

    Realized by bumping the first coordinate by 1 on a single sector of
    measure below eps; witnesses that no simple function is isolated.
    """
    eps = Fraction(eps)
    if not 0 < eps < 1:
        raise ValueError(f"perturbation size must be in (0,1), got {eps}")
    config = psi.config
    n = psi.level
    while True:
        measures = level_measures(config, n)
        hits = [i for i, p in enumerate(measures) if p < eps]
        if hits:
            break
        n += 1
        if n > config.depth_cap:
            raise DepthCapError(f"no sector of measure below {eps} within cap {config.depth_cap}")
    refined = refine(psi, n)
    idx = hits[0]
    one = QComplex(1) if psi.mode == "exact" else 1 + 0j
    vals = list(refined.values)
    vals[idx] = (vals[idx][0] + one,) + vals[idx][1:]
    return SimpleFunction(config, n, tuple(vals))


# -- dense enumeration -----------------------------------------------------------

_grid_cache: dict[int, tuple] = {}


def _gaussian_grid(r: int) -> tuple:
    """Gaussian rationals of height <= r, ordered by modulus then lexicographically."""
    if r in _grid_cache:
        return _grid_cache[r]
    rats = sorted({Fraction(p, q) for q in range(1, r + 1) for p in range(-r, r + 1)})
    vals = [QComplex(re, im) for re in rats for im in rats]
    vals.sort(key=lambda z: (z.abs2(), z.re, z.im))
    _grid_cache[r] = tuple(vals)
    return _grid_cache[r]


def _tier_size(config: TreeConfig, m: int, k: int, r: int) -> int:
    slots = config.level_size(k) * m
    return len(_gaussian_grid(r)) ** slots


def _tiers() -> Iterator[tuple[int, int]]:
    s = 1
    while True:
        for k in range(s):
            yield k, s - k
        s += 1


def dense_family(config: TreeConfig, m: int, index: int, mode: str = "exact") -> SimpleFunction:
    """Deterministic enumeration of all low-level, bounded-height simple functions.

    Tiers run over (level, height) diagonally, level-major inside a
    diagonal; within a tier, assignments are lexicographic over vertices
    with grid values ordered by modulus, so index 1 is the constant 0.
    """
    if index < 1:
        raise ValueError(f"enumeration index must be positive, got {index}")
    remaining = index
    for k, r in _tiers():
        size = _tier_size(config, m, k, r)
        if remaining > size:
            remaining -= size
            continue
        grid = _gaussian_grid(r)
        base = len(grid)
        slots = config.level_size(k) * m
        digits = []
        x = remaining - 1
        for _ in range(slots):
            digits.append(x % base)
            x //= base
        digits.reverse()
        coords = [grid[d] for d in digits]
        vals = tuple(tuple(coords[i * m : (i + 1) * m]) for i in range(config.level_size(k)))
        sf = SimpleFunction(config, k, vals)
        if mode == "float":
            sf = SimpleFunction(
                config, k, tuple(tuple(c.to_complex() for c in v) for v in vals)
            )
        return sf
    raise AssertionError("unreachable")


# -- JSON --------------------------------------------------------------------------


def simple_to_json(sf: SimpleFunction) -> dict:
    return {
        "level": sf.level,
        "m": sf.m,
        "mode": sf.mode,
        "values": [format_value(v) for v in sf.values],
    }


def simple_from_json(config: TreeConfig, obj: dict) -> SimpleFunction:
    if not isinstance(obj, dict) or "level" not in obj or "values" not in obj:
        raise ParseError("simple function needs 'level' and 'values'")
    mode = detect_mode(obj)
    m = obj.get("m", 1)
    vals = tuple(parse_value(v, m, mode) for v in obj["values"])
    return SimpleFunction(config, obj["level"], vals)
