"""Harmonic truncations: values on all vertices up to a depth.

A truncation is harmonic when every internal vertex's value equals the
w-weighted sum of its children's values.  That identity leaves exactly
one degree of freedom per vertex: fix all children but one and the last
child's value is forced.  ``corrected_extend`` exploits this slack and
is the engine behind every constructive build.

The pointwise metric over the infinite tree is reported as an interval:
the exact partial sum over the truncated vertices plus the geometric
tail bound, so finite data certifies where the true value lies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

from .errors import DepthCapError, ModeMismatchError, ParseError
from .serialize import detect_mode, format_value, parse_value
from .simple import SimpleFunction, dense_family
from .tree import TreeConfig, Vertex, bfs_depth_of_index, level as tree_level, level_measures
from .values import (
    QComplex,
    Value,
    check_same_mode,
    dist2,
    metric_factor,
    safe_float,
    value_mode,
    vadd,
    vdot_weighted,
    vscale,
    vsub,
)

FLOAT_HARMONIC_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class HarmonicTruncation:
    """Values on all vertices of depth <= depth, in BFS order by level."""

    config: TreeConfig
    depth: int
    levels: tuple[tuple[Value, ...], ...]  # levels[n] aligned with canonical T_n order

    def __post_init__(self):
        if len(self.levels) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} level arrays, got {len(self.levels)}")
        for n, vals in enumerate(self.levels):
            expected = self.config.level_size(n)
            if len(vals) != expected:
                raise ValueError(f"level {n} needs {expected} values, got {len(vals)}")
        check_same_mode(*(v for vals in self.levels for v in vals))

    @property
    def m(self) -> int:
        return len(self.levels[0][0])

    @property
    def mode(self) -> str:
        return value_mode(self.levels[0][0])

    def level_values(self, n: int) -> tuple[Value, ...]:
        if n > self.depth:
            raise ValueError(f"level {n} beyond truncation depth {self.depth}")
        return self.levels[n]

    def value_at(self, v: Vertex) -> Value:
        self.config.check_vertex(v)
        if v.depth > self.depth:
            raise ValueError(f"vertex depth {v.depth} beyond truncation depth {self.depth}")
        return self.levels[v.depth][self.config.lex_rank(v)]

    def __eq__(self, other):
        if not isinstance(other, HarmonicTruncation):
            return NotImplemented
        return (
            self.config == other.config
            and self.depth == other.depth
            and self.levels == other.levels
        )

    def __hash__(self):
        return hash((self.config, self.depth))


def constant_truncation(config: TreeConfig, value, depth: int, m: int = 1, mode: str = "exact") -> HarmonicTruncation:
    from .values import as_value

    val = as_value(value, m, mode)
    levels = tuple((val,) * config.level_size(n) for n in range(depth + 1))
    return HarmonicTruncation(config, depth, levels)


def _iter_families(config: TreeConfig, n: int):
    """Yield (father_index, node_class, child_slice) for level n -> n+1."""
    offset = 0
    if config.homogeneous_from <= n:
        nc = config.level_node_class(n)
        b = nc.branching
        for i in range(config.level_size(n)):
            yield i, nc, slice(offset, offset + b)
            offset += b
    else:
        for i, v in enumerate(tree_level(config, n)):
            nc = config.node_class_at(v.path)
            b = nc.branching
            yield i, nc, slice(offset, offset + b)
            offset += b


@dataclass(frozen=True)
class HarmonicReport:
    passed: bool
    max_residual: float
    violations: tuple[tuple[Vertex, float], ...]


def check_harmonic(f: HarmonicTruncation, tol: float = FLOAT_HARMONIC_TOL) -> HarmonicReport:
    """Verify the weighted-mean identity at every internal vertex."""
    exact = f.mode == "exact"
    bad = []
    worst = 0.0
    for n in range(f.depth):
        fathers = f.levels[n]
        kids = f.levels[n + 1]
        paths = None
        for i, nc, sl in _iter_families(f.config, n):
            expect = vdot_weighted(nc.w, kids[sl])
            resid2 = dist2(fathers[i], expect)
            if exact:
                ok = resid2 == 0
            else:
                ok = resid2 <= tol * tol
            r = math.sqrt(safe_float(resid2)) if resid2 else 0.0
            worst = max(worst, r)
            if not ok:
                if paths is None:
                    paths = tree_level(f.config, n)
                bad.append((paths[i], r))
    return HarmonicReport(not bad, worst, tuple(bad))


def projection(f: HarmonicTruncation, n: int) -> SimpleFunction:
    """The level-n boundary projection: read f on the level-n sectors."""
    if n > f.depth:
        raise ValueError(f"projection level {n} beyond truncation depth {f.depth}")
    return SimpleFunction(f.config, n, f.levels[n])


@dataclass(frozen=True)
class RhoInterval:
    """Certified enclosure of the pointwise metric over the infinite tree."""

    lo: float
    hi: float
    terms: int

    def __contains__(self, x: float) -> bool:
        return self.lo <= x <= self.hi


def pointwise_metric(f: HarmonicTruncation, g: HarmonicTruncation) -> RhoInterval:
    """Partial sum of 2^-n d/(1+d) over BFS vertices, plus the tail bound."""
    if f.config != g.config:
        raise ValueError("truncations live on different trees")
    if f.m != g.m:
        raise ValueError("dimension mismatch")
    if f.mode != g.mode:
        raise ModeMismatchError("exact and float truncations mixed")
    depth = min(f.depth, g.depth)
    lo = 0.0
    n = 0
    for k in range(depth + 1):
        for va, vb in zip(f.levels[k], g.levels[k]):
            n += 1
            d2 = dist2(va, vb)
            if d2:
                lo += math.ldexp(metric_factor(d2), -n)
    return RhoInterval(lo, lo + math.ldexp(1.0, -n), n)


def constant_extend(f: HarmonicTruncation, to_depth: int) -> HarmonicTruncation:
    """Extend by giving every new vertex its father's value; stays harmonic."""
    if to_depth < f.depth:
        raise ValueError(f"cannot extend depth {f.depth} down to {to_depth}")
    if to_depth > f.config.depth_cap:
        raise DepthCapError(f"extension depth {to_depth} exceeds cap {f.config.depth_cap}")
    levels = list(f.levels)
    for n in range(f.depth, to_depth):
        vals = []
        for i, nc, sl in _iter_families(f.config, n):
            vals.extend([levels[n][i]] * nc.branching)
        levels.append(tuple(vals))
    return HarmonicTruncation(f.config, to_depth, tuple(levels))


@dataclass(frozen=True)
class CorrectedExtension:
    """One corrected level: the extension and its exact measure accounting."""

    truncation: HarmonicTruncation
    correction_measure: Fraction  # total measure of the designated correction children
    mismatch_measure: Fraction  # measure where the new level differs from its target
    correction_children: tuple[int, ...]  # child array indices of the forced values


def corrected_extend(
    f: HarmonicTruncation,
    targets: SimpleFunction,
    chooser: Callable | None = None,
) -> CorrectedExtension:
    """Extend one level, matching targets everywhere except one child per vertex.

    Every child but the correction child receives its target value; the
    correction child absorbs whatever the harmonic identity then forces.
    The default correction child minimizes the measure weight (ties to
    the lowest index), which minimizes the unmatched measure per step.
    """
    if targets.level != f.depth + 1:
        raise ValueError(f"targets must sit at level {f.depth + 1}, got {targets.level}")
    if targets.config != f.config:
        raise ValueError("targets live on a different tree")
    if targets.m != f.m:
        raise ValueError("dimension mismatch")
    if targets.mode != f.mode:
        raise ModeMismatchError("exact and float data mixed")
    if f.depth + 1 > f.config.depth_cap:
        raise DepthCapError(f"extension exceeds cap {f.config.depth_cap}")
    father_measures = level_measures(f.config, f.depth)
    fathers = f.levels[f.depth]
    new_vals: list[Value] = []
    corr_measure = Fraction(0)
    mism = Fraction(0)
    corr_idx = []
    for i, nc, sl in _iter_families(f.config, f.depth):
        tvals = targets.values[sl]
        star = chooser(i, nc) if chooser is not None else nc.correction_index()
        if not 0 <= star < nc.branching:
            raise ValueError(f"correction child {star} out of range for branching {nc.branching}")
        rest = None
        for j in range(nc.branching):
            if j != star:
                term = vscale(nc.w[j], tvals[j])
                rest = term if rest is None else vadd(rest, term)
        forced = vscale(
            _invert(nc.w[star], f.mode), vsub(fathers[i], rest)
        )
        block = list(tvals)
        block[star] = forced
        corr_measure += father_measures[i] * nc.q[star]
        if forced != tvals[star]:
            mism += father_measures[i] * nc.q[star]
        corr_idx.append(sl.start + star)
        new_vals.extend(block)
    trunc = HarmonicTruncation(f.config, f.depth + 1, f.levels + (tuple(new_vals),))
    return CorrectedExtension(trunc, corr_measure, mism, tuple(corr_idx))


def _invert(w: QComplex, mode: str):
    if mode == "exact":
        return QComplex(1) / w
    c = w.to_complex()
    return 1.0 / c


# -- linear structure ------------------------------------------------------------


def _zip_levels(f: HarmonicTruncation, g: HarmonicTruncation):
    if f.config != g.config:
        raise ValueError("truncations live on different trees")
    if f.m != g.m:
        raise ValueError("dimension mismatch")
    if f.mode != g.mode:
        raise ModeMismatchError("exact and float truncations mixed")
    depth = min(f.depth, g.depth)
    return depth, f.levels[: depth + 1], g.levels[: depth + 1]


def add_truncation(f: HarmonicTruncation, g: HarmonicTruncation) -> HarmonicTruncation:
    depth, fl, gl = _zip_levels(f, g)
    levels = tuple(
        tuple(vadd(a, b) for a, b in zip(la, lb)) for la, lb in zip(fl, gl)
    )
    return HarmonicTruncation(f.config, depth, levels)


def sub_truncation(f: HarmonicTruncation, g: HarmonicTruncation) -> HarmonicTruncation:
    depth, fl, gl = _zip_levels(f, g)
    levels = tuple(
        tuple(vsub(a, b) for a, b in zip(la, lb)) for la, lb in zip(fl, gl)
    )
    return HarmonicTruncation(f.config, depth, levels)


def scale_truncation(a, f: HarmonicTruncation) -> HarmonicTruncation:
    levels = tuple(tuple(vscale(a, v) for v in vals) for vals in f.levels)
    return HarmonicTruncation(f.config, f.depth, levels)


# -- upward extension and the enumerated harmonic family --------------------------


def from_level_function(sf: SimpleFunction, depth: int) -> HarmonicTruncation:
    """The harmonic truncation reading sf at its level.

    Values above the level are forced by the identity; below it the
    function extends constantly, so its projections refine sf forever.
    """
    if depth < sf.level:
        raise ValueError(f"depth {depth} below the function level {sf.level}")
    levels: list[tuple[Value, ...]] = [None] * (sf.level + 1)  # type: ignore[list-item]
    levels[sf.level] = sf.values
    for n in range(sf.level - 1, -1, -1):
        vals = []
        for i, nc, sl in _iter_families(sf.config, n):
            vals.append(vdot_weighted(nc.w, levels[n + 1][sl]))
        levels[n] = tuple(vals)
    trunc = HarmonicTruncation(sf.config, sf.level, tuple(levels))
    return constant_extend(trunc, depth)


def harmonic_family(config: TreeConfig, m: int, index: int, depth: int, mode: str = "exact") -> HarmonicTruncation:
    """Deterministic dense-at-truncation-scale family of harmonic functions."""
    return from_level_function(dense_family(config, m, index, mode), depth)


# -- the flatten perturbation ------------------------------------------------------


def flatten_anchor(config: TreeConfig, n: int) -> tuple[int, int]:
    """(j0, N): tail past BFS index j0 is below 1/n; N is the depth covering it."""
    if n < 1:
        raise ValueError("anchor parameter must be positive")
    j0 = n.bit_length() + 1
    return j0, bfs_depth_of_index(config, j0)


@dataclass(frozen=True)
class FlattenResult:
    """Outcome of flattening a difference beyond its anchor depth."""

    g: HarmonicTruncation
    n: int
    j0: int
    level_N: int
    rho_to_difference: RhoInterval  # distance from phi - f, certified < 1/n
    rho_sum_to_target: RhoInterval  # distance of f + g from phi, certified < 1/n
    rho_sum_to_g: RhoInterval  # the alternative reading, recorded for comparison


def flatten_perturbation(f: HarmonicTruncation, phi: HarmonicTruncation, n: int) -> FlattenResult:
    """Copy phi - f down to the anchor depth, then extend constantly.

    The result g is harmonic, its projections stabilize beyond the
    anchor depth, and both g and f + g sit within 1/n of phi - f and
    phi respectively in the pointwise metric (certified by interval).
    """
    j0, anchor = flatten_anchor(f.config, n)
    depth = min(f.depth, phi.depth)
    if depth < anchor:
        raise DepthCapError(f"need depth {anchor} to flatten with parameter {n}, have {depth}")
    diff = sub_truncation(phi, f)
    head = HarmonicTruncation(f.config, anchor, diff.levels[: anchor + 1])
    g = constant_extend(head, depth)
    rho_diff = pointwise_metric(diff, g)
    f_cut = HarmonicTruncation(f.config, depth, f.levels[: depth + 1])
    phi_cut = HarmonicTruncation(f.config, depth, phi.levels[: depth + 1])
    total = add_truncation(f_cut, g)
    rho_sum = pointwise_metric(total, phi_cut)
    rho_alt = pointwise_metric(total, g)
    bound = 1.0 / n
    if not (rho_diff.hi < bound and rho_sum.hi < bound):
        raise AssertionError("flatten perturbation failed its certified bound")
    return FlattenResult(g, n, j0, anchor, rho_diff, rho_sum, rho_alt)


# -- martingale check --------------------------------------------------------------


@dataclass(frozen=True)
class MartingaleReport:
    applicable: bool
    passed: bool
    violations: tuple[tuple[Vertex, float], ...]


def martingale_check(f: HarmonicTruncation, tol: float = FLOAT_HARMONIC_TOL) -> MartingaleReport:
    """Check sector integrals: the level-(n+1) mean over each sector equals p * f(x).

    Meaningful when the harmonic weights coincide with the (real,
    positive) measure weights; reports not-applicable otherwise.
    """
    for _, nc in f.config.rule.classes():
        if tuple(QComplex(x) for x in nc.q) != nc.w:
            return MartingaleReport(False, True, ())
    exact = f.mode == "exact"
    bad = []
    for n in range(f.depth):
        father_measures = level_measures(f.config, n)
        fathers = f.levels[n]
        kids = f.levels[n + 1]
        paths = None
        for i, nc, sl in _iter_families(f.config, n):
            p = father_measures[i]
            integral = vdot_weighted((p * q for q in nc.q), kids[sl])
            expected = vscale(p, fathers[i])
            resid2 = dist2(integral, expected)
            ok = resid2 == 0 if exact else resid2 <= tol * tol
            if not ok:
                if paths is None:
                    paths = tree_level(f.config, n)
                bad.append((paths[i], math.sqrt(safe_float(resid2))))
    return MartingaleReport(True, not bad, tuple(bad))


# -- JSON --------------------------------------------------------------------------


def harmonic_to_json(f: HarmonicTruncation) -> dict:
    values = [format_value(v) for vals in f.levels for v in vals]
    return {"depth": f.depth, "m": f.m, "mode": f.mode, "values": values}


def harmonic_from_json(config: TreeConfig, obj: dict) -> HarmonicTruncation:
    if not isinstance(obj, dict) or "depth" not in obj or "values" not in obj:
        raise ParseError("harmonic truncation needs 'depth' and 'values'")
    mode = detect_mode(obj)
    m = obj.get("m", 1)
    depth = obj["depth"]
    flat = [parse_value(v, m, mode) for v in obj["values"]]
    levels = []
    pos = 0
    for n in range(depth + 1):
        size = config.level_size(n)
        levels.append(tuple(flat[pos : pos + size]))
        pos += size
    if pos != len(flat):
        raise ParseError(f"expected {pos} values for depth {depth}, got {len(flat)}")
    return HarmonicTruncation(config, depth, tuple(levels))
