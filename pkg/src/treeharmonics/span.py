"""Joint families, linear combinations, and span certificates.

A joint family builds several harmonic coordinates in one pass by
stacking their values; the correction child is shared, so every
coordinate contracts toward its own component of the scheduled tuple
simultaneously and per-coordinate metric bounds fall out of the same
level log.  Each coordinate is then nudged by a flatten perturbation so
that it sits certifiably close, in the pointwise metric, to the next
member of the enumerated harmonic family; the offsets are constant
beyond a shallow anchor level, so they shift every projection by one
fixed simple function and cancel out of all metric bookkeeping.

A span certificate for a coefficient vector lists the levels where the
triangle and scaling inequalities force the combination's projection
within a tolerance of the combined target; every certified level is
then re-measured directly through the level engine and reported
predicted-versus-measured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .builder import BuildResult, Probe, Schedule, Target, build, replay
from .errors import ScheduleError
from .harmonic import (
    FlattenResult,
    HarmonicTruncation,
    add_truncation,
    flatten_anchor,
    flatten_perturbation,
    harmonic_family,
    projection,
    scale_truncation,
)
from .simple import SimpleFunction, add as sf_add, refine
from .tree import TreeConfig
from .values import QComplex, Value, safe_float, value_mode


@dataclass(frozen=True)
class Combo:
    """Coefficient vector for a linear combination of family coordinates."""

    coefficients: tuple

    def __post_init__(self):
        if not self.coefficients:
            raise ValueError("a combination needs at least one coefficient")

    @property
    def width(self) -> int:
        """Position of the last nonzero coefficient (0 when all vanish)."""
        for i in range(len(self.coefficients) - 1, -1, -1):
            if _nonzero(self.coefficients[i]):
                return i + 1
        return 0

    def moduli(self) -> tuple[float, ...]:
        return tuple(_modulus(c) for c in self.coefficients)


def _nonzero(c) -> bool:
    if isinstance(c, QComplex):
        return bool(c)
    return c != 0


def _modulus(c) -> float:
    if isinstance(c, QComplex):
        return math.sqrt(safe_float(c.abs2()))
    return abs(c)


def scaling_bound(c, beta: float) -> float:
    """max(1, |c|) * beta dominates the metric of a scaled pair."""
    if not 0 <= beta:
        raise ValueError(f"metric bound must be nonnegative, got {beta}")
    return max(1.0, _modulus(c)) * beta


@dataclass(frozen=True)
class JointTarget:
    label: str
    components: tuple[SimpleFunction, ...]


@dataclass
class JointFamily:
    """Jointly built coordinates with their offsets and level logs."""

    config: TreeConfig
    m: int  # dimension of one coordinate's value space
    size: int  # number of coordinates J
    result: BuildResult  # the stacked build (dimension m * J)
    joint_targets: tuple[JointTarget, ...]
    coordinates: tuple[HarmonicTruncation, ...]  # offset-composed coordinates
    base_coordinates: tuple[HarmonicTruncation, ...]
    offsets: tuple[HarmonicTruncation, ...]
    offset_projections: tuple[SimpleFunction, ...]  # constant beyond the anchor
    flatten_reports: tuple[FlattenResult, ...]
    anchor_level: int  # offsets are constant from here on

    @property
    def horizon(self) -> int:
        return self.result.schedule.horizon

    def effective_component(self, target_index: int, i: int) -> SimpleFunction:
        """Component i of the target, shifted by coordinate i's offset."""
        u = self.joint_targets[target_index - 1].components[i]
        return sf_add(u, self.offset_projections[i])

    def coordinate_bounds(self, level: int) -> tuple[float, ...] | None:
        rec = self.result.record(level)
        return rec.coord_p


def _stack_values(components: Sequence[SimpleFunction], level: int) -> SimpleFunction:
    refined = [refine(c, level) for c in components]
    vals = tuple(
        tuple(coord for part in parts for coord in part)
        for parts in zip(*(r.values for r in refined))
    )
    return SimpleFunction(components[0].config, level, vals)


def joint_build(
    config: TreeConfig,
    joint_targets: Sequence[JointTarget],
    schedule: Schedule,
    initial=0,
    *,
    m: int = 1,
    mode: str = "exact",
    materialize_depth: int | None = None,
    offset_indices: Sequence[int] | None = None,
) -> JointFamily:
    """Build all coordinates at once and compose the density offsets.

    Coordinate i is shifted by a flatten perturbation so its truncation
    lies within 1/(i+1) of the (offset_indices[i])-th enumerated
    harmonic function in the pointwise metric; the shift is constant
    beyond the anchor level and leaves every logged metric unchanged.
    """
    joint_targets = tuple(joint_targets)
    if not joint_targets:
        raise ScheduleError("need at least one joint target")
    size = len(joint_targets[0].components)
    for jt in joint_targets:
        if len(jt.components) != size:
            raise ValueError("all joint targets must have the same number of components")
        for c in jt.components:
            if c.m != m:
                raise ValueError(f"component of {jt.label} has dimension {c.m}, expected {m}")
    anchors = [flatten_anchor(config, i)[1] for i in range(1, size + 1)]
    anchor = max(anchors)
    stacked = [
        Target(jt.label, _stack_values(jt.components, max(c.level for c in jt.components)))
        for jt in joint_targets
    ]
    result = build(
        config,
        stacked,
        schedule,
        initial,
        m=m * size,
        mode=mode,
        materialize_depth=materialize_depth,
        coordinate_dims=(size, m),
        profile_floor=anchor,
    )
    depth = result.truncation.depth
    base = tuple(_slice_coordinate(result.truncation, i, m) for i in range(size))
    if offset_indices is None:
        offset_indices = tuple(range(1, size + 1))
    offsets = []
    reports = []
    coords = []
    for i in range(size):
        phi = harmonic_family(config, m, offset_indices[i], depth, mode)
        flat = flatten_perturbation(base[i], phi, i + 1)
        offsets.append(flat.g)
        reports.append(flat)
        coords.append(add_truncation(base[i], flat.g))
    gammas = tuple(projection(offsets[i], anchors[i]) for i in range(size))
    return JointFamily(
        config,
        m,
        size,
        result,
        joint_targets,
        tuple(coords),
        base,
        tuple(offsets),
        gammas,
        tuple(reports),
        anchor,
    )


def _slice_coordinate(trunc: HarmonicTruncation, i: int, m: int) -> HarmonicTruncation:
    sl = slice(i * m, (i + 1) * m)
    levels = tuple(tuple(v[sl] for v in vals) for vals in trunc.levels)
    return HarmonicTruncation(trunc.config, trunc.depth, levels)


def combine(family: JointFamily, combo: Combo) -> HarmonicTruncation:
    """The linear combination of the family coordinates, materialized."""
    if len(combo.coefficients) > family.size:
        raise ValueError(f"combination has {len(combo.coefficients)} coefficients, family has {family.size}")
    acc = None
    for a, f in zip(combo.coefficients, family.coordinates):
        if not _nonzero(a):
            continue
        term = scale_truncation(a, f)
        acc = term if acc is None else add_truncation(acc, term)
    if acc is None:
        from .harmonic import constant_truncation

        mode = value_mode(family.coordinates[0].levels[0][0])
        return constant_truncation(
            family.config, 0, family.coordinates[0].depth, family.m, mode
        )
    return acc


@dataclass(frozen=True)
class CertEntry:
    level: int
    predicted: float
    measured: float
    target_label: str


@dataclass(frozen=True)
class CertificateReport:
    combo: Combo
    eps: Fraction
    entries: tuple[CertEntry, ...]
    sound: bool

    def index_set(self):
        from .density import IndexSet

        return IndexSet.from_iterable((e.level for e in self.entries), self.horizon)

    @property
    def horizon(self) -> int:
        return max((e.level for e in self.entries), default=1)


PREDICTION_SLACK = 1e-9


def certify_batch(
    family: JointFamily, combos: Sequence[Combo], eps
) -> list[CertificateReport]:
    """Certificates for many coefficient vectors from one engine replay.

    A level is certified when the summed scaling bounds of the logged
    per-coordinate metrics fall below the tolerance; the engine then
    re-measures the combination's metric directly at every certified
    level.  The offsets cancel: the combination of the shifted
    coordinates against the shifted targets has exactly the metric of
    the base combination against the base targets.
    """
    eps = Fraction(eps)
    if not 0 < eps < 1:
        raise ValueError(f"tolerance must be in (0,1), got {eps}")
    feps = float(eps)
    candidates: list[list[int]] = []
    for combo in combos:
        s = combo.width
        if s == 0:
            raise ValueError("a certificate needs at least one nonzero coefficient")
        if s > family.size:
            raise ValueError(f"combination length {s} exceeds family size {family.size}")
        moduli = combo.moduli()
        levels = []
        for rec in family.result.records:
            if rec.coord_p is None or rec.phase != "hold" or rec.level < family.anchor_level:
                continue
            predicted = sum(max(1.0, moduli[i]) * rec.coord_p[i] for i in range(s))
            if predicted < feps:
                levels.append(rec.level)
        candidates.append(levels)
    probes = [
        Probe(tuple(c.coefficients) + (0,) * (family.size - len(c.coefficients)), frozenset(lv))
        for c, lv in zip(combos, candidates)
    ]
    measured: dict[tuple[int, int], float] = {}
    for state in replay(family.result, probes=probes):
        if state.probe_values:
            for idx, val in state.probe_values.items():
                measured[(idx, state.level)] = val
    reports = []
    for idx, (combo, levels) in enumerate(zip(combos, candidates)):
        moduli = combo.moduli()
        s = combo.width
        entries = []
        sound = True
        for lv in levels:
            rec = family.result.record(lv)
            predicted = sum(max(1.0, moduli[i]) * rec.coord_p[i] for i in range(s))
            got = measured[(idx, lv)]
            entries.append(
                CertEntry(lv, predicted, got, family.joint_targets[rec.target - 1].label)
            )
            if not (got < feps and got <= predicted + PREDICTION_SLACK):
                sound = False
        reports.append(CertificateReport(combo, eps, tuple(entries), sound))
    return reports


def span_certificate(family: JointFamily, combo: Combo, eps) -> CertificateReport:
    """Certificate for one coefficient vector; empty entry list is valid."""
    return certify_batch(family, [combo], eps)[0]


def certificate_to_json(report: CertificateReport) -> dict:
    return {
        "eps": str(report.eps),
        "coefficients": [
            [str(c.re), str(c.im)] if isinstance(c, QComplex) else [c.real, c.imag]
            for c in report.combo.coefficients
        ],
        "sound": report.sound,
        "entries": [
            {
                "level": e.level,
                "predicted_bound": e.predicted,
                "measured_P": e.measured,
                "target_label": e.target_label,
            }
            for e in report.entries
        ],
    }
