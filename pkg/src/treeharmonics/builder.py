"""Level-by-level construction of harmonic truncations that visit targets.

A schedule tiles the levels into blocks.  Each active block owns a
target simple function and a tolerance: from the block's launch level,
every extension step matches all children to the target's values except
the designated correction child, whose value the harmonic identity
forces.  The unmatched measure then contracts by at least the tree's
contraction ratio mu per level, so once a block's transition budget is
spent every hold level is a certified visit.

Levels grow like 2^n, so only a shallow prefix of the tree is ever
materialized.  Beyond it the construction advances in a compressed
form.  Within each base sector (a sector at the profile level, on which
every scheduled target is constant) the non-matching mass consists of
one correction lineage per mass unit that was unmatched when the
current block launched: matching mass stays matched at zero cost, and a
lineage's offset from the target scales by exactly 1/w* per corrected
level while its measure scales by exactly q*.  Mismatch measures are
therefore carried as exact rationals at every level, lineage values and
measures are re-derived exactly at every block switch, and the per-level
metric values in between come from a float recursion off those exact
anchors (documented accuracy class 1e-12, like every reported metric).

The materialized and compressed representations advance the same
construction; the suite runs both over the same schedules and compares
level records as an oracle.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterator, Sequence

from .density import IndexSet
from .errors import (
    DepthCapError,
    InfeasibleScheduleError,
    ModeMismatchError,
    ParseError,
    ScheduleError,
)
from .harmonic import HarmonicTruncation, _invert, _iter_families
from .serialize import format_rational, parse_rational
from .simple import SimpleFunction, refine
from .tree import TreeConfig
from .values import (
    QComplex,
    Value,
    as_value,
    dist2,
    metric_factor,
    metric_factor_exact,
    safe_float,
    value_mode,
    vadd,
    vscale,
    vsub,
    vzero,
)

DEFAULT_MATERIALIZE_DEPTH = 12
ENV_PAR_WIDTH = "TREEHARMONICS_PAR_WIDTH"


def nu2(n: int) -> int:
    """Exponent of 2 in n."""
    if n < 1:
        raise ValueError("nu2 needs a positive integer")
    return (n & -n).bit_length() - 1


@dataclass(frozen=True)
class Target:
    label: str
    h: SimpleFunction


@dataclass(frozen=True)
class Block:
    """One scheduled block: launch level, transition budget, hold interval.

    The block owns levels (start, end].  Corrected steps run from the
    launch level, so a level n in the block has seen n - start corrected
    steps; holds begin once that count reaches the transition budget.
    Inactive blocks extend constantly and guarantee nothing.
    """

    target: int | None  # 1-based index into the target list
    eps: Fraction | None
    start: int
    hold_start: int
    end: int
    active: bool = True

    def __post_init__(self):
        if self.target is None and self.active:
            object.__setattr__(self, "active", False)

    @property
    def hold_levels(self) -> range:
        if not self.active:
            return range(0)
        return range(self.hold_start, self.end + 1)

    @property
    def transition_budget(self) -> int:
        return self.hold_start - self.start


@dataclass(frozen=True)
class Schedule:
    blocks: tuple[Block, ...]
    horizon: int
    kind: str = "explicit"
    stride: int | None = None
    boundaries: tuple[int, ...] | None = None

    def owner(self, n: int) -> Block | None:
        for b in self.blocks:
            if b.start < n <= b.end:
                return b
        return None

    def owner_array(self) -> list["Block | None"]:
        """Owning block of each level 1..horizon, as a dense array."""
        owners: list[Block | None] = [None] * self.horizon
        for b in self.blocks:
            for n in range(b.start + 1, b.end + 1):
                owners[n - 1] = b
        return owners

    def ordinal_map(self) -> dict[int, int]:
        return {id(b): i for i, b in enumerate(self.blocks)}

    def scheduled_visits(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for b in self.blocks:
            if b.active:
                out.setdefault(b.target, []).extend(b.hold_levels)
        return {k: sorted(v) for k, v in out.items()}


def transition_length(config: TreeConfig, eps) -> int:
    """Least j with mu^j <= eps, mu the contraction ratio of the tree."""
    eps = Fraction(eps)
    if not 0 < eps < 1:
        raise ValueError(f"tolerance must be in (0,1), got {eps}")
    mu = config.contraction_ratio()
    j, acc = 1, mu
    while acc > eps:
        acc *= mu
        j += 1
    return j


def _check_tiling(blocks: Sequence[Block], horizon: int) -> None:
    if not blocks:
        return
    if blocks[0].start != 0:
        raise ScheduleError(f"first block must launch at level 0, got {blocks[0].start}")
    prev_end = 0
    for b in blocks:
        if b.start != prev_end:
            raise ScheduleError(f"blocks must tile the levels; gap at {prev_end} -> {b.start}")
        if b.end <= b.start:
            raise ScheduleError(f"block (start={b.start}, end={b.end}) owns no level")
        prev_end = b.end
    if prev_end != horizon:
        raise ScheduleError(f"blocks end at {prev_end}, horizon is {horizon}")


def resolve_schedule(config: TreeConfig, schedule: Schedule, targets: Sequence[Target]) -> None:
    """Validate a schedule against its tree and targets; loud on any violation."""
    if schedule.horizon < 1:
        raise ScheduleError("horizon must be positive")
    if schedule.horizon > config.depth_cap:
        raise DepthCapError(f"horizon {schedule.horizon} exceeds depth cap {config.depth_cap}")
    _check_tiling(schedule.blocks, schedule.horizon)
    for b in schedule.blocks:
        if not b.active:
            continue
        if not 1 <= b.target <= len(targets):
            raise ScheduleError(f"block references target {b.target}, have {len(targets)}")
        if b.eps is None or not 0 < b.eps < 1:
            raise ScheduleError(f"active block needs a tolerance in (0,1), got {b.eps}")
        need = transition_length(config, b.eps)
        if b.transition_budget < need:
            raise InfeasibleScheduleError(
                f"block at level {b.start} allows {b.transition_budget} transition levels, "
                f"tolerance {b.eps} needs {need}"
            )
        if b.hold_start > b.end:
            raise InfeasibleScheduleError(
                f"block at level {b.start} has no hold levels (hold would start at {b.hold_start}, ends {b.end})"
            )
        k = targets[b.target - 1].h.level
        if b.start + 1 < k:
            raise ScheduleError(
                f"target {b.target} is level-{k} measurable but its block first assigns level {b.start + 1}"
            )


# -- schedule generators -----------------------------------------------------------


def factorial_boundaries(horizon: int, first: int = 1) -> tuple[int, ...]:
    """first, 2*first, 6*first, ...: block ends with vanishing length ratios."""
    out = [first]
    j = 2
    while out[-1] < horizon:
        out.append(j * out[-1])
        j += 1
    return tuple(b for b in out if b <= horizon)


def make_saturating_schedule(
    config: TreeConfig,
    target_count: int,
    horizon: int,
    eps,
    *,
    boundaries: Sequence[int] | None = None,
    first_boundary: int = 1,
    targets: Sequence[Target] | None = None,
) -> Schedule:
    """Blocks of growing length, cycling through the targets.

    Hold levels fill each block past its transition budget, so the
    scheduled visit density of a target at the end of its block j is at
    least 1 - N_{j-1}/N_j - transition/N_j; with vanishing boundary
    ratios that approaches one.  Early blocks too short for their
    transition (or launching below their target's level) are kept as
    inactive constant-extension filler; every target must still end up
    with at least one active block, otherwise the schedule is rejected.
    """
    if target_count < 1:
        raise ScheduleError("need at least one target")
    eps_list = _eps_list(eps, target_count)
    if boundaries is None:
        if target_count == 1:
            boundaries = (horizon,)
        else:
            boundaries = factorial_boundaries(horizon, first_boundary)
    boundaries = tuple(boundaries)
    if not boundaries or boundaries[-1] > horizon:
        raise InfeasibleScheduleError(
            f"boundaries {boundaries} overrun the horizon {horizon}"
        )
    blocks = []
    covered: set[int] = set()
    prev = 0
    for j, end in enumerate(boundaries, start=1):
        k = (j - 1) % target_count + 1
        lead = transition_length(config, eps_list[k - 1])
        hold_start = prev + lead
        active = hold_start <= end
        if active and targets is not None:
            active = targets[k - 1].h.level <= prev + 1
        blocks.append(Block(k, eps_list[k - 1], prev, hold_start, end, active))
        if active:
            covered.add(k)
        prev = end
    if prev < horizon:
        blocks.append(Block(None, None, prev, horizon + 1, horizon, False))
    if covered != set(range(1, target_count + 1)):
        missing = sorted(set(range(1, target_count + 1)) - covered)
        raise InfeasibleScheduleError(
            f"blocks do not fit: targets {missing} never get a feasible block within horizon {horizon}"
        )
    return Schedule(tuple(blocks), horizon, "saturating", boundaries=boundaries)


def make_frequent_schedule(
    config: TreeConfig,
    eps,
    stride: int,
    horizon: int,
    pair_count: int | None = None,
) -> Schedule:
    """One-level holds on the dyadic-valuation classes of the stride multiples.

    Pair k holds at levels stride*n with nu2(n) = k-1 (the last pair
    absorbs all higher valuations), giving pairwise disjoint visit sets
    of exact densities 2^-k/stride and 2^-(K-1)/stride for the last.
    """
    if pair_count is None:
        pair_count = len(eps) if isinstance(eps, (list, tuple)) else 1
    if pair_count < 1:
        raise ScheduleError("need at least one pair")
    eps_list = _eps_list(eps, pair_count)
    for k, e in enumerate(eps_list, start=1):
        need = transition_length(config, e)
        if stride < need:
            raise InfeasibleScheduleError(
                f"stride too small: pair {k} with tolerance {e} needs a transition of "
                f"{need} levels, the stride allows {stride}"
            )
    if horizon < stride:
        raise InfeasibleScheduleError(f"horizon {horizon} below the first visit at {stride}")
    blocks = []
    prev = 0
    for n in range(1, horizon // stride + 1):
        v = stride * n
        k = min(nu2(n) + 1, pair_count)
        blocks.append(Block(k, eps_list[k - 1], prev, v, v, True))
        prev = v
    if prev < horizon:
        blocks.append(Block(None, None, prev, horizon + 1, horizon, False))
    return Schedule(tuple(blocks), horizon, "frequent", stride=stride)


def _eps_list(eps, count: int) -> tuple[Fraction, ...]:
    if isinstance(eps, (list, tuple)):
        if len(eps) != count:
            raise ScheduleError(f"need {count} tolerances, got {len(eps)}")
        return tuple(Fraction(e) for e in eps)
    return (Fraction(eps),) * count


# -- probes (linear-combination metrics, evaluated inside the engine) ----------------


@dataclass(frozen=True)
class Probe:
    """Measure the metric of a coordinate combination against the combined target.

    Coefficients apply blockwise to the stacked coordinates; the probe
    value at a level n is the metric between the combination of the
    built coordinates and the same combination of the block's target
    components.  Only levels in ``levels`` are evaluated.
    """

    coefficients: tuple
    levels: frozenset

    def combine(self, value: Value, mc: int):
        acc = None
        for i, a in enumerate(self.coefficients):
            part = vscale(a, value[i * mc : (i + 1) * mc])
            acc = part if acc is None else vadd(acc, part)
        return acc




# -- the level engine ----------------------------------------------------------------


@dataclass
class _LevelState:
    level: int
    block: Block | None
    vals: tuple[Value, ...] | None  # materialized values, while within the prefix
    p_float: float | None
    p_exact: Fraction | None
    mismatch: Fraction | None
    coord_p: tuple[float, ...] | None
    coord_p_exact: tuple | None
    probe_values: dict[int, float] | None


class _Tracker:
    """Cumulative exact correction factors across corrected levels.

    Within one block a lineage's offset from the target scales by 1/w*
    per corrected level and its measure by q*; sectors snapshot these
    cumulatives when they anchor and apply the ratio when a block ends.
    In float mode the complex factor is carried as log-magnitude and
    phase so long blocks saturate to inf instead of producing NaNs.
    """

    def __init__(self, mode: str):
        self.mode = mode
        self.q_product = Fraction(1)
        if mode == "exact":
            self.w_product = QComplex(1)
        else:
            self.w_log2 = 0.0
            self.w_phase = complex(1.0)

    def advance(self, nc) -> None:
        star = nc.correction_index()
        self.q_product = self.q_product * nc.q[star]
        if self.mode == "exact":
            self.w_product = self.w_product * _invert(nc.w[star], "exact")
        else:
            inv = _invert(nc.w[star], "float")
            mag = abs(inv)
            self.w_log2 += math.log2(mag)
            self.w_phase *= inv / mag

    def snapshot(self):
        if self.mode == "exact":
            return (self.w_product, self.q_product)
        return ((self.w_log2, self.w_phase), self.q_product)

    def ratio_since(self, snap) -> tuple:
        w0, q0 = snap
        q_ratio = self.q_product / q0
        if self.mode == "exact":
            return self.w_product / w0, q_ratio
        mag = self.w_log2 - w0[0]
        phase = self.w_phase / w0[1]
        try:
            w_ratio = math.exp2(mag) * phase if hasattr(math, "exp2") else (2.0 ** mag) * phase
        except OverflowError:
            w_ratio = complex(math.inf, 0.0)
        return w_ratio, q_ratio


class _SectorState:
    """Compressed state of one base sector: matched pool plus correction lineages.

    A lineage's offset from the running target scales by exactly 1/w*
    per corrected level and is shifted by the target difference at each
    block switch.  Writing the offset as d = A * (u + C) with A the
    cumulative scaling (shared by all sectors) and C the per-sector
    cumulative of shift/A, the coordinate u is a per-lineage invariant:
    exact mismatch bookkeeping needs only O(1) exact work per sector per
    event, plus one cheap equality probe per lineage per switch to catch
    offsets that land exactly on the new target.  Float mirrors carry
    the reported metric values, re-synced from exact data at switches.
    """

    __slots__ = (
        "measure",
        "target",
        "shift_accum",
        "sync_snap",
        "lineage_total",
        "mismatch",
        "lin_u",
        "lin_birth_mass",
        "lin_birth_q",
        "lin_diff_f",
        "mass_f",
        "dist_f",
        "coord_f",
        "probe_f",
    )

    def __init__(self, measure: Fraction, m: int, mode: str, snap):
        self.measure = measure
        self.target: Value = vzero(m, mode)  # running (virtual) target
        # C below; exact-mode only (float mode skips coincidence detection)
        self.shift_accum: Value | None = vzero(m, "exact") if mode == "exact" else None
        self.sync_snap = snap
        self.lineage_total = Fraction(0)
        self.mismatch = Fraction(0)
        self.lin_u: list[Value] = []
        self.lin_birth_mass: list[Fraction] = []
        self.lin_birth_q: list[Fraction] = []
        self.lin_diff_f: list[tuple[complex, ...]] = []
        self.mass_f: list[float] = []
        self.dist_f: list[float] = []
        self.coord_f: list[tuple[float, ...]] = []
        self.probe_f: list[tuple[float, ...]] = []


def _cnorm(vec) -> float:
    total = 0.0
    for c in vec:
        if not (math.isfinite(c.real) and math.isfinite(c.imag)):
            return math.inf
        if abs(c.real) > 8e153 or abs(c.imag) > 8e153:
            return math.inf
        total += c.real * c.real + c.imag * c.imag
    return math.sqrt(total)


def _scale_shift_f(vec, ratio: complex, shift) -> tuple[complex, ...]:
    """vec * ratio + shift with inf saturation instead of NaNs."""
    out = []
    for c, s in zip(vec, shift):
        if c == 0:
            out.append(complex(s))
            continue
        if not (math.isfinite(ratio.real) and math.isfinite(ratio.imag)):
            out.append(complex(math.inf, 0.0))
            continue
        try:
            out.append(c * ratio + s)
        except OverflowError:
            out.append(complex(math.inf, 0.0))
    return tuple(out)


def _to_cfloat(v: Value) -> tuple[complex, ...]:
    return tuple(c.to_complex() if isinstance(c, QComplex) else complex(c) for c in v)


def _lineage_floats(st: _SectorState, probes: Sequence[Probe], mc: int) -> None:
    """Rebuild distance mirrors from the float offset vectors."""
    st.dist_f = [_cnorm(vec) for vec in st.lin_diff_f]
    if mc:
        st.coord_f = [
            tuple(_cnorm(vec[i * mc : (i + 1) * mc]) for i in range(len(vec) // mc))
            for vec in st.lin_diff_f
        ]
    if probes:
        st.probe_f = [
            tuple(_cnorm(pr.combine(vec, mc)) for pr in probes) for vec in st.lin_diff_f
        ]


def _par_width() -> int:
    raw = os.environ.get(ENV_PAR_WIDTH)
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def _chunked_corrected(args):
    vals, meas, tgt_children, fams, mode = args
    out_vals, out_meas = [], []
    for i, nc, sl in fams:
        v, p = vals[i], meas[i]
        tkids = tgt_children[sl]
        star = nc.correction_index()
        rest = None
        for j in range(nc.branching):
            if j != star:
                term = vscale(nc.w[j], tkids[j])
                rest = term if rest is None else vadd(rest, term)
        forced = vscale(_invert(nc.w[star], mode), vsub(v, rest))
        for j in range(nc.branching):
            out_vals.append(forced if j == star else tkids[j])
            out_meas.append(p * nc.q[j])
    return out_vals, out_meas


def _group_metric(groups: dict) -> tuple[float, Fraction | None]:
    total = 0.0
    exact: Fraction | None = Fraction(0)
    for d2 in sorted(groups):
        total += safe_float(groups[d2]) * metric_factor(d2)
        if exact is not None:
            fe = metric_factor_exact(d2) if isinstance(d2, Fraction) else None
            exact = None if fe is None else exact + groups[d2] * fe
    return total, exact


def _materialized_metrics(vals, targets_now, meas, coordinate_dims, want_coords, probes, probe_now, mc):
    # vertices overwhelmingly repeat the same (value, target) pair, so group
    # them once and run the exact arithmetic per distinct pair only
    pair_mass: dict = {}
    for v, t, p in zip(vals, targets_now, meas):
        key = (v, t)
        acc = pair_mass.get(key)
        pair_mass[key] = p if acc is None else acc + p
    groups: dict = {}
    mismatch = Fraction(0)
    for (v, t), p in pair_mass.items():
        d2 = dist2(v, t)
        if d2 == 0:
            continue
        mismatch += p
        groups[d2] = groups.get(d2, Fraction(0)) + p
    p_float, p_exact = _group_metric(groups)
    coord_p = coord_px = None
    if coordinate_dims is not None and want_coords:
        jc, mcut = coordinate_dims
        cps, cpxs = [], []
        for i in range(jc):
            sl = slice(i * mcut, (i + 1) * mcut)
            g: dict = {}
            for (v, t), p in pair_mass.items():
                d2 = dist2(v[sl], t[sl])
                if d2 == 0:
                    continue
                g[d2] = g.get(d2, Fraction(0)) + p
            cf, cx = _group_metric(g)
            cps.append(cf)
            cpxs.append(cx)
        coord_p, coord_px = tuple(cps), tuple(cpxs)
    probe_vals = None
    if probe_now:
        probe_vals = {}
        for idx in probe_now:
            pr = probes[idx]
            g = {}
            for (v, t), p in pair_mass.items():
                d2 = dist2(pr.combine(v, mc), pr.combine(t, mc))
                if d2 == 0:
                    continue
                g[d2] = g.get(d2, Fraction(0)) + p
            probe_vals[idx] = _group_metric(g)[0]
    return p_float, p_exact, mismatch, coord_p, coord_px, probe_vals


def _run(
    config: TreeConfig,
    targets: Sequence[Target],
    schedule: Schedule,
    initial: Value,
    profile_level: int,
    materialized_depth: int,
    chooser: Callable | None,
    coordinate_dims: tuple[int, int] | None = None,
    probes: Sequence[Probe] = (),
) -> Iterator[_LevelState]:
    """Advance the construction one level at a time.

    Uses per-vertex arrays up to ``materialized_depth`` and the
    compressed per-base-sector representation beyond it.  Coordinate
    metrics are evaluated at hold levels, probes at their requested
    levels.
    """
    mode = value_mode(initial)
    horizon = schedule.horizon
    lam = profile_level
    width = _par_width()
    owners = schedule.owner_array()
    mc = 0 if coordinate_dims is None else coordinate_dims[1]

    vals: tuple[Value, ...] = (initial,)
    meas: list[Fraction] = [Fraction(1)]
    cur_block: Block | None = None
    cur_targets: list[Value] | None = None

    n = 0
    while n < horizon and n < materialized_depth:
        n += 1
        block = owners[n - 1]
        fams = list(_iter_families(config, n - 1))
        if block is not cur_block:
            cur_block = block
            if block is not None and block.active:
                new_targets = list(refine(targets[block.target - 1].h, n).values)
            else:
                new_targets = None
        elif cur_targets is not None:
            new_targets = []
            for i, nc, _ in fams:
                new_targets.extend([cur_targets[i]] * nc.branching)
        else:
            new_targets = None
        if new_targets is not None:
            if chooser is None and width > 1 and len(fams) >= 4 * width:
                chunks = [fams[i::width] for i in range(width)]
                with ThreadPoolExecutor(max_workers=width) as ex:
                    parts = list(
                        ex.map(
                            _chunked_corrected,
                            [(vals, meas, new_targets, c, mode) for c in chunks],
                        )
                    )
                by_father: dict[int, tuple] = {}
                for c, part in zip(chunks, parts):
                    part_v, part_m = part
                    pos = 0
                    for i, nc, _ in c:
                        b = nc.branching
                        by_father[i] = (part_v[pos : pos + b], part_m[pos : pos + b])
                        pos += b
                new_vals, new_meas = [], []
                for i, nc, _ in fams:
                    bv, bm = by_father[i]
                    new_vals.extend(bv)
                    new_meas.extend(bm)
            else:
                new_vals, new_meas = [], []
                for i, nc, sl in fams:
                    v, p = vals[i], meas[i]
                    tkids = new_targets[sl]
                    star = chooser(i, nc) if chooser is not None else nc.correction_index()
                    rest = None
                    for j in range(nc.branching):
                        if j != star:
                            term = vscale(nc.w[j], tkids[j])
                            rest = term if rest is None else vadd(rest, term)
                    forced = vscale(_invert(nc.w[star], mode), vsub(v, rest))
                    for j in range(nc.branching):
                        new_vals.append(forced if j == star else tkids[j])
                        new_meas.append(p * nc.q[j])
            vals = tuple(new_vals)
            cur_targets = new_targets
            meas = new_meas
        else:
            new_vals, new_meas = [], []
            for i, nc, _ in fams:
                new_vals.extend([vals[i]] * nc.branching)
                new_meas.extend(meas[i] * q for q in nc.q)
            vals = tuple(new_vals)
            cur_targets = None
            meas = new_meas

        if cur_targets is not None:
            want_coords = block.active and n >= block.hold_start
            probe_now = [i for i, pr in enumerate(probes) if n in pr.levels]
            p_float, p_exact, mismatch, coord_p, coord_px, probe_vals = _materialized_metrics(
                vals, cur_targets, meas, coordinate_dims, want_coords, probes, probe_now, mc
            )
            yield _LevelState(n, block, vals, p_float, p_exact, mismatch, coord_p, coord_px, probe_vals)
        else:
            yield _LevelState(n, block, vals, None, None, None, None, None, None)

    if n >= horizon:
        return

    # -- compressed per-base-sector phase ----------------------------------------

    from .tree import level as tree_level, level_measures

    lam_vertices = tree_level(config, lam)
    base_measures = level_measures(config, lam)
    lam_targets: dict[int, tuple[Value, ...]] = {}

    def sector_consts(block: Block) -> tuple[Value, ...]:
        key = block.target
        if key not in lam_targets:
            lam_targets[key] = refine(targets[key - 1].h, lam).values
        return lam_targets[key]

    tracker = _Tracker(mode)
    m_dim = len(initial)
    exact = mode == "exact"
    sectors = [
        _SectorState(base_measures[z], m_dim, mode, tracker.snapshot())
        for z in range(len(lam_vertices))
    ]
    zs: list[int] = []
    for z, v in enumerate(lam_vertices):
        zs.extend([z] * config.subtree_count(v, n))
    grouped: list[dict] = [dict() for _ in sectors]
    for p, v, z in zip(meas, vals, zs):
        grouped[z][v] = grouped[z].get(v, Fraction(0)) + p
    stargets = sector_consts(cur_block) if cur_block is not None and cur_block.active else None
    for z, st in enumerate(sectors):
        if stargets is not None:
            st.target = stargets[z]
        for v, p in grouped[z].items():
            d = vsub(v, st.target)
            if all(not bool(c) for c in d):
                continue  # matched pool
            st.lin_u.append(d)  # A = 1 and C = 0 at the seam
            st.lin_birth_mass.append(p)
            st.lin_birth_q.append(tracker.q_product)
            st.lin_diff_f.append(_to_cfloat(d))
            st.mass_f.append(safe_float(p))
            st.lineage_total += p
        st.mismatch = st.lineage_total
        _lineage_floats(st, probes, mc)

    def switch_sector(st: _SectorState, t_new: Value) -> None:
        w_ratio, q_ratio = tracker.ratio_since(st.sync_snap)
        if exact:
            fr = w_ratio.to_complex()
        else:
            fr = w_ratio if isinstance(w_ratio, complex) else complex(w_ratio)
        s = vsub(st.target, t_new)
        shift_zero = all(not bool(c) for c in s)
        if not shift_zero and exact:
            a_now = tracker.w_product
            delta = tuple(c / a_now for c in s)
            new_c = tuple(c + d for c, d in zip(st.shift_accum, delta))
            probe_u = tuple(-c for c in new_c)
            if any(u == probe_u for u in st.lin_u):
                q_now = tracker.q_product
                keep = [i for i, u in enumerate(st.lin_u) if u != probe_u]
                for i, u in enumerate(st.lin_u):
                    if u == probe_u:
                        st.lineage_total -= st.lin_birth_mass[i] * (q_now / st.lin_birth_q[i])
                st.lin_u = [st.lin_u[i] for i in keep]
                st.lin_birth_mass = [st.lin_birth_mass[i] for i in keep]
                st.lin_birth_q = [st.lin_birth_q[i] for i in keep]
                st.lin_diff_f = [st.lin_diff_f[i] for i in keep]
                st.mass_f = [st.mass_f[i] for i in keep]
            pool_u = tuple(-c for c in st.shift_accum)
            st.shift_accum = new_c
        s_f = _to_cfloat(s)
        st.lin_diff_f = [_scale_shift_f(vec, fr, s_f) for vec in st.lin_diff_f]
        if not shift_zero:
            pool_mass = st.measure - st.lineage_total
            if pool_mass > 0:
                if exact:
                    st.lin_u.append(pool_u)
                else:
                    st.lin_u.append(None)
                st.lin_birth_mass.append(pool_mass)
                st.lin_birth_q.append(tracker.q_product)
                st.lin_diff_f.append(s_f)
                st.mass_f.append(safe_float(pool_mass))
                st.lineage_total += pool_mass
        st.mismatch = st.lineage_total
        st.target = t_new
        st.sync_snap = tracker.snapshot()
        _lineage_floats(st, probes, mc)

    while n < horizon:
        n += 1
        block = owners[n - 1]
        nc = config.level_node_class(n - 1)
        if block is not cur_block:
            if block is not None and block.active:
                new_stargets = sector_consts(block)
                for z, st in enumerate(sectors):
                    switch_sector(st, new_stargets[z])
                stargets = new_stargets
            else:
                stargets = None  # lineages freeze against the last target
            cur_block = block
        if stargets is not None:
            tracker.advance(nc)
            star = nc.correction_index()
            fq = safe_float(nc.q[star])
            fsw = 1.0 / math.sqrt(safe_float(nc.w[star].abs2()))
            q_star = nc.q[star]
            mismatch = Fraction(0)
            p_float = 0.0
            for st in sectors:
                st.lineage_total *= q_star
                st.mismatch = st.lineage_total
                mismatch += st.mismatch
                st.mass_f = [x * fq for x in st.mass_f]
                st.dist_f = [x * fsw for x in st.dist_f]
                for mf, d in zip(st.mass_f, st.dist_f):
                    if d > 0.0:
                        p_float += mf * (d / (1.0 + d)) if math.isfinite(d) else mf
            want_coords = (
                coordinate_dims is not None and block.active and n >= block.hold_start
            )
            coord_p = None
            if coordinate_dims is not None:
                for st in sectors:
                    if st.coord_f:
                        st.coord_f = [tuple(d * fsw for d in ds) for ds in st.coord_f]
            if want_coords:
                jc = coordinate_dims[0]
                acc = [0.0] * jc
                for st in sectors:
                    for mf, ds in zip(st.mass_f, st.coord_f):
                        for i in range(jc):
                            d = ds[i]
                            if d > 0.0:
                                acc[i] += mf * (d / (1.0 + d)) if math.isfinite(d) else mf
                coord_p = tuple(acc)
            if probes:
                for st in sectors:
                    if st.probe_f:
                        st.probe_f = [tuple(d * fsw for d in ds) for ds in st.probe_f]
            probe_now = [i for i, pr in enumerate(probes) if n in pr.levels]
            probe_vals = None
            if probe_now:
                probe_vals = {}
                for idx in probe_now:
                    acc_p = 0.0
                    for st in sectors:
                        for mf, ds in zip(st.mass_f, st.probe_f):
                            d = ds[idx]
                            if d > 0.0:
                                acc_p += mf * (d / (1.0 + d)) if math.isfinite(d) else mf
                    probe_vals[idx] = acc_p
            yield _LevelState(
                n,
                block,
                None,
                p_float,
                None,
                mismatch,
                coord_p,
                None if coord_p is None else (None,) * len(coord_p),
                probe_vals,
            )
        else:
            yield _LevelState(n, block, None, None, None, None, None, None, None)


# -- records and results ----------------------------------------------------------


@dataclass(frozen=True)
class LevelRecord:
    level: int
    block: int | None
    target: int | None
    phase: str  # "transition" | "hold" | "constant"
    p_float: float | None
    p_exact: Fraction | None
    mismatch: Fraction | None
    bound: Fraction | None
    visited: bool | None
    coord_p: tuple[float, ...] | None = None
    coord_p_exact: tuple | None = None


def _certified_visit(p_float, p_exact, mismatch, eps: Fraction) -> bool:
    """P < eps, decided exactly whenever possible.

    The metric never reaches the mismatch measure (each term carries a
    factor below one), so mismatch <= eps certifies the visit outright.
    """
    if mismatch is not None and mismatch <= eps:
        return True
    if p_exact is not None:
        return p_exact < eps
    return p_float < float(eps)


def _record_of(state: _LevelState, ordinals: dict[int, int], mu: Fraction) -> LevelRecord:
    b = state.block
    if b is None or not b.active:
        return LevelRecord(
            state.level, None if b is None else ordinals[id(b)], None, "constant",
            None, None, None, None, None,
        )
    phase = "hold" if state.level >= b.hold_start else "transition"
    bound = mu ** (state.level - b.start)
    visited = None
    if phase == "hold":
        visited = _certified_visit(state.p_float, state.p_exact, state.mismatch, b.eps)
    return LevelRecord(
        state.level,
        ordinals[id(b)],
        b.target,
        phase,
        state.p_float,
        state.p_exact,
        state.mismatch,
        bound,
        visited,
        state.coord_p,
        state.coord_p_exact,
    )


@dataclass
class BuildResult:
    config: TreeConfig
    targets: tuple[Target, ...]
    schedule: Schedule
    initial: Value
    m: int
    mode: str
    profile_level: int
    materialized_depth: int
    truncation: HarmonicTruncation
    records: tuple[LevelRecord, ...]
    visit_sets: dict[int, IndexSet]
    coordinate_dims: tuple[int, int] | None = None

    def record(self, level: int) -> LevelRecord:
        return self.records[level - 1]


def build(
    config: TreeConfig,
    targets: Sequence[Target],
    schedule: Schedule,
    initial=0,
    *,
    m: int = 1,
    mode: str = "exact",
    materialize_depth: int | None = None,
    chooser: Callable | None = None,
    coordinate_dims: tuple[int, int] | None = None,
    profile_floor: int = 0,
) -> BuildResult:
    """Run the scheduled construction and log every level's guarantees."""
    targets = tuple(targets)
    resolve_schedule(config, schedule, targets)
    for t in targets:
        if t.h.config != config:
            raise ValueError(f"target {t.label} lives on a different tree")
        if t.h.m != m:
            raise ValueError(f"target {t.label} has dimension {t.h.m}, expected {m}")
        if t.h.mode != mode:
            raise ModeMismatchError(f"target {t.label} is {t.h.mode}, build is {mode}")
    init_val = as_value(initial, m, mode)
    if coordinate_dims is not None and coordinate_dims[0] * coordinate_dims[1] != m:
        raise ValueError(f"coordinate dims {coordinate_dims} do not factor m = {m}")
    horizon = schedule.horizon
    lam = max(
        profile_floor,
        config.homogeneous_from,
        max((t.h.level for t in targets), default=0),
    )
    if materialize_depth is None:
        materialize_depth = DEFAULT_MATERIALIZE_DEPTH
    mat = max(lam, min(horizon, materialize_depth))
    if mat > config.depth_cap:
        raise DepthCapError(f"materialized depth {mat} exceeds cap {config.depth_cap}")
    config.level_size(mat)  # fail early if the prefix itself is too large

    mu = config.contraction_ratio()
    ordinals = schedule.ordinal_map()
    levels: list[tuple[Value, ...]] = [(init_val,)]
    records: list[LevelRecord] = []
    for state in _run(config, targets, schedule, init_val, lam, mat, chooser, coordinate_dims):
        if state.vals is not None:
            levels.append(state.vals)
        records.append(_record_of(state, ordinals, mu))
    trunc = HarmonicTruncation(config, len(levels) - 1, tuple(levels))
    visit_sets: dict[int, IndexSet] = {}
    for k in range(1, len(targets) + 1):
        hits = [r.level for r in records if r.target == k and r.phase == "hold" and r.visited]
        visit_sets[k] = IndexSet.from_iterable(hits, horizon)
    return BuildResult(
        config,
        targets,
        schedule,
        init_val,
        m,
        mode,
        lam,
        mat,
        trunc,
        tuple(records),
        visit_sets,
        coordinate_dims,
    )


def replay(result: BuildResult, probes: Sequence[Probe] = ()) -> Iterator[_LevelState]:
    """Re-advance the build from its inputs; used by verification and certificates."""
    return _run(
        result.config,
        result.targets,
        result.schedule,
        result.initial,
        result.profile_level,
        result.materialized_depth,
        None,
        result.coordinate_dims,
        probes,
    )


# -- verification -------------------------------------------------------------------


@dataclass(frozen=True)
class VerifyReport:
    passed: bool
    checks: tuple[tuple[str, bool, str], ...]

    def failures(self) -> list[tuple[str, str]]:
        return [(name, detail) for name, ok, detail in self.checks if not ok]


def verify(result: BuildResult) -> VerifyReport:
    """Re-derive every logged guarantee from scratch.

    Harmonicity is re-checked vertex by vertex; metric values on the
    materialized prefix are recomputed through the simple-function
    metric (a separate code path over refined sector arrays); the whole
    level log is replayed and compared record by record; and the
    contraction, hold-visit, and density-floor claims are re-derived
    from the exact mismatch measures.
    """
    from .harmonic import check_harmonic, projection
    from .simple import prob_metric, prob_metric_exact

    checks: list[tuple[str, bool, str]] = []
    config = result.config
    mu = config.contraction_ratio()

    hrep = check_harmonic(result.truncation)
    checks.append(
        (
            "harmonic",
            hrep.passed,
            ("exact" if result.mode == "exact" else "within tolerance")
            if hrep.passed
            else f"max residual {hrep.max_residual:g}",
        )
    )

    ordinals = result.schedule.ordinal_map()
    fresh = tuple(_record_of(s, ordinals, mu) for s in replay(result))
    same = fresh == result.records
    checks.append(("replay", same, "all level records reproduced" if same else "records diverge"))

    bad_metrics = []
    for rec in result.records:
        if rec.target is None or rec.level > result.truncation.depth:
            continue
        target = result.targets[rec.target - 1].h
        direct = projection(result.truncation, rec.level)
        want = refine(target, rec.level)
        if prob_metric(direct, want) != rec.p_float:
            bad_metrics.append(rec.level)
            continue
        if prob_metric_exact(direct, want) != rec.p_exact:
            bad_metrics.append(rec.level)
    checks.append(
        (
            "materialized metrics",
            not bad_metrics,
            "independent sector sums agree"
            if not bad_metrics
            else f"diverge at levels {bad_metrics[:5]}",
        )
    )

    bad_contraction = []
    bad_bound = []
    for b in result.schedule.blocks:
        if not b.active:
            continue
        prev: Fraction | None = None
        for lev in range(b.start + 1, b.end + 1):
            rec = result.records[lev - 1]
            if rec.mismatch is None:
                bad_contraction.append(lev)
                continue
            if rec.bound is not None and rec.mismatch > rec.bound:
                bad_bound.append(lev)
            if prev is not None and rec.mismatch > mu * prev:
                bad_contraction.append(lev)
            prev = rec.mismatch
    checks.append(
        (
            "contraction",
            not bad_contraction,
            "mismatch decays by mu each step"
            if not bad_contraction
            else f"violated at {bad_contraction[:5]}",
        )
    )
    checks.append(
        (
            "mu-power bound",
            not bad_bound,
            "mismatch within mu^(n-start)" if not bad_bound else f"violated at {bad_bound[:5]}",
        )
    )

    missed = []
    for b in result.schedule.blocks:
        for lev in b.hold_levels:
            if not result.records[lev - 1].visited:
                missed.append(lev)
    checks.append(
        (
            "hold visits",
            not missed,
            "every hold level is a certified visit" if not missed else f"missed at {missed[:5]}",
        )
    )

    scheduled = result.schedule.scheduled_visits()
    bad_sets = [
        k for k, lv in scheduled.items() if tuple(lv) != result.visit_sets[k].indices
    ]
    checks.append(
        (
            "realized = scheduled",
            not bad_sets,
            "visit sets equal their schedules" if not bad_sets else f"targets {bad_sets} differ",
        )
    )

    if result.schedule.kind == "saturating":
        bad_floor = []
        for b in result.schedule.blocks:
            if not b.active:
                continue
            realized = Fraction(len(b.hold_levels), b.end)
            floor = 1 - Fraction(b.start, b.end) - Fraction(b.transition_budget, b.end)
            if realized < floor:
                bad_floor.append(b.end)
        checks.append(
            (
                "block density floors",
                not bad_floor,
                "each block meets 1 - start/end - transition/end"
                if not bad_floor
                else f"violated at block ends {bad_floor}",
            )
        )

    passed = all(ok for _, ok, _ in checks)
    return VerifyReport(passed, tuple(checks))


# -- JSON ---------------------------------------------------------------------------


def schedule_to_json(s: Schedule) -> dict:
    obj = {
        "kind": s.kind,
        "horizon": s.horizon,
        "blocks": [
            {
                "target": b.target,
                "eps": None if b.eps is None else format_rational(b.eps),
                "start": b.start,
                "hold_start": b.hold_start,
                "end": b.end,
                "active": b.active,
            }
            for b in s.blocks
        ],
    }
    if s.stride is not None:
        obj["stride"] = s.stride
    if s.boundaries is not None:
        obj["boundaries"] = list(s.boundaries)
    return obj


def schedule_from_json(obj: dict) -> Schedule:
    if not isinstance(obj, dict) or "horizon" not in obj or "blocks" not in obj:
        raise ParseError("schedule needs 'horizon' and 'blocks'")
    blocks = []
    for b in obj["blocks"]:
        try:
            blocks.append(
                Block(
                    b.get("target"),
                    None if b.get("eps") is None else parse_rational(b["eps"]),
                    b["start"],
                    b["hold_start"],
                    b["end"],
                    b.get("active", True),
                )
            )
        except KeyError as exc:
            raise ParseError(f"block missing field {exc}") from None
    return Schedule(
        tuple(blocks),
        obj["horizon"],
        obj.get("kind", "explicit"),
        obj.get("stride"),
        None if obj.get("boundaries") is None else tuple(obj["boundaries"]),
    )
