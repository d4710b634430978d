"""Exact counting densities of visit index sets at a finite horizon.

Lower and upper density are limit notions and are never claimed from
finite data: everything here is an exact |A∩[1,N]|/N profile with a
running minimum and maximum over a window, labelled as finite-horizon
quantities.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

from .serialize import format_rational


@dataclass(frozen=True)
class IndexSet:
    """Strictly increasing positive integers within a horizon."""

    indices: tuple[int, ...]
    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        prev = 0
        for i in self.indices:
            if i <= prev:
                raise ValueError("indices must be strictly increasing and positive")
            prev = i
        if self.indices and self.indices[-1] > self.horizon:
            raise ValueError(f"index {self.indices[-1]} beyond horizon {self.horizon}")

    @classmethod
    def from_iterable(cls, items: Iterable[int], horizon: int) -> "IndexSet":
        return cls(tuple(sorted(set(items))), horizon)

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, n: int) -> bool:
        import bisect

        i = bisect.bisect_left(self.indices, n)
        return i < len(self.indices) and self.indices[i] == n


def counting_density(a: IndexSet, n: int) -> Fraction:
    """|A ∩ [1, n]| / n, exact."""
    if not 1 <= n <= a.horizon:
        raise ValueError(f"checkpoint {n} outside [1, {a.horizon}]")
    import bisect

    return Fraction(bisect.bisect_right(a.indices, n), n)


@dataclass(frozen=True)
class DensityReport:
    """Finite-horizon counting-density profile over a window.

    running_min and running_max are extremes of the finite profile, not
    estimates of the lower or upper density.
    """

    horizon: int
    window_start: int
    counts: tuple[int, ...]
    densities: tuple[Fraction, ...]
    running_min: Fraction
    running_max: Fraction
    argmin: int
    argmax: int

    def density_at(self, n: int) -> Fraction:
        if not self.window_start <= n <= self.horizon:
            raise ValueError(f"checkpoint {n} outside window [{self.window_start}, {self.horizon}]")
        return self.densities[n - self.window_start]


def density_profile(a: IndexSet, window_start: int | None = None) -> DensityReport:
    """Exact counting density at every N in [window_start, horizon]."""
    h = a.horizon
    n0 = max(1, h // 2) if window_start is None else window_start
    if not 1 <= n0 <= h:
        raise ValueError(f"window start {n0} outside [1, {h}]")
    members = set(a.indices)
    counts = []
    densities = []
    running = sum(1 for i in a.indices if i < n0)
    best_min = best_max = None
    argmin = argmax = n0
    for n in range(n0, h + 1):
        if n in members:
            running += 1
        counts.append(running)
        d = Fraction(running, n)
        densities.append(d)
        if best_min is None or d < best_min:
            best_min, argmin = d, n
        if best_max is None or d > best_max:
            best_max, argmax = d, n
    return DensityReport(h, n0, tuple(counts), tuple(densities), best_min, best_max, argmin, argmax)


def report_to_json(report: DensityReport, stride: int = 1) -> dict:
    rows = []
    for i, n in enumerate(range(report.window_start, report.horizon + 1)):
        if (n - report.window_start) % stride == 0 or n == report.horizon:
            rows.append(
                {"N": n, "count": report.counts[i], "density": format_rational(report.densities[i])}
            )
    return {
        "kind": "finite-horizon density profile",
        "horizon": report.horizon,
        "window_start": report.window_start,
        "finite_horizon_min": format_rational(report.running_min),
        "finite_horizon_max": format_rational(report.running_max),
        "argmin": report.argmin,
        "argmax": report.argmax,
        "profile": rows,
    }


def report_to_table(report: DensityReport, stride: int = 1) -> str:
    lines = [f"# finite-horizon density profile, window [{report.window_start}, {report.horizon}]"]
    lines.append(f"# min {report.running_min} at N={report.argmin}; max {report.running_max} at N={report.argmax}")
    lines.append(f"{'N':>10} {'count':>10} {'density':>14}")
    for i, n in enumerate(range(report.window_start, report.horizon + 1)):
        if (n - report.window_start) % stride == 0 or n == report.horizon:
            d = report.densities[i]
            lines.append(f"{n:>10} {report.counts[i]:>10} {float(d):>14.8f}")
    return "\n".join(lines) + "\n"


def index_set_to_json(a: IndexSet) -> dict:
    return {"horizon": a.horizon, "indices": list(a.indices)}


def index_set_from_json(obj: dict) -> IndexSet:
    from .errors import ParseError

    if not isinstance(obj, dict) or "horizon" not in obj or "indices" not in obj:
        raise ParseError("index set needs 'horizon' and 'indices'")
    return IndexSet(tuple(obj["indices"]), obj["horizon"])
