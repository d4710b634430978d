"""Finitely presented rooted trees with exact transition weights.

A tree is given by a branching rule (uniform, periodic by depth, or an
explicit prefix falling back to a default rule), per-vertex measure
weights q (positive rationals summing to one) and harmonic weights w
(nonzero rational-complex numbers summing to one, defaulting to q).
Every vertex has at least two children and all arithmetic is exact, so
the sector-measure identities below are checked as identities.

Enumeration is guarded twice: a per-config depth cap bounds vertex
addressing, and a global vertex-count limit stops a level enumeration
whose size would be astronomically large (levels grow at least like
2^n, while schedulers reason about level indices far beyond anything
materializable).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence, Union

from .errors import AddressError, ConfigError, DepthCapError, EnumerationLimitError, ParseError
from .serialize import format_rational, load_json, parse_rational, write_json
from .values import QComplex

DEFAULT_DEPTH_CAP = 12
DEFAULT_ENUM_LIMIT = 1 << 20

ENV_DEPTH_CAP = "TREEHARMONICS_DEPTH_CAP"
ENV_ENUM_LIMIT = "TREEHARMONICS_ENUM_LIMIT"


def enum_limit() -> int:
    raw = os.environ.get(ENV_ENUM_LIMIT)
    if raw is None:
        return DEFAULT_ENUM_LIMIT
    try:
        return int(raw)
    except ValueError:
        return DEFAULT_ENUM_LIMIT


@dataclass(frozen=True)
class Vertex:
    """Address of one vertex: the child-index path from the root."""

    path: tuple[int, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.path)

    def parent(self) -> "Vertex":
        if not self.path:
            raise AddressError("the root has no father")
        return Vertex(self.path[:-1])

    def child(self, i: int) -> "Vertex":
        return Vertex(self.path + (i,))

    def __str__(self) -> str:
        return ".".join(str(i) for i in self.path) if self.path else "<root>"


ROOT = Vertex()


@dataclass(frozen=True)
class NodeClass:
    """Child weights of one vertex: measure weights q and harmonic weights w."""

    q: tuple[Fraction, ...]
    w: tuple[QComplex, ...]

    @property
    def branching(self) -> int:
        return len(self.q)

    def validate(self, where: str) -> None:
        if len(self.q) < 2:
            raise ConfigError(f"branching must be at least 2, got {len(self.q)}", where)
        if len(self.w) != len(self.q):
            raise ConfigError("q and w must have equal length", where)
        if any(x <= 0 for x in self.q):
            raise ConfigError(f"measure weights must be positive, got {self.q}", where)
        if sum(self.q) != 1:
            raise ConfigError(f"measure weights must sum to 1, got sum {sum(self.q)}", where)
        if any(not bool(x) for x in self.w):
            raise ConfigError("harmonic weights must be nonzero", where)
        total = QComplex(0)
        for x in self.w:
            total = total + x
        if total != QComplex(1):
            raise ConfigError("harmonic weights must sum to 1", where)

    def min_q(self) -> Fraction:
        return min(self.q)

    def correction_index(self) -> int:
        """Default correction child: argmin q, ties to the lowest index."""
        best = 0
        for i in range(1, len(self.q)):
            if self.q[i] < self.q[best]:
                best = i
        return best


def node_class(q: Sequence, w: Sequence | None = None) -> NodeClass:
    qt = tuple(Fraction(x) for x in q)
    if w is None:
        wt = tuple(QComplex(x) for x in qt)
    else:
        wt = tuple(x if isinstance(x, QComplex) else QComplex(x) for x in w)
    return NodeClass(qt, wt)


@dataclass(frozen=True)
class UniformRule:
    node: NodeClass

    kind = "uniform"

    def class_at_depth(self, n: int) -> NodeClass:
        return self.node

    def classes(self) -> Iterator[tuple[str, NodeClass]]:
        yield "all vertices", self.node

    def validate(self) -> None:
        self.node.validate("uniform rule")


@dataclass(frozen=True)
class PeriodicRule:
    nodes: tuple[NodeClass, ...]

    kind = "periodic"

    def class_at_depth(self, n: int) -> NodeClass:
        return self.nodes[n % len(self.nodes)]

    def classes(self) -> Iterator[tuple[str, NodeClass]]:
        for r, nc in enumerate(self.nodes):
            yield f"depth = {r} (mod {len(self.nodes)})", nc

    def validate(self) -> None:
        if not self.nodes:
            raise ConfigError("periodic rule needs at least one class")
        for where, nc in self.classes():
            nc.validate(where)


@dataclass(frozen=True)
class ExplicitRule:
    """Explicit weights on a finite prefix of vertices, default rule below."""

    prefix: tuple[tuple[tuple[int, ...], NodeClass], ...]
    default: Union[UniformRule, PeriodicRule]

    kind = "explicit"

    @property
    def prefix_depth(self) -> int:
        return max((len(p) for p, _ in self.prefix), default=-1) + 1

    def lookup(self, path: tuple[int, ...]) -> NodeClass:
        for p, nc in self.prefix:
            if p == path:
                return nc
        return self.default.class_at_depth(len(path))

    def classes(self) -> Iterator[tuple[str, NodeClass]]:
        for p, nc in self.prefix:
            yield "vertex " + (".".join(map(str, p)) or "<root>"), nc
        yield from self.default.classes()

    def validate(self) -> None:
        seen = set()
        for p, nc in self.prefix:
            if p in seen:
                raise ConfigError("duplicate prefix entry", ".".join(map(str, p)))
            seen.add(p)
            nc.validate("vertex " + (".".join(map(str, p)) or "<root>"))
        self.default.validate()


Rule = Union[UniformRule, PeriodicRule, ExplicitRule]


@dataclass(frozen=True)
class TreeConfig:
    """Immutable, validated tree presentation with a hard depth cap."""

    rule: Rule
    depth_cap: int = DEFAULT_DEPTH_CAP

    def __post_init__(self):
        if self.depth_cap < 1:
            raise ConfigError(f"depth cap must be positive, got {self.depth_cap}")
        self.rule.validate()
        if isinstance(self.rule, ExplicitRule):
            for p, _ in self.rule.prefix:
                if p:
                    parent = self.rule.lookup(p[:-1])
                    if p[-1] >= parent.branching:
                        raise ConfigError(
                            f"prefix path exceeds father's branching {parent.branching}",
                            ".".join(map(str, p)),
                        )

    # -- per-vertex structure -------------------------------------------------

    def node_class_at(self, path: tuple[int, ...]) -> NodeClass:
        if isinstance(self.rule, ExplicitRule):
            return self.rule.lookup(path)
        return self.rule.class_at_depth(len(path))

    def branching(self, path: tuple[int, ...]) -> int:
        return self.node_class_at(path).branching

    def check_vertex(self, v: Vertex) -> None:
        if v.depth > self.depth_cap:
            raise DepthCapError(f"vertex depth {v.depth} exceeds cap {self.depth_cap}")
        prefix: tuple[int, ...] = ()
        for i in v.path:
            b = self.branching(prefix)
            if not 0 <= i < b:
                raise AddressError(f"child index {i} out of range 0..{b - 1} at {Vertex(prefix)}")
            prefix = prefix + (i,)

    # -- depth homogeneity (drives the compressed builder state) --------------

    @property
    def homogeneous_from(self) -> int:
        """Least depth from which the class of a vertex depends only on depth."""
        if isinstance(self.rule, ExplicitRule):
            return self.rule.prefix_depth
        return 0

    def level_node_class(self, n: int) -> NodeClass:
        if n < self.homogeneous_from:
            raise ValueError(f"level {n} is not depth-homogeneous for this rule")
        if isinstance(self.rule, ExplicitRule):
            return self.rule.default.class_at_depth(n)
        return self.rule.class_at_depth(n)

    def contraction_ratio(self) -> Fraction:
        """max over vertex classes of min_y q(x,y); the per-level measure decay."""
        return max(nc.min_q() for _, nc in self.rule.classes())

    # -- counting -------------------------------------------------------------

    def level_size(self, n: int) -> int:
        if n > self.depth_cap:
            raise DepthCapError(f"level {n} exceeds cap {self.depth_cap}")
        return self._subtree_count((), n)

    def subtree_count(self, v: Vertex, depth: int) -> int:
        """Number of depth-`depth` descendants of v (depth absolute)."""
        if depth < v.depth:
            raise ValueError("target depth above the vertex")
        return self._subtree_count(v.path, depth)

    def _subtree_count(self, path: tuple[int, ...], depth: int) -> int:
        n = len(path)
        if depth == n:
            return 1
        if n >= self.homogeneous_from:
            total = 1
            for k in range(n, depth):
                total *= self.level_node_class(k).branching
            return total
        b = self.branching(path)
        if n + 1 >= self.homogeneous_from:
            return b * self._subtree_count(path + (0,), depth)
        return sum(self._subtree_count(path + (i,), depth) for i in range(b))

    def lex_rank(self, v: Vertex) -> int:
        """0-based position of v within its level, lexicographic by path."""
        rank = 0
        prefix: tuple[int, ...] = ()
        n = v.depth
        for i in v.path:
            for c in range(i):
                rank += self._subtree_count(prefix + (c,), n)
            prefix = prefix + (i,)
        return rank


# -- operations ----------------------------------------------------------------


def children(config: TreeConfig, v: Vertex) -> list[tuple[Vertex, Fraction, QComplex]]:
    """Children of v with their measure and harmonic weights."""
    config.check_vertex(v)
    if v.depth + 1 > config.depth_cap:
        raise DepthCapError(f"children at depth {v.depth + 1} exceed cap {config.depth_cap}")
    nc = config.node_class_at(v.path)
    return [(v.child(i), nc.q[i], nc.w[i]) for i in range(nc.branching)]


def sector_measure(config: TreeConfig, v: Vertex) -> Fraction:
    """Product of measure weights along the root-to-v path; 1 at the root."""
    config.check_vertex(v)
    p = Fraction(1)
    prefix: tuple[int, ...] = ()
    for i in v.path:
        p *= config.node_class_at(prefix).q[i]
        prefix = prefix + (i,)
    return p


def _check_level(config: TreeConfig, n: int) -> None:
    if n < 0:
        raise ValueError(f"level must be nonnegative, got {n}")
    if n > config.depth_cap:
        raise DepthCapError(f"level {n} exceeds cap {config.depth_cap}")
    size = config.level_size(n)
    if size > enum_limit():
        raise EnumerationLimitError(
            f"level {n} holds {size} vertices, above the enumeration limit {enum_limit()}"
        )


def level(config: TreeConfig, n: int) -> list[Vertex]:
    """All depth-n vertices in canonical (lexicographic) order."""
    _check_level(config, n)
    out = [ROOT]
    for _ in range(n):
        nxt = []
        for v in out:
            b = config.branching(v.path)
            nxt.extend(v.child(i) for i in range(b))
        out = nxt
    return out


def level_measures(config: TreeConfig, n: int) -> list[Fraction]:
    """Sector measures of level(config, n), in the same order."""
    _check_level(config, n)
    meas = [Fraction(1)]
    paths: list[tuple[int, ...]] = [()]
    for _ in range(n):
        nm, np_ = [], []
        for p, m in zip(paths, meas):
            nc = config.node_class_at(p)
            for i in range(nc.branching):
                np_.append(p + (i,))
                nm.append(m * nc.q[i])
        meas, paths = nm, np_
    return meas


@dataclass(frozen=True)
class ConsistencyReport:
    level: int
    passed: bool
    violations: tuple[tuple[Vertex, Fraction, Fraction], ...] = ()


def consistency_check(config: TreeConfig, n: int) -> ConsistencyReport:
    """Check that child sector measures sum exactly to the father's, over T_n."""
    _check_level(config, n + 1)
    bad = []
    for v in level(config, n):
        pv = sector_measure(config, v)
        total = Fraction(0)
        for _, q, _ in children(config, v):
            total += pv * q
        if total != pv:
            bad.append((v, pv, total))
    return ConsistencyReport(n, not bad, tuple(bad))


def bfs_index(config: TreeConfig, v: Vertex) -> int:
    """1-based position of v in breadth-first, lexicographic-within-level order."""
    config.check_vertex(v)
    idx = 1
    for k in range(v.depth):
        idx += config.level_size(k)
    return idx + config.lex_rank(v)


def bfs_depth_of_index(config: TreeConfig, i: int) -> int:
    """Depth of the i-th BFS vertex (1-based)."""
    if i < 1:
        raise ValueError("BFS indices start at 1")
    d = 0
    seen = 0
    while True:
        seen += config.level_size(d)
        if i <= seen:
            return d
        d += 1


def ancestor_rank(config: TreeConfig, path: tuple[int, ...], k: int) -> int:
    """Lexicographic rank within T_k of the depth-k ancestor of ``path``."""
    return config.lex_rank(Vertex(path[:k]))


# -- convenience constructors ----------------------------------------------------


def uniform_tree(q: Sequence, w: Sequence | None = None, depth_cap: int = DEFAULT_DEPTH_CAP) -> TreeConfig:
    return TreeConfig(UniformRule(node_class(q, w)), depth_cap)


def periodic_tree(classes: Sequence[tuple], depth_cap: int = DEFAULT_DEPTH_CAP) -> TreeConfig:
    nodes = tuple(node_class(q, w) for q, w in classes)
    return TreeConfig(PeriodicRule(nodes), depth_cap)


# -- JSON ------------------------------------------------------------------------


def _class_from_json(obj, where: str) -> NodeClass:
    if not isinstance(obj, dict) or "q" not in obj:
        raise ParseError(f"node class must be an object with a 'q' list ({where})")
    q = [parse_rational(x) for x in obj["q"]]
    w = None
    if obj.get("w") is not None:
        w = []
        for x in obj["w"]:
            if isinstance(x, (list, tuple)):
                w.append(QComplex(parse_rational(x[0]), parse_rational(x[1])))
            else:
                w.append(QComplex(parse_rational(x)))
    return node_class(q, w)


def _class_to_json(nc: NodeClass) -> dict:
    out = {"q": [format_rational(x) for x in nc.q]}
    if tuple(QComplex(x) for x in nc.q) != nc.w:
        out["w"] = [[format_rational(x.re), format_rational(x.im)] for x in nc.w]
    return out


def config_from_json(obj: dict) -> TreeConfig:
    if not isinstance(obj, dict) or "rule" not in obj:
        raise ParseError("tree config must be an object with a 'rule' field")
    rule_obj = obj["rule"]
    kind = rule_obj.get("kind") if isinstance(rule_obj, dict) else None
    if kind == "uniform":
        rule: Rule = UniformRule(_class_from_json(obj, "uniform"))
    elif kind == "periodic":
        classes = obj.get("classes")
        if not isinstance(classes, list) or not classes:
            raise ParseError("periodic config needs a nonempty 'classes' list")
        rule = PeriodicRule(tuple(_class_from_json(c, f"class {i}") for i, c in enumerate(classes)))
    elif kind == "explicit":
        prefix_obj = rule_obj.get("prefix", {})
        if not isinstance(prefix_obj, dict):
            raise ParseError("explicit rule 'prefix' must map paths to classes")
        prefix = []
        for key, val in sorted(prefix_obj.items()):
            path = tuple(int(t) for t in key.split(".")) if key else ()
            prefix.append((path, _class_from_json(val, f"vertex {key or '<root>'}")))
        default_obj = rule_obj.get("default")
        if not isinstance(default_obj, dict):
            raise ParseError("explicit rule needs a 'default' sub-config")
        default = config_from_json({**default_obj, "depth_cap": 1}).rule
        if isinstance(default, ExplicitRule):
            raise ParseError("explicit default cannot itself be explicit")
        rule = ExplicitRule(tuple(prefix), default)
    else:
        raise ParseError(f"unknown rule kind {kind!r}")
    cap = obj.get("depth_cap", DEFAULT_DEPTH_CAP)
    if not isinstance(cap, int):
        raise ParseError("depth_cap must be an integer")
    env_cap = os.environ.get(ENV_DEPTH_CAP)
    if env_cap is not None:
        try:
            cap = int(env_cap)
        except ValueError:
            pass
    return TreeConfig(rule, cap)


def config_to_json(config: TreeConfig) -> dict:
    rule = config.rule
    if isinstance(rule, UniformRule):
        obj = {"rule": {"kind": "uniform"}, **_class_to_json(rule.node)}
    elif isinstance(rule, PeriodicRule):
        obj = {"rule": {"kind": "periodic"}, "classes": [_class_to_json(nc) for nc in rule.nodes]}
    else:
        prefix = {".".join(map(str, p)): _class_to_json(nc) for p, nc in rule.prefix}
        if isinstance(rule.default, UniformRule):
            default = {"rule": {"kind": "uniform"}, **_class_to_json(rule.default.node)}
        else:
            default = {
                "rule": {"kind": "periodic"},
                "classes": [_class_to_json(nc) for nc in rule.default.nodes],
            }
        obj = {"rule": {"kind": "explicit", "prefix": prefix, "default": default}}
    obj["depth_cap"] = config.depth_cap
    return obj


def load_config(path) -> TreeConfig:
    return config_from_json(load_json(path))


def save_config(path, config: TreeConfig) -> None:
    write_json(path, config_to_json(config))
