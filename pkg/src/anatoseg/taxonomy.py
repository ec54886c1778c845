"""Class hierarchy parsing and inference of the pairwise relation matrix.

A taxonomy file declares classes and direct ``contains`` / ``excludes``
edges.  :func:`infer_matrix` closes the direct edges under relation
composition and returns a :class:`PropositionMatrix` whose cell ``[i][j]``
states how class ``i`` relates to class ``j``:

* ``1``  -- i is a subset of j
* ``-1`` -- i is a superset of j
* ``2``  -- i and j are mutually exclusive
* ``0``  -- nothing is known
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import IntEnum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LEVELS = ("region", "unit", "cell")
SCALES = ("5x", "10x", "20x", "40x")


class TaxonomyError(ValueError):
    """Raised for malformed or self-contradictory taxonomies."""


class Relation(IntEnum):
    UNKNOWN = 0
    SUBSET = 1
    SUPERSET = -1
    EXCLUSIVE = 2

    def converse(self) -> "Relation":
        if self is Relation.SUBSET:
            return Relation.SUPERSET
        if self is Relation.SUPERSET:
            return Relation.SUBSET
        return self


_COMPOSE = {
    (Relation.SUBSET, Relation.SUBSET): Relation.SUBSET,
    (Relation.SUPERSET, Relation.SUPERSET): Relation.SUPERSET,
    (Relation.SUBSET, Relation.EXCLUSIVE): Relation.EXCLUSIVE,
    (Relation.EXCLUSIVE, Relation.SUPERSET): Relation.EXCLUSIVE,
}


def compose(r_ab: int, r_bc: int) -> Relation:
    """Deduce the A->C relation from A->B and B->C.

    Only deductions that hold for every set instantiation are emitted;
    everything else is ``UNKNOWN``.
    """
    return _COMPOSE.get((Relation(r_ab), Relation(r_bc)), Relation.UNKNOWN)


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    level: str
    scale: str

    @property
    def scale_id(self) -> int:
        return SCALES.index(self.scale)


@dataclass(frozen=True)
class TaxonomyGraph:
    classes: tuple[ClassDef, ...]
    contains_edges: tuple[tuple[int, int], ...]
    excludes_edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        _validate(self)

    @property
    def n(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def index(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.id
        raise TaxonomyError(f"unknown class {name!r}")


@dataclass(frozen=True)
class PropositionMatrix:
    names: tuple[str, ...]
    cells: np.ndarray

    @property
    def n(self) -> int:
        return len(self.names)

    def __getitem__(self, ij) -> Relation:
        return relation(self, *ij)

    def row(self, i: int) -> list[Relation]:
        return [Relation(int(v)) for v in self.cells[i]]

    def to_csv(self, order: Sequence[int] | None = None) -> str:
        order = list(range(self.n)) if order is None else list(order)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + [self.names[k] for k in order])
        for i in order:
            w.writerow([self.names[i]] + [int(self.cells[i, j]) for j in order])
        return buf.getvalue()


def _validate(g: TaxonomyGraph) -> None:
    if not g.classes:
        raise TaxonomyError("no classes")
    seen = set()
    for k, c in enumerate(g.classes):
        if c.id != k:
            raise TaxonomyError(f"class ids must be contiguous; {c.name!r} has id {c.id}, expected {k}")
        if c.name in seen:
            raise TaxonomyError(f"duplicate class name {c.name!r}")
        if c.level not in LEVELS:
            raise TaxonomyError(f"class {c.name!r}: unknown level {c.level!r}")
        if c.scale not in SCALES:
            raise TaxonomyError(f"class {c.name!r}: unknown scale {c.scale!r}")
        seen.add(c.name)
    n = len(g.classes)
    for a, b in (*g.contains_edges, *g.excludes_edges):
        if not (0 <= a < n and 0 <= b < n):
            raise TaxonomyError(f"edge ({a}, {b}) references an unknown class")
        if a == b:
            raise TaxonomyError(f"self-edge on {g.classes[a].name!r}")
    contains = set(g.contains_edges)
    for a, b in g.excludes_edges:
        if (a, b) in contains or (b, a) in contains:
            raise TaxonomyError(
                f"pair ({g.classes[a].name}, {g.classes[b].name}) declared both contains and excludes")
    cycle = _find_cycle(n, g.contains_edges)
    if cycle:
        raise TaxonomyError("containment cycle: " + " -> ".join(g.classes[k].name for k in cycle))


def _find_cycle(n: int, edges: Iterable[tuple[int, int]]) -> list[int] | None:
    children: list[list[int]] = [[] for _ in range(n)]
    for p, c in edges:
        children[p].append(c)
    state = [0] * n  # 0 unseen, 1 on stack, 2 done
    for root in range(n):
        if state[root]:
            continue
        stack = [(root, iter(children[root]))]
        path = [root]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                stack.pop()
                path.pop()
                state[node] = 2
            elif state[nxt] == 1:
                return path[path.index(nxt):] + [nxt]
            elif state[nxt] == 0:
                state[nxt] = 1
                path.append(nxt)
                stack.append((nxt, iter(children[nxt])))
    return None


def parse_taxonomy(text: str) -> TaxonomyGraph:
    """Parse the line-oriented taxonomy format.

    Lines are ``class <name> <level> <scale>``, ``contains <parent> <child>``
    or ``excludes <a> <b>``; ``#`` starts a comment.
    """
    classes: list[ClassDef] = []
    by_name: dict[str, int] = {}
    raw_edges: list[tuple[str, str, str, int]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        if kind == "class":
            if len(parts) != 4:
                raise TaxonomyError(f"line {lineno}: expected 'class <name> <level> <scale>'")
            _, name, level, scale = parts
            if name in by_name:
                raise TaxonomyError(f"line {lineno}: duplicate class name {name!r}")
            if level not in LEVELS:
                raise TaxonomyError(f"line {lineno}: unknown level {level!r}")
            if scale not in SCALES:
                raise TaxonomyError(f"line {lineno}: unknown scale {scale!r}")
            by_name[name] = len(classes)
            classes.append(ClassDef(len(classes), name, level, scale))
        elif kind in ("contains", "excludes"):
            if len(parts) != 3:
                raise TaxonomyError(f"line {lineno}: expected '{kind} <a> <b>'")
            raw_edges.append((kind, parts[1], parts[2], lineno))
        else:
            raise TaxonomyError(f"line {lineno}: unknown directive {kind!r}")

    if not classes:
        raise TaxonomyError("no classes")
    contains, excludes = [], []
    for kind, a, b, lineno in raw_edges:
        for name in (a, b):
            if name not in by_name:
                raise TaxonomyError(f"line {lineno}: edge references unknown class {name!r}")
        if a == b:
            raise TaxonomyError(f"line {lineno}: self-edge on {a!r}")
        (contains if kind == "contains" else excludes).append((by_name[a], by_name[b]))
    return TaxonomyGraph(tuple(classes), tuple(contains), tuple(excludes))


def load_taxonomy(path: str | Path | None = None) -> TaxonomyGraph:
    """Load a taxonomy file; ``None`` loads the bundled kidney taxonomy."""
    if path is None:
        text = resources.files("anatoseg.data").joinpath("kidney.tax").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_taxonomy(text)


def _set(cells: np.ndarray, names, i: int, j: int, r: Relation) -> bool:
    """Write r at (i, j) and its converse at (j, i). Returns True if anything changed."""
    cur = Relation(int(cells[i, j]))
    if cur == r:
        return False
    if cur != Relation.UNKNOWN:
        raise TaxonomyError(
            f"contradiction for pair ({names[i]}, {names[j]}): derived {int(r)} but already {int(cur)}")
    if i == j:
        raise TaxonomyError(f"contradiction: class {names[i]!r} derived {int(r)} with itself")
    cells[i, j] = r
    cells[j, i] = r.converse()
    return True


def _close(cells: np.ndarray, names) -> None:
    n = len(names)
    changed = True
    while changed:
        changed = False
        for i in range(n):
            for k in range(n):
                r_ik = cells[i, k]
                if r_ik == 0 or i == k:
                    continue
                for j in range(n):
                    if j == k or cells[k, j] == 0:
                        continue
                    r = compose(r_ik, cells[k, j])
                    if r != Relation.UNKNOWN and cells[i, j] != r:
                        changed |= _set(cells, names, i, j, r)


def infer_matrix(graph: TaxonomyGraph) -> PropositionMatrix:
    """Transitive closure of the direct edges under :func:`compose`."""
    n = graph.n
    names = graph.names
    cells = np.zeros((n, n), dtype=np.int8)
    np.fill_diagonal(cells, int(Relation.SUBSET))
    for p, c in graph.contains_edges:
        _set(cells, names, c, p, Relation.SUBSET)
    for a, b in graph.excludes_edges:
        _set(cells, names, a, b, Relation.EXCLUSIVE)
    _close(cells, names)
    cells.setflags(write=False)
    return PropositionMatrix(tuple(names), cells)


def close_matrix(matrix: PropositionMatrix) -> PropositionMatrix:
    """Run the closure again on an existing matrix (idempotent on closed input)."""
    cells = matrix.cells.copy()
    _close(cells, matrix.names)
    cells.setflags(write=False)
    return PropositionMatrix(matrix.names, cells)


def relation(matrix: PropositionMatrix, i: int, j: int) -> Relation:
    n = matrix.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"class index out of range: ({i}, {j}) for n={n}")
    return Relation(int(matrix.cells[i, j]))


def extend(graph: TaxonomyGraph, new_class: ClassDef,
           new_edges: Sequence[tuple[str, str, str]]) -> TaxonomyGraph:
    """Append one class plus edges given as ``(kind, a, b)`` name triples.

    The relations among the existing classes must come out unchanged;
    an extension that would entail new facts about them is rejected.
    """
    if new_class.name in graph.names:
        raise TaxonomyError(f"duplicate class name {new_class.name!r}")
    cls = ClassDef(graph.n, new_class.name, new_class.level, new_class.scale)
    lookup = {c.name: c.id for c in graph.classes}
    lookup[cls.name] = cls.id
    contains = list(graph.contains_edges)
    excludes = list(graph.excludes_edges)
    for kind, a, b in new_edges:
        for name in (a, b):
            if name not in lookup:
                raise TaxonomyError(f"edge references unknown class {name!r}")
        if kind == "contains":
            contains.append((lookup[a], lookup[b]))
        elif kind == "excludes":
            excludes.append((lookup[a], lookup[b]))
        else:
            raise TaxonomyError(f"unknown edge kind {kind!r}")
    out = TaxonomyGraph(graph.classes + (cls,), tuple(contains), tuple(excludes))
    before = infer_matrix(graph).cells
    after = infer_matrix(out).cells
    n = graph.n
    if not np.array_equal(before, after[:n, :n]):
        i, j = np.argwhere(before != after[:n, :n])[0]
        raise TaxonomyError(
            f"extension changes the existing relation ({graph.names[i]}, {graph.names[j]})")
    return out


def write_taxonomy(graph: TaxonomyGraph) -> str:
    lines = [f"class {c.name} {c.level} {c.scale}" for c in graph.classes]
    lines += [f"contains {graph.classes[p].name} {graph.classes[c].name}" for p, c in graph.contains_edges]
    lines += [f"excludes {graph.classes[a].name} {graph.classes[b].name}" for a, b in graph.excludes_edges]
    return "\n".join(lines) + "\n"
