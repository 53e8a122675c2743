"""Feature schemas and novelty tables.

A feature vector is a plain tuple of non-negative ints. Tuples of width w are
represented as :class:`FeatureTuple` (strictly increasing feature indices plus
the values at those indices), so ``FeatureTuple((1,), (3,))`` reads "f1=3".
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Iterable, Iterator, NamedTuple, Sequence

FeatureVector = tuple


class SchemaError(ValueError):
    pass


class FeatureTuple(NamedTuple):
    indices: tuple
    values: tuple

    def __repr__(self):
        return ",".join(f"f{i}={v}" for i, v in zip(self.indices, self.values))


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    domain_sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "domain_sizes", tuple(int(s) for s in self.domain_sizes))
        if len(set(self.names)) != len(self.names):
            raise SchemaError("feature names must be unique")
        if len(self.names) != len(self.domain_sizes):
            raise SchemaError("names and domain_sizes differ in length")
        if any(s < 1 for s in self.domain_sizes):
            raise SchemaError("domain sizes must be >= 1")

    def __len__(self):
        return len(self.names)

    @classmethod
    def uniform(cls, n: int, d: int, prefix: str = "f") -> "FeatureSchema":
        return cls(tuple(f"{prefix}{i}" for i in range(n)), (d,) * n)

    def validate(self, fv: Sequence[int]) -> None:
        if len(fv) != len(self.names):
            raise SchemaError(f"vector of length {len(fv)} does not match schema of {len(self.names)} features")
        for v, size, name in zip(fv, self.domain_sizes, self.names):
            if not 0 <= v < size:
                raise SchemaError(f"value {v} of feature {name!r} outside [0, {size})")

    def subset(self, indices: Sequence[int]) -> "FeatureSchema":
        return FeatureSchema(tuple(self.names[i] for i in indices), tuple(self.domain_sizes[i] for i in indices))


def enumerate_tuples(fv: Sequence[int], w: int) -> Iterator[FeatureTuple]:
    """All C(n, w) width-w tuples of ``fv`` in lexicographic index order."""
    if not 1 <= w <= len(fv):
        raise ValueError(f"width {w} out of range for a vector of {len(fv)} features")
    for idx in combinations(range(len(fv)), w):
        yield FeatureTuple(idx, tuple(fv[i] for i in idx))


def tuples_for(fv: Sequence[int], combos: Iterable[tuple]) -> Iterator[FeatureTuple]:
    for idx in combos:
        yield FeatureTuple(idx, tuple(fv[i] for i in idx))


def mixed_combos(high: Sequence[int], low: Sequence[int], w_high: int, w_low: int) -> list[tuple]:
    """Index tuples made of ``w_high`` features from ``high`` and ``w_low`` from ``low``."""
    out = []
    for h in combinations(sorted(high), w_high):
        for l in combinations(sorted(low), w_low):
            out.append(tuple(sorted(h + l)))
    return out


@lru_cache(maxsize=1 << 16)
def changed_features(a: tuple, b: tuple) -> tuple:
    """Indices where two equally long feature vectors differ."""
    if len(a) != len(b):
        raise SchemaError("feature vectors differ in length")
    return tuple(i for i, (x, y) in enumerate(zip(a, b)) if x != y)


class _TableBase:
    def __init__(self, width: int, schema: FeatureSchema | None = None, combos: Sequence[tuple] | None = None):
        if width < 1:
            raise ValueError("novelty width must be >= 1")
        self.width = width
        self.schema = schema
        self.combos = None if combos is None else [tuple(c) for c in combos]
        if self.combos is not None:
            for c in self.combos:
                if list(c) != sorted(set(c)):
                    raise ValueError(f"index tuple {c} must be strictly increasing")
        self._n = None

    def _check(self, fv: Sequence[int]) -> None:
        if self.schema is not None:
            self.schema.validate(fv)
        elif self._n is None:
            self._n = len(fv)
        elif len(fv) != self._n:
            raise SchemaError(f"vector of length {len(fv)} fed to a table built for {self._n} features")

    def tuples(self, fv: Sequence[int]) -> Iterator[FeatureTuple]:
        if self.combos is not None:
            return tuples_for(fv, self.combos)
        if self.width > len(fv):
            return iter(())
        return enumerate_tuples(fv, self.width)


class NoveltyTable(_TableBase):
    """Visited-tuple table for breadth-first IW(w).

    Every tuple of a checked vector is recorded, novel or not. ``combos``
    restricts the test to explicit index tuples (used by restricted IW).
    """

    def __init__(self, width: int, schema: FeatureSchema | None = None, combos: Sequence[tuple] | None = None):
        super().__init__(width, schema, combos)
        self.seen: set[FeatureTuple] = set()
        # width-1 fast path: one value set per feature
        self._per_feature: dict[int, set] | None = {} if (width == 1 and combos is None) else None
        self.novel_count = 0

    def __len__(self):
        if self._per_feature is not None:
            return sum(len(s) for s in self._per_feature.values())
        return len(self.seen)

    def __contains__(self, t: FeatureTuple) -> bool:
        if self._per_feature is not None:
            return len(t.indices) == 1 and t.values[0] in self._per_feature.get(t.indices[0], ())
        return t in self.seen

    def check_and_update(self, fv: Sequence[int]) -> tuple[bool, frozenset]:
        self._check(fv)
        if self._per_feature is not None:
            new = []
            for i, v in enumerate(fv):
                vals = self._per_feature.setdefault(i, set())
                if v not in vals:
                    vals.add(v)
                    new.append(FeatureTuple((i,), (v,)))
        else:
            new = [t for t in self.tuples(fv) if t not in self.seen]
            self.seen.update(new)
        if new:
            self.novel_count += 1
        return bool(new), frozenset(new)

    def is_novel(self, fv: Sequence[int]) -> bool:
        """Query without recording."""
        self._check(fv)
        if self._per_feature is not None:
            return any(v not in self._per_feature.get(i, ()) for i, v in enumerate(fv))
        return any(t not in self.seen for t in self.tuples(fv))


class DepthNoveltyTable(_TableBase):
    """Depth-indexed table for rollout IW: a tuple is novel at depth k when it
    has only been seen at depths greater than k (or never)."""

    def __init__(self, width: int, schema: FeatureSchema | None = None, combos: Sequence[tuple] | None = None):
        super().__init__(width, schema, combos)
        self._best: dict[FeatureTuple, int] = {}
        # width-1 fast path: one value -> depth dict per feature
        self._per_feature: list[dict] | None = [] if (width == 1 and combos is None) else None

    @property
    def best_depth(self) -> dict[FeatureTuple, int]:
        if self._per_feature is None:
            return self._best
        return {FeatureTuple((i,), (v,)): d for i, m in enumerate(self._per_feature) for v, d in m.items()}

    def __len__(self):
        if self._per_feature is not None:
            return sum(len(m) for m in self._per_feature)
        return len(self._best)

    def check_and_update_depth(self, fv: Sequence[int], depth: int, parent: Sequence[int] | None = None) -> frozenset:
        """Novel tuples of ``fv`` at ``depth``; the table keeps the lowest depth.

        ``parent`` may name the feature vector of a node already checked in
        this table at a smaller depth. Its unchanged features cannot be novel,
        so the width-1 path then only looks at the features that differ.
        """
        if depth < 0:
            raise ValueError("depth must be non-negative")
        self._check(fv)
        novel = []
        if self._per_feature is not None:
            tables = self._per_feature
            while len(tables) < len(fv):
                tables.append({})
            idx = range(len(fv)) if parent is None else changed_features(tuple(parent), tuple(fv))
            for i in idx:
                v = fv[i]
                m = tables[i]
                old = m.get(v)
                if old is None or old > depth:
                    m[v] = depth
                    novel.append(FeatureTuple((i,), (v,)))
            return frozenset(novel)
        best = self._best
        for t in self.tuples(fv):
            old = best.get(t)
            if old is None or old > depth:
                best[t] = depth
                novel.append(t)
        return frozenset(novel)


def check_and_update(table: NoveltyTable, fv: Sequence[int]) -> tuple[bool, frozenset]:
    return table.check_and_update(fv)


def check_and_update_depth(table: DepthNoveltyTable, fv: Sequence[int], depth: int) -> frozenset:
    return table.check_and_update_depth(fv, depth)
