"""Exact counts of the novel states IW(w) can visit.

All arithmetic is on Python ints, so results are exact for any size.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

GRAY_CODE_LIMIT = 20


class WidthParamError(ValueError):
    pass


@dataclass(frozen=True)
class WidthParams:
    n: int
    d: int
    w: int
    b: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise WidthParamError(f"n must be >= 1, got {self.n}")
        if self.d < 2:
            raise WidthParamError(f"d must be >= 2, got {self.d}")
        if not 0 <= self.w <= self.n:
            raise WidthParamError(f"w must be in [0, n={self.n}], got {self.w}")
        if self.b < 1:
            raise WidthParamError(f"b must be >= 1, got {self.b}")


@lru_cache(maxsize=None)
def _recurse(n: int, d: int, w: int) -> int:
    # Bottom-up over m = 1..n so large n cannot hit the recursion limit.
    # row[k] holds N(m, d, k) for 0 <= k <= min(m, w).
    row = [1, d] if w >= 1 else [1]
    for m in range(2, n + 1):
        nxt = [1]
        for k in range(1, min(m, w) + 1):
            if k == m:
                nxt.append(d**m)
            else:
                nxt.append((d - 1) * row[k - 1] + row[k])
        row = nxt
    return row[w]


def max_novel_recursive(p: WidthParams) -> int:
    """N(n, d, w) evaluated through the defining recursion."""
    return _recurse(p.n, p.d, p.w)


def max_novel_closed(p: WidthParams) -> int:
    """N(n, d, w) from the binomial sum; w == n falls back to d**n."""
    n, d, w = p.n, p.d, p.w
    if w == n:
        return d**n
    return sum(comb(n - 1 - k, w - k) * d**k * (d - 1) ** (w - k) for k in range(w + 1))


def classical_bound(p: WidthParams) -> int:
    """The older (n*d)**w bound on novel states."""
    return (p.n * p.d) ** p.w


def within_classical_bound(p: WidthParams) -> bool:
    return max_novel_closed(p) <= classical_bound(p)


def visited_states_bound(p: WidthParams) -> int:
    """Bound on all visited states, pruned ones included: N(n, d, w) * b."""
    return max_novel_closed(p) * p.b


def gray_code_worst_case(n: int, d: int = 2) -> list[tuple[int, ...]]:
    """All 2**n binary vectors in reflected Gray-code order.

    Feature 0 is the most significant bit, so the first half of the list has
    f0 = 0. Streaming this order through a width-w novelty table reaches the
    worst case N(n, 2, w) for the small cases we check.
    """
    if d != 2:
        raise WidthParamError("gray code construction is binary only (d=2)")
    if n < 1:
        raise WidthParamError(f"n must be >= 1, got {n}")
    if n > GRAY_CODE_LIMIT:
        raise WidthParamError(f"refusing to enumerate 2**{n} vectors (limit n={GRAY_CODE_LIMIT})")
    out = []
    for i in range(1 << n):
        g = i ^ (i >> 1)
        out.append(tuple((g >> (n - 1 - j)) & 1 for j in range(n)))
    return out


def summary(p: WidthParams) -> dict:
    """Values printed by the ``widthmath`` CLI subcommand."""
    novel = max_novel_closed(p)
    bound = classical_bound(p)
    return {
        "n": p.n,
        "d": p.d,
        "w": p.w,
        "b": p.b,
        "max_novel": novel,
        "max_novel_recursive": max_novel_recursive(p),
        "visited_bound": novel * p.b,
        "classical_bound": bound,
        "ratio": novel / bound,
    }
