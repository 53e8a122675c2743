"""Two-level hierarchical IW.

The concrete search tree is shared by both levels. Every :class:`SearchNode`
points at the :class:`HighLevelNode` that owns it, i.e. the abstract state
phi_h it maps to; a child owned by a different high-level node is the *entry*
of that node. Each high-level node runs its own resumable low-level engine
over the nodes it owns, so asking it for a successor resumes that engine
until the search crosses into a new abstract state.

Restructuring after feature discovery only rewrites ownership and feature
vectors. Node data and tree links are left alone; the novelty tables of every
engine go stale and are rebuilt when that engine next resumes.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .novelty import DepthNoveltyTable, NoveltyTable, mixed_combos
from .search import (
    BreadthFirstIW,
    CountBasedRIW,
    OpenList,
    SearchBudget,
    SearchContext,
    SearchNode,
    SearchResult,
    first_untried,
    iw_search,
    owned_nodes,
    prune_other,
    select,
)
from .simulator import ConstantMap, DeterministicEnv, FeatureMap, ProjectionMap

ENUMERATION_LIMIT = 100_000


class EnumerationLimitError(RuntimeError):
    pass


@dataclass(eq=False)
class HighLevelNode:
    hl_features: tuple
    entry: SearchNode
    parent: "HighLevelNode | None" = None
    children: list = field(default_factory=list)
    depth: int = 0
    expanded: bool = False
    pruned: bool = False
    engine: Any = None
    novel_tuples: set = field(default_factory=set)

    def __repr__(self):
        return f"HighLevelNode({self.hl_features!r}, depth={self.depth}, expanded={self.expanded})"

    @property
    def terminal(self) -> bool:
        return self.entry.terminal

    @property
    def features(self) -> tuple:
        # lets count-based selection treat high-level nodes like search nodes
        return self.hl_features

    def iter_subtree(self) -> Iterator["HighLevelNode"]:
        queue = deque([self])
        while queue:
            n = queue.popleft()
            yield n
            queue.extend(n.children)

    def low_nodes(self) -> Iterator[SearchNode]:
        return owned_nodes(self.entry, self)


@dataclass
class HierarchyConfig:
    hl_map: FeatureMap
    ll_map: FeatureMap
    w_h: int | None = 1  # None: width equal to the number of high-level features
    w_l: int = 1
    high: str = "iw"  # "iw" (breadth-first) or "riw" (count-based rollouts)
    low: str = "iw"
    tau_high: float = 0.005
    tau_low: float = math.inf
    choose_action: Callable = first_untried

    def __post_init__(self):
        if self.high not in ("iw", "riw") or self.low not in ("iw", "riw"):
            raise ValueError("planner choice must be 'iw' or 'riw'")
        if self.w_l < 1 or (self.w_h is not None and self.w_h < 1):
            raise ValueError("widths must be >= 1")

    @property
    def hl_width(self) -> int:
        n = len(self.hl_map.schema)
        if self.w_h is None:
            return max(n, 1)
        return max(min(self.w_h, n), 1)


class HierarchicalIW:
    """HIW(w_h, w_l): IW at the high level whose successor function is a
    low-level search running until it reaches a new abstract state."""

    def __init__(
        self,
        env: DeterministicEnv,
        cfg: HierarchyConfig,
        budget: SearchBudget | None = None,
        root_state=None,
        rng: np.random.Generator | None = None,
        stop_on_goal: bool = True,
        root: SearchNode | None = None,
    ):
        self.env = env
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.ctx = SearchContext(env, cfg.ll_map, budget, hl_map=cfg.hl_map, stop_on_goal=stop_on_goal)
        if root is None:
            root = self.ctx.make_root(env.initial_state() if root_state is None else root_state)
        self.root = root
        self.hl_root = HighLevelNode(root.hl_features, root)
        root.hl = self.hl_root
        self.low_searches = 0
        self.stale_high = True
        self._queue: deque = deque()
        self._open = OpenList()
        self._table = None

    # ------------------------------------------------------------ structure

    def hl_nodes(self) -> list[HighLevelNode]:
        return list(self.hl_root.iter_subtree())

    def _make_engine(self, X: HighLevelNode):
        cfg = self.cfg
        self.low_searches += 1
        if cfg.low == "iw":
            return BreadthFirstIW(self.ctx, X.entry, cfg.w_l, owner=X)
        return CountBasedRIW(
            self.ctx, X.entry, cfg.w_l, tau=cfg.tau_low, rng=self.rng, owner=X, choose_action=cfg.choose_action
        )

    def hl_successor(self, X: HighLevelNode) -> HighLevelNode | None:
        """Resume X's low-level search until it generates a state with a new
        abstract value (returned as a fresh high-level child) or exhausts."""
        if X.engine is None:
            X.engine = self._make_engine(X)
        child = X.engine.resume()
        if child is None:
            if X.engine.exhausted:
                X.expanded = True
            return None
        Y = HighLevelNode(child.hl_features, child, parent=X, depth=X.depth + 1)
        child.hl = Y
        X.children.append(Y)
        return Y

    def _prune_hl(self, Y: HighLevelNode) -> None:
        Y.pruned = True
        self.ctx.mark_pruned(Y.entry)

    def rebuild_high(self) -> None:
        """Fresh high-level novelty structures from the current abstract tree."""
        cfg = self.cfg
        w = cfg.hl_width
        self._queue = deque()
        self._open = OpenList()
        self._table = NoveltyTable(w) if cfg.high == "iw" else DepthNoveltyTable(w)
        base = self.hl_root.depth
        skip: set = set()
        for Y in self.hl_root.iter_subtree():
            if Y.parent is not None and Y.parent in skip:
                skip.add(Y)
                self._prune_hl(Y)
                continue
            if cfg.high == "iw":
                novel, tuples = self._table.check_and_update(Y.hl_features)
            else:
                tuples = self._table.check_and_update_depth(Y.hl_features, Y.depth - base)
                novel = bool(tuples)
            if Y is self.hl_root:
                novel = True
            if not novel:
                skip.add(Y)
                self._prune_hl(Y)
                continue
            Y.pruned = False
            Y.entry.pruned = False
            Y.novel_tuples = set(tuples)
            if cfg.high == "riw":
                prune_other(Y, self._open, self._prune_hl)
            if not Y.terminal and not Y.expanded:
                if cfg.high == "iw":
                    self._queue.append(Y)
                else:
                    self._open.add(Y)
        self.stale_high = False

    # ------------------------------------------------------------ running

    def run(self) -> SearchResult:
        """Run (or resume) the search until goal, budget, or exhaustion."""
        ctx = self.ctx
        start_pruned = len(ctx.pruned)
        if ctx.goal_node is None or not ctx.stop_on_goal:
            if self.stale_high:
                self.rebuild_high()
            if self.cfg.high == "iw":
                self._run_breadth_first()
            else:
                self._run_count_based()
        res = ctx.result(self.root, novel_count=self.novel_low_count())
        res.pruned_nodes = ctx.pruned[start_pruned:]
        res.info.update(low_searches=self.low_searches, hl_nodes=sum(1 for _ in self.hl_root.iter_subtree()))
        return res

    def _run_breadth_first(self) -> None:
        ctx = self.ctx
        while self._queue and not ctx.should_stop():
            X = self._queue[0]
            Y = self.hl_successor(X)
            if Y is None:
                if X.expanded:
                    self._queue.popleft()
                    continue
                break
            novel, tuples = self._table.check_and_update(Y.hl_features)
            if not novel:
                self._prune_hl(Y)
                continue
            Y.novel_tuples = set(tuples)
            if not Y.terminal:
                self._queue.append(Y)

    def _run_count_based(self) -> None:
        ctx = self.ctx
        base = self.hl_root.depth
        while not ctx.should_stop() and self._open:
            X = select(self._open, self.cfg.tau_high, self.rng)
            while not ctx.should_stop():
                self._open.counts[X.hl_features] += 1
                Y = self.hl_successor(X)
                if Y is None:
                    if X.expanded:
                        self._open.remove(X)
                    break
                tuples = self._table.check_and_update_depth(Y.hl_features, Y.depth - base)
                if not tuples:
                    self._prune_hl(Y)
                    break
                Y.novel_tuples = set(tuples)
                if Y.terminal:
                    break
                prune_other(Y, self._open, self._prune_hl)
                self._open.add(Y)
                X = Y

    def novel_low_count(self) -> int:
        return sum(X.engine.novel_count for X in self.hl_nodes() if X.engine is not None and not X.pruned)

    # ------------------------------------------------------------ restructuring

    def restructure(self, hl_map: FeatureMap, ll_map: FeatureMap) -> None:
        """Re-partition the existing tree under new feature maps.

        Subtrees are detached wherever the abstract value changes and wrapped
        in new high-level nodes. All low-level engines go stale.
        """
        self.cfg.hl_map = hl_map
        self.cfg.ll_map = ll_map
        self.ctx.hl_map = hl_map
        self.ctx.feature_map = ll_map
        for n in self.root.iter_subtree():
            n.features = ll_map(n.state)
            n.hl_features = hl_map(n.state)
        self.hl_root = HighLevelNode(self.root.hl_features, self.root, depth=self.root.depth)
        self.root.hl = self.hl_root
        queue = deque([self.root])
        while queue:
            n = queue.popleft()
            for a in sorted(n.children):
                c = n.children[a]
                owner = n.hl
                if c.hl_features != owner.hl_features:
                    Y = HighLevelNode(c.hl_features, c, parent=owner, depth=owner.depth + 1)
                    owner.children.append(Y)
                    c.hl = Y
                else:
                    c.hl = owner
                queue.append(c)
        self.stale_high = True


def hiw_search(
    env: DeterministicEnv,
    cfg: HierarchyConfig,
    budget: SearchBudget | None = None,
    root_state=None,
    seed: int | None = 0,
) -> SearchResult:
    """One HIW(w_h, w_l) run. ``result.info['planner']`` holds the planner."""
    planner = HierarchicalIW(env, cfg, budget, root_state=root_state, rng=np.random.default_rng(seed))
    res = planner.run()
    res.info["planner"] = planner
    return res


def hl_successor(planner: HierarchicalIW, hn: HighLevelNode) -> HighLevelNode | None:
    return planner.hl_successor(hn)


def restricted_iw_search(
    env: DeterministicEnv,
    feature_map: FeatureMap,
    high: Sequence[int],
    low: Sequence[int],
    w_h: int = 1,
    w_l: int = 1,
    budget: SearchBudget | None = None,
) -> SearchResult:
    """IW(w_h + w_l) whose tuples mix w_h features of ``high`` with w_l of ``low``."""
    return iw_search(env, feature_map, w_h + w_l, budget, combos=mixed_combos(high, low, w_h, w_l))


def split_maps(base: FeatureMap, high: Sequence[int]) -> tuple[FeatureMap, FeatureMap]:
    """phi_h keeps the features in ``high``; phi_l keeps the rest."""
    high = sorted(set(high))
    low = [i for i in range(len(base.schema)) if i not in high]
    hl = ProjectionMap(base, high) if high else ConstantMap()
    return hl, ProjectionMap(base, low)


# ------------------------------------------------------------ feature discovery


def default_atoms(node: SearchNode) -> frozenset:
    return frozenset(enumerate(node.features))


def find_abstract_features(node: SearchNode, atoms: Callable[[SearchNode], frozenset] = default_atoms) -> set:
    """Candidate high-level atoms from one pruned leaf.

    Keeps the atoms the leaf shares with its parent that never appeared
    earlier on the branch (root excluded, parent and leaf excluded).
    """
    if not node.pruned or not node.is_leaf() or node.depth <= 2 or node.parent is None:
        return set()
    own = atoms(node)
    shared = own & atoms(node.parent)
    if len(shared) >= len(own):
        return set()
    branch = node.path()
    seen: set = set()
    for b in branch[1 : node.depth - 1]:
        seen |= atoms(b)
    return set(shared - seen)


def restructure_tree(planner: HierarchicalIW, base: FeatureMap, high: Sequence[int], h: tuple) -> list[int]:
    """Promote the feature of candidate atom ``h`` to the high level and
    restructure ``planner``'s tree. Returns the new high-level feature list."""
    feature = h[0]
    if not any(base(n.state)[feature] == h[1] for n in planner.root.iter_subtree()):
        raise ValueError(f"candidate {h} never observed in the tree")
    new_high = sorted(set(high) | {feature})
    planner.restructure(*split_maps(base, new_high))
    return new_high


def ihiw(
    env: DeterministicEnv,
    base_map: FeatureMap,
    w_h: int = 1,
    w_l: int = 1,
    budget: SearchBudget | None = None,
    seed: int | None = 0,
    root_state=None,
    max_iterations: int | None = None,
) -> SearchResult:
    """Incremental HIW: run HIW, mine pruned nodes for abstract features,
    promote one candidate at a time and resume on the restructured tree.

    ``info`` reports ``iterations`` (HIW runs) and ``high_features``.
    """
    rng = np.random.default_rng(seed)
    high: list[int] = []
    hl, ll = split_maps(base_map, high)
    planner = HierarchicalIW(env, HierarchyConfig(hl, ll, w_h=w_h, w_l=w_l), budget, root_state, rng=rng)

    def atoms(n: SearchNode) -> frozenset:
        return base_map.atoms(base_map(n.state))

    candidates: set = set()
    pending: list[SearchNode] = []
    iterations = 0
    while True:
        iterations += 1
        res = planner.run()
        if res.solved or planner.ctx.budget_exhausted():
            break
        if max_iterations is not None and iterations >= max_iterations:
            break
        pending.extend(res.pruned_nodes)
        candidates = {h for h in candidates if h[0] not in high}
        while not candidates:
            if not pending:
                break
            n = pending.pop(int(rng.integers(len(pending))))
            if n.pruned:
                candidates = {h for h in find_abstract_features(n, atoms) if h[0] not in high}
        if not candidates:
            break
        ordered = sorted(candidates)
        h = ordered[int(rng.integers(len(ordered)))]
        candidates.discard(h)
        high = restructure_tree(planner, base_map, high, h)

    res = planner.ctx.result(planner.root, novel_count=planner.novel_low_count())
    res.info.update(iterations=iterations, high_features=list(high), planner=planner)
    return res


# ------------------------------------------------------------ splitting check


def reachable_graph(env: DeterministicEnv, limit: int = ENUMERATION_LIMIT, root_state=None):
    """All states reachable from the start and the (undirected) edges between them."""
    start = env.initial_state() if root_state is None else root_state
    seen = {start}
    queue = deque([start])
    edges = []
    while queue:
        s = queue.popleft()
        for a in range(env.action_count):
            t = env.step(s, a)
            if t is None:
                continue
            edges.append((s, t.state))
            if t.state not in seen:
                seen.add(t.state)
                if len(seen) > limit:
                    raise EnumerationLimitError(f"more than {limit} reachable states")
                queue.append(t.state)
    return seen, edges


def is_splitting(env: DeterministicEnv, feature_map: FeatureMap, feature: int, limit: int = ENUMERATION_LIMIT) -> bool:
    """True when, for every value of ``feature``, the reachable states taking
    that value form one connected component."""
    states, edges = reachable_graph(env, limit)
    parent = {s: s for s in states}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    value = {s: feature_map(s)[feature] for s in states}
    for s, t in edges:
        if value[s] == value[t]:
            rs, rt = find(s), find(t)
            if rs != rt:
                parent[rs] = rt
    roots_per_value: dict = {}
    for s in states:
        roots_per_value.setdefault(value[s], set()).add(find(s))
    return all(len(r) == 1 for r in roots_per_value.values())
