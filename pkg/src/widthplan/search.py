"""Flat width-based planners: breadth-first IW(w) and Count-Based Rollout IW.

Both planners are written as resumable *engines* that grow a tree of
:class:`SearchNode` objects inside a shared :class:`SearchContext`. The
context owns the environment, feature maps, budget and counters, so the
hierarchical planner can run one engine per abstract state while charging a
single budget. ``iw_search`` and ``count_based_riw`` are the flat entry points.
"""
from __future__ import annotations

import math
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .novelty import DepthNoveltyTable, NoveltyTable
from .simulator import ConstantMap, DeterministicEnv, FeatureMap


class SearchExhausted(Exception):
    """Raised by :func:`select` when the open list is empty."""


@dataclass(eq=False)
class SearchNode:
    state: Any
    features: tuple
    depth: int = 0
    parent: "SearchNode | None" = None
    action: int | None = None
    reward: float = 0.0
    terminal: bool = False
    children: dict = field(default_factory=dict)
    tried: set = field(default_factory=set)
    novel_tuples: set = field(default_factory=set)
    pruned: bool = False
    hl_features: tuple = ()
    hl: Any = None
    serial: int = 0

    def __repr__(self):
        flag = " pruned" if self.pruned else ""
        return f"SearchNode({self.state!r}, depth={self.depth}{flag})"

    @property
    def is_goal(self) -> bool:
        return self.terminal and self.reward > 0

    def is_leaf(self) -> bool:
        return not self.children

    def fully_tried(self, action_count: int) -> bool:
        return len(self.tried) >= action_count

    def path(self) -> list["SearchNode"]:
        out, n = [], self
        while n is not None:
            out.append(n)
            n = n.parent
        return out[::-1]

    def plan(self) -> list[int]:
        return [n.action for n in self.path()[1:]]

    def iter_subtree(self) -> Iterator["SearchNode"]:
        """Breadth-first over this node and all descendants."""
        queue = deque([self])
        while queue:
            n = queue.popleft()
            yield n
            queue.extend(n.children[a] for a in sorted(n.children))

    def detach(self) -> None:
        if self.parent is not None:
            del self.parent.children[self.action]
            self.parent = None


@dataclass
class SearchBudget:
    max_generated_nodes: int | None = 10_000
    max_seconds: float | None = None
    max_tree_size: int | None = None

    def __post_init__(self):
        if self.max_generated_nodes is not None and self.max_generated_nodes < 0:
            raise ValueError("node budget must be non-negative")


@dataclass
class SearchResult:
    root: SearchNode
    solved: bool
    goal_node: SearchNode | None
    pruned_nodes: list
    expanded_count: int
    generated_count: int
    elapsed: float
    novel_count: int = 0
    info: dict = field(default_factory=dict)

    def plan(self) -> list[int] | None:
        return None if self.goal_node is None else self.goal_node.plan()

    def generated_states(self) -> list:
        return [n.state for n in self.root.iter_subtree()]


class SearchContext:
    """Shared state of one search: env, feature maps, budget and counters."""

    def __init__(
        self,
        env: DeterministicEnv,
        feature_map: FeatureMap,
        budget: SearchBudget | None = None,
        hl_map: FeatureMap | None = None,
        stop_on_goal: bool = True,
        stop_conditions: Sequence[Callable[["SearchContext"], bool]] = (),
    ):
        self.env = env
        self.feature_map = feature_map
        self.hl_map = hl_map if hl_map is not None else ConstantMap()
        self.budget = budget or SearchBudget()
        self.stop_on_goal = stop_on_goal
        self.stop_conditions = list(stop_conditions)
        self.generated = 0
        self.expanded = 0
        self.tree_size = 0
        self.goal_node: SearchNode | None = None
        self.pruned: list[SearchNode] = []
        self.started = time.perf_counter()
        self.generation_limit: int | None = None

    # -- budget / stop condition

    def budget_exhausted(self) -> bool:
        b = self.budget
        if b.max_generated_nodes is not None and self.generated >= b.max_generated_nodes:
            return True
        if self.generation_limit is not None and self.generated >= self.generation_limit:
            return True
        if b.max_tree_size is not None and self.tree_size >= b.max_tree_size:
            return True
        if b.max_seconds is not None and time.perf_counter() - self.started >= b.max_seconds:
            return True
        return False

    def should_stop(self) -> bool:
        if self.stop_on_goal and self.goal_node is not None:
            return True
        if self.budget_exhausted():
            return True
        return any(c(self) for c in self.stop_conditions)

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.started

    # -- nodes

    def make_root(self, state) -> SearchNode:
        root = SearchNode(state, self.feature_map(state), terminal=self.env.is_terminal(state))
        root.hl_features = self.hl_map(state)
        self.tree_size += 1
        if self.env.is_goal(state):
            self.goal_node = root
        return root

    def generate(self, node: SearchNode, action: int) -> SearchNode | None:
        """Apply ``action`` at ``node``; returns the child or None if inapplicable."""
        node.tried.add(action)
        t = self.env.step(node.state, action)
        if t is None:
            return None
        self.generated += 1
        self.tree_size += 1
        child = SearchNode(
            t.state,
            self.feature_map(t.state),
            depth=node.depth + 1,
            parent=node,
            action=action,
            reward=t.reward,
            terminal=t.terminal,
            serial=self.generated,
        )
        child.hl_features = self.hl_map(t.state)
        child.hl = node.hl
        node.children[action] = child
        if child.is_goal and self.goal_node is None:
            self.goal_node = child
        return child

    def mark_pruned(self, node: SearchNode) -> None:
        if not node.pruned:
            node.pruned = True
            self.pruned.append(node)

    def result(self, root: SearchNode, novel_count: int = 0) -> SearchResult:
        return SearchResult(
            root=root,
            solved=self.goal_node is not None,
            goal_node=self.goal_node,
            pruned_nodes=list(self.pruned),
            expanded_count=self.expanded,
            generated_count=self.generated,
            elapsed=self.elapsed,
            novel_count=novel_count,
        )


def owned_nodes(root: SearchNode, owner=None) -> Iterator[SearchNode]:
    """Breadth-first over the part of ``root``'s subtree owned by ``owner``.

    With ``owner=None`` the whole subtree is visited. Children owned by a
    different high-level node mark a boundary and are not descended into.
    """
    queue = deque([root])
    while queue:
        n = queue.popleft()
        yield n
        for a in sorted(n.children):
            c = n.children[a]
            if owner is None or c.hl is owner:
                queue.append(c)


ActionChooser = Callable[[SearchNode, list, np.random.Generator], int]


def first_untried(node: SearchNode, untried: list, rng) -> int:
    return untried[0]


# ------------------------------------------------------------ breadth-first IW


class BreadthFirstIW:
    """Resumable breadth-first IW(w) over the nodes owned by ``owner``.

    ``resume`` runs until the stop condition fires, the queue empties
    (``exhausted`` becomes true), or a generated child belongs to a different
    high-level state; that boundary child is returned to the caller.
    """

    def __init__(self, ctx: SearchContext, root: SearchNode, width: int, combos=None, owner=None):
        self.ctx = ctx
        self.root = root
        self.width = width
        self.combos = combos
        self.owner = owner
        self.table: NoveltyTable | None = None
        self.queue: deque = deque()
        self.exhausted = False
        self.stale = True

    @property
    def novel_count(self) -> int:
        return 0 if self.table is None else self.table.novel_count

    def _boundary(self, child: SearchNode) -> bool:
        return self.owner is not None and child.hl_features != self.owner.hl_features

    def rebuild(self) -> None:
        """Fresh table from the current tree: replay unpruned nodes in BFS
        order, then re-test pruned ones, reviving any that are novel again."""
        A = self.ctx.env.action_count
        self.table = NoveltyTable(self.width, combos=self.combos)
        self.queue = deque()
        retest = []
        for n in owned_nodes(self.root, self.owner):
            if n.pruned and n is not self.root:
                retest.append(n)
                continue
            n.pruned = False
            _, n.novel_tuples = self.table.check_and_update(n.features)
            if not n.terminal and not n.fully_tried(A):
                self.queue.append(n)
        for n in retest:
            if _has_pruned_ancestor(n, self.root):
                continue
            novel, tuples = self.table.check_and_update(n.features)
            if novel:
                n.pruned = False
                n.novel_tuples = tuples
                if not n.terminal and not n.fully_tried(A):
                    self.queue.append(n)
        self.exhausted = not self.queue
        self.stale = False

    def resume(self) -> SearchNode | None:
        ctx = self.ctx
        if self.stale:
            self.rebuild()
        A = ctx.env.action_count
        while self.queue:
            node = self.queue[0]
            if not node.tried:
                ctx.expanded += 1
            for a in range(A):
                if a in node.tried:
                    continue
                if ctx.should_stop():
                    return None
                child = ctx.generate(node, a)
                if child is None:
                    continue
                if child.is_goal and ctx.stop_on_goal:
                    return None
                if self._boundary(child):
                    return child
                novel, tuples = self.table.check_and_update(child.features)
                if not novel:
                    ctx.mark_pruned(child)
                    continue
                child.novel_tuples = tuples
                if not child.terminal:
                    self.queue.append(child)
            self.queue.popleft()
        self.exhausted = True
        return None


def _has_pruned_ancestor(node: SearchNode, stop: SearchNode) -> bool:
    n = node.parent
    while n is not None and n is not stop:
        if n.pruned:
            return True
        n = n.parent
    return False


def iw_search(
    env: DeterministicEnv,
    feature_map: FeatureMap,
    w: int,
    budget: SearchBudget | None = None,
    root_state=None,
    combos=None,
) -> SearchResult:
    """Budgeted breadth-first IW(w) from ``root_state`` (default: env start).

    Children failing the novelty test are pruned and never expanded. The run
    stops on the first goal, when the budget is spent, or when the queue
    empties. ``combos`` restricts novelty to explicit feature-index tuples.
    """
    if w < 1:
        raise ValueError("IW width must be >= 1")
    ctx = SearchContext(env, feature_map, budget)
    root = ctx.make_root(env.initial_state() if root_state is None else root_state)
    engine = BreadthFirstIW(ctx, root, w, combos=combos)
    if ctx.goal_node is None:
        engine.resume()
    return ctx.result(root, novel_count=engine.novel_count)


# ---------------------------------------------------------- count-based RIW


class OpenList:
    """Open list O with feature counts C and tuple owners N of Count-Based RIW."""

    def __init__(self):
        self.nodes: dict[SearchNode, None] = {}
        self.counts: Counter = Counter()
        self.owners: dict = {}

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node):
        return node in self.nodes

    def __iter__(self):
        return iter(self.nodes)

    def add(self, node: SearchNode) -> None:
        self.nodes[node] = None

    def remove(self, node: SearchNode) -> None:
        self.nodes.pop(node, None)


def selection_probabilities(counts: Sequence[int], tau: float) -> np.ndarray:
    """p ∝ exp(1 / (tau * (c + 1))); ``tau=inf`` gives the uniform distribution."""
    c = np.asarray(counts, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if math.isinf(tau):
        return np.full(len(c), 1.0 / len(c))
    logits = 1.0 / (tau * (c + 1.0))
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def select(open_list: OpenList, tau: float, rng: np.random.Generator) -> SearchNode:
    if not open_list.nodes:
        raise SearchExhausted("open list is empty")
    nodes = list(open_list.nodes)
    if math.isinf(tau):
        return nodes[int(rng.random() * len(nodes))]
    p = selection_probabilities([open_list.counts[n.features] for n in nodes], tau)
    return nodes[rng.choice(len(nodes), p=p)]


def prune_other(s, open_list: OpenList, on_prune: Callable | None = None) -> list:
    """Take ownership of ``s.novel_tuples``; prune previous owners left with none.

    A pruned owner leaves the open list together with its whole subtree.
    Works for any node type with ``novel_tuples``, ``pruned`` and
    ``iter_subtree``. Returns the newly pruned nodes.
    """
    pruned = []
    for t in s.novel_tuples:
        o = open_list.owners.get(t)
        if o is not None and o is not s:
            o.novel_tuples.discard(t)
            if not o.novel_tuples and not o.pruned:
                for d in o.iter_subtree():
                    open_list.remove(d)
                    if not d.pruned:
                        if on_prune is not None:
                            on_prune(d)
                        else:
                            d.pruned = True
                        pruned.append(d)
        open_list.owners[t] = s
    return pruned


class CountBasedRIW:
    """Resumable Count-Based Rollout IW(w) over nodes owned by ``owner``.

    ``tau=inf`` selects uniformly from the open list (plain Rollout IW).
    ``choose_action`` picks which untried action a rollout generates next;
    the default takes them in index order.
    """

    def __init__(
        self,
        ctx: SearchContext,
        root: SearchNode,
        width: int,
        tau: float = 1.0,
        rng: np.random.Generator | None = None,
        owner=None,
        choose_action: ActionChooser = first_untried,
        combos=None,
    ):
        self.ctx = ctx
        self.root = root
        self.width = width
        self.tau = tau
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.owner = owner
        self.choose_action = choose_action
        self.combos = combos
        self.open = OpenList()
        self.table: DepthNoveltyTable | None = None
        self.exhausted = False
        self.stale = True
        self.novel_count = 0

    def _boundary(self, child: SearchNode) -> bool:
        return self.owner is not None and child.hl_features != self.owner.hl_features

    def rebuild(self) -> None:
        """Fresh O, C, N and depth table from the current tree (BFS replay)."""
        A = self.ctx.env.action_count
        self.open = OpenList()
        self.table = DepthNoveltyTable(self.width, combos=self.combos)
        self.novel_count = 0
        skip: set = set()
        for n in owned_nodes(self.root, self.owner):
            if n.parent is not None and n.parent in skip:
                n.pruned = True
                skip.add(n)
                continue
            depth = n.depth - self.root.depth
            parent = None if n is self.root else n.parent.features
            tuples = self.table.check_and_update_depth(n.features, depth, parent)
            if not tuples and n is not self.root:
                n.pruned = True
                skip.add(n)
                continue
            n.pruned = False
            n.novel_tuples = set(tuples)
            self.novel_count += 1
            prune_other(n, self.open, self.ctx.mark_pruned)
            if not n.terminal and not n.fully_tried(A):
                self.open.add(n)
        self.exhausted = not self.open
        self.stale = False

    def successor(self, node: SearchNode) -> SearchNode | None:
        A = self.ctx.env.action_count
        while True:
            untried = [a for a in range(A) if a not in node.tried]
            if not untried:
                return None
            if not node.tried:
                self.ctx.expanded += 1
            a = self.choose_action(node, untried, self.rng)
            child = self.ctx.generate(node, a)
            if child is not None:
                return child

    def rollout(self, node: SearchNode) -> SearchNode | None:
        """One rollout from ``node``; returns a boundary child if one is hit."""
        ctx = self.ctx
        while not ctx.should_stop():
            self.open.counts[node.features] += 1
            s = self.successor(node)
            if s is None:
                self.open.remove(node)
                return None
            if s.is_goal and ctx.stop_on_goal:
                return None
            if self._boundary(s):
                return s
            depth = s.depth - self.root.depth
            s.novel_tuples = set(self.table.check_and_update_depth(s.features, depth, node.features))
            if not s.novel_tuples:
                ctx.mark_pruned(s)
                return None
            self.novel_count += 1
            if s.terminal:
                return None
            prune_other(s, self.open, ctx.mark_pruned)
            self.open.add(s)
            node = s
        return None

    def resume(self) -> SearchNode | None:
        if self.stale:
            self.rebuild()
        while not self.ctx.should_stop():
            if not self.open:
                self.exhausted = True
                return None
            node = select(self.open, self.tau, self.rng)
            boundary = self.rollout(node)
            if boundary is not None:
                return boundary
        return None


def count_based_riw(
    env: DeterministicEnv,
    feature_map: FeatureMap,
    w: int,
    budget: SearchBudget | None = None,
    tau: float = 1.0,
    root_state=None,
    seed: int | None = 0,
) -> SearchResult:
    """Count-Based Rollout IW(w): alternate count-softmax selection and rollouts
    until the goal is found, the budget is spent or the open list empties."""
    if w < 1:
        raise ValueError("RIW width must be >= 1")
    ctx = SearchContext(env, feature_map, budget)
    root = ctx.make_root(env.initial_state() if root_state is None else root_state)
    engine = CountBasedRIW(ctx, root, w, tau=tau, rng=np.random.default_rng(seed))
    if ctx.goal_node is None:
        engine.resume()
    return ctx.result(root, novel_count=engine.novel_count)


def rollout_iw(env, feature_map, w, budget=None, root_state=None, seed=0) -> SearchResult:
    """Plain Rollout IW: Count-Based RIW with uniform selection."""
    return count_based_riw(env, feature_map, w, budget, tau=math.inf, root_state=root_state, seed=seed)
