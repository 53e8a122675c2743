import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from widthplan.novelty import FeatureSchema, FeatureTuple
from widthplan.simulator import (
    LEFT,
    RIGHT,
    DeterministicEnv,
    FunctionFeatureMap,
    GoalTaskWrapper,
    Transition,
    corridor_task,
)
from widthplan.search import (
    CountBasedRIW,
    OpenList,
    SearchBudget,
    SearchContext,
    SearchExhausted,
    SearchNode,
    count_based_riw,
    iw_search,
    prune_other,
    rollout_iw,
    select,
    selection_probabilities,
)
from widthplan.widthmath import WidthParams, gray_code_worst_case, max_novel_closed


def corridor(length):
    env = corridor_task(length)
    return env, env.inner.feature_map()


class ListEnv(DeterministicEnv):
    """Root state 0; action i leads to state i, a leaf. Features come from a list."""

    def __init__(self, vectors):
        self.vectors = vectors
        self.action_count = len(vectors)

    def initial_state(self):
        return 0

    def step(self, state, action):
        if state != 0 or action == 0:
            return None
        return Transition(action, 0.0, True)

    def fmap(self):
        n = len(self.vectors[0])
        return FunctionFeatureMap(lambda s: self.vectors[s], FeatureSchema.uniform(n, 2))


class RandomGraphEnv(DeterministicEnv):
    """Small random deterministic graph over binary feature vectors."""

    def __init__(self, n, branching, seed, goal=None):
        rng = random.Random(seed)
        self.n = n
        self.action_count = branching
        self.table = {}
        for s in range(2**n):
            self.table[s] = [rng.randrange(2**n) for _ in range(branching)]
        self.goal = goal

    def initial_state(self):
        return 0

    def step(self, state, action):
        return Transition(self.table[state][action], 0.0, False)

    def fmap(self):
        n = self.n
        return FunctionFeatureMap(lambda s: tuple((s >> i) & 1 for i in range(n)), FeatureSchema.uniform(n, 2))


def test_iw1_fails_on_corridor_and_expands_four_states():
    env, fm = corridor(3)
    res = iw_search(env, fm, 1, SearchBudget(None))
    assert not res.solved
    expanded = {n.state for n in res.root.iter_subtree() if not n.pruned and n.children}
    assert expanded == {(0, 0), (1, 0), (2, 0), (3, 1)}


def test_iw2_solves_corridor_with_plan_of_six():
    env, fm = corridor(3)
    res = iw_search(env, fm, 2, SearchBudget(None))
    assert res.solved
    assert len(res.plan()) == 6
    s = env.initial_state()
    for a in res.plan():
        s = env.successor(s, a)
    assert env.is_goal(s)


@pytest.mark.parametrize("length", [2, 5, 10])
def test_iw1_fails_at_any_budget(length):
    env, fm = corridor(length)
    assert not iw_search(env, fm, 1, SearchBudget(None)).solved
    assert iw_search(env, fm, 2, SearchBudget(None)).solved


def test_goal_at_first_successor():
    env = GoalTaskWrapper(corridor_task(3).inner, lambda s: s == (1, 0))
    fm = env.inner.feature_map()
    res = iw_search(env, fm, 1)
    assert res.solved and res.expanded_count == 1 and res.plan() == [RIGHT]


def test_goal_at_root():
    env = GoalTaskWrapper(corridor_task(3).inner, lambda s: s == (0, 0))
    res = iw_search(env, env.inner.feature_map(), 1)
    assert res.solved and res.plan() == [] and res.generated_count == 0


def test_iw_width_validation():
    env, fm = corridor(2)
    with pytest.raises(ValueError):
        iw_search(env, fm, 0)
    with pytest.raises(ValueError):
        count_based_riw(env, fm, 0)
    with pytest.raises(ValueError):
        SearchBudget(max_generated_nodes=-1)


def test_gray_order_as_expansion_order():
    gray = gray_code_worst_case(4)
    env = ListEnv(gray)
    res = iw_search(env, env.fmap(), 2, SearchBudget(None))
    nodes = list(res.root.iter_subtree())
    novel = [n for n in nodes if not n.pruned]
    assert len(novel) == 11 and len(res.pruned_nodes) == 5
    assert res.novel_count == 11


def test_budget_limits_generation():
    env, fm = corridor(10)
    for b in (1, 5, 17):
        assert iw_search(env, fm, 2, SearchBudget(b)).generated_count <= b
        assert count_based_riw(env, fm, 2, SearchBudget(b)).generated_count <= b


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.integers(0, 10**6), st.integers(1, 2))
def test_iw_novel_expansions_within_bound(n, b, seed, w):
    env = RandomGraphEnv(n, b, seed)
    res = iw_search(env, env.fmap(), min(w, n), SearchBudget(None))
    novel = sum(1 for x in res.root.iter_subtree() if not x.pruned)
    assert novel <= max_novel_closed(WidthParams(n, 2, min(w, n)))
    assert res.generated_count <= max_novel_closed(WidthParams(n, 2, min(w, n))) * b


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 10**6))
def test_iw_deterministic(n, b, seed):
    env = RandomGraphEnv(n, b, seed)
    r1 = iw_search(env, env.fmap(), 1, SearchBudget(None))
    r2 = iw_search(env, env.fmap(), 1, SearchBudget(None))
    assert r1.generated_states() == r2.generated_states()


def test_selection_probability_examples():
    assert np.allclose(selection_probabilities([0, 0], 3.0), [0.5, 0.5])
    p = selection_probabilities([0, 1], 1.0)
    e = np.array([math.e, math.exp(0.5)])
    assert np.allclose(p, e / e.sum())
    assert p[0] == pytest.approx(0.622, abs=5e-4) and p[1] == pytest.approx(0.378, abs=5e-4)
    assert np.allclose(selection_probabilities([4, 0, 9], math.inf), [1 / 3] * 3)
    with pytest.raises(ValueError):
        selection_probabilities([0], 0.0)


def _open_with_counts(counts):
    ol = OpenList()
    nodes = []
    for i, c in enumerate(counts):
        n = SearchNode(i, (i,))
        ol.add(n)
        ol.counts[n.features] = c
        nodes.append(n)
    return ol, nodes


def test_select_concentrates_at_low_temperature():
    ol, nodes = _open_with_counts([0, 5])
    rng = np.random.default_rng(0)
    hits = sum(select(ol, 1e-6, rng) is nodes[0] for _ in range(10_000))
    assert hits / 10_000 > 0.999


def test_select_is_fair_with_equal_counts():
    ol, nodes = _open_with_counts([2, 2])
    rng = np.random.default_rng(1)
    hits = sum(select(ol, 1.0, rng) is nodes[0] for _ in range(10_000))
    assert abs(hits / 10_000 - 0.5) < 0.02


def test_select_empty():
    with pytest.raises(SearchExhausted):
        select(OpenList(), 1.0, np.random.default_rng(0))


def _node(name, tuples, parent=None):
    n = SearchNode(name, (), parent=parent, depth=0 if parent is None else parent.depth + 1)
    if parent is not None:
        parent.children[len(parent.children)] = n
    n.novel_tuples = set(tuples)
    return n


def test_prune_other_unowned_tuple():
    ol = OpenList()
    s = _node("s", {"t"})
    assert prune_other(s, ol) == []
    assert ol.owners["t"] is s


def test_prune_other_removes_subtree_of_emptied_owner():
    ol = OpenList()
    o = _node("o", {"t"})
    child = _node("c", {"u"}, parent=o)
    for n in (o, child):
        ol.add(n)
        prune_other(n, ol)
    s = _node("s", {"t"})
    pruned = prune_other(s, ol)
    assert set(pruned) == {o, child}
    assert o.pruned and child.pruned
    assert o not in ol and child not in ol
    assert ol.owners["t"] is s


def test_prune_other_keeps_owner_with_other_tuples():
    ol = OpenList()
    o = _node("o", {"t", "t2"})
    ol.add(o)
    prune_other(o, ol)
    s = _node("s", {"t"})
    assert prune_other(s, ol) == []
    assert o in ol and not o.pruned and o.novel_tuples == {"t2"}


def _engine(length, w=1, chooser=None, stop_on_goal=True):
    env, fm = corridor(length)
    ctx = SearchContext(env, fm, SearchBudget(None), stop_on_goal=stop_on_goal)
    root = ctx.make_root(env.initial_state())
    kw = {} if chooser is None else {"choose_action": chooser}
    eng = CountBasedRIW(ctx, root, w, tau=1.0, **kw)
    eng.rebuild()
    return ctx, root, eng


def test_rollout_on_exhausted_node_removes_it():
    ctx, root, eng = _engine(3)
    root.tried.update({LEFT, RIGHT})
    before = ctx.generated
    eng.rollout(root)
    assert root not in eng.open and ctx.generated == before


def test_rollout_right_then_back_stops_on_non_novel():
    def right_until_key(node, untried, rng):
        want = LEFT if node.state[1] else RIGHT
        return want if want in untried else untried[0]

    ctx, root, eng = _engine(3, chooser=right_until_key)
    eng.rollout(root)
    states = [n.state for n in root.iter_subtree()]
    assert states == [(0, 0), (1, 0), (2, 0), (3, 1), (2, 1)]
    last = root.children[RIGHT].children[RIGHT].children[RIGHT].children[LEFT]
    assert last.pruned and not last.novel_tuples
    assert [n.state for n in eng.open] == [(0, 0), (1, 0), (2, 0), (3, 1)]


def test_novel_terminal_successor_not_added():
    env = GoalTaskWrapper(corridor_task(3).inner, lambda s: s == (2, 0))
    ctx = SearchContext(env, env.inner.feature_map(), SearchBudget(None), stop_on_goal=False)
    root = ctx.make_root(env.initial_state())
    eng = CountBasedRIW(ctx, root, 1, choose_action=lambda node, untried, rng: untried[-1])
    eng.rebuild()
    eng.rollout(root)
    goal = root.children[RIGHT].children[RIGHT]
    assert goal.state == (2, 0) and goal.terminal and goal.novel_tuples and not goal.pruned
    assert goal not in eng.open
    assert RIGHT not in goal.children


def test_count_based_budget_one():
    env, fm = corridor(3)
    assert count_based_riw(env, fm, 1, SearchBudget(1)).generated_count <= 1


@pytest.mark.parametrize("seed", range(20))
def test_count_based_riw2_solves_corridor(seed):
    env, fm = corridor(3)
    assert count_based_riw(env, fm, 2, SearchBudget(10_000), tau=1.0, seed=seed).solved


def test_rollout_iw_solves_corridor_width_two():
    env, fm = corridor(4)
    assert rollout_iw(env, fm, 2, SearchBudget(10_000), seed=3).solved


def test_count_based_deterministic_given_seed():
    env, fm = corridor(6)
    a = count_based_riw(env, fm, 2, SearchBudget(200), seed=5)
    b = count_based_riw(env, fm, 2, SearchBudget(200), seed=5)
    assert [n.state for n in a.root.iter_subtree()] == [n.state for n in b.root.iter_subtree()]


def _open_invariant(eng, root):
    for n in eng.open:
        assert n.novel_tuples and not n.pruned
        p = n.parent
        while p is not None:
            assert not p.pruned
            p = p.parent
    for n in root.iter_subtree():
        if n.pruned:
            assert all(d.pruned for d in n.iter_subtree())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 10**6), st.integers(1, 60))
def test_open_list_invariant_during_search(n, b, seed, steps):
    env = RandomGraphEnv(n, b, seed)
    ctx = SearchContext(env, env.fmap(), SearchBudget(steps))
    root = ctx.make_root(0)
    eng = CountBasedRIW(ctx, root, 1, tau=0.5, rng=np.random.default_rng(seed))
    eng.resume()
    _open_invariant(eng, root)
    # owners hold the tuples they are recorded for
    for t, o in eng.open.owners.items():
        if not o.pruned:
            assert t in o.novel_tuples


def test_detach_and_plan():
    env, fm = corridor(2)
    res = iw_search(env, fm, 2)
    goal = res.goal_node
    assert goal.path()[0] is res.root
    child = res.root.children[RIGHT]
    child.detach()
    assert child.parent is None and RIGHT not in res.root.children
