"""Policy-guided replanning on top of the width-based planners.

The agent plans with a (hierarchical) Count-Based Rollout IW tree, backs up
rewards to the root, samples an action from the behavior policy and keeps
the subtree under that action for the next step. A pluggable estimator
supplies the rollout policy and the value used at the leaves; the bundled
:class:`TabularEstimator` is keyed on low-level feature vectors.

Three agent variants share one code path:

* ``pi_iw``: flat tree, no value at the leaves, no count tie-breaking;
* ``pi_iw_plus``: flat tree with value and count tie-breaking;
* ``pi_hiw``: two-level tree over tile features plus value and counts.
"""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .hierarchy import HierarchicalIW, HierarchyConfig, HighLevelNode
from .search import SearchBudget, SearchNode, owned_nodes
from .simulator import ConstantMap, DeterministicEnv, FeatureMap

ValueFn = Callable[[tuple], float]

# ---------------------------------------------------------------- distributions


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    p = np.exp(z)
    return p / p.sum()


def pi_counts(counts: Sequence[float], tau: float = 1.0) -> np.ndarray:
    """Softmax of 1 / (tau * c + 1) over per-action subtree sizes."""
    c = np.asarray(counts, dtype=np.float64)
    if tau < 0:
        raise ValueError("temperature must be non-negative")
    return _softmax(1.0 / (tau * c + 1.0))


def pi_rewards(returns: Sequence[float], tau: float = 1e-4) -> np.ndarray:
    """Softmax of R / tau. NaN entries (actions absent from the tree) get
    probability zero; with no finite entry the result is uniform."""
    r = np.asarray(returns, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    ok = np.isfinite(r)
    if not ok.any():
        return np.full(len(r), 1.0 / len(r))
    logits = np.full(len(r), -np.inf)
    logits[ok] = r[ok] / tau
    logits[ok] -= logits[ok].max()
    p = np.where(ok, np.exp(logits), 0.0)
    return p / p.sum()


def behavior_policy(pr: Sequence[float], pc: Sequence[float]) -> np.ndarray:
    """Elementwise product renormalized; falls back to ``pc`` if it vanishes."""
    pr = np.asarray(pr, dtype=np.float64)
    pc = np.asarray(pc, dtype=np.float64)
    if pr.shape != pc.shape:
        raise ValueError("distributions over different action sets")
    prod = pr * pc
    s = prod.sum()
    if s <= 0 or not np.isfinite(s):
        return pc / pc.sum()
    return prod / s


def cross_entropy(target: Sequence[float], pred: Sequence[float]) -> float:
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    mask = t > 0
    return float(-(t[mask] * np.log(np.maximum(p[mask], 1e-300))).sum())


def mc_returns(rewards: Sequence[float], gamma: float) -> list[float]:
    """Discounted return from every step of an episode, last step first computed."""
    out, g = [0.0] * len(rewards), 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


# ---------------------------------------------------------------- backups


@dataclass
class RootBackup:
    """Per-action returns (NaN where the root has no child) and subtree sizes."""

    returns: np.ndarray
    counts: np.ndarray
    value: float


def _leaf_value(node: SearchNode, value_fn: ValueFn | None) -> float:
    if node.terminal:
        return 0.0
    if node.children or value_fn is None:
        return 0.0
    return max(0.0, float(value_fn(node.features)))


def _backup(
    root: SearchNode,
    value_fn: ValueFn | None,
    gamma: float,
    owner=None,
    boundary: dict | None = None,
) -> tuple[dict, dict]:
    """Values and subtree sizes for the nodes owned by ``owner`` under ``root``.

    Children owned by another high-level node take their value and size from
    ``boundary`` (keyed by that high-level node).
    """
    order = list(owned_nodes(root, owner))
    value: dict = {}
    size: dict = {}
    for n in reversed(order):
        if n.terminal:
            value[n], size[n] = 0.0, 1
            continue
        best, total = None, 1
        for c in n.children.values():
            if owner is not None and c.hl is not owner:
                v, k = boundary[c.hl]
            else:
                v, k = value[c], size[c]
            q = c.reward + gamma * v
            best = q if best is None else max(best, q)
            total += k
        value[n] = _leaf_value(n, value_fn) if best is None else best
        size[n] = total
    return value, size


def _root_backup(root: SearchNode, action_count: int, gamma: float, value: dict, size: dict, boundary=None, owner=None):
    returns = np.full(action_count, np.nan)
    counts = np.zeros(action_count)
    for a, c in root.children.items():
        if owner is not None and c.hl is not owner:
            v, k = boundary[c.hl]
        else:
            v, k = value[c], size[c]
        returns[a] = c.reward + gamma * v
        counts[a] = k
    return RootBackup(returns, counts, value[root])


def backup_rewards(
    root: SearchNode, action_count: int, value_fn: ValueFn | None = None, gamma: float = 0.99
) -> RootBackup:
    """Greedy backup over a flat tree.

    Terminal nodes are worth 0, open leaves max(0, V(leaf)) and inner nodes
    the best child's reward plus discounted value.
    """
    value, size = _backup(root, value_fn, gamma)
    return _root_backup(root, action_count, gamma, value, size)


def subtree_counts(root: SearchNode, action_count: int) -> np.ndarray:
    return backup_rewards(root, action_count).counts


def backprop_hierarchical(
    hl_root: HighLevelNode, action_count: int, value_fn: ValueFn | None = None, gamma: float = 0.99
) -> RootBackup:
    """Backup through the high-level tree, innermost high-level nodes first.

    Each high-level node backs up its own low-level tree; the resulting entry
    value and size are fed to the boundary leaf of its parent's tree.
    """
    order = list(hl_root.iter_subtree())
    done: dict = {}
    for X in reversed(order):
        value, size = _backup(X.entry, value_fn, gamma, owner=X, boundary=done)
        done[X] = (value[X.entry], size[X.entry])
        if X is hl_root:
            return _root_backup(X.entry, action_count, gamma, value, size, boundary=done, owner=X)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------- estimator


class TabularEstimator:
    """Softmax policy logits and a scalar value per feature vector.

    ``update`` takes one gradient step on cross-entropy to the target policy
    plus squared error to the return plus l2 on the touched parameters.
    """

    def __init__(self, action_count: int, lr: float = 0.1):
        self.action_count = action_count
        self.lr = lr
        self.logits: dict[tuple, np.ndarray] = {}
        self.values: dict[tuple, float] = {}
        self._probs: dict[tuple, np.ndarray] = {}
        self._uniform = np.full(action_count, 1.0 / action_count)
        self._uniform.setflags(write=False)

    def __len__(self):
        return len(self.logits)

    def policy(self, features: tuple) -> np.ndarray:
        return self._probs.get(features, self._uniform)

    def value(self, features: tuple) -> float:
        return self.values.get(features, 0.0)

    def predict(self, features: tuple) -> tuple[np.ndarray, float]:
        return self.policy(features), self.value(features)

    def losses(self, features, target, target_return: float, l2: float) -> dict:
        p, v = self.predict(features)
        z = self.logits.get(features, np.zeros(self.action_count))
        return {
            "policy": cross_entropy(target, p),
            "value": (v - target_return) ** 2,
            "l2": l2 * (float(z @ z) + v * v),
        }

    def update(self, features, target, target_return: float, l2: float = 0.0) -> dict:
        """One gradient step; returns the loss terms before the step."""
        target = np.asarray(target, dtype=np.float64)
        out = self.losses(features, target, target_return, l2)
        z = self.logits.get(features)
        if z is None:
            z = np.zeros(self.action_count)
        v = self.values.get(features, 0.0)
        p = _softmax(z)
        z = z - self.lr * ((p - target) + 2 * l2 * z)
        v = v - self.lr * (2 * (v - target_return) + 2 * l2 * v)
        self.logits[features] = z
        self.values[features] = v
        p = _softmax(z)
        p.setflags(write=False)
        self._probs[features] = p
        return out


def update_estimator(est, features, target_policy, target_return: float, l2: float = 1e-4) -> float:
    """Train ``est`` on one sample; returns the total loss before the step."""
    tp = np.asarray(target_policy, dtype=np.float64)
    if np.any(tp < 0) or abs(tp.sum() - 1.0) > 1e-9:
        raise ValueError("target policy is not a distribution")
    return float(sum(est.update(features, tp, target_return, l2).values()))


def policy_chooser(est) -> Callable:
    """Rollout action choice: sample the estimator's policy over untried actions."""

    def choose(node: SearchNode, untried: list, rng) -> int:
        p = est.policy(node.features)
        weights = [float(p[a]) for a in untried]
        u = rng.random() * sum(weights)
        for a, w in zip(untried, weights):
            u -= w
            if u < 0:
                return a
        return untried[-1]

    return choose


# ---------------------------------------------------------------- agent


VARIANTS = {
    # name: (hierarchical, use value, use count tie-breaking)
    "pi_iw": (False, False, False),
    "pi_iw_plus": (False, True, True),
    "pi_hiw": (True, True, True),
}


@dataclass
class AgentConfig:
    algo: str = "pi_hiw"
    tiles: tuple = (2, 2)
    hl_quant: int = 256
    ll_quant: int = 8
    w_h: int | None = 1  # None: w_h = number of high-level features
    w_l: int = 1
    gamma: float = 0.99
    tau_rewards: float = 1e-4
    tau_counts: float = 1.0
    tau_high: float = 0.005
    budget_per_step: int = 100
    memory_cap: int = 500
    lr: float = 0.1
    l2: float = 1e-4

    def __post_init__(self):
        if self.algo not in VARIANTS:
            raise ValueError(f"unknown agent {self.algo!r}; choose from {sorted(VARIANTS)}")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.budget_per_step < 1 or self.memory_cap <= self.budget_per_step:
            raise ValueError("need 1 <= budget_per_step < memory_cap")
        self.tiles = tuple(self.tiles)

    @property
    def hierarchical(self) -> bool:
        return VARIANTS[self.algo][0]

    @property
    def use_value(self) -> bool:
        return VARIANTS[self.algo][1]

    @property
    def use_counts(self) -> bool:
        return VARIANTS[self.algo][2]


class ReplanState:
    """A planning tree kept in sync with the current environment state."""

    def __init__(
        self,
        env: DeterministicEnv,
        cfg: AgentConfig,
        ll_map: FeatureMap,
        hl_map: FeatureMap | None,
        estimator: TabularEstimator,
        rng: np.random.Generator,
    ):
        self.env = env
        self.cfg = cfg
        self.ll_map = ll_map
        self.hl_map = hl_map if (cfg.hierarchical and hl_map is not None) else ConstantMap()
        self.estimator = estimator
        self.rng = rng
        self.planner: HierarchicalIW | None = None

    @property
    def root(self) -> SearchNode:
        return self.planner.root

    def value_fn(self) -> ValueFn | None:
        return self.estimator.value if self.cfg.use_value else None

    def reset(self, state=None) -> None:
        cfg = self.cfg
        hcfg = HierarchyConfig(
            self.hl_map,
            self.ll_map,
            w_h=cfg.w_h,
            w_l=cfg.w_l,
            high="riw",
            low="riw",
            tau_high=cfg.tau_high,
            tau_low=math.inf,
            choose_action=policy_chooser(self.estimator),
        )
        budget = SearchBudget(max_generated_nodes=None, max_tree_size=cfg.memory_cap)
        self.planner = HierarchicalIW(self.env, hcfg, budget, root_state=state, rng=self.rng)

    def plan(self) -> None:
        ctx = self.planner.ctx
        ctx.generation_limit = ctx.generated + self.cfg.budget_per_step
        self.planner.run()
        ctx.pruned.clear()

    def backup(self) -> RootBackup:
        return backprop_hierarchical(self.planner.hl_root, self.env.action_count, self.value_fn(), self.cfg.gamma)

    def reroot(self, child: SearchNode) -> None:
        """Keep only ``child``'s subtree, rebase depths and rebuild the
        high-level partition, which drops unreachable high-level states."""
        planner, ctx = self.planner, self.planner.ctx
        child.detach()
        shift = child.depth
        for n in child.iter_subtree():
            n.depth -= shift
        planner.root = child
        goal = ctx.goal_node
        if goal is not None and not _descends_from(goal, child):
            ctx.goal_node = None
        self.evict(self.cfg.memory_cap - self.cfg.budget_per_step)
        planner.restructure(self.hl_map, self.ll_map)
        ctx.tree_size = sum(1 for _ in child.iter_subtree())

    def evict(self, target: int) -> int:
        """Drop leaves deepest-first, never touching the best-return path."""
        root = self.root
        nodes = list(root.iter_subtree())
        excess = len(nodes) - target
        if excess <= 0:
            return 0
        value, _ = _backup(root, self.value_fn(), self.cfg.gamma)
        keep = {root}
        n = root
        while n.children:
            n = max(n.children.values(), key=lambda c: c.reward + self.cfg.gamma * value[c])
            keep.add(n)
        goal = self.planner.ctx.goal_node
        if goal is not None:
            keep.update(goal.path())
        heap = [(-n.depth, n.serial, n) for n in nodes if not n.children and n not in keep]
        heapq.heapify(heap)
        removed = 0
        while heap and removed < excess:
            _, _, n = heapq.heappop(heap)
            parent = n.parent
            parent.tried.discard(n.action)
            n.detach()
            removed += 1
            if not parent.children and parent not in keep:
                heapq.heappush(heap, (-parent.depth, parent.serial, parent))
        return removed


def _descends_from(node: SearchNode, ancestor: SearchNode) -> bool:
    while node is not None:
        if node is ancestor:
            return True
        node = node.parent
    return False


@dataclass
class StepRecord:
    action: int
    reward: float
    terminal: bool
    target: np.ndarray
    features: tuple


def replan_step(rs: ReplanState) -> StepRecord:
    """Plan, choose an action from the behavior policy, execute it and cache
    the subtree under it."""
    cfg = rs.cfg
    rs.plan()
    b = rs.backup()
    pr = pi_rewards(b.returns, cfg.tau_rewards)
    pb = behavior_policy(pr, pi_counts(b.counts, cfg.tau_counts)) if cfg.use_counts else pr
    a = int(rs.rng.choice(len(pb), p=pb))
    root = rs.root
    child = root.children.get(a)
    if child is None:
        child = rs.planner.ctx.generate(root, a)
        if child is None:
            raise RuntimeError(f"action {a} not applicable at the root")
    rec = StepRecord(a, child.reward, child.terminal, pr, root.features)
    if not child.terminal:
        rs.reroot(child)
    return rec


@dataclass
class EpisodeMetrics:
    episode: int
    steps: int
    episode_return: float
    length: int
    tree_size: int
    loss_policy: float
    loss_value: float
    loss_l2: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class Agent:
    """Episode loop: replan every step, learn from the episode at its end."""

    def __init__(
        self,
        env: DeterministicEnv,
        cfg: AgentConfig,
        ll_map: FeatureMap,
        hl_map: FeatureMap | None = None,
        seed: int = 0,
        estimator: TabularEstimator | None = None,
    ):
        self.env = env
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.estimator = estimator or TabularEstimator(env.action_count, lr=cfg.lr)
        self.rs = ReplanState(env, cfg, ll_map, hl_map, self.estimator, self.rng)
        self.total_steps = 0
        self.episodes = 0

    def run_episode(self, max_steps: int | None = None, learn: bool = True) -> EpisodeMetrics:
        self.rs.reset()
        records: list[StepRecord] = []
        tree = 0
        while True:
            rec = replan_step(self.rs)
            records.append(rec)
            self.total_steps += 1
            tree = max(tree, self.rs.planner.ctx.tree_size)
            if rec.terminal or (max_steps is not None and len(records) >= max_steps):
                break
        rewards = [r.reward for r in records]
        losses = {"policy": 0.0, "value": 0.0, "l2": 0.0}
        if learn:
            for rec, g in zip(records, mc_returns(rewards, self.cfg.gamma)):
                for k, v in self.estimator.update(rec.features, rec.target, g, self.cfg.l2).items():
                    losses[k] += v / len(records)
        self.episodes += 1
        return EpisodeMetrics(
            self.episodes,
            self.total_steps,
            float(sum(rewards)),
            len(records),
            tree,
            losses["policy"],
            losses["value"],
            losses["l2"],
        )

    def train(
        self, max_env_steps: int, stop: Callable[[list], bool] | None = None, learn: bool = True
    ) -> Iterator[EpisodeMetrics]:
        """Episodes until ``max_env_steps`` have been executed or ``stop``
        returns true on the history of episode metrics."""
        history: list[EpisodeMetrics] = []
        while self.total_steps < max_env_steps:
            m = self.run_episode(max_steps=max_env_steps - self.total_steps, learn=learn)
            history.append(m)
            yield m
            if stop is not None and stop(history):
                return


def last_mean_at_least(window: int, threshold: float) -> Callable[[list], bool]:
    def stop(history: list) -> bool:
        if len(history) < window:
            return False
        return sum(m.episode_return for m in history[-window:]) / window >= threshold

    return stop


def gridworld_agent(env, cfg: AgentConfig, seed: int = 0) -> Agent:
    """Agent for a :class:`GridworldEnv`: cell features below, tiles above."""
    ll = env.cell_map(cfg.ll_quant)
    hl = env.tile_map(cfg.tiles[0], cfg.tiles[1], cfg.hl_quant) if cfg.hierarchical else None
    return Agent(env, cfg, ll, hl, seed=seed)
