"""Deterministic environments and feature maps.

An environment exposes ``action_count``, ``initial_state()`` and
``step(state, action)``. ``step`` returns a :class:`Transition`, or ``None``
when the action is not applicable in ``state``. States must be hashable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Callable, NamedTuple, Sequence

import numpy as np

from .novelty import FeatureSchema


class Transition(NamedTuple):
    state: Any
    reward: float
    terminal: bool


class DeterministicEnv:
    action_count: int = 0
    action_names: tuple = ()

    def initial_state(self):
        raise NotImplementedError

    def step(self, state, action: int) -> Transition | None:
        raise NotImplementedError

    def successor(self, state, action: int):
        t = self.step(state, action)
        return None if t is None else t.state

    def reward(self, state, action: int) -> float:
        t = self.step(state, action)
        return 0.0 if t is None else t.reward

    def is_terminal(self, state) -> bool:
        return False

    def is_goal(self, state) -> bool:
        return False


class GoalTaskWrapper(DeterministicEnv):
    """Turns a goal-directed task into an MDP.

    Reward is 1 on the transition into a goal state and 0 otherwise; goal
    states are absorbing and reported terminal so planners stop there.
    """

    def __init__(self, inner: DeterministicEnv, goal_predicate: Callable[[Any], bool]):
        self.inner = inner
        self.goal_predicate = goal_predicate
        self.action_count = inner.action_count
        self.action_names = getattr(inner, "action_names", ())

    def initial_state(self):
        return self.inner.initial_state()

    def is_goal(self, state) -> bool:
        return bool(self.goal_predicate(state))

    def is_terminal(self, state) -> bool:
        return self.is_goal(state) or self.inner.is_terminal(state)

    def step(self, state, action: int) -> Transition | None:
        if self.is_goal(state):
            return Transition(state, 0.0, True)
        t = self.inner.step(state, action)
        if t is None:
            return None
        goal = self.is_goal(t.state)
        return Transition(t.state, 1.0 if goal else 0.0, goal or t.terminal)


class FeatureMap:
    """Maps a state to a feature vector (tuple of ints) under ``schema``."""

    schema: FeatureSchema
    # binary maps over planning atoms only count features that are true
    true_atoms_only = False

    def __call__(self, state) -> tuple:
        raise NotImplementedError

    def atoms(self, fv: Sequence[int]) -> frozenset:
        """(feature index, value) pairs that count as the state's atoms."""
        return frozenset((i, v) for i, v in enumerate(fv) if v or not self.true_atoms_only)


class FunctionFeatureMap(FeatureMap):
    def __init__(self, fn: Callable[[Any], Sequence[int]], schema: FeatureSchema, true_atoms_only: bool = False):
        self.fn = fn
        self.schema = schema
        self.true_atoms_only = true_atoms_only

    def __call__(self, state) -> tuple:
        return tuple(self.fn(state))


class ProjectionMap(FeatureMap):
    """Keeps only the features at ``indices`` of a base map."""

    def __init__(self, base: FeatureMap, indices: Sequence[int]):
        self.base = base
        self.indices = tuple(indices)
        self.schema = base.schema.subset(self.indices)
        self.true_atoms_only = base.true_atoms_only

    def __call__(self, state) -> tuple:
        fv = self.base(state)
        return tuple(fv[i] for i in self.indices)

    def atoms(self, fv):
        # atoms keep base indices so they stay comparable across projections
        return frozenset((self.indices[j], v) for j, v in enumerate(fv) if v or not self.true_atoms_only)


class ConstantMap(FeatureMap):
    """The empty feature set: every state maps to ``()``."""

    schema = FeatureSchema((), ())

    def __call__(self, state) -> tuple:
        return ()


# ---------------------------------------------------------------- corridor

LEFT, RIGHT = 0, 1


class CorridorEnv(DeterministicEnv):
    """Walk to the end of a corridor, pick up the key there, walk back.

    State is ``(p, k)``: position in [0, L] and key flag. The key is picked up
    automatically on reaching p = L. Wrap with :func:`corridor_task` to get the
    goal p = 0 and k = 1.
    """

    action_names = ("left", "right")
    action_count = 2

    def __init__(self, length: int):
        if length < 1:
            raise ValueError("corridor length must be positive")
        self.length = length

    def initial_state(self):
        return (0, 0)

    def step(self, state, action: int) -> Transition:
        p, k = state
        if action == LEFT:
            p = max(0, p - 1)
        elif action == RIGHT:
            p = min(self.length, p + 1)
        else:
            raise ValueError(f"invalid corridor action {action}")
        if p == self.length:
            k = 1
        return Transition((p, k), 0.0, False)

    def feature_map(self) -> FeatureMap:
        return FunctionFeatureMap(lambda s: s, FeatureSchema(("p", "k"), (self.length + 1, 2)))


def corridor_task(length: int) -> GoalTaskWrapper:
    return GoalTaskWrapper(CorridorEnv(length), lambda s: s == (0, 1))


def corridor_step(env: GoalTaskWrapper, state, action: int) -> tuple:
    t = env.step(state, action)
    return t.state, t.reward


# ---------------------------------------------------------------- tiles


@dataclass(frozen=True)
class TileFeatureMap(FeatureMap):
    """Mean intensity per tile, quantized to ``quantization_levels`` values.

    Means are taken over all pixels and channels of a tile. When the image
    does not divide evenly, the remainder pixels fold into the last tile row
    and column.
    """

    rows: int
    cols: int
    quantization_levels: int = 8
    render: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.quantization_levels < 1:
            raise ValueError("tile grid and quantization must be positive")

    @property
    def schema(self) -> FeatureSchema:
        return FeatureSchema.uniform(self.rows * self.cols, self.quantization_levels, prefix="tile")

    def __call__(self, state) -> tuple:
        image = self.render(state) if self.render is not None else state
        return tile_discretize(image, self)


def _edges(size: int, parts: int) -> list[int]:
    step = size // parts
    return [i * step for i in range(parts)] + [size]


def tile_discretize(image, tiles: TileFeatureMap) -> tuple:
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0 or img.ndim not in (2, 3):
        raise ValueError("expected a non-empty 2-D or 3-D image")
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    if h < tiles.rows or w < tiles.cols:
        raise ValueError(f"image {h}x{w} smaller than tile grid {tiles.rows}x{tiles.cols}")
    q = tiles.quantization_levels
    re, ce = _edges(h, tiles.rows), _edges(w, tiles.cols)
    if h % tiles.rows == 0 and w % tiles.cols == 0:
        means = img.reshape(tiles.rows, h // tiles.rows, tiles.cols, w // tiles.cols).mean(axis=(1, 3)).ravel()
    else:
        means = np.array(
            [img[re[i]:re[i + 1], ce[j]:ce[j + 1]].mean() for i in range(tiles.rows) for j in range(tiles.cols)]
        )
    levels = np.clip(np.floor(means * q / 256.0), 0, q - 1).astype(int)
    return tuple(int(v) for v in levels)


# ---------------------------------------------------------------- gridworld

NOOP, UP, DOWN, GRID_LEFT, GRID_RIGHT = range(5)
_MOVES = {NOOP: (0, 0), UP: (-1, 0), DOWN: (1, 0), GRID_LEFT: (0, -1), GRID_RIGHT: (0, 1)}

# channel means differ (0, 160, 138.3, 93.3, 111.7) so grey-level tiles tell them apart
COLORS = {
    "empty": (0, 0, 0),
    "wall": (160, 160, 160),
    "key": (255, 80, 80),
    "door": (40, 200, 40),
    "agent": (40, 40, 255),
}


class GridState(NamedTuple):
    row: int
    col: int
    has_key: int
    steps: int


@dataclass(frozen=True)
class GridLayout:
    walls: frozenset
    key: tuple
    door: tuple
    start: tuple
    height: int
    width: int

    @classmethod
    def parse(cls, text: str) -> "GridLayout":
        rows = [line.rstrip("\r") for line in text.splitlines() if line.strip() and not line.startswith(";")]
        if not rows:
            raise ValueError("empty map")
        width = max(len(r) for r in rows)
        walls, key, door, start = set(), None, None, None
        for i, line in enumerate(rows):
            for j, ch in enumerate(line.ljust(width, "#")):
                if ch == "#":
                    walls.add((i, j))
                elif ch == "K":
                    key = (i, j)
                elif ch == "D":
                    door = (i, j)
                elif ch == "S":
                    start = (i, j)
                elif ch != ".":
                    raise ValueError(f"unknown map character {ch!r} at row {i}, col {j}")
        if key is None or door is None or start is None:
            raise ValueError("map needs exactly one K, D and S")
        return cls(frozenset(walls), key, door, start, len(rows), width)


def load_map(name_or_path: str | Path) -> GridLayout:
    """Load an ASCII map from a path or by bundled name (``small``, ``large``)."""
    p = Path(name_or_path)
    if p.exists():
        return GridLayout.parse(p.read_text(encoding="utf-8"))
    ref = resources.files("widthplan") / "data" / "maps" / f"{name_or_path}.txt"
    return GridLayout.parse(ref.read_text(encoding="utf-8"))


class GridworldEnv(DeterministicEnv):
    """Key-door gridworld rendered to an ``image_size`` x ``image_size`` x 3 image.

    Reaching the door while holding the key pays +1 and ends the episode;
    walking into a wall pays -1 and ends it. Episodes also end after
    ``max_steps`` steps.
    """

    action_names = ("noop", "up", "down", "left", "right")
    action_count = 5

    def __init__(self, layout: GridLayout, max_steps: int = 200, image_size: int = 84):
        self.layout = layout
        self.max_steps = max_steps
        self.image_size = image_size
        self._cell = image_size // max(layout.height, layout.width)
        if self._cell < 1:
            raise ValueError("image too small for the map")
        self._backgrounds = {k: self._background(k) for k in (0, 1)}
        self._render_cached = lru_cache(maxsize=4096)(self._render)

    def initial_state(self) -> GridState:
        return GridState(*self.layout.start, 0, 0)

    def step(self, state: GridState, action: int) -> Transition:
        if not 0 <= action < 5:
            raise ValueError(f"invalid gridworld action {action}")
        dr, dc = _MOVES[action]
        r, c = state.row + dr, state.col + dc
        steps = state.steps + 1
        lay = self.layout
        if (r, c) in lay.walls or not (0 <= r < lay.height and 0 <= c < lay.width):
            return Transition(GridState(r, c, state.has_key, steps), -1.0, True)
        has_key = state.has_key or int((r, c) == lay.key)
        if (r, c) == lay.door and has_key:
            return Transition(GridState(r, c, has_key, steps), 1.0, True)
        return Transition(GridState(r, c, has_key, steps), 0.0, steps >= self.max_steps)

    def _background(self, has_key: int) -> np.ndarray:
        img = np.zeros((self.image_size, self.image_size, 3), dtype=np.uint8)
        img[:] = COLORS["empty"]
        for cell in self.layout.walls:
            self._paint(img, cell, "wall")
        self._paint(img, self.layout.door, "door")
        if not has_key:
            self._paint(img, self.layout.key, "key")
        img.setflags(write=False)
        return img

    def _paint(self, img, cell, color):
        s = self._cell
        r, c = cell
        img[r * s:(r + 1) * s, c * s:(c + 1) * s] = COLORS[color]

    def _render(self, row: int, col: int, has_key: int) -> np.ndarray:
        img = self._backgrounds[has_key].copy()
        if 0 <= row < self.layout.height and 0 <= col < self.layout.width:
            self._paint(img, (row, col), "agent")
        img.setflags(write=False)
        return img

    def render(self, state: GridState) -> np.ndarray:
        """The observation image; depends only on position and key flag."""
        return self._render_cached(state.row, state.col, state.has_key)

    def tile_map(self, rows: int, cols: int, quantization_levels: int = 8) -> "CachedTileMap":
        return CachedTileMap(self, rows, cols, quantization_levels)

    def cell_map(self, quantization_levels: int = 8) -> "CachedTileMap":
        """Tiles aligned with the grid cells (one feature per cell)."""
        return CachedTileMap(self, self.layout.height, self.layout.width, quantization_levels, crop=True)


class CachedTileMap(FeatureMap):
    """Tile features of a gridworld observation, cached per (row, col, key)."""

    def __init__(self, env: GridworldEnv, rows: int, cols: int, quantization_levels: int, crop: bool = False):
        self.env = env
        self.tiles = TileFeatureMap(rows, cols, quantization_levels)
        self.schema = self.tiles.schema
        # cell-aligned tiles ignore the unused margin right/below the grid
        self.crop = (env.layout.height * env._cell, env.layout.width * env._cell) if crop else None
        self._cache: dict = {}

    def __call__(self, state) -> tuple:
        key = (state.row, state.col, state.has_key)
        fv = self._cache.get(key)
        if fv is None:
            img = self.env.render(state)
            if self.crop is not None:
                img = img[: self.crop[0], : self.crop[1]]
            fv = self._cache[key] = tile_discretize(img, self.tiles)
        return fv


def gridworld_step(env: GridworldEnv, state: GridState, action: int) -> tuple:
    t = env.step(state, action)
    return t.state, t.reward, t.terminal
