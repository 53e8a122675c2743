import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from widthplan.simulator import (
    DOWN,
    GRID_LEFT,
    GRID_RIGHT,
    LEFT,
    NOOP,
    RIGHT,
    UP,
    ConstantMap,
    CorridorEnv,
    GoalTaskWrapper,
    GridLayout,
    GridState,
    GridworldEnv,
    ProjectionMap,
    TileFeatureMap,
    corridor_step,
    corridor_task,
    gridworld_step,
    load_map,
    tile_discretize,
)

TINY = """
#####
#S.K#
#..D#
#####
"""


@pytest.fixture
def tiny():
    return GridworldEnv(GridLayout.parse(TINY), max_steps=10, image_size=20)


def test_tile_examples():
    assert tile_discretize(np.zeros((84, 84, 3)), TileFeatureMap(3, 5, 8)) == (0,) * 15
    assert len(tile_discretize(np.random.default_rng(0).integers(0, 256, (84, 84, 3)), TileFeatureMap(2, 2))) == 4
    img = np.zeros((4, 4))
    img[:2, :2] = 255
    assert tile_discretize(img, TileFeatureMap(2, 2, 8)) == (7, 0, 0, 0)


def test_tile_remainder_folds_into_last_tile():
    img = np.zeros((5, 5))
    img[4, :] = 255  # the extra row belongs to the bottom tiles
    # bottom tiles are 3 rows tall (rows 2..4); left one is 2 wide, right one 3 wide
    assert tile_discretize(img, TileFeatureMap(2, 2, 256)) == (0, 0, 85, 85)


def test_tile_channels_are_averaged():
    img = np.zeros((2, 2, 3))
    img[..., 0] = 255
    assert tile_discretize(img, TileFeatureMap(1, 1, 256)) == (85,)


def test_tile_errors():
    with pytest.raises(ValueError):
        tile_discretize(np.zeros((0, 0)), TileFeatureMap(1, 1))
    with pytest.raises(ValueError):
        tile_discretize(np.zeros((2, 2)), TileFeatureMap(3, 3))
    with pytest.raises(ValueError):
        TileFeatureMap(0, 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_tile_range(rows, cols, q, seed):
    img = np.random.default_rng(seed).integers(0, 256, (24, 30, 3))
    fv = tile_discretize(img, TileFeatureMap(rows, cols, q))
    assert len(fv) == rows * cols
    assert all(0 <= v < q for v in fv)


def test_corridor_examples():
    env = corridor_task(3)
    assert corridor_step(env, (0, 0), RIGHT) == ((1, 0), 0.0)
    assert corridor_step(env, (2, 0), RIGHT) == ((3, 1), 0.0)
    assert corridor_step(env, (1, 1), LEFT) == ((0, 1), 1.0)
    assert env.is_goal((0, 1)) and env.is_terminal((0, 1))


def test_corridor_clamps_and_absorbs():
    env = corridor_task(2)
    assert corridor_step(env, (0, 0), LEFT) == ((0, 0), 0.0)
    assert corridor_step(env, (2, 1), RIGHT) == ((2, 1), 0.0)
    for a in (LEFT, RIGHT):
        t = env.step((0, 1), a)
        assert t.state == (0, 1) and t.reward == 0.0 and t.terminal
    with pytest.raises(ValueError):
        CorridorEnv(0)
    with pytest.raises(ValueError):
        CorridorEnv(2).step((0, 0), 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.lists(st.sampled_from([LEFT, RIGHT]), max_size=40))
def test_corridor_invariants(length, actions):
    env = corridor_task(length)
    s = env.initial_state()
    had_key = 0
    for a in actions:
        s2, r = corridor_step(env, s, a)
        assert 0 <= s2[0] <= length
        assert s2[1] >= had_key  # never drops the key
        if s2[1] and not s[1]:
            assert s2[0] == length
        assert r == (1.0 if (s2 == (0, 1) and s != (0, 1)) else 0.0)
        s, had_key = s2, s2[1]


def test_corridor_feature_map():
    fm = CorridorEnv(4).feature_map()
    assert fm((2, 1)) == (2, 1)
    assert fm.schema.domain_sizes == (5, 2)
    assert ProjectionMap(fm, [1])((2, 1)) == (1,)
    assert ConstantMap()((2, 1)) == ()


def test_gridworld_examples(tiny):
    s = tiny.initial_state()
    assert gridworld_step(tiny, s, NOOP) == (GridState(1, 1, 0, 1), 0.0, False)
    assert gridworld_step(tiny, s, UP) == (GridState(0, 1, 0, 1), -1.0, True)
    assert gridworld_step(tiny, GridState(1, 3, 1, 4), DOWN) == (GridState(2, 3, 1, 5), 1.0, True)


def test_gridworld_key_and_door(tiny):
    s = tiny.initial_state()
    s, r, done = gridworld_step(tiny, s, GRID_RIGHT)
    s, r, done = gridworld_step(tiny, s, GRID_RIGHT)
    assert s.has_key == 1 and r == 0.0 and not done
    # door without key is walkable and pays nothing
    s0 = GridState(2, 2, 0, 0)
    s1, r, done = gridworld_step(tiny, s0, GRID_RIGHT)
    assert (s1.row, s1.col) == (2, 3) and r == 0.0 and not done


def test_gridworld_step_cap(tiny):
    s = GridState(1, 1, 0, 9)
    assert gridworld_step(tiny, s, NOOP)[2]
    with pytest.raises(ValueError):
        tiny.step(s, 5)


def test_render_shows_agent_and_key(tiny):
    s = tiny.initial_state()
    img = tiny.render(s)
    assert img.shape == (20, 20, 3)
    moved = tiny.render(GridState(1, 2, 0, 3))
    assert not np.array_equal(img, moved)
    assert np.array_equal(moved, tiny.render(GridState(1, 2, 0, 7)))  # step counter not drawn
    assert not np.array_equal(tiny.render(GridState(1, 2, 1, 3)), moved)


def test_cell_map_sees_position_and_key():
    env = GridworldEnv(load_map("small"))
    fm = env.cell_map(8)
    a = fm(env.initial_state())
    assert len(a) == env.layout.height * env.layout.width
    b = fm(env.step(env.initial_state(), GRID_RIGHT).state)
    assert a != b
    r, c = env.layout.start
    assert fm(GridState(r, c, 1, 0)) != fm(GridState(r, c, 0, 0))


def test_bundled_maps_load():
    for name in ("small", "large"):
        lay = load_map(name)
        assert lay.start not in lay.walls and lay.key not in lay.walls and lay.door not in lay.walls


def test_layout_errors():
    with pytest.raises(ValueError):
        GridLayout.parse("")
    with pytest.raises(ValueError):
        GridLayout.parse("#S.#\n#..#")
    with pytest.raises(ValueError):
        GridLayout.parse("SKDx")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=30))
def test_gridworld_determinism(actions):
    env = GridworldEnv(load_map("small"))
    runs = []
    for _ in range(2):
        s = env.initial_state()
        trace = []
        for a in actions:
            t = env.step(s, a)
            trace.append((t, env.render(t.state).tobytes()))
            if t.terminal:
                break
            s = t.state
        runs.append(trace)
    assert runs[0] == runs[1]


def test_goal_wrapper_pays_on_entry():
    env = GoalTaskWrapper(CorridorEnv(1), lambda s: s[1] == 1)
    t = env.step((0, 0), RIGHT)
    assert t.reward == 1.0 and t.terminal
    t2 = env.step(t.state, LEFT)
    assert t2.state == t.state and t2.reward == 0.0
    assert env.successor((0, 0), RIGHT) == (1, 1)
    assert env.reward((0, 0), RIGHT) == 1.0
