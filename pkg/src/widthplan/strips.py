"""Grounded STRIPS tasks: text format, single-goal splitting, and the env adapter.

Task files are line based, ``#`` starts a comment::

    atoms: at_0 at_1 has_key
    action: right_0 pre: at_0 add: at_1 del: at_0
    init: at_0
    goal: has_key

A state is a tuple of 0/1 flags, one per atom, and doubles as its own
feature vector.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .novelty import FeatureSchema
from .simulator import DeterministicEnv, FunctionFeatureMap, GoalTaskWrapper, Transition


class TaskError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class StripsAction:
    name: str
    pre: frozenset
    add: frozenset
    delete: frozenset


@dataclass(frozen=True)
class GroundedTask:
    atoms: tuple
    actions: tuple
    init: frozenset
    goal: tuple  # atom indices in declaration order
    name: str = field(default="", compare=False)

    def __post_init__(self):
        n = len(self.atoms)
        if len(set(self.atoms)) != n:
            raise TaskError("duplicate atom names")
        refs = [self.init, self.goal] + [a.pre | a.add | a.delete for a in self.actions]
        for r in refs:
            if any(not 0 <= i < n for i in r):
                raise TaskError("atom index out of range")
        for a in self.actions:
            if a.add & a.delete:
                raise TaskError(f"action {a.name!r} adds and deletes {self._names(a.add & a.delete)}")

    def _names(self, idx) -> list:
        return [self.atoms[i] for i in sorted(idx)]

    def initial_state(self) -> tuple:
        return tuple(1 if i in self.init else 0 for i in range(len(self.atoms)))

    def goal_satisfied(self, state) -> bool:
        return all(state[g] for g in self.goal)


def strips_successor(task: GroundedTask, state: tuple, action: int) -> tuple | None:
    """``(state - del) | add`` when the preconditions hold, else None."""
    a = task.actions[action]
    if not all(state[i] for i in a.pre):
        return None
    nxt = list(state)
    for i in a.delete:
        nxt[i] = 0
    for i in a.add:
        nxt[i] = 1
    return tuple(nxt)


def split_single_goal(task: GroundedTask) -> list[GroundedTask]:
    out = []
    for k, g in enumerate(task.goal):
        name = f"{task.name}#g{k}" if task.name else f"g{k}"
        out.append(replace(task, goal=(g,), name=name))
    return out


# ---------------------------------------------------------------- text format

_SECTION = re.compile(r"^(atoms|action|init|goal)\s*:\s*(.*)$")
_ACTION = re.compile(r"^(\S+)\s+pre\s*:(.*?)\badd\s*:(.*?)\bdel\s*:(.*)$")


def parse_task(text: str, name: str = "") -> GroundedTask:
    atoms: list[str] | None = None
    index: dict[str, int] = {}
    raw_actions: list[tuple[int, str, list, list, list]] = []
    init = goal = None

    def resolve(names: list, lineno: int, what: str) -> list:
        out = []
        for a in names:
            if a not in index:
                raise TaskError(f"unknown atom {a!r} in {what}", lineno)
            out.append(index[a])
        return out

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION.match(line)
        if m is None:
            raise TaskError(f"cannot parse {line!r}", lineno)
        key, rest = m.groups()
        if key == "atoms":
            if atoms is not None:
                raise TaskError("atoms declared twice", lineno)
            atoms = rest.split()
            for i, a in enumerate(atoms):
                if a in index:
                    raise TaskError(f"duplicate atom {a!r}", lineno)
                index[a] = i
            continue
        if atoms is None:
            raise TaskError("atoms must be declared first", lineno)
        if key == "action":
            am = _ACTION.match(rest)
            if am is None:
                raise TaskError("expected 'action: NAME pre: ... add: ... del: ...'", lineno)
            aname, pre, add, dele = am.groups()
            raw_actions.append((lineno, aname, pre.split(), add.split(), dele.split()))
        elif key == "init":
            if init is not None:
                raise TaskError("init declared twice", lineno)
            init = resolve(rest.split(), lineno, "init")
        elif key == "goal":
            if goal is not None:
                raise TaskError("goal declared twice", lineno)
            goal = resolve(rest.split(), lineno, "goal")
            if len(set(goal)) != len(goal):
                raise TaskError("duplicate goal atom", lineno)

    if atoms is None:
        raise TaskError("no atoms declared")
    actions = []
    seen_names = set()
    for lineno, aname, pre, add, dele in raw_actions:
        if aname in seen_names:
            raise TaskError(f"duplicate action {aname!r}", lineno)
        seen_names.add(aname)
        a = StripsAction(
            aname,
            frozenset(resolve(pre, lineno, "pre")),
            frozenset(resolve(add, lineno, "add")),
            frozenset(resolve(dele, lineno, "del")),
        )
        if a.add & a.delete:
            raise TaskError(f"action {aname!r} adds and deletes the same atom", lineno)
        actions.append(a)
    return GroundedTask(tuple(atoms), tuple(actions), frozenset(init or ()), tuple(goal or ()), name)


def serialize_task(task: GroundedTask) -> str:
    names = task.atoms

    def fmt(idx) -> str:
        return " ".join(names[i] for i in sorted(idx))

    lines = ["atoms: " + " ".join(names)]
    for a in task.actions:
        lines.append(f"action: {a.name} pre: {fmt(a.pre)} add: {fmt(a.add)} del: {fmt(a.delete)}")
    lines.append("init: " + fmt(task.init))
    lines.append("goal: " + " ".join(names[g] for g in task.goal))
    return "\n".join(line.rstrip() for line in lines) + "\n"


def load_task(path: str | Path) -> GroundedTask:
    p = Path(path)
    return parse_task(p.read_text(encoding="utf-8"), name=p.stem)


# ---------------------------------------------------------------- env adapter


class StripsEnv(DeterministicEnv):
    """A grounded task as a deterministic env; inapplicable actions yield None."""

    def __init__(self, task: GroundedTask):
        self.task = task
        self.action_count = len(task.actions)
        self.action_names = tuple(a.name for a in task.actions)

    def initial_state(self) -> tuple:
        return self.task.initial_state()

    def step(self, state, action: int) -> Transition | None:
        nxt = strips_successor(self.task, state, action)
        if nxt is None:
            return None
        return Transition(nxt, 0.0, False)


def strips_env(task: GroundedTask) -> GoalTaskWrapper:
    return GoalTaskWrapper(StripsEnv(task), task.goal_satisfied)


def atom_feature_map(task: GroundedTask) -> FunctionFeatureMap:
    return FunctionFeatureMap(lambda s: s, FeatureSchema(task.atoms, (2,) * len(task.atoms)), true_atoms_only=True)


# ---------------------------------------------------------------- generators


def corridor_strips(length: int, name: str = "") -> GroundedTask:
    """Corridor with key at the far end as a STRIPS task (L + 2 atoms)."""
    atoms = [f"at_{i}" for i in range(length + 1)] + ["has_key"]
    key = length + 1
    actions = []
    for i in range(length):
        add = {i + 1} | ({key} if i + 1 == length else set())
        actions.append(StripsAction(f"right_{i}", frozenset({i}), frozenset(add), frozenset({i})))
        actions.append(StripsAction(f"left_{i + 1}", frozenset({i + 1}), frozenset({i}), frozenset({i + 1})))
    return GroundedTask(tuple(atoms), tuple(actions), frozenset({0}), (0, key), name or f"corridor{length}")


def corridor_door_strips(length: int, name: str = "") -> GroundedTask:
    """Corridor whose single goal ``door_open`` needs the key back at position 0.

    Unlike :func:`corridor_strips` the goal survives single-goal splitting as a
    width-2 instance.
    """
    base = corridor_strips(length)
    atoms = base.atoms + ("door_open",)
    door = len(atoms) - 1
    key = length + 1
    open_door = StripsAction("open_door", frozenset({0, key}), frozenset({door}), frozenset())
    return GroundedTask(atoms, base.actions + (open_door,), base.init, (door,), name or f"corridor_door{length}")
