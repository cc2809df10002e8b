"""GridHome: a deterministic household gridworld with oracle plans.

Furniture occupies a cell and is operated from its access cell. Items live
inside furniture or in the agent's hand. Each task carries a scripted
subgoal plan; the oracle follows the plan stage by stage, planning over
abstract manipulation states and navigating by BFS, so it also recovers
from off-plan states. Invalid actions are no-ops flagged as errors.
"""

from __future__ import annotations

import functools
from collections import deque
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable

import numpy as np
import yaml

from .core import Rng
from .trajectory import EpisodeResult, StepRecord, Trajectory

MOVES = {"N": (-1, 0), "E": (0, 1), "S": (1, 0), "W": (0, -1)}
DIRECTIONS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW", "HERE")
TAXONOMY = ("ordering", "grounding", "termination", "looping")
LABEL_MODES = ("oracle", "constraint")


class UnknownTaskError(KeyError):
    def __str__(self):
        return f"unknown task {self.args[0]!r}" if self.args else "unknown task"


class UnreachableTargetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Task definitions and vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Subgoal:
    name: str
    type: str  # goto | open | close | pick | place
    target: str
    at: str | None = None
    words: tuple[str, ...] = ()


@dataclass
class SubgoalPlan:
    subgoals: tuple[Subgoal, ...]
    current_index: int = 0

    def __post_init__(self):
        if not self.subgoals:
            raise ValueError("a plan needs at least one subgoal")
        if not 0 <= self.current_index <= len(self.subgoals):
            raise ValueError("current_index out of range")

    def __len__(self) -> int:
        return len(self.subgoals)

    @property
    def done(self) -> bool:
        return self.current_index >= len(self.subgoals)

    @property
    def current(self) -> Subgoal:
        return self.subgoals[min(self.current_index, len(self.subgoals) - 1)]


@dataclass(frozen=True)
class Furniture:
    name: str
    cell: tuple[int, int]
    access: tuple[int, int]
    closable: bool
    starts_closed: bool


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    prompt: tuple[str, ...]
    agent: tuple[int, int]
    furniture: tuple[Furniture, ...]
    items: tuple[tuple[str, str], ...]
    distractors: tuple[str, ...]
    clutter: int
    plan: tuple[Subgoal, ...]
    max_steps: int = 60
    grid: int = 8

    def furn(self, name: str) -> Furniture:
        for f in self.furniture:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def furniture_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.furniture)


class Vocab:
    """Token ids for actions, observations and words; id 0 is PAD."""

    PAD = 0

    def __init__(self, items, storage, surfaces, words):
        names = ["<pad>"]
        names += [f"MOVE_{d}" for d in MOVES] + ["NOOP"]
        for it in items:
            names += [f"PICK_{it}", f"PLACE_{it}"]
        for f in storage:
            names += [f"OPEN_{f}", f"CLOSE_{f}"]
        self.n_actions_end = len(names)
        for f in (*storage, *surfaces):
            names += [f"{f}@{d}" for d in DIRECTIONS]
        for f in storage:
            names += [f"{f}_open", f"{f}_closed"]
        names += ["hold_none"] + [f"hold_{it}" for it in items]
        names += [f"w:{w}" for w in words]
        self.names = names
        self.index = {n: i for i, n in enumerate(names)}
        self.items = tuple(items)
        self.storage = tuple(storage)
        self.surfaces = tuple(surfaces)

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.index[name]

    def name(self, tok: int) -> str:
        return self.names[tok]

    @property
    def action_ids(self) -> list[int]:
        return list(range(1, self.n_actions_end))

    def is_action(self, tok: int) -> bool:
        return 1 <= tok < self.n_actions_end

    def words(self, words) -> tuple[int, ...]:
        return tuple(self.index[f"w:{w}"] for w in words)


@dataclass(frozen=True)
class World:
    vocab: Vocab
    tasks: dict
    categories: dict


def _parse_task(tid: str, raw: dict, grid: int, max_steps: int, closable: set) -> TaskSpec:
    furn = tuple(
        Furniture(
            name,
            tuple(spec["cell"]),
            tuple(spec["access"]),
            name in closable,
            bool(spec.get("closed", False)),
        )
        for name, spec in raw["furniture"].items()
    )
    plan = tuple(
        Subgoal(s["name"], s["type"], s["target"], s.get("at"), tuple(s.get("words", ())))
        for s in raw["plan"]
    )
    return TaskSpec(
        task_id=tid,
        prompt=tuple(raw["prompt"]),
        agent=tuple(raw["agent"]),
        furniture=furn,
        items=tuple((k, v) for k, v in (raw.get("items") or {}).items()),
        distractors=tuple(raw.get("distractors") or ()),
        clutter=int(raw.get("clutter", 0)),
        plan=plan,
        max_steps=int(raw.get("max_steps", max_steps)),
        grid=grid,
    )


def load_world(path=None) -> World:
    """Parse a task file (defaults to the bundled scenes)."""
    if path is None:
        text = resources.files("hpcalign").joinpath("data/tasks.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = yaml.safe_load(text)
    cats = {k: tuple(v) for k, v in raw["categories"].items()}
    storage = cats["storage"]
    surfaces = cats["surface"]
    items = tuple(i for k, v in cats.items() if k not in ("storage", "surface") for i in v)
    words: list[str] = []
    for t in raw["tasks"].values():
        for w in [*t["prompt"], *(w for s in t["plan"] for w in s.get("words", ()))]:
            if w not in words:
                words.append(w)
    vocab = Vocab(items, storage, surfaces, words)
    tasks = {
        tid: _parse_task(tid, t, int(raw.get("grid", 8)), int(raw.get("max_steps", 60)), set(storage))
        for tid, t in raw["tasks"].items()
    }
    return World(vocab, tasks, cats)


@functools.lru_cache(maxsize=1)
def default_world() -> World:
    return load_world()


def get_task(task_id: str, world: World | None = None) -> TaskSpec:
    world = world or default_world()
    try:
        return world.tasks[task_id]
    except KeyError:
        raise UnknownTaskError(task_id) from None


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridState:
    task: TaskSpec = field(repr=False, compare=False)
    agent: tuple[int, int]
    doors: tuple[tuple[str, bool], ...]  # (furniture, is_open)
    item_loc: tuple[tuple[str, str], ...]  # (item, furniture or "held")
    washed: frozenset = frozenset()
    dried: frozenset = frozenset()
    blocked: frozenset = frozenset()
    stage: int = 0
    t: int = 0

    @property
    def held(self) -> str | None:
        for it, loc in self.item_loc:
            if loc == "held":
                return it
        return None

    def is_open(self, f: str) -> bool:
        return dict(self.doors).get(f, True)

    def loc(self, item: str) -> str | None:
        return dict(self.item_loc).get(item)

    @property
    def goal_reached(self) -> bool:
        return self.stage >= len(self.task.plan)


def _free_cells(task: TaskSpec, blocked) -> set:
    furn = {f.cell for f in task.furniture}
    return {(r, c) for r in range(task.grid) for c in range(task.grid)} - furn - set(blocked)


def _reachable(task: TaskSpec, blocked, start) -> set:
    free = _free_cells(task, blocked)
    seen = {start}
    q = deque([start])
    while q:
        r, c = q.popleft()
        for dr, dc in MOVES.values():
            nxt = (r + dr, c + dc)
            if nxt in free and nxt not in seen:
                seen.add(nxt)
                q.append(nxt)
    return seen


def reset(task: TaskSpec, seed: int) -> GridState:
    """Initial state; the seed only moves distractor items and floor clutter."""
    gen = Rng(seed).split(0xD15).generator()
    holders = sorted(task.furniture_names)
    item_loc = dict(task.items)
    for d in task.distractors:
        item_loc[d] = holders[int(gen.integers(len(holders)))]
    protected = {task.agent} | {f.access for f in task.furniture}
    candidates = sorted(_free_cells(task, ()) - protected)
    blocked: frozenset = frozenset()
    for _ in range(100):
        picks = gen.choice(len(candidates), size=task.clutter, replace=False) if task.clutter else []
        blocked = frozenset(candidates[i] for i in picks)
        reach = _reachable(task, blocked, task.agent)
        if all(f.access in reach for f in task.furniture):
            break
    else:  # pragma: no cover - 100 rejections on an 8x8 grid do not happen
        blocked = frozenset()
    doors = tuple((f.name, not f.starts_closed) for f in task.furniture if f.closable)
    state = GridState(task, task.agent, doors, tuple(sorted(item_loc.items())), blocked=blocked)
    return _advance(state)


# ---------------------------------------------------------------------------
# Stage targets and the oracle
# ---------------------------------------------------------------------------


def _effects(sg: Subgoal) -> dict:
    if sg.type == "goto":
        return {("near", sg.target): True}
    if sg.type == "open":
        return {("door", sg.target): True}
    if sg.type == "close":
        return {("door", sg.target): False}
    if sg.type == "pick":
        return {("loc", sg.target): "held"}
    if sg.type == "place":
        eff = {("loc", sg.target): sg.at}
        if sg.at == "sink":
            eff[("washed", sg.target)] = True
        if sg.at == "rack":
            eff[("dried", sg.target)] = True
        return eff
    raise ValueError(f"unknown subgoal type {sg.type!r}")


@functools.lru_cache(maxsize=None)
def stage_targets(plan: tuple[Subgoal, ...]) -> tuple[tuple, ...]:
    """Cumulative completion predicate per stage.

    Stage j requires its own effect plus every persistent effect of earlier
    stages that no later stage overrides. Navigation atoms never persist.
    """
    out = []
    carried: dict = {}
    for sg in plan:
        eff = _effects(sg)
        out.append(tuple(sorted({**carried, **eff}.items(), key=repr)))
        carried = {**carried, **{k: v for k, v in eff.items() if k[0] != "near"}}
    return tuple(out)


def _atom_holds(s: GridState, atom, value) -> bool:
    kind, obj = atom
    if kind == "near":
        return s.agent == s.task.furn(obj).access
    if kind == "door":
        return s.is_open(obj) == value
    if kind == "loc":
        return s.loc(obj) == value
    if kind == "washed":
        return obj in s.washed
    if kind == "dried":
        return obj in s.dried
    raise ValueError(kind)


def predicate_holds(s: GridState, target) -> bool:
    return all(_atom_holds(s, a, v) for a, v in target)


def subgoal_complete(s: GridState, plan: tuple[Subgoal, ...], index: int) -> bool:
    return predicate_holds(s, stage_targets(tuple(plan))[index])


def _advance(s: GridState) -> GridState:
    targets = stage_targets(s.task.plan)
    stage = s.stage
    while stage < len(targets) and predicate_holds(s, targets[stage]):
        stage += 1
    return s if stage == s.stage else replace(s, stage=stage)


def _abstract(s: GridState) -> tuple:
    return (s.doors, s.item_loc, s.washed, s.dried)


def _abstract_actions(task: TaskSpec, ab):
    doors, item_loc, washed, dried = ab
    dmap = dict(doors)
    held = next((i for i, l in item_loc if l == "held"), None)
    for f in task.furniture:
        is_open = dmap.get(f.name, True)
        if f.closable and not is_open:
            yield ("OPEN", f.name, f.name), (tuple((k, True if k == f.name else v) for k, v in doors), item_loc, washed, dried)
        if f.closable and is_open:
            yield ("CLOSE", f.name, f.name), (tuple((k, False if k == f.name else v) for k, v in doors), item_loc, washed, dried)
        if not is_open:
            continue
        if held is None:
            for it, loc in item_loc:
                if loc == f.name:
                    new = tuple((k, "held" if k == it else v) for k, v in item_loc)
                    yield ("PICK", it, f.name), (doors, new, washed, dried)
        else:
            new = tuple((k, f.name if k == held else v) for k, v in item_loc)
            w, d = washed, dried
            if f.name == "sink":
                w = washed | {held}
            if f.name == "rack" and held in washed:
                d = dried | {held}
            yield ("PLACE", held, f.name), (doors, new, w, d)


def _abstract_ok(ab, target) -> bool:
    doors, item_loc, washed, dried = ab
    dmap, lmap = dict(doors), dict(item_loc)
    for (kind, obj), v in target:
        if kind == "door" and dmap.get(obj, True) != v:
            return False
        if kind == "loc" and lmap.get(obj) != v:
            return False
        if kind == "washed" and obj not in washed:
            return False
        if kind == "dried" and obj not in dried:
            return False
    return True


@functools.lru_cache(maxsize=200_000)
def _first_manipulation(task: TaskSpec, ab, target):
    """BFS over manipulation steps; returns the first step or None if done."""
    if _abstract_ok(ab, target):
        return None
    seen = {ab}
    q = deque([(ab, None)])
    while q:
        cur, first = q.popleft()
        for act, nxt in _abstract_actions(task, cur):
            if nxt in seen:
                continue
            f0 = first or act
            if _abstract_ok(nxt, target):
                return f0
            seen.add(nxt)
            q.append((nxt, f0))
    raise UnreachableTargetError(f"{task.task_id}: no manipulation sequence reaches {target}")


@functools.lru_cache(maxsize=4096)
def _distance_map(task: TaskSpec, blocked: frozenset, goal: tuple[int, int]) -> dict:
    free = _free_cells(task, blocked)
    dist = {goal: 0}
    q = deque([goal])
    while q:
        r, c = q.popleft()
        for dr, dc in MOVES.values():
            nxt = (r + dr, c + dc)
            if nxt in free and nxt not in dist:
                dist[nxt] = dist[(r, c)] + 1
                q.append(nxt)
    return dist


def _move_toward(s: GridState, goal: tuple[int, int]) -> str:
    dist = _distance_map(s.task, s.blocked, goal)
    if s.agent not in dist:
        raise UnreachableTargetError(f"{s.task.task_id}: {goal} unreachable from {s.agent}")
    best = None
    for d, (dr, dc) in MOVES.items():
        nxt = (s.agent[0] + dr, s.agent[1] + dc)
        if dist.get(nxt, np.inf) < dist[s.agent] and best is None:
            best = d
    return f"MOVE_{best}"


def oracle_action_name(s: GridState, stage: int) -> str:
    plan = s.task.plan
    if stage >= len(plan):
        return "NOOP"
    target = stage_targets(plan)[stage]
    manip = tuple((a, v) for a, v in target if a[0] != "near")
    step = _first_manipulation(s.task, _abstract(s), manip)
    if step is None:
        near = [a[1] for a, _ in target if a[0] == "near"]
        if not near:
            return "NOOP"
        goal = s.task.furn(near[0]).access
        return "NOOP" if s.agent == goal else _move_toward(s, goal)
    verb, obj, where = step
    access = s.task.furn(where).access
    if s.agent != access:
        return _move_toward(s, access)
    return f"{verb}_{obj}"


def oracle_action(s: GridState, plan: SubgoalPlan | None = None, world: World | None = None) -> int:
    """Oracle token for ``s``; the stage is the plan's index (env stage if no plan)."""
    vocab = (world or default_world()).vocab
    stage = s.stage if plan is None else max(plan.current_index, s.stage)
    return vocab[oracle_action_name(s, stage)]


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def _apply(s: GridState, name: str) -> GridState | None:
    """Successor state, or None when a precondition fails."""
    task = s.task
    if name == "NOOP":
        return s
    verb, _, obj = name.partition("_")
    if verb == "MOVE":
        dr, dc = MOVES[obj]
        nxt = (s.agent[0] + dr, s.agent[1] + dc)
        if not (0 <= nxt[0] < task.grid and 0 <= nxt[1] < task.grid):
            return None
        if nxt in s.blocked or any(f.cell == nxt for f in task.furniture):
            return None
        return replace(s, agent=nxt)
    here = next((f for f in task.furniture if f.access == s.agent), None)
    if here is None:
        return None
    if verb in ("OPEN", "CLOSE"):
        if obj != here.name or not here.closable:
            return None
        want = verb == "OPEN"
        if s.is_open(obj) == want:
            return None
        return replace(s, doors=tuple((k, want if k == obj else v) for k, v in s.doors))
    if not s.is_open(here.name):
        return None
    if verb == "PICK":
        if s.held is not None or s.loc(obj) != here.name:
            return None
        return replace(s, item_loc=tuple((k, "held" if k == obj else v) for k, v in s.item_loc))
    if verb == "PLACE":
        if s.held != obj:
            return None
        washed, dried = s.washed, s.dried
        if here.name == "sink":
            washed = washed | {obj}
        if here.name == "rack" and obj in washed:
            dried = dried | {obj}
        return replace(
            s,
            item_loc=tuple((k, here.name if k == obj else v) for k, v in s.item_loc),
            washed=washed,
            dried=dried,
        )
    return None


def step(s: GridState, a: int, mode: str = "oracle", world: World | None = None):
    """Apply token ``a``; returns ``(next_state, error_flag, done)``.

    ``mode='constraint'`` flags precondition violations only;
    ``mode='oracle'`` also flags any deviation from the oracle action.
    """
    if mode not in LABEL_MODES:
        raise ValueError(f"label mode must be one of {LABEL_MODES}")
    vocab = (world or default_world()).vocab
    name = vocab.name(a)
    nxt = _apply(s, name) if vocab.is_action(a) else None
    violated = nxt is None
    flag = int(violated)
    if mode == "oracle" and not violated:
        flag = int(name != oracle_action_name(s, s.stage))
    nxt = _advance(replace(nxt if nxt is not None else s, t=s.t + 1))
    done = nxt.goal_reached or nxt.t >= s.task.max_steps
    return nxt, flag, done


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


def _direction(frm, to) -> str:
    dr, dc = to[0] - frm[0], to[1] - frm[1]
    if dr == 0 and dc == 0:
        return "HERE"
    ns = "N" if dr < 0 else "S" if dr > 0 else ""
    ew = "E" if dc > 0 else "W" if dc < 0 else ""
    return ns + ew


def observe(s: GridState, world: World | None = None) -> tuple[int, ...]:
    """Observation tokens: where each furniture is, door states, what is held."""
    vocab = (world or default_world()).vocab
    toks = [vocab[f"{f.name}@{_direction(s.agent, f.access)}"] for f in s.task.furniture]
    toks += [vocab[f"{f}_{'open' if o else 'closed'}"] for f, o in s.doors]
    toks.append(vocab[f"hold_{s.held or 'none'}"])
    return tuple(toks)


# ---------------------------------------------------------------------------
# Policies, noise injection and rollouts
# ---------------------------------------------------------------------------


@dataclass
class StepContext:
    stage: int
    t: int
    rng: Rng
    last_error: int = 0
    history: tuple[int, ...] = ()
    plan_index: int | None = None

    @property
    def effective_stage(self) -> int:
        return self.stage if self.plan_index is None else max(self.stage, self.plan_index)


Policy = Callable[[GridState, StepContext], int]


def oracle_policy(world: World | None = None) -> Policy:
    def act(s: GridState, ctx: StepContext) -> int:
        return (world or default_world()).vocab[oracle_action_name(s, ctx.effective_stage)]

    return act


def noop_policy(world: World | None = None) -> Policy:
    def act(s: GridState, ctx: StepContext) -> int:
        return (world or default_world()).vocab["NOOP"]

    return act


_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}


def _same_category(world: World, name: str) -> str | None:
    for members in world.categories.values():
        if name in members:
            others = [m for m in members if m != name]
            return others[0] if others else None
    return None


def corrupt_action(s: GridState, oracle: str, cls: str, history, world: World | None = None) -> str:
    """Action name realizing one failure class at ``s``; never equals ``oracle``."""
    world = world or default_world()
    vocab = world.vocab
    manip = []  # (stage index, action name) for every manipulation subgoal
    for j, sg in enumerate(s.task.plan):
        if sg.type != "goto":
            verb_name = {"open": "OPEN", "close": "CLOSE", "pick": "PICK", "place": "PLACE"}[sg.type]
            manip.append((j, f"{verb_name}_{sg.target}"))
    verb, _, obj = oracle.partition("_")
    cand: str | None = None
    if cls == "ordering":
        later = [m for j, m in manip if j > s.stage and m != oracle]
        earlier = [m for j, m in manip if j <= s.stage and m != oracle]
        cand = later[0] if later else (earlier[-1] if earlier else None)
    elif cls == "grounding":
        if verb in ("PICK", "PLACE", "OPEN", "CLOSE"):
            sub = _same_category(world, obj)
            cand = f"{verb}_{sub}" if sub else None
        else:
            others = [f for f in s.task.furniture if f.access != s.agent]
            for f in others:
                try:
                    m = _move_toward(s, f.access)
                except UnreachableTargetError:
                    continue
                if m != oracle:
                    cand = m
                    break
    elif cls == "termination":
        cand = "NOOP"
    elif cls == "looping":
        for tok in reversed(history):
            nm = vocab.name(tok)
            if not nm.startswith("MOVE") and nm != "NOOP" and nm != oracle:
                cand = nm
                break
        if cand is None and verb == "MOVE":
            cand = f"MOVE_{_OPPOSITE[obj]}"
    else:
        raise ValueError(f"unknown failure class {cls!r}")
    if cand is None or cand == oracle:
        cand = "NOOP" if oracle != "NOOP" else "MOVE_N"
    return cand


@dataclass
class NoisyPolicy:
    """Wraps a base policy; with probability ``rate`` proposes a failure-class action.

    ``persistence`` (default 0) is the corruption probability right after a
    step whose executed action was flagged, modelling context-driven error
    cascades; 0 means every step is corrupted independently at ``rate``.
    """

    base: Policy
    rate: float
    mix: dict = field(default_factory=lambda: {c: 0.25 for c in TAXONOMY})
    persistence: float | None = None
    world: World | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("rate must be in [0, 1]")
        total = sum(self.mix.values())
        self._classes = [c for c in TAXONOMY if self.mix.get(c, 0) > 0]
        self._probs = np.array([self.mix[c] / total for c in self._classes])

    def propose(self, s: GridState, ctx: StepContext) -> tuple[int, str | None]:
        vocab = (self.world or default_world()).vocab
        base = self.base(s, ctx)
        p = self.rate
        if self.persistence is not None and ctx.last_error:
            p = self.persistence
        gen = ctx.rng.split(0x5EED).generator()
        if gen.random() >= p:
            return base, None
        cls = self._classes[int(gen.choice(len(self._classes), p=self._probs))]
        name = corrupt_action(s, vocab.name(base), cls, ctx.history, self.world)
        return vocab[name], cls

    def __call__(self, s: GridState, ctx: StepContext) -> int:
        return self.propose(s, ctx)[0]

    def logits(self, s: GridState, ctx: StepContext) -> np.ndarray:
        """Action logits: base action second, a corruption (if drawn) on top."""
        vocab = (self.world or default_world()).vocab
        gen = ctx.rng.split(0x1061).generator()
        out = gen.normal(0.0, 0.3, size=len(vocab)) - 2.0
        out[[i for i in range(len(vocab)) if not vocab.is_action(i)]] = -np.inf
        base = self.base(s, ctx)
        out[base] = 2.0
        act, cls = self.propose(s, ctx)
        if cls is not None:
            out[act] = 3.0
        return out


def inject_noise(base: Policy, rate: float, mix: dict | None = None, rng: Rng | None = None,
                 persistence: float | None = None, world: World | None = None) -> NoisyPolicy:
    """Wrap ``base`` with taxonomy-class corruptions at ``rate``.

    Draws come from each step's own stream, so ``rng`` is only accepted for
    interface symmetry with other seeded operations.
    """
    del rng
    return NoisyPolicy(base, rate, dict(mix) if mix else {c: 0.25 for c in TAXONOMY}, persistence, world)


def rollout(policy: Policy, task: TaskSpec, seed: int, max_steps: int | None = None,
            mode: str = "oracle", episode_id: str | None = None, world: World | None = None) -> EpisodeResult:
    """Run ``policy`` from ``reset(task, seed)`` until goal or budget."""
    world = world or default_world()
    budget = task.max_steps if max_steps is None else max_steps
    s = reset(replace(task, max_steps=budget) if budget != task.max_steps else task, seed)
    ep_rng = Rng(seed).split(0xE915)
    steps, history, last_err = [], [], 0
    perturbed = 0
    for t in range(budget):
        ctx = StepContext(stage=s.stage, t=t, rng=ep_rng.split(t), last_error=last_err, history=tuple(history))
        if isinstance(policy, NoisyPolicy):
            a, cls = policy.propose(s, ctx)
            perturbed += cls is not None
        else:
            a = policy(s, ctx)
        obs = observe(s, world)
        nxt, flag, done = step(s, a, mode, world)
        steps.append(StepRecord(t, obs, a, min(s.stage, len(task.plan) - 1), flag))
        history.append(a)
        last_err = flag
        s = nxt
        if done:
            break
    traj = Trajectory(
        episode_id or f"{task.task_id}-{seed}",
        task.task_id,
        tuple(steps),
        world.vocab.words(task.prompt),
        mode,
    )
    return EpisodeResult(traj, s.goal_reached, s, {"perturbed": perturbed})
