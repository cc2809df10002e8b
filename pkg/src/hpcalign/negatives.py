"""Rule-based hard negatives following the four-way failure taxonomy.

Segments are lists of ``(state_tokens, action, subgoal_id)`` steps. Every
corruption changes the pooled signature the encoders see (token frequencies
weighted by position), so no negative can collapse onto its positive.
"""

from __future__ import annotations

from typing import Sequence

from .core import Rng

CLASSES = ("ordering", "grounding", "termination", "looping")

Step = tuple[tuple[int, ...], int, int]


class CorruptionError(ValueError):
    """The segment is too short or too uniform to corrupt."""


def _flat(steps: Sequence[Step]) -> list[int]:
    out: list[int] = []
    for obs, act, _ in steps:
        out.extend(obs)
        out.append(act)
    return out


def pool_weights(n: int) -> list[float]:
    """Position weights of the encoders' pooled mean: ``(1 + r_i) / n``.

    ``r_i`` ramps linearly from -1/2 to 1/2, so weights sum to one, a
    repeated token pools to its own row, and order is visible.
    """
    if n < 2:
        return [1.0] * n
    return [(1.0 + i / (n - 1) - 0.5) / n for i in range(n)]


def signature(tokens) -> dict:
    """Total pooling weight per token; equal signatures encode identically."""
    out: dict = {}
    for tok, w in zip(tokens, pool_weights(len(tokens))):
        out[tok] = out.get(tok, 0.0) + w
    return out


def _distinct(a: dict, b: dict, tol: float = 1e-9) -> bool:
    if a.keys() != b.keys():
        return True
    return any(abs(a[k] - b[k]) > tol for k in a)


def _ordering(steps, gen, sem):
    acts = [a for _, a, _ in steps]
    manip = [i for i, a in enumerate(acts) if a in sem.manipulation]
    pool = manip if len({acts[i] for i in manip}) >= 2 else list(range(len(steps)))
    pairs = [(i, j) for i, j in zip(pool, pool[1:]) if acts[i] != acts[j]]
    if not pairs:
        pairs = [(i, j) for i in pool for j in pool if i < j and acts[i] != acts[j]]
    if not pairs:
        return None
    i, j = pairs[int(gen.integers(len(pairs)))]
    out = list(steps)
    out[i] = (steps[i][0], acts[j], steps[i][2])
    out[j] = (steps[j][0], acts[i], steps[j][2])
    return out


def _grounding(steps, gen, sem):
    item_pos = [i for i, (_, a, _) in enumerate(steps) if a in sem.item_swap]
    if item_pos:
        i = item_pos[int(gen.integers(len(item_pos)))]
        out = list(steps)
        out[i] = (steps[i][0], sem.item_swap[steps[i][1]], steps[i][2])
        return out
    act_pos = [i for i, (_, a, _) in enumerate(steps) if a in sem.object_swap]
    if act_pos:
        i = act_pos[int(gen.integers(len(act_pos)))]
        out = list(steps)
        out[i] = (steps[i][0], sem.object_swap[steps[i][1]], steps[i][2])
        return out
    obs_pos = [(i, k) for i, (obs, _, _) in enumerate(steps) for k, tok in enumerate(obs) if tok in sem.object_swap]
    if not obs_pos:
        return None
    i, k = obs_pos[int(gen.integers(len(obs_pos)))]
    obs = list(steps[i][0])
    obs[k] = sem.object_swap[obs[k]]
    out = list(steps)
    out[i] = (tuple(obs), steps[i][1], steps[i][2])
    return out


def _termination(steps, gen, sem):
    last = steps[-1][2]
    cut = len(steps)
    while cut > 0 and steps[cut - 1][2] == last:
        cut -= 1
    if cut == 0:
        cut = len(steps) - 1
    return list(steps[:cut]) if cut >= 1 else None


def _looping(steps, gen, sem):
    manip = [i for i, (_, a, _) in enumerate(steps) if a in sem.manipulation]
    pool = manip or list(range(len(steps)))
    i = pool[int(gen.integers(len(pool)))]
    return list(steps[: i + 1]) + [steps[i]] + list(steps[i + 1 :])


_FNS = {"ordering": _ordering, "grounding": _grounding, "termination": _termination, "looping": _looping}


class TokenSemantics:
    """Which tokens are manipulations and which same-category substitutes exist."""

    def __init__(self, manipulation, item_swap, object_swap):
        self.manipulation = frozenset(manipulation)
        self.item_swap = dict(item_swap)
        self.object_swap = dict(object_swap)

    @classmethod
    def from_world(cls, world) -> "TokenSemantics":
        v = world.vocab
        manip = {i for i in v.action_ids if not v.name(i).startswith("MOVE") and v.name(i) != "NOOP"}

        def sub(name):
            for members in world.categories.values():
                if name in members:
                    others = [m for m in members if m != name]
                    return others[0] if others else None
            return None

        item_swap, object_swap = {}, {}
        for it in v.items:
            s = sub(it)
            if s:
                for verb in ("PICK", "PLACE"):
                    item_swap[v[f"{verb}_{it}"]] = v[f"{verb}_{s}"]
        for f in (*v.storage, *v.surfaces):
            s = sub(f)
            if not s:
                continue
            if f in v.storage and s in v.storage:
                for verb in ("OPEN", "CLOSE"):
                    object_swap[v[f"{verb}_{f}"]] = v[f"{verb}_{s}"]
            for d in ("N", "NE", "E", "SE", "S", "SW", "W", "NW", "HERE"):
                object_swap[v[f"{f}@{d}"]] = v[f"{s}@{d}"]
        return cls(manip, item_swap, object_swap)


def _default_semantics() -> TokenSemantics:
    from .gridhome import default_world

    global _SEM
    try:
        return _SEM
    except NameError:
        _SEM = TokenSemantics.from_world(default_world())
        return _SEM


def corrupt(steps: Sequence[Step], cls: str, rng: Rng, sem: TokenSemantics | None = None) -> list[Step]:
    """Apply one failure class; falls back through the other classes if it cannot."""
    if len(steps) < 2:
        raise CorruptionError("a single-step segment cannot be corrupted")
    sem = sem or _default_semantics()
    gen = rng.generator()
    base = signature(_flat(steps))
    order = [cls] + [c for c in CLASSES if c != cls]
    for c in order:
        out = _FNS[c](list(steps), gen, sem)
        if out and _distinct(signature(_flat(out)), base):
            return out
    raise CorruptionError("no failure class changes this segment")


def corrupt_many(steps: Sequence[Step], k: int, rng: Rng, sem: TokenSemantics | None = None):
    """``k`` negatives, each from a class drawn uniformly; returns (classes, segments)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gen = rng.split(0).generator()
    classes = [CLASSES[int(i)] for i in gen.integers(len(CLASSES), size=k)]
    return classes, [corrupt(steps, c, rng.split(1, i), sem) for i, c in enumerate(classes)]
