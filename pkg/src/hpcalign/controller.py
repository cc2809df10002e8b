"""Three-tier inference controller.

Tier 1 gates the Top-K logits by how well each candidate's window embedding
matches the current subgoal, relaxing the threshold on failure. Tier 2
advances the subgoal when the recent window drifts toward the next one.
Tier 3 rescores the candidates by negated Sinkhorn divergence between the
trajectory-so-far (plus the candidate) and the prompt's token measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Rng, cosine_sim, normalize
from .gridhome import (
    GridState,
    StepContext,
    SubgoalPlan,
    World,
    default_world,
    get_task,
    observe,
    reset,
    step,
    subgoal_complete,
)
from .hpcc import HpccState, encode_prompt_tokens, encode_tokens, pad_tokens
from .ot import DiscreteMeasure, cost_matrix, ot_eps, sinkhorn, _entropic_value
from .trajectory import EpisodeResult, StepRecord, Trajectory

STAY, ADVANCE = "stay", "advance"


@dataclass(frozen=True)
class ControllerConfig:
    top_k: int = 3
    action_threshold: float = 0.9  # tuned on held-out seeds, see ledger
    relax_factor: float = 0.8
    max_retries: int = 3
    subgoal_low: float = 0.4
    subgoal_margin: float = 0.1
    traj_threshold: float = -0.5
    window_len: int = 1
    rescore_order: str = "score"  # or "lexicographic": logit first, score breaks ties
    gating: bool = True
    switching: bool = True
    rescoring: bool = True
    eps: float = 0.05
    buffer_limit: int = 16

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not 0.0 < self.relax_factor < 1.0:
            raise ValueError("relax_factor must be in (0, 1)")
        if self.window_len < 1 or self.buffer_limit < 1:
            raise ValueError("window_len and buffer_limit must be >= 1")
        if self.rescore_order not in ("score", "lexicographic"):
            raise ValueError("rescore_order must be 'score' or 'lexicographic'")

    @classmethod
    def fallback_only(cls, **kw) -> "ControllerConfig":
        """Ablation: every step takes the highest-logit action."""
        return cls(gating=False, switching=False, rescoring=False, **kw)


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------


def decompose_task(task_id: str, world: World | None = None) -> SubgoalPlan:
    """Scripted decomposition: the task's authored subgoal list."""
    return SubgoalPlan(get_task(task_id, world).plan, 0)


# ---------------------------------------------------------------------------
# Tier 1: action gating
# ---------------------------------------------------------------------------


def top_k(logits: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest finite logits; ties go to the lower id."""
    logits = np.asarray(logits, dtype=float)
    ids = np.arange(len(logits))
    order = np.lexsort((ids, -logits))
    order = [int(i) for i in order if np.isfinite(logits[i])]
    return order[:k]


@dataclass
class Selection:
    action: int
    candidates: list[int]
    similarities: dict[int, float]
    threshold: float | None  # the threshold that accepted, None on fallback
    retries: int
    fallback: bool


def select_action(cfg: ControllerConfig, logits: np.ndarray, subgoal_emb: np.ndarray,
                  candidate_embs: Mapping[int, np.ndarray] | Callable[[int], np.ndarray]) -> Selection:
    """Accept the first Top-K candidate (logit order) whose window matches the subgoal.

    The threshold is relaxed ``max_retries`` times; if nothing passes the
    highest-logit action is returned.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 1 or not np.any(np.isfinite(logits)) or np.any(np.isnan(logits)):
        raise ValueError("logits must be a 1-D array with at least one finite entry")
    cands = top_k(logits, cfg.top_k)
    emb = candidate_embs if callable(candidate_embs) else candidate_embs.__getitem__
    sims = {a: cosine_sim(emb(a), subgoal_emb) for a in cands} if len(cands) > 1 else {}
    tau = cfg.action_threshold
    if len(cands) > 1:
        for r in range(cfg.max_retries + 1):
            for a in cands:
                if sims[a] > tau:
                    return Selection(a, cands, sims, tau, r, False)
            tau *= cfg.relax_factor
    return Selection(cands[0], cands, sims, None, cfg.max_retries, len(cands) > 1)


# ---------------------------------------------------------------------------
# Tier 2: subgoal switching
# ---------------------------------------------------------------------------


def maybe_switch_subgoal(window_emb, cur_emb, next_emb, cfg: ControllerConfig) -> str:
    """Advance iff the window left the current subgoal and sits clearly nearer the next."""
    if next_emb is None:
        return STAY
    s_cur = cosine_sim(window_emb, cur_emb)
    s_next = cosine_sim(window_emb, next_emb)
    return ADVANCE if s_cur < cfg.subgoal_low and s_next > s_cur + cfg.subgoal_margin else STAY


# ---------------------------------------------------------------------------
# Tier 3: trajectory rescoring
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryBuffer:
    embeddings: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def append(self, emb: np.ndarray, rec: StepRecord) -> None:
        self.embeddings.append(np.asarray(emb, dtype=float))
        self.steps.append(rec)

    def __len__(self) -> int:
        return len(self.steps)


class PromptMeasure:
    """Prompt-token measure with its self-transport term cached."""

    def __init__(self, measure: DiscreteMeasure, eps: float):
        self.measure = measure
        self.eps = eps
        self.self_cost = ot_eps(measure, measure, eps)


def trajectory_score(points: np.ndarray, prompt: PromptMeasure, max_iter: int = 500,
                     tol: float = 1e-9) -> float:
    """``-S_eps(uniform(points), prompt)``; ``-inf`` if a solve does not converge."""
    a = DiscreteMeasure.uniform(points)
    b = prompt.measure
    C_ab = cost_matrix(a.points, b.points)
    p_ab = sinkhorn(a, b, prompt.eps, max_iter, tol, C=C_ab)
    C_aa = cost_matrix(a.points, a.points)
    p_aa = sinkhorn(a, a, prompt.eps, max_iter, tol, C=C_aa)
    if not (p_ab.converged and p_aa.converged):
        return -np.inf
    ab = _entropic_value(p_ab.plan, C_ab, a, b, prompt.eps)
    aa = _entropic_value(p_aa.plan, C_aa, a, a, prompt.eps)
    return -(ab - 0.5 * aa - 0.5 * prompt.self_cost)


@dataclass
class Rescore:
    action: int
    scores: dict[int, float]
    fallback: bool


def rescore_trajectory(candidates: Sequence[int], buffer: TrajectoryBuffer, prompt: PromptMeasure,
                       candidate_embs: Mapping[int, np.ndarray], cfg: ControllerConfig,
                       logits: np.ndarray | None = None, similarities: Mapping[int, float] | None = None) -> Rescore:
    """Pick the candidate with the best trajectory score.

    When the best score is below ``traj_threshold`` the action-level choice
    wins instead: candidates are ranked by logit and by subgoal similarity,
    and the smallest rank sum wins (equal weights, scale free).
    """
    if not candidates:
        raise ValueError("no candidates to rescore")
    recent = buffer.embeddings[-(cfg.buffer_limit - 1):] if cfg.buffer_limit > 1 else []
    scores = {}
    for a in candidates:
        pts = np.vstack(recent + [candidate_embs[a]])
        scores[a] = trajectory_score(pts, prompt)
    if cfg.rescore_order == "lexicographic" and logits is not None:
        key = lambda a: (logits[a], scores[a], -a)  # noqa: E731
    else:
        key = lambda a: (scores[a], -a)  # noqa: E731
    best = max(candidates, key=key)
    if scores[best] >= cfg.traj_threshold:
        return Rescore(best, scores, False)
    return Rescore(action_level_choice(candidates, logits, similarities), scores, True)


def action_level_choice(candidates: Sequence[int], logits: np.ndarray | None,
                        similarities: Mapping[int, float] | None) -> int:
    """Rank-sum of logit rank and similarity rank; ties go to the higher logit, then lower id."""
    lg = np.zeros(max(candidates) + 1) if logits is None else np.asarray(logits, dtype=float)
    sims = similarities or {}
    by_logit = sorted(candidates, key=lambda a: (-lg[a], a))
    by_sim = sorted(candidates, key=lambda a: (-sims.get(a, 0.0), a))
    rank = {a: by_logit.index(a) + by_sim.index(a) for a in candidates}
    return min(candidates, key=lambda a: (rank[a], by_logit.index(a)))


# ---------------------------------------------------------------------------
# Embedding helpers
# ---------------------------------------------------------------------------


def _step_tokens(obs, action) -> list[int]:
    return [*obs, action]


def embed_windows(state: HpccState, windows: Sequence[Sequence[int]]) -> np.ndarray:
    return encode_tokens(state, "action", pad_tokens([list(w) for w in windows]))


def subgoal_prototypes(state: HpccState, trajectories: Sequence[Trajectory], window_len: int = 1) -> dict:
    """Mean action-window embedding per ``(task_id, subgoal_id)`` over unflagged steps.

    Windows end at each step and reach back ``window_len`` steps within the
    episode; flagged steps are skipped.
    """
    acc: dict = {}
    for traj in trajectories:
        toks = [s.tokens() for s in traj.steps]
        rows, keys = [], []
        for t, s in enumerate(traj.steps):
            if s.error_flag:
                continue
            rows.append([tok for w in toks[max(0, t - window_len + 1) : t + 1] for tok in w])
            keys.append((traj.task_id, s.subgoal_id))
        if not rows:
            continue
        E = embed_windows(state, rows)
        for k, e in zip(keys, E):
            acc.setdefault(k, []).append(e)
    return {k: normalize(np.mean(v, axis=0)) for k, v in sorted(acc.items())}


def description_embeddings(state: HpccState, task_id: str, world: World | None = None) -> dict:
    """Fallback subgoal embeddings: the prompt encoder over each subgoal's words."""
    world = world or default_world()
    plan = get_task(task_id, world).plan
    out = {}
    for j, sg in enumerate(plan):
        out[(task_id, j)] = encode_prompt_tokens_mean(state, world.vocab.words(sg.words))
    return out


def encode_prompt_tokens_mean(state: HpccState, tokens) -> np.ndarray:
    return encode_tokens(state, "prompt", pad_tokens([list(tokens)]))[0]


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

LogitsFn = Callable[[GridState, StepContext], np.ndarray]


@dataclass
class EpisodeStats:
    gated_changes: int = 0
    fallbacks: int = 0
    rescored_changes: int = 0
    rescore_fallbacks: int = 0
    switches: int = 0


def run_episode(task_id: str, seed: int, state: HpccState | None, cfg: ControllerConfig, logits_fn: LogitsFn,
                plan: SubgoalPlan | None = None, max_steps: int | None = None, mode: str = "oracle",
                subgoal_embs: Mapping | None = None, world: World | None = None,
                episode_id: str | None = None) -> EpisodeResult:
    """Roll out one episode under the controller.

    ``logits_fn`` supplies the action logits each step (for instance a
    NoisyPolicy's ``logits``). Tier embeddings need ``state`` and
    ``subgoal_embs``; with every tier off neither is used.
    """
    world = world or default_world()
    task = get_task(task_id, world)
    plan = plan or decompose_task(task_id, world)
    plan = SubgoalPlan(plan.subgoals, plan.current_index)
    budget = task.max_steps if max_steps is None else max_steps
    if budget < 0:
        raise ValueError("max_steps must be nonnegative")
    s: GridState = reset(replace(task, max_steps=budget) if budget != task.max_steps else task, seed)
    ep_rng = Rng(seed).split(0xE915)
    uses_model = cfg.gating or cfg.switching or cfg.rescoring
    if uses_model and (state is None or subgoal_embs is None):
        raise ValueError("controller tiers need a model state and subgoal embeddings")
    prompt = None
    if cfg.rescoring:
        prompt = PromptMeasure(DiscreteMeasure.uniform(encode_prompt_tokens(state, world.vocab.words(task.prompt))), cfg.eps)
    buffer = TrajectoryBuffer()
    stats = EpisodeStats()
    history: list[int] = []
    recent: list[list[int]] = []  # token lists of realized steps
    last_err = 0
    steps: list[StepRecord] = []

    def sg_emb(j):
        return subgoal_embs.get((task_id, j)) if subgoal_embs is not None else None

    for t in range(budget):
        ctx = StepContext(stage=s.stage, t=t, rng=ep_rng.split(t), last_error=last_err,
                          history=tuple(history), plan_index=min(plan.current_index, len(plan) - 1))
        logits = np.asarray(logits_fn(s, ctx), dtype=float)
        obs = observe(s, world)
        action = top_k(logits, 1)[0]
        if uses_model:
            cands = top_k(logits, cfg.top_k)
            ctx_toks = [tok for w in recent[-(cfg.window_len - 1):] for tok in w] if cfg.window_len > 1 else []
            E = embed_windows(state, [ctx_toks + _step_tokens(obs, a) for a in cands])
            cemb = dict(zip(cands, E))
            cur = sg_emb(plan.current_index)
            if cfg.gating and cur is not None:
                sel = select_action(cfg, logits, cur, cemb)
                action = sel.action
                stats.fallbacks += sel.fallback
                stats.gated_changes += action != cands[0]
            else:
                sel = Selection(action, cands, {}, None, 0, True)
            if cfg.rescoring and len(cands) > 1:
                rs = rescore_trajectory(cands, buffer, prompt, cemb, cfg, logits,
                                        {a: cosine_sim(cemb[a], cur) for a in cands} if cur is not None else None)
                stats.rescored_changes += rs.action != action
                stats.rescore_fallbacks += rs.fallback
                action = rs.action
            step_emb = cemb[action]
        nxt, flag, done = step(s, action, mode, world)
        rec = StepRecord(t, obs, action, min(s.stage, len(task.plan) - 1), flag)
        steps.append(rec)
        if uses_model:
            buffer.append(step_emb, rec)
        history.append(action)
        recent.append(_step_tokens(obs, action))
        last_err = flag
        s = nxt
        if cfg.switching and uses_model and plan.current_index < len(plan) - 1:
            win = step_emb
            if maybe_switch_subgoal(win, sg_emb(plan.current_index), sg_emb(plan.current_index + 1), cfg) == ADVANCE:
                plan.current_index += 1
                stats.switches += 1
        while plan.current_index < len(plan) and subgoal_complete(s, task.plan, plan.current_index):
            plan.current_index += 1
        if done:
            break
    traj = Trajectory(episode_id or f"{task_id}-{seed}", task_id, tuple(steps), world.vocab.words(task.prompt), mode)
    return EpisodeResult(traj, s.goal_reached, s, {"stats": stats, "plan_index": plan.current_index})
